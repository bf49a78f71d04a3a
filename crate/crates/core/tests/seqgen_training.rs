use meshgen::metrics::{corpus_bleu_report, BleuMode};
use meshgen::seqgen::{evaluate_loss, train_seqgen, Combine, SeqGenConfig, SeqGenModel, SeqPair, Variant};
use meshgen::synthetic::{sign_pattern_pairs, sign_pattern_vocab_size};
use meshgen::training::TrainSchedule;
use meshgen::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(variant: Variant, combine: Option<Combine>, image_dim: usize, vocab: usize) -> SeqGenConfig {
    let mut c = SeqGenConfig::new(variant, combine, 2048, vocab).unwrap();
    c.image_dim = image_dim;
    c.hidden = 32;
    c.word_dim = 16;
    c.transition_dim = if variant == Variant::Rnn0 { 16 } else { 32 };
    c.matched()
}

fn schedule(epochs: usize, lr: f64) -> TrainSchedule {
    TrainSchedule {
        epochs,
        batch_size: 128,
        learning_rate: lr,
        patience: epochs,
    }
}

fn train_bleu1(model: &SeqGenModel, data: &[SeqPair]) -> f64 {
    let images: Vec<&[f64]> = data.iter().map(|p| p.image.as_slice()).collect();
    let gen = model.generate_batch(&images, None).unwrap();
    let pairs: Vec<_> = gen
        .iter()
        .zip(data)
        .map(|(g, p)| (g.tokens.clone(), vec![p.caption.clone()]))
        .collect();
    corpus_bleu_report(&pairs, BleuMode::Sentence).unwrap().bleu[0]
}

#[test]
fn rnn1_and_rnn2_overfit_sign_pattern_captions() {
    let data = sign_pattern_pairs(20, 12, 3, 17);
    let vocab = sign_pattern_vocab_size(3);
    for variant in [Variant::Rnn1, Variant::Rnn2] {
        let out = train_seqgen(
            &data,
            &data,
            config(variant, Some(Combine::Concat), 12, vocab),
            &schedule(300, 1e-2),
            4,
        )
        .unwrap();
        let bleu = train_bleu1(&out.model, &data);
        assert!(bleu >= 0.95, "{variant}: BLEU-1 {bleu}");
    }
}

#[test]
fn two_pair_model_reproduces_both_captions() {
    let data = vec![
        SeqPair {
            image: vec![1.0, -0.5, 0.3, 0.8],
            caption: vec![4, 5, 6],
        },
        SeqPair {
            image: vec![-0.9, 0.6, -0.2, 0.1],
            caption: vec![7, 8],
        },
    ];
    for variant in [Variant::Rnn0, Variant::Rnn1, Variant::Rnn2] {
        let combine = (variant != Variant::Rnn0).then_some(Combine::Sum);
        let out = train_seqgen(&data, &data, config(variant, combine, 4, 9), &schedule(200, 1e-2), 3).unwrap();
        for pair in &data {
            let got = out.model.greedy_generate(&pair.image).unwrap();
            assert_eq!(got.tokens, pair.caption, "{variant}");
        }
    }
}

#[test]
fn fresh_model_loss_is_near_uniform() {
    let vocab = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data: Vec<SeqPair> = (0..64)
        .map(|i| SeqPair {
            image: Tensor::uniform(&[8], 1.0, &mut rng).into_data(),
            caption: (0..5).map(|j| 4 + (i * 5 + j) % (vocab - 4)).collect(),
        })
        .collect();
    for variant in [Variant::Rnn0, Variant::Rnn1, Variant::Rnn2] {
        let combine = (variant != Variant::Rnn0).then_some(Combine::Concat);
        let c = config(variant, combine, 8, vocab);
        let model = SeqGenModel::new(c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let loss = evaluate_loss(&model, &data).unwrap();
        let expected = 6.0 * (vocab as f64).ln();
        assert!(
            (loss - expected).abs() / expected < 0.1,
            "{variant}: {loss} vs {expected}"
        );
    }
}

#[test]
fn identical_images_learn_the_majority_caption() {
    let image = vec![0.5, -0.5, 0.25, 0.0];
    let mut data = vec![
        SeqPair {
            image: image.clone(),
            caption: vec![4, 5]
        };
        5
    ];
    data.push(SeqPair {
        image: image.clone(),
        caption: vec![6, 7],
    });
    data.push(SeqPair {
        image: image.clone(),
        caption: vec![6, 7],
    });
    for variant in [Variant::Rnn1, Variant::Rnn2] {
        let out = train_seqgen(
            &data,
            &data,
            config(variant, Some(Combine::Concat), 4, 8),
            &schedule(150, 1e-2),
            5,
        )
        .unwrap();
        assert_eq!(out.model.greedy_generate(&image).unwrap().tokens, vec![4, 5]);
        assert!(out.history.last().unwrap().train_loss > 0.5);
    }
}

#[test]
fn sum_mode_with_zero_images_ignores_the_transition_weights() {
    let zero = vec![0.0; 6];
    let data = vec![
        SeqPair {
            image: zero.clone(),
            caption: vec![4, 5, 6],
        },
        SeqPair {
            image: zero.clone(),
            caption: vec![5],
        },
    ];
    for variant in [Variant::Rnn1, Variant::Rnn2] {
        let a = SeqGenModel::new(
            config(variant, Some(Combine::Sum), 6, 9),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let mut b = a.clone();
        let w = b.transition_weight();
        let shape = b.params().get(w).shape().to_vec();
        *b.params_mut().get_mut(w) = Tensor::uniform(&shape, 3.0, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(evaluate_loss(&a, &data).unwrap(), evaluate_loss(&b, &data).unwrap());
        assert_eq!(a.greedy_generate(&zero).unwrap(), b.greedy_generate(&zero).unwrap());
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = sign_pattern_pairs(10, 6, 2, 8);
    let vocab = sign_pattern_vocab_size(2);
    let c = config(Variant::Rnn2, Some(Combine::Concat), 6, vocab);
    let a = train_seqgen(&data, &data, c.clone(), &schedule(5, 1e-2), 11).unwrap();
    let b = train_seqgen(&data, &data, c, &schedule(5, 1e-2), 11).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
}

#[test]
fn rnn0_with_an_extra_image_step_trains() {
    let data = sign_pattern_pairs(6, 6, 2, 8);
    let mut c = config(Variant::Rnn0, None, 6, sign_pattern_vocab_size(2));
    c.image_before_start = true;
    assert_eq!(c.steps(), 7);
    let out = train_seqgen(&data, &data, c, &schedule(3, 1e-2), 1).unwrap();
    assert!(out.history.iter().all(|e| e.train_loss.is_finite()));
}
