use meshgen::metrics::classification_report;
use meshgen::preprocess::{LabelVector, TokenizedReport, PAD};
use meshgen::synthetic::token_rule_reports;
use meshgen::textcnn::{
    evaluate_loss, modified_sce_loss, predict_labels, textcnn_forward, train_textcnn, LossWeights, Mode, Objective,
    TextCnnConfig, TextCnnModel,
};
use meshgen::training::TrainSchedule;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(num_classes: usize) -> TextCnnConfig {
    TextCnnConfig {
        embed_dim: 16,
        filter_widths: vec![1, 2, 3],
        maps_per_width: 24,
        branch_dense_units: 24,
        dropout: 0.5,
        num_classes,
        loss_weights: LossWeights::default(),
        seq_len: 32,
    }
}

fn schedule(epochs: usize) -> TrainSchedule {
    TrainSchedule {
        epochs,
        batch_size: 16,
        learning_rate: 1e-2,
        patience: epochs,
    }
}

#[test]
fn overfits_a_token_rule_corpus() {
    let (reports, vocab) = token_rule_reports(50, 8, 30, 7);
    let out = train_textcnn(
        &reports,
        &reports,
        small_config(8),
        vocab,
        &schedule(100),
        Objective::Modified,
        1,
    )
    .unwrap();
    let scores = out
        .model
        .scores(
            &reports
                .iter()
                .map(|r| r.tokens(32))
                .map(|t| t.ids)
                .collect::<Vec<_>>()
                .iter()
                .map(Vec::as_slice)
                .collect::<Vec<_>>(),
        )
        .unwrap();
    let pred: Vec<LabelVector> = scores.iter().map(|s| predict_labels(s, 0.5)).collect();
    let truth: Vec<LabelVector> = reports.iter().map(|r| r.labels.clone()).collect();
    let rep = classification_report(&pred, &truth).unwrap();
    assert_eq!((rep.precision, rep.recall), (1.0, 1.0), "{rep:?}");
}

#[test]
fn unit_bce_weights_match_plain_bce_bitwise() {
    let (reports, vocab) = token_rule_reports(24, 4, 12, 3);
    let (train, val) = reports.split_at(16);
    let mut cfg = small_config(4);
    cfg.loss_weights = LossWeights::new(1.0, 0.0, 0.0).unwrap();
    let a = train_textcnn(train, val, cfg.clone(), vocab, &schedule(4), Objective::Modified, 9).unwrap();
    let b = train_textcnn(train, val, cfg, vocab, &schedule(4), Objective::PlainBce, 9).unwrap();
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
    }
    assert_eq!(a.model, b.model);
}

#[test]
fn training_is_deterministic_per_seed() {
    let (reports, vocab) = token_rule_reports(24, 4, 12, 4);
    let (train, val) = reports.split_at(16);
    let run = |seed| {
        train_textcnn(
            train,
            val,
            small_config(4),
            vocab,
            &schedule(3),
            Objective::Modified,
            seed,
        )
        .unwrap()
    };
    let (a, b, c) = (run(5), run(5), run(6));
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    assert_ne!(a.history, c.history);
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let (reports, vocab) = token_rule_reports(24, 4, 12, 5);
    let (train, val) = reports.split_at(16);
    let mut s = schedule(30);
    s.patience = 2;
    let out = train_textcnn(train, val, small_config(4), vocab, &s, Objective::Modified, 2).unwrap();
    let best = out.history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.history[out.best_epoch - 1].val_loss, best);
    let again = evaluate_loss(&out.model, val, Objective::Modified).unwrap();
    assert!((again - best).abs() < 1e-12);
}

fn model() -> TextCnnModel {
    let mut cfg = small_config(3);
    cfg.seq_len = 12;
    TextCnnModel::new(cfg, 20, &mut ChaCha8Rng::seed_from_u64(8)).unwrap()
}

fn eval(m: &TextCnnModel, ids: Vec<usize>) -> Vec<f64> {
    let report = TokenizedReport {
        original_length: ids.len(),
        ids,
    };
    textcnn_forward(&report, m, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn permuting_output_units_permutes_scores() {
    let m = model();
    let ids = vec![5, 9, 13, 4, 17, 6, PAD, PAD, PAD, PAD, PAD, PAD];
    let base = eval(&m, ids.clone());
    let mut swapped = m.clone();
    let names: Vec<_> = swapped.params().ids().collect();
    let (w, b) = (names[names.len() - 2], names[names.len() - 1]);
    let perm = [2, 0, 1];
    let wt = swapped.params().get(w).clone();
    let cols = wt.cols();
    let mut data = wt.data().to_vec();
    for r in 0..wt.rows() {
        for (k, &src) in perm.iter().enumerate() {
            data[r * cols + k] = wt.data()[r * cols + src];
        }
    }
    swapped.params_mut().get_mut(w).data_mut().copy_from_slice(&data);
    let bt = swapped.params().get(b).data().to_vec();
    for (k, &src) in perm.iter().enumerate() {
        swapped.params_mut().get_mut(b).data_mut()[k] = bt[src];
    }
    let got = eval(&swapped, ids);
    for (k, &src) in perm.iter().enumerate() {
        assert_eq!(got[k], base[src]);
    }
}

#[test]
fn tokens_past_the_crop_have_no_effect() {
    let m = model();
    let long: Vec<usize> = (0..20).map(|i| 4 + i % 15).collect();
    let mut other = long.clone();
    for t in other.iter_mut().skip(12) {
        *t = 19;
    }
    let a = meshgen::preprocess::pad_ids(long.clone(), long.len(), 12);
    let b = meshgen::preprocess::pad_ids(other.clone(), other.len(), 12);
    assert_eq!(eval(&m, a.ids), eval(&m, b.ids));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn loss_never_drops_below_minus_recall_plus_specificity_weight(
        rows in prop::collection::vec(prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..12), 1..6),
        w0 in 0.0f64..1.0,
        split in 0.0f64..1.0,
    ) {
        let k = rows[0].len();
        let rows: Vec<Vec<(f64, bool)>> = rows.into_iter().map(|mut r| { r.resize(k, (0.5, false)); r }).collect();
        let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.0).collect()).collect();
        let labels: Vec<LabelVector> = rows.iter().map(|r| LabelVector::from_bits(r.iter().map(|p| p.1).collect())).collect();
        let rest = 1.0 - w0;
        let w = LossWeights { bce: w0, recall: rest * split, specificity: rest - rest * split };
        let l = modified_sce_loss(&scores, &labels, w).unwrap();
        prop_assert!(l >= -(w.recall + w.specificity) - 1e-12, "{l}");
    }
}
