//! Finite-difference verification of every parameter block at toy sizes.

use clap::{Args, ValueEnum};
use meshgen::gradcheck::{check_params, BlockError};
use meshgen::seqgen::{Combine, SeqGenConfig, SeqGenModel, SeqPair, Variant};
use meshgen::textcnn::{LossWeights, Mode, TextCnnConfig, TextCnnModel};
use meshgen::OpKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Module {
    All,
    Textcnn,
    Seqgen,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    module: Module,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Test fixture: scale one backward rule to prove the check can fail.
    #[arg(long, hide = true)]
    corrupt_backward: Option<OpKind>,
}

fn textcnn_blocks(seed: u64, corrupt: Option<OpKind>) -> CliResult<Vec<BlockError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TextCnnConfig {
        embed_dim: 3,
        filter_widths: vec![2, 3],
        maps_per_width: 4,
        branch_dense_units: 3,
        dropout: 0.5,
        num_classes: 3,
        loss_weights: LossWeights::default(),
        seq_len: 6,
    };
    let vocab = 9;
    let model = TextCnnModel::new(cfg, vocab, &mut rng)?;
    let batch: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..6).map(|_| rng.gen_range(0..vocab)).collect())
        .collect();
    let mut labels: Vec<f64> = (0..6).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    labels[0] = 1.0;
    labels[1] = 0.0;
    let mask_seed = rng.gen();
    let weights = model.config().loss_weights.as_array();
    Ok(check_params(model.params(), STEP, corrupt, |g, p| {
        let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
        let refs: Vec<&[usize]> = batch.iter().map(Vec::as_slice).collect();
        let logits = model.forward_logits(g, p, &refs, Mode::Train, &mut r)?;
        g.modified_sce(logits, &labels, weights)
    })?)
}

fn seqgen_blocks(
    variant: Variant,
    combine: Option<Combine>,
    seed: u64,
    corrupt: Option<OpKind>,
) -> CliResult<Vec<BlockError>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 9;
    let mut cfg = SeqGenConfig::new(variant, combine, 2048, vocab)?;
    cfg.image_dim = 5;
    cfg.hidden = 4;
    cfg.word_dim = 3;
    cfg.transition_dim = if variant == Variant::Rnn0 { 3 } else { 6 };
    let cfg = cfg.matched();
    let model = SeqGenModel::new(cfg, &mut rng)?;
    let data: Vec<SeqPair> = (0..2)
        .map(|_| SeqPair {
            image: (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            caption: (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(4..vocab)).collect(),
        })
        .collect();
    let refs: Vec<&SeqPair> = data.iter().collect();
    Ok(check_params(model.params(), STEP, corrupt, |g, p| {
        model.batch_loss(g, p, &refs)
    })?)
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let mut suites: Vec<(String, Vec<BlockError>)> = Vec::new();
    if matches!(args.module, Module::All | Module::Textcnn) {
        suites.push(("textcnn".into(), textcnn_blocks(args.seed, args.corrupt_backward)?));
    }
    if matches!(args.module, Module::All | Module::Seqgen) {
        let variants = [
            (Variant::Rnn0, None),
            (Variant::Rnn1, Some(Combine::Concat)),
            (Variant::Rnn1, Some(Combine::Sum)),
            (Variant::Rnn2, Some(Combine::Concat)),
            (Variant::Rnn2, Some(Combine::Sum)),
        ];
        for (v, c) in variants {
            let name = match c {
                Some(c) => format!("seqgen-{v}-{c}"),
                None => format!("seqgen-{v}"),
            };
            suites.push((name, seqgen_blocks(v, c, args.seed, args.corrupt_backward)?));
        }
    }
    let mut failures = Vec::new();
    for (suite, blocks) in &suites {
        for b in blocks {
            let verdict = if b.max_rel_err < TOLERANCE { "ok" } else { "FAIL" };
            println!("{suite}\t{}\t{:e}\t{verdict}", b.name, b.max_rel_err);
            if b.max_rel_err >= TOLERANCE || !b.max_rel_err.is_finite() {
                failures.push(format!("{suite}/{}", b.name));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::verification(format!(
            "gradient check failed for {} block(s): {}",
            failures.len(),
            failures.join(", ")
        )))
    }
}
