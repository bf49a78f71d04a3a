//! Stage two: train the image-conditioned sequence generator and decode
//! captions for new embeddings.

use std::path::PathBuf;

use clap::Args;
use meshgen::data::{
    load_checkpoint, load_corpus, read_embeddings, split_dataset, CorpusRecord, EmbeddingFile, SplitSpec,
};
use meshgen::metrics::{corpus_bleu_report, BleuMode, BleuPair};
use meshgen::preprocess::{parse_mesh, pathology_counts, select_primary_annotation, MeshAnnotation, Vocabulary};
use meshgen::seqgen::{train_seqgen, Combine, Sampling, SeqGenConfig, SeqGenModel, SeqPair, Variant};
use meshgen::training::TrainSchedule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, set, GenerateConfig, TrainGeneratorConfig};
use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Debug, Args)]
pub struct TrainGeneratorArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus-format file with the MeSH annotations to learn from.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    combine: Option<Combine>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    transition_dim: Option<usize>,
    /// RNN0: feed the image as an extra step before the start token.
    #[arg(long)]
    image_before_start: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    validation_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

impl TrainGeneratorArgs {
    fn resolve(self) -> CliResult<TrainGeneratorConfig> {
        let mut c: TrainGeneratorConfig = config::load(self.config.as_deref())?;
        set(&mut c.annotations, self.annotations.map(Some));
        set(&mut c.embeddings, self.embeddings.map(Some));
        set(&mut c.out, self.out.map(Some));
        set(&mut c.variant, self.variant);
        set(&mut c.combine, self.combine.map(Some));
        set(&mut c.hidden, self.hidden);
        set(&mut c.word_dim, self.word_dim.map(Some));
        set(&mut c.transition_dim, self.transition_dim.map(Some));
        if self.image_before_start {
            c.image_before_start = true;
        }
        set(&mut c.seed, self.seed);
        set(&mut c.validation_count, self.validation_count);
        set(&mut c.test_count, self.test_count);
        set(&mut c.epochs, self.epochs);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.learning_rate, self.learning_rate);
        set(&mut c.patience, self.patience);
        Ok(c)
    }
}

/// Embedding ids for a record: its image references, or the exam id.
pub fn image_keys(r: &CorpusRecord) -> Vec<String> {
    if r.image_refs.is_empty() {
        vec![r.exam_id.clone()]
    } else {
        r.image_refs.clone()
    }
}

fn model_config(cfg: &TrainGeneratorConfig, image_dim: usize, vocab_size: usize) -> CliResult<SeqGenConfig> {
    if cfg.variant == Variant::Rnn0 && cfg.combine.is_some() {
        return Err(CliError::config("--combine has no meaning for rnn0"));
    }
    let mut m = SeqGenConfig::new(cfg.variant, cfg.combine, image_dim, vocab_size)?;
    m.hidden = cfg.hidden;
    m.image_before_start = cfg.image_before_start;
    if cfg.variant == Variant::Rnn0 {
        if let Some(t) = cfg.transition_dim.or(cfg.word_dim) {
            m.transition_dim = t;
        }
    } else {
        if let Some(d) = cfg.word_dim {
            m.word_dim = d;
        }
        if let Some(t) = cfg.transition_dim {
            m.transition_dim = t;
        }
    }
    let matched = m.clone().matched();
    let explicit_conflict = match cfg.variant {
        Variant::Rnn0 => matches!((cfg.transition_dim, cfg.word_dim), (Some(t), Some(d)) if t != d),
        _ => cfg.transition_dim.is_some_and(|t| t != matched.transition_dim),
    };
    if explicit_conflict {
        return Err(CliError::config(format!(
            "transition dim {} conflicts with the {} partner width {}",
            m.transition_dim,
            cfg.combine.map_or("rnn0".to_string(), |c| c.to_string()),
            matched.transition_dim
        )));
    }
    matched.validate()?;
    Ok(matched)
}

/// Decoder checkpoint metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeneratorMeta {
    vocab: Vocabulary,
    seed: u64,
}

struct Item {
    key: String,
    pair: SeqPair,
}

fn split_items(
    records: &[(CorpusRecord, MeshAnnotation)],
    vocab: &Vocabulary,
    emb: &EmbeddingFile,
    caption_len: usize,
    source: &str,
) -> CliResult<Vec<Item>> {
    let mut items = Vec::new();
    for (r, caption) in records {
        let ids: Vec<usize> = caption.terms().map(|t| vocab.id(t)).take(caption_len).collect();
        for key in image_keys(r) {
            let rec = emb.get(&key).ok_or_else(|| {
                CliError::data(format!(
                    "embedding '{key}' for exam '{}' is missing from {source}",
                    r.exam_id
                ))
            })?;
            items.push(Item {
                key,
                pair: SeqPair {
                    image: rec.values.iter().map(|&v| f64::from(v)).collect(),
                    caption: ids.clone(),
                },
            });
        }
    }
    Ok(items)
}

fn bleu_of(model: &SeqGenModel, items: &[Item]) -> CliResult<Option<[f64; 4]>> {
    if items.is_empty() {
        return Ok(None);
    }
    let images: Vec<&[f64]> = items.iter().map(|i| i.pair.image.as_slice()).collect();
    let generated = model.generate_batch(&images, None)?;
    let pairs: Vec<BleuPair<usize>> = generated
        .into_iter()
        .zip(items)
        .map(|(g, i)| (g.tokens, vec![i.pair.caption.clone()]))
        .collect();
    Ok(Some(corpus_bleu_report(&pairs, BleuMode::Sentence)?.bleu))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn train_generator(args: TrainGeneratorArgs) -> CliResult<()> {
    let cfg = args.resolve()?;
    if cfg.variant == Variant::Rnn0 && cfg.combine.is_some() {
        return Err(CliError::config("--combine has no meaning for rnn0"));
    }
    let ann_path = config::required(&cfg.annotations, "annotations")?;
    let emb_path = config::required(&cfg.embeddings, "embeddings")?;
    let out = config::out_dir(&cfg.out)?;
    let emb = read_embeddings(emb_path)?;
    let load = load_corpus(ann_path)?;
    for bad in &load.skipped {
        log::warn!("{}:{}: skipped, {}", ann_path.display(), bad.line, bad.reason);
    }
    let annotated: Vec<(CorpusRecord, Vec<MeshAnnotation>)> = load
        .records
        .into_iter()
        .map(|r| {
            let captions = parse_mesh(&r.mesh_raw);
            (r, captions)
        })
        .filter(|(_, c)| !c.is_empty())
        .collect();
    let spec = SplitSpec {
        seed: cfg.seed,
        validation_count: cfg.validation_count,
        test_count: cfg.test_count,
    };
    let (train, val, test) = split_dataset(&annotated, &spec)?;
    if val.is_empty() || train.is_empty() {
        return Err(CliError::config(
            "training and validation splits must both be non-empty",
        ));
    }
    let counts = pathology_counts(train.iter().flat_map(|(_, c)| c));
    let primary = |split: &[(CorpusRecord, Vec<MeshAnnotation>)]| -> CliResult<Vec<(CorpusRecord, MeshAnnotation)>> {
        split
            .iter()
            .map(|(r, c)| Ok((r.clone(), select_primary_annotation(c, &counts)?.clone())))
            .collect()
    };
    let (train, val, test) = (primary(&train)?, primary(&val)?, primary(&test)?);
    let vocab = Vocabulary::build(train.iter().flat_map(|(_, c)| c.terms()), 1);
    let model_cfg = model_config(&cfg, emb.dim, vocab.len())?;
    let source = emb_path.display().to_string();
    let caption_len = model_cfg.caption_len;
    let train_items = split_items(&train, &vocab, &emb, caption_len, &source)?;
    let val_items = split_items(&val, &vocab, &emb, caption_len, &source)?;
    let test_items = split_items(&test, &vocab, &emb, caption_len, &source)?;
    log::info!(
        "{} training pairs, {} validation, {} test; vocabulary {}",
        train_items.len(),
        val_items.len(),
        test_items.len(),
        vocab.len()
    );

    let schedule = TrainSchedule {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        patience: cfg.patience,
    };
    let pairs = |items: &[Item]| items.iter().map(|i| i.pair.clone()).collect::<Vec<_>>();
    let outcome = train_seqgen(&pairs(&train_items), &pairs(&val_items), model_cfg, &schedule, cfg.seed)?;

    let history: Vec<Vec<String>> = outcome
        .history
        .iter()
        .map(|e| vec![e.epoch.to_string(), fmt(e.train_loss), fmt(e.val_loss)])
        .collect();
    io::write_table(&out.join("history.tsv"), &["epoch", "train_loss", "val_loss"], &history)?;
    let mut bleu_rows = Vec::new();
    for (name, items) in [("train", &train_items), ("val", &val_items), ("test", &test_items)] {
        if let Some(b) = bleu_of(&outcome.model, items)? {
            bleu_rows.push(
                std::iter::once(name.to_string())
                    .chain(b.iter().map(|&v| fmt(v)))
                    .collect(),
            );
        }
        let keys: Vec<String> = items.iter().map(|i| i.key.clone()).collect();
        io::write_ids(&out.join(format!("{name}_ids.txt")), &keys)?;
    }
    io::write_table(
        &out.join("bleu.tsv"),
        &["split", "bleu_1", "bleu_2", "bleu_3", "bleu_4"],
        &bleu_rows,
    )?;
    let meta = GeneratorMeta { vocab, seed: cfg.seed };
    let ckpt = outcome
        .model
        .to_checkpoint(serde_json::to_value(&meta).expect("metadata serialises"));
    meshgen::data::save_checkpoint(&out.join("model.ckpt"), &ckpt)?;
    config::echo(&cfg, out)?;
    for row in &bleu_rows {
        println!("{} BLEU-1 {} BLEU-4 {}", row[0], row[1], row[4]);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint written by train-generator.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict decoding to the embedding ids listed in this file.
    #[arg(long)]
    ids: Option<PathBuf>,
    /// Sample with this softmax temperature instead of taking the argmax.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl GenerateArgs {
    fn resolve(self) -> CliResult<GenerateConfig> {
        let mut c: GenerateConfig = config::load(self.config.as_deref())?;
        set(&mut c.model, self.model.map(Some));
        set(&mut c.embeddings, self.embeddings.map(Some));
        set(&mut c.out, self.out.map(Some));
        set(&mut c.ids, self.ids.map(Some));
        set(&mut c.temperature, self.temperature.map(Some));
        set(&mut c.seed, self.seed);
        Ok(c)
    }
}

pub fn generate(args: GenerateArgs) -> CliResult<()> {
    let cfg = args.resolve()?;
    let model_path = config::required(&cfg.model, "model")?;
    let emb_path = config::required(&cfg.embeddings, "embeddings")?;
    if let Some(t) = cfg.temperature {
        if !(t > 0.0 && t.is_finite()) {
            return Err(CliError::config(format!("temperature must be positive, got {t}")));
        }
    }
    let out = config::out_dir(&cfg.out)?;
    let (model, extra) = SeqGenModel::from_checkpoint(&load_checkpoint(model_path)?)?;
    let meta: GeneratorMeta = serde_json::from_value(extra)
        .map_err(|e| CliError::data(format!("{}: not a generator checkpoint ({e})", model_path.display())))?;
    let emb = read_embeddings(emb_path)?;
    if emb.dim != model.config().image_dim {
        return Err(CliError::data(format!(
            "{} holds {}-dim embeddings, the model expects {}",
            emb_path.display(),
            emb.dim,
            model.config().image_dim
        )));
    }
    let records: Vec<&meshgen::data::EmbeddingRecord> = match &cfg.ids {
        None => emb.records.iter().collect(),
        Some(path) => io::read_ids(path)?
            .iter()
            .map(|id| {
                emb.get(id)
                    .ok_or_else(|| CliError::data(format!("embedding '{id}' is missing from {}", emb_path.display())))
            })
            .collect::<CliResult<_>>()?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(records.len());
    for chunk in records.chunks(256) {
        let images: Vec<Vec<f64>> = chunk
            .iter()
            .map(|r| r.values.iter().map(|&v| f64::from(v)).collect())
            .collect();
        let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        let sampling = cfg.temperature.map(|temperature| Sampling {
            temperature,
            rng: &mut rng,
        });
        for (r, g) in chunk.iter().zip(model.generate_batch(&refs, sampling)?) {
            rows.push((r.id.clone(), g.terms(&meta.vocab).join("/")));
        }
    }
    io::write_captions(&out.join("captions.tsv"), &rows)?;
    config::echo(&cfg, out)?;
    println!("generated {} captions", rows.len());
    Ok(())
}
