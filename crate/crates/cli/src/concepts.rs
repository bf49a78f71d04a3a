//! Stage one: train the concept extractor on a gold subset and annotate the
//! remaining reports with predicted MeSH captions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::PathBuf;

use clap::Args;
use meshgen::data::{load_corpus, split_dataset, write_corpus, CorpusRecord, SplitSpec};
use meshgen::metrics::{classification_report, classification_report_with, UndefinedPolicy};
use meshgen::preprocess::{
    format_mesh, parse_mesh, pathology_counts, select_primary_annotation, to_label_vector, LabelVector, MeshAnnotation,
    NegationFilter, TermIndex, Vocabulary, CAPTION_LEN,
};
use meshgen::textcnn::{
    predict_labels, train_textcnn, LabeledReport, LossWeights, Objective, TextCnnArtifact, TextCnnConfig,
};
use meshgen::training::TrainSchedule;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, set, GoldSampling, ObjectiveKind, PredictConceptsConfig, TrainConceptsConfig};
use crate::error::{CliError, CliResult};
use crate::io;

#[derive(Debug, Args)]
pub struct TrainConceptsArgs {
    /// TOML file with defaults for any flag below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gold_subset_size: Option<usize>,
    #[arg(long, value_enum)]
    gold_sampling: Option<GoldSampling>,
    #[arg(long)]
    validation_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    max_classes: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    filter_widths: Option<Vec<usize>>,
    #[arg(long)]
    maps_per_width: Option<usize>,
    #[arg(long)]
    branch_dense_units: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Cross-entropy, soft-recall and soft-specificity weights.
    #[arg(long, num_args = 3, allow_negative_numbers = true)]
    lambda: Option<Vec<f64>>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_token_count: Option<usize>,
    /// Replaces the negation cue list.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    negation_cues: Option<Vec<String>>,
    /// File listing the pathology terms, one per line, for split metrics.
    #[arg(long)]
    pathology_classes: Option<PathBuf>,
}

impl TrainConceptsArgs {
    fn resolve(self) -> CliResult<TrainConceptsConfig> {
        let mut c: TrainConceptsConfig = config::load(self.config.as_deref())?;
        set(&mut c.corpus, self.corpus.map(Some));
        set(&mut c.out, self.out.map(Some));
        set(&mut c.seed, self.seed);
        set(&mut c.gold_subset_size, self.gold_subset_size);
        set(&mut c.gold_sampling, self.gold_sampling);
        set(&mut c.validation_count, self.validation_count);
        set(&mut c.test_count, self.test_count);
        set(&mut c.max_classes, self.max_classes);
        set(&mut c.embed_dim, self.embed_dim);
        set(&mut c.filter_widths, self.filter_widths);
        set(&mut c.maps_per_width, self.maps_per_width);
        set(&mut c.branch_dense_units, self.branch_dense_units);
        set(&mut c.dropout, self.dropout);
        set(&mut c.lambda, self.lambda);
        set(&mut c.seq_len, self.seq_len);
        set(&mut c.objective, self.objective);
        set(&mut c.epochs, self.epochs);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.learning_rate, self.learning_rate);
        set(&mut c.patience, self.patience);
        set(&mut c.threshold, self.threshold);
        set(&mut c.min_token_count, self.min_token_count);
        set(&mut c.negation_cues, self.negation_cues);
        set(&mut c.pathology_classes, self.pathology_classes.map(Some));
        Ok(c)
    }
}

/// A corpus record after negation removal and caption parsing.
#[derive(Debug, Clone)]
struct Prepared {
    exam_id: String,
    segments: Vec<Vec<String>>,
    captions: Vec<MeshAnnotation>,
}

fn prepare(records: &[CorpusRecord], filter: &NegationFilter) -> Vec<Prepared> {
    let mut seen = HashSet::new();
    let (mut empty, mut unlabeled, mut duplicate) = (0, 0, 0);
    let mut out = Vec::new();
    for r in records {
        let kept = filter.kept_segments(&r.report_text);
        if kept.is_empty() {
            empty += 1;
            continue;
        }
        let captions = parse_mesh(&r.mesh_raw);
        if captions.is_empty() {
            unlabeled += 1;
            continue;
        }
        if !seen.insert((kept.join(" "), format_mesh(&captions))) {
            duplicate += 1;
            continue;
        }
        out.push(Prepared {
            exam_id: r.exam_id.clone(),
            segments: kept.iter().map(|s| s.split(' ').map(String::from).collect()).collect(),
            captions,
        });
    }
    log::info!(
        "{} usable reports ({empty} empty after negation removal, {unlabeled} unannotated, {duplicate} duplicates)",
        out.len()
    );
    out
}

fn sample_gold(pool: &[Prepared], size: usize, mode: GoldSampling, seed: u64) -> CliResult<Vec<Prepared>> {
    if size > pool.len() {
        return Err(CliError::config(format!(
            "gold subset of {size} exceeds the {} reports left after holding out validation and test",
            pool.len()
        )));
    }
    if size == 0 {
        return Err(CliError::config("gold subset size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let picked: Vec<usize> = match mode {
        GoldSampling::Random => order.into_iter().take(size).collect(),
        GoldSampling::Stratified => {
            let counts = pathology_counts(pool.iter().flat_map(|p| &p.captions));
            let mut strata: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for i in order {
                let primary = select_primary_annotation(&pool[i].captions, &counts)?;
                strata.entry(primary.pathology.as_str()).or_default().push(i);
            }
            let mut queues: Vec<std::vec::IntoIter<usize>> = strata.into_values().map(Vec::into_iter).collect();
            let mut picked = Vec::with_capacity(size);
            while picked.len() < size {
                for q in queues.iter_mut() {
                    if picked.len() == size {
                        break;
                    }
                    if let Some(i) = q.next() {
                        picked.push(i);
                    }
                }
            }
            picked
        }
    };
    Ok(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Pathology and descriptor occurrence counts per term.
type TermRoles = BTreeMap<String, (usize, usize)>;

fn term_roles(gold: &[Prepared]) -> TermRoles {
    let mut roles = TermRoles::new();
    for c in gold.iter().flat_map(|p| &p.captions) {
        roles.entry(c.pathology.clone()).or_default().0 += 1;
        for d in &c.descriptors {
            roles.entry(d.clone()).or_default().1 += 1;
        }
    }
    roles
}

fn labeled(items: &[Prepared], vocab: &Vocabulary, terms: &TermIndex) -> Vec<LabeledReport> {
    items
        .iter()
        .map(|p| LabeledReport {
            segments: p
                .segments
                .iter()
                .map(|s| s.iter().map(|t| vocab.id(t)).collect())
                .collect(),
            labels: to_label_vector(&p.captions, terms).0,
        })
        .collect()
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Metadata stored next to the classifier weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConceptMeta {
    gold_ids: Vec<String>,
    negation_cues: Vec<String>,
    term_roles: TermRoles,
    seed: u64,
}

pub fn train_concepts(args: TrainConceptsArgs) -> CliResult<()> {
    let cfg = args.resolve()?;
    let corpus_path = config::required(&cfg.corpus, "corpus")?;
    if cfg.lambda.len() != 3 {
        return Err(CliError::config("--lambda takes exactly three weights"));
    }
    let weights = LossWeights::new(cfg.lambda[0], cfg.lambda[1], cfg.lambda[2])?;
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(CliError::config(format!(
            "threshold must be in (0, 1), got {}",
            cfg.threshold
        )));
    }
    let filter = NegationFilter::new(cfg.negation_cues.clone())?;
    let pathology_list = cfg.pathology_classes.as_deref().map(io::read_term_list).transpose()?;
    let out = config::out_dir(&cfg.out)?;

    let load = load_corpus(corpus_path)?;
    for bad in &load.skipped {
        log::warn!("{}:{}: skipped, {}", corpus_path.display(), bad.line, bad.reason);
    }
    let prepared = prepare(&load.records, &filter);
    let spec = SplitSpec {
        seed: cfg.seed,
        validation_count: cfg.validation_count,
        test_count: cfg.test_count,
    };
    let (pool, val, test) = split_dataset(&prepared, &spec)?;
    if val.is_empty() {
        return Err(CliError::config(
            "validation split is empty; early stopping needs --validation-count ≥ 1",
        ));
    }
    let gold = sample_gold(&pool, cfg.gold_subset_size, cfg.gold_sampling, cfg.seed)?;

    let terms = TermIndex::build(gold.iter().flat_map(|p| &p.captions), Some(cfg.max_classes));
    let vocab = Vocabulary::build(
        gold.iter()
            .flat_map(|p| p.segments.iter().flatten().map(String::as_str)),
        cfg.min_token_count,
    );
    let model_cfg = TextCnnConfig {
        embed_dim: cfg.embed_dim,
        filter_widths: cfg.filter_widths.clone(),
        maps_per_width: cfg.maps_per_width,
        branch_dense_units: cfg.branch_dense_units,
        dropout: cfg.dropout,
        num_classes: terms.len(),
        loss_weights: weights,
        seq_len: cfg.seq_len,
    };
    model_cfg.validate()?;
    let schedule = TrainSchedule {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        patience: cfg.patience,
    };
    let objective = match cfg.objective {
        ObjectiveKind::Modified => Objective::Modified,
        ObjectiveKind::Bce => Objective::PlainBce,
    };
    let train_set = labeled(&gold, &vocab, &terms);
    let val_set = labeled(&val, &vocab, &terms);
    log::info!(
        "training on {} gold reports, {} classes, vocabulary {}",
        train_set.len(),
        terms.len(),
        vocab.len()
    );
    let outcome = train_textcnn(
        &train_set,
        &val_set,
        model_cfg,
        vocab.len(),
        &schedule,
        objective,
        cfg.seed,
    )?;

    let (eval_name, eval_items) = if test.is_empty() {
        ("validation", &val)
    } else {
        ("test", &test)
    };
    let eval_set = labeled(eval_items, &vocab, &terms);
    let seqs: Vec<Vec<usize>> = eval_set.iter().map(|r| r.tokens(cfg.seq_len).ids).collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let scores = outcome.model.scores(&refs)?;
    let pred: Vec<LabelVector> = scores.iter().map(|s| predict_labels(s, cfg.threshold)).collect();
    let truth: Vec<LabelVector> = eval_set.iter().map(|r| r.labels.clone()).collect();
    let report = classification_report(&pred, &truth)?;

    let mut metrics = vec![
        ("split".to_string(), eval_name.to_string()),
        ("samples".to_string(), report.samples.to_string()),
        ("classes".to_string(), report.classes.to_string()),
    ];
    metrics.extend(report.rows().into_iter().map(|(k, v)| (k.to_string(), fmt(v))));
    if let Some(list) = &pathology_list {
        let subset: Vec<usize> = list.iter().filter_map(|t| terms.get(t)).collect();
        if subset.is_empty() {
            log::warn!("none of the listed pathology classes are in the class index");
        } else {
            let sub = classification_report_with(&pred, &truth, Some(&subset), UndefinedPolicy::Exclude)?;
            metrics.push(("pathology.classes".to_string(), sub.classes.to_string()));
            metrics.extend(sub.rows().into_iter().map(|(k, v)| (format!("pathology.{k}"), fmt(v))));
        }
    }
    io::write_key_values(&out.join("metrics.tsv"), &metrics)?;

    let history: Vec<Vec<String>> = outcome
        .history
        .iter()
        .map(|e| vec![e.epoch.to_string(), fmt(e.train_loss), fmt(e.val_loss)])
        .collect();
    io::write_table(&out.join("history.tsv"), &["epoch", "train_loss", "val_loss"], &history)?;
    let gold_ids: Vec<String> = gold.iter().map(|p| p.exam_id.clone()).collect();
    io::write_ids(&out.join("gold_ids.txt"), &gold_ids)?;

    let meta = ConceptMeta {
        gold_ids,
        negation_cues: filter.cues().to_vec(),
        term_roles: term_roles(&gold),
        seed: cfg.seed,
    };
    let artifact = TextCnnArtifact {
        model: outcome.model,
        vocab,
        terms,
        extra: serde_json::to_value(&meta).expect("metadata serialises"),
    };
    artifact.save(&out.join("model.ckpt"))?;
    config::echo(&cfg, out)?;
    println!(
        "{eval_name} accuracy {} precision {} recall {} (best epoch {})",
        report.accuracy, report.precision, report.recall, outcome.best_epoch
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct PredictConceptsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint written by train-concepts.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl PredictConceptsArgs {
    fn resolve(self) -> CliResult<PredictConceptsConfig> {
        let mut c: PredictConceptsConfig = config::load(self.config.as_deref())?;
        set(&mut c.model, self.model.map(Some));
        set(&mut c.corpus, self.corpus.map(Some));
        set(&mut c.out, self.out.map(Some));
        set(&mut c.threshold, self.threshold);
        Ok(c)
    }
}

/// Builds a caption from predicted labels: the best-scoring predicted
/// pathology term followed by predicted descriptor terms in score order.
/// Falls back to the best-scoring pathology term when none is predicted.
fn caption_from_scores(
    scores: &[f64],
    labels: &LabelVector,
    terms: &TermIndex,
    roles: &TermRoles,
) -> Option<MeshAnnotation> {
    let role = |j: usize| {
        roles
            .get(terms.term(j).unwrap_or_default())
            .copied()
            .unwrap_or_default()
    };
    let by_score = |a: &usize, b: &usize| {
        scores[*b]
            .total_cmp(&scores[*a])
            .then_with(|| terms.term(*a).cmp(&terms.term(*b)))
    };
    let mut pathologies: Vec<usize> = labels.positives().filter(|&j| role(j).0 > 0).collect();
    if pathologies.is_empty() {
        pathologies = (0..terms.len()).filter(|&j| role(j).0 > 0).collect();
    }
    pathologies.sort_by(by_score);
    let head = *pathologies.first()?;
    let mut descriptors: Vec<usize> = labels.positives().filter(|&j| j != head && role(j).1 > 0).collect();
    descriptors.sort_by(by_score);
    descriptors.truncate(CAPTION_LEN - 1);
    Some(MeshAnnotation::new(
        terms.term(head)?,
        descriptors
            .iter()
            .filter_map(|&j| terms.term(j))
            .map(String::from)
            .collect(),
    ))
}

pub fn predict_concepts(args: PredictConceptsArgs) -> CliResult<()> {
    let cfg = args.resolve()?;
    let model_path = config::required(&cfg.model, "model")?;
    let corpus_path = config::required(&cfg.corpus, "corpus")?;
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(CliError::config(format!(
            "threshold must be in (0, 1), got {}",
            cfg.threshold
        )));
    }
    let out = config::out_dir(&cfg.out)?;
    let artifact = TextCnnArtifact::load(model_path)?;
    let meta: ConceptMeta = serde_json::from_value(artifact.extra.clone()).map_err(|e| {
        CliError::data(format!(
            "{}: not a concept-extractor checkpoint ({e})",
            model_path.display()
        ))
    })?;
    let filter = NegationFilter::new(meta.negation_cues.clone())?;
    let seq_len = artifact.model.config().seq_len;

    let load = load_corpus(corpus_path)?;
    for bad in &load.skipped {
        log::warn!("{}:{}: skipped, {}", corpus_path.display(), bad.line, bad.reason);
    }
    let ids: HashSet<&str> = load.records.iter().map(|r| r.exam_id.as_str()).collect();
    if let Some(missing) = meta.gold_ids.iter().find(|g| !ids.contains(g.as_str())) {
        return Err(CliError::data(format!(
            "vocabulary mismatch: gold report '{missing}' of the model is not in {}",
            corpus_path.display()
        )));
    }
    let gold: HashSet<&str> = meta.gold_ids.iter().map(String::as_str).collect();

    let mut pending: Vec<(usize, Vec<usize>)> = Vec::new();
    let (mut known, mut total) = (0usize, 0usize);
    for (i, r) in load.records.iter().enumerate() {
        if gold.contains(r.exam_id.as_str()) {
            continue;
        }
        let text = filter.remove(&r.report_text);
        let tokens: Vec<usize> = text.split_whitespace().map(|t| artifact.vocab.id(t)).collect();
        total += tokens.len();
        known += tokens.iter().filter(|&&t| t != meshgen::preprocess::UNK).count();
        let n = tokens.len();
        pending.push((i, meshgen::preprocess::pad_ids(tokens, n, seq_len).ids));
    }
    if total > 0 && known == 0 {
        return Err(CliError::data(format!(
            "vocabulary mismatch: no token of {} is in the model vocabulary",
            corpus_path.display()
        )));
    }
    let refs: Vec<&[usize]> = pending.iter().map(|(_, ids)| ids.as_slice()).collect();
    let scores = if refs.is_empty() {
        Vec::new()
    } else {
        artifact.model.scores(&refs)?
    };

    let mut predicted: HashMap<usize, (LabelVector, Option<MeshAnnotation>)> = HashMap::new();
    for ((i, _), s) in pending.iter().zip(&scores) {
        let labels = predict_labels(s, cfg.threshold);
        let caption = caption_from_scores(s, &labels, &artifact.terms, &meta.term_roles);
        predicted.insert(*i, (labels, caption));
    }
    let mut records = Vec::with_capacity(load.records.len());
    let mut label_rows = Vec::new();
    for (i, r) in load.records.iter().enumerate() {
        match predicted.get(&i) {
            None => records.push(r.clone()),
            Some((labels, caption)) => {
                let mut rec = r.clone();
                rec.mesh_raw = caption.as_ref().map(ToString::to_string).unwrap_or_default();
                records.push(rec);
                let names = labels
                    .positives()
                    .filter_map(|j| artifact.terms.term(j))
                    .map(String::from)
                    .collect();
                label_rows.push((r.exam_id.clone(), names));
            }
        }
    }
    write_corpus(&out.join("annotations.tsv"), &records)?;
    io::write_labels(&out.join("predictions.tsv"), &label_rows)?;
    config::echo(&cfg, out)?;
    println!(
        "annotated {} reports ({} gold, {} predicted)",
        records.len(),
        records.len() - label_rows.len(),
        label_rows.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caption_prefers_predicted_pathology_and_orders_descriptors_by_score() {
        let terms = TermIndex::from(vec![
            "opacity".to_string(),
            "left".to_string(),
            "nodule".to_string(),
            "mild".to_string(),
        ]);
        let roles: TermRoles = [
            ("opacity".to_string(), (5, 0)),
            ("left".to_string(), (0, 4)),
            ("nodule".to_string(), (2, 0)),
            ("mild".to_string(), (0, 3)),
        ]
        .into_iter()
        .collect();
        let scores = [0.6, 0.7, 0.9, 0.8];
        let labels = predict_labels(&scores, 0.5);
        let c = caption_from_scores(&scores, &labels, &terms, &roles).unwrap();
        assert_eq!(c.to_string(), "nodule/mild/left");

        let scores = [0.3, 0.7, 0.1, 0.2];
        let labels = predict_labels(&scores, 0.5);
        let c = caption_from_scores(&scores, &labels, &terms, &roles).unwrap();
        assert_eq!(c.to_string(), "opacity/left");
    }
}
