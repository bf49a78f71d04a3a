//! Scores predicted labels or generated captions against reference annotations.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use clap::Args;
use meshgen::metrics::{classification_report_with, corpus_bleu_report, BleuMode, BleuPair, UndefinedPolicy};
use meshgen::preprocess::{parse_mesh, pathology_counts, select_primary_annotation, LabelVector, MeshAnnotation};

use crate::config::{self, set, BleuAveraging, EvaluateConfig, Undefined};
use crate::error::{CliError, CliResult};
use crate::generator::image_keys;
use crate::io::{self, Annotated};

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Captions from `generate`, labels from `predict-concepts`, or a corpus.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Reference corpus, captions or labels.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pathology terms, one per line, for a second classification table.
    #[arg(long)]
    pathology_classes: Option<PathBuf>,
    /// How per-class and per-sample ratios with a zero denominator are averaged.
    #[arg(long, value_enum)]
    undefined: Option<Undefined>,
    #[arg(long, value_enum)]
    bleu_mode: Option<BleuAveraging>,
}

impl EvaluateArgs {
    fn resolve(self) -> CliResult<EvaluateConfig> {
        let mut c: EvaluateConfig = config::load(self.config.as_deref())?;
        set(&mut c.pred, self.pred.map(Some));
        set(&mut c.truth, self.truth.map(Some));
        set(&mut c.out, self.out.map(Some));
        set(&mut c.pathology_classes, self.pathology_classes.map(Some));
        set(&mut c.undefined, self.undefined);
        set(&mut c.bleu_mode, self.bleu_mode);
        Ok(c)
    }
}

fn primary_terms(by_id: Vec<(Vec<String>, Vec<MeshAnnotation>)>) -> CliResult<HashMap<String, Vec<String>>> {
    let counts = pathology_counts(by_id.iter().flat_map(|(_, c)| c));
    let mut out = HashMap::new();
    for (keys, captions) in by_id {
        let terms: Vec<String> = if captions.is_empty() {
            Vec::new()
        } else {
            select_primary_annotation(&captions, &counts)?
                .terms()
                .map(String::from)
                .collect()
        };
        for k in keys {
            out.entry(k).or_insert_with(|| terms.clone());
        }
    }
    Ok(out)
}

fn caption_references(truth: Annotated, path: &Path) -> CliResult<HashMap<String, Vec<String>>> {
    match truth {
        Annotated::Corpus(records) => primary_terms(
            records
                .iter()
                .map(|r| {
                    let mut keys = image_keys(r);
                    keys.push(r.exam_id.clone());
                    (keys, parse_mesh(&r.mesh_raw))
                })
                .collect(),
        ),
        Annotated::Captions(rows) => {
            primary_terms(rows.into_iter().map(|(id, c)| (vec![id], parse_mesh(&c))).collect())
        }
        Annotated::Labels(_) => Err(CliError::data(format!(
            "{}: captions cannot be scored against a labels file",
            path.display()
        ))),
    }
}

fn term_sets(file: Annotated) -> HashMap<String, BTreeSet<String>> {
    let from_captions = |c: &str| -> BTreeSet<String> {
        parse_mesh(c)
            .iter()
            .flat_map(|a| a.terms().map(String::from).collect::<Vec<_>>())
            .collect()
    };
    match file {
        Annotated::Corpus(records) => records
            .into_iter()
            .map(|r| (r.exam_id, from_captions(&r.mesh_raw)))
            .collect(),
        Annotated::Captions(rows) => rows.into_iter().map(|(id, c)| (id, from_captions(&c))).collect(),
        Annotated::Labels(rows) => rows.into_iter().map(|(id, t)| (id, t.into_iter().collect())).collect(),
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn evaluate(args: EvaluateArgs) -> CliResult<()> {
    let cfg = args.resolve()?;
    let pred_path = config::required(&cfg.pred, "pred")?;
    let truth_path = config::required(&cfg.truth, "truth")?;
    let pathology_list = cfg.pathology_classes.as_deref().map(io::read_term_list).transpose()?;
    let out = config::out_dir(&cfg.out)?;
    let pred = io::read_annotated(pred_path)?;
    let truth = io::read_annotated(truth_path)?;
    let policy = match cfg.undefined {
        Undefined::Exclude => UndefinedPolicy::Exclude,
        Undefined::Zero => UndefinedPolicy::Zero,
    };

    let mut metrics: Vec<(String, String)> = Vec::new();
    match pred {
        Annotated::Captions(rows) => {
            if rows.is_empty() {
                return Err(CliError::data(format!("{} holds no predictions", pred_path.display())));
            }
            let refs = caption_references(truth, truth_path)?;
            let mut pairs: Vec<BleuPair<String>> = Vec::with_capacity(rows.len());
            for (id, caption) in &rows {
                let reference = refs
                    .get(id)
                    .ok_or_else(|| CliError::data(format!("'{id}' has no reference in {}", truth_path.display())))?;
                let candidate: Vec<String> = parse_mesh(caption)
                    .first()
                    .map(|c| c.terms().map(String::from).collect())
                    .unwrap_or_default();
                pairs.push((candidate, vec![reference.clone()]));
            }
            let mode = match cfg.bleu_mode {
                BleuAveraging::Sentence => BleuMode::Sentence,
                BleuAveraging::Pooled => BleuMode::Pooled,
            };
            let report = corpus_bleu_report(&pairs, mode)?;
            metrics.push(("samples".into(), pairs.len().to_string()));
            metrics.push(("empty_candidates".into(), report.empty_candidates.to_string()));
            metrics.extend(report.rows().into_iter().map(|(k, v)| (k.to_string(), fmt(v))));
        }
        other => {
            let pred_sets = term_sets(other);
            if pred_sets.is_empty() {
                return Err(CliError::data(format!("{} holds no predictions", pred_path.display())));
            }
            let truth_sets = term_sets(truth);
            let mut ids: Vec<&String> = pred_sets.keys().collect();
            ids.sort();
            let mut classes = BTreeSet::new();
            for id in &ids {
                let t = truth_sets
                    .get(*id)
                    .ok_or_else(|| CliError::data(format!("'{id}' has no reference in {}", truth_path.display())))?;
                classes.extend(t.iter().cloned());
                classes.extend(pred_sets[*id].iter().cloned());
            }
            let classes: Vec<String> = classes.into_iter().collect();
            if classes.is_empty() {
                return Err(CliError::data("neither predictions nor references hold any term"));
            }
            let vector =
                |set: &BTreeSet<String>| LabelVector::from_bits(classes.iter().map(|c| set.contains(c)).collect());
            let pv: Vec<LabelVector> = ids.iter().map(|id| vector(&pred_sets[*id])).collect();
            let tv: Vec<LabelVector> = ids.iter().map(|id| vector(&truth_sets[*id])).collect();
            let report = classification_report_with(&pv, &tv, None, policy)?;
            metrics.push(("samples".into(), report.samples.to_string()));
            metrics.push(("classes".into(), report.classes.to_string()));
            metrics.extend(report.rows().into_iter().map(|(k, v)| (k.to_string(), fmt(v))));
            if let Some(list) = &pathology_list {
                let subset: Vec<usize> = list
                    .iter()
                    .filter_map(|t| classes.iter().position(|c| c == t))
                    .collect();
                if !subset.is_empty() {
                    let sub = classification_report_with(&pv, &tv, Some(&subset), policy)?;
                    metrics.push(("pathology.classes".into(), sub.classes.to_string()));
                    metrics.extend(sub.rows().into_iter().map(|(k, v)| (format!("pathology.{k}"), fmt(v))));
                }
            }
        }
    }
    io::write_key_values(&out.join("metrics.tsv"), &metrics)?;
    config::echo(&cfg, out)?;
    for (k, v) in &metrics {
        println!("{k:<24}{v}");
    }
    Ok(())
}
