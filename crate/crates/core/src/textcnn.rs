//! Multi-label MeSH concept classifier over tokenised reports.
//!
//! embeddings → per-width 1-D convolutions + relu → max-over-time →
//! dropout → relu dense per branch → concatenation → linear → sigmoid.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, SOFT_RATIO_EPS};
use crate::data::{BalancedSampler, Checkpoint};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamId, Params};
use crate::preprocess::{pad_ids, LabelVector, TermIndex, TokenizedReport, Vocabulary};
use crate::tensor::{self, Tensor};
use crate::training::{EarlyStopping, EpochRecord, TrainOutcome, TrainSchedule};

/// Weights of the cross-entropy, soft-recall and soft-true-negative terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bce: f64,
    pub recall: f64,
    pub specificity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 0.5,
            recall: 0.2,
            specificity: 0.3,
        }
    }
}

impl LossWeights {
    pub fn new(bce: f64, recall: f64, specificity: f64) -> Result<Self> {
        let w = Self {
            bce,
            recall,
            specificity,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.bce, self.recall, self.specificity];
        if parts.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Contract(format!(
                "loss weights must be non-negative, got {parts:?}"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("loss weights must sum to 1, got {parts:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.bce, self.recall, self.specificity]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCnnConfig {
    pub embed_dim: usize,
    pub filter_widths: Vec<usize>,
    pub maps_per_width: usize,
    pub branch_dense_units: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub loss_weights: LossWeights,
    pub seq_len: usize,
}

impl Default for TextCnnConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            filter_widths: vec![3, 4, 5],
            maps_per_width: 512,
            branch_dense_units: 254,
            dropout: 0.5,
            num_classes: 102,
            loss_weights: LossWeights::default(),
            seq_len: crate::preprocess::REPORT_LEN,
        }
    }
}

impl TextCnnConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.embed_dim,
            self.maps_per_width,
            self.branch_dense_units,
            self.num_classes,
            self.seq_len,
        ];
        if extents.contains(&0) || self.filter_widths.is_empty() || self.filter_widths.contains(&0) {
            return Err(Error::Contract("text CNN extents must be positive".into()));
        }
        if let Some(&h) = self.filter_widths.iter().find(|&&h| h > self.seq_len) {
            return Err(Error::Window {
                width: h,
                len: self.seq_len,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        self.loss_weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
struct Branch {
    filters: ParamId,
    conv_bias: ParamId,
    dense_w: ParamId,
    dense_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextCnnModel {
    config: TextCnnConfig,
    vocab_size: usize,
    params: Params,
    embedding: ParamId,
    branches: Vec<Branch>,
    out_w: ParamId,
    out_b: ParamId,
}

impl TextCnnModel {
    pub fn new<R: Rng + ?Sized>(config: TextCnnConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Contract("vocabulary is empty".into()));
        }
        let (d, f, u, k) = (
            config.embed_dim,
            config.maps_per_width,
            config.branch_dense_units,
            config.num_classes,
        );
        let mut params = Params::new();
        let embedding = params.add("embedding", Tensor::uniform(&[vocab_size, d], 0.05, rng));
        let mut branches = Vec::with_capacity(config.filter_widths.len());
        for &h in &config.filter_widths {
            branches.push(Branch {
                filters: params.add(format!("conv{h}.filters"), Tensor::xavier(&[f, h, d], h * d, f, rng)),
                conv_bias: params.add(format!("conv{h}.bias"), Tensor::zeros(&[f])),
                dense_w: params.add(format!("dense{h}.weight"), Tensor::xavier(&[f, u], f, u, rng)),
                dense_b: params.add(format!("dense{h}.bias"), Tensor::zeros(&[u])),
            });
        }
        let concat = u * branches.len();
        let out_w = params.add("output.weight", Tensor::xavier(&[concat, k], concat, k, rng));
        let out_b = params.add("output.bias", Tensor::zeros(&[k]));
        Ok(Self {
            config,
            vocab_size,
            params,
            embedding,
            branches,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &TextCnnConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Logits `[B, K]` for a batch of fixed-length id sequences.
    pub fn forward_logits(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[&[usize]],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let m = self.config.seq_len;
        let d = self.config.embed_dim;
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut ids = Vec::with_capacity(batch.len() * m);
        for seq in batch {
            if seq.len() != m {
                return Err(Error::dim("textcnn_forward", &[seq.len()], &[m]));
            }
            ids.extend_from_slice(seq);
        }
        let rows = g.gather_rows(p[self.embedding], &ids)?;
        let emb = g.reshape(rows, vec![batch.len(), m, d])?;
        let mut outs = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let conv = g.conv1d_valid(emb, p[br.filters], p[br.conv_bias])?;
            let act = g.relu(conv);
            let mut pooled = g.max_over_time(act)?;
            if mode == Mode::Train && self.config.dropout > 0.0 {
                let keep = 1.0 - self.config.dropout;
                let shape = g.shape(pooled).to_vec();
                let n: usize = shape.iter().product();
                let mask = (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = g.constant(Tensor::new(shape, mask)?);
                pooled = g.mul(pooled, mask)?;
            }
            let dense = g.matmul(pooled, p[br.dense_w])?;
            let dense = g.add_bias(dense, p[br.dense_b])?;
            outs.push(g.relu(dense));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        let logits = g.matmul(joined, p[self.out_w])?;
        g.add_bias(logits, p[self.out_b])
    }

    /// Eval-mode sigmoid scores, one row per report.
    pub fn scores(&self, reports: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(reports.len());
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        for chunk in reports.chunks(256) {
            let mut g = Graph::inference();
            let p = self.params.bind(&mut g);
            let logits = self.forward_logits(&mut g, &p, chunk, Mode::Eval, &mut unused)?;
            let s = g.sigmoid(logits);
            let v = g.value(s);
            out.extend((0..v.rows()).map(|r| v.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, meta_extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::json!({
                "config": self.config,
                "vocab_size": self.vocab_size,
                "extra": meta_extra,
            }),
            tensors: self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, serde_json::Value)> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "checkpoint holds a '{}' model, expected '{CHECKPOINT_KIND}'",
                ckpt.kind
            )));
        }
        let config: TextCnnConfig = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| Error::Format(format!("text CNN config: {e}")))?;
        let vocab_size = ckpt.meta["vocab_size"]
            .as_u64()
            .ok_or_else(|| Error::Format("missing vocab_size".into()))? as usize;
        let mut model = Self::new(config, vocab_size, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        load_params(&mut model.params, &ckpt.tensors)?;
        Ok((model, ckpt.meta["extra"].clone()))
    }
}

const CHECKPOINT_KIND: &str = "textcnn";

/// Copies named tensors into `params`, requiring an exact name/shape match.
pub(crate) fn load_params(params: &mut Params, tensors: &[(String, Tensor)]) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model expects {}",
            tensors.len(),
            params.len()
        )));
    }
    let ids: Vec<ParamId> = params.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(tensors) {
        if params.name(id) != name || params.get(id).shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor '{name}' {:?} does not match model parameter '{}' {:?}",
                t.shape(),
                params.name(id),
                params.get(id).shape()
            )));
        }
        *params.get_mut(id) = t.clone();
    }
    Ok(())
}

/// Single-report forward pass returning the `K` sigmoid scores.
pub fn textcnn_forward(
    report: &TokenizedReport,
    model: &TextCnnModel,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let p = model.params.bind(&mut g);
    let logits = model.forward_logits(&mut g, &p, &[&report.ids], mode, rng)?;
    let s = g.sigmoid(logits);
    Ok(g.value(s).data().to_vec())
}

/// 1 wherever `score >= threshold`.
pub fn predict_labels(scores: &[f64], threshold: f64) -> LabelVector {
    LabelVector::from_bits(scores.iter().map(|&s| s >= threshold).collect())
}

const SCORE_CLAMP: f64 = 1e-12;

/// Modified sigmoid cross-entropy evaluated on scores `f(s) ∈ [0, 1]`,
/// averaged over the batch. Scores are clamped to `[1e-12, 1 − 1e-12]`
/// before taking logs.
pub fn modified_sce_loss(scores: &[Vec<f64>], labels: &[LabelVector], weights: LossWeights) -> Result<f64> {
    weights.validate()?;
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::dim("modified_sce_loss", &[scores.len()], &[labels.len()]));
    }
    let mut total = 0.0;
    for (s, y) in scores.iter().zip(labels) {
        if s.len() != y.len() {
            return Err(Error::dim("modified_sce_loss", &[s.len()], &[y.len()]));
        }
        let (mut bce, mut tp, mut pos, mut tn, mut neg) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&f, &yj) in s.iter().zip(y.bits()) {
            let p = f.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
            let yv = if yj { 1.0 } else { 0.0 };
            bce -= yv * p.ln() + (1.0 - yv) * (1.0 - p).ln();
            tp += yv * f;
            pos += yv;
            tn += (1.0 - yv) * (1.0 - f);
            neg += 1.0 - yv;
        }
        total += weights.bce * bce
            - weights.recall * tp / (pos + SOFT_RATIO_EPS)
            - weights.specificity * tn / (neg + SOFT_RATIO_EPS);
    }
    Ok(total / scores.len() as f64)
}

/// Mean over instances of the per-class summed binary cross-entropy on scores.
pub fn bce_loss(scores: &[Vec<f64>], labels: &[LabelVector]) -> Result<f64> {
    modified_sce_loss(scores, labels, LossWeights::new(1.0, 0.0, 0.0)?)
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// Recall/specificity-augmented cross-entropy with the config's weights.
    Modified,
    /// Plain summed binary cross-entropy.
    PlainBce,
}

/// One training instance: token ids per kept sentence segment plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledReport {
    pub segments: Vec<Vec<usize>>,
    pub labels: LabelVector,
}

impl LabeledReport {
    /// Segments concatenated in their original order, cropped/padded.
    pub fn tokens(&self, len: usize) -> TokenizedReport {
        let flat: Vec<usize> = self.segments.iter().flatten().copied().collect();
        let n = flat.len();
        pad_ids(flat, n, len)
    }
}

fn batch_loss(g: &mut Graph, logits: Var, labels: &[f64], objective: Objective, weights: LossWeights) -> Result<Var> {
    match objective {
        Objective::Modified => g.modified_sce(logits, labels, weights.as_array()),
        Objective::PlainBce => g.bce_with_logits(logits, labels),
    }
}

/// Eval-mode objective averaged over all instances of `data`.
pub fn evaluate_loss(model: &TextCnnModel, data: &[LabeledReport], objective: Objective) -> Result<f64> {
    let m = model.config.seq_len;
    let mut total = 0.0;
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    for chunk in data.chunks(256) {
        let toks: Vec<TokenizedReport> = chunk.iter().map(|r| r.tokens(m)).collect();
        let refs: Vec<&[usize]> = toks.iter().map(|t| t.ids.as_slice()).collect();
        let labels: Vec<f64> = chunk.iter().flat_map(|r| r.labels.to_f64()).collect();
        let mut g = Graph::inference();
        let p = model.params.bind(&mut g);
        let logits = model.forward_logits(&mut g, &p, &refs, Mode::Eval, &mut unused)?;
        let loss = batch_loss(&mut g, logits, &labels, objective, model.config.loss_weights)?;
        total += g.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Mini-batch Adam over class-balanced, sentence-shuffled batches with
/// early stopping on validation loss.
pub fn train_textcnn(
    train: &[LabeledReport],
    val: &[LabeledReport],
    config: TextCnnConfig,
    vocab_size: usize,
    schedule: &TrainSchedule,
    objective: Objective,
    seed: u64,
) -> Result<TrainOutcome<TextCnnModel>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(
            "training and validation splits must be non-empty".into(),
        ));
    }
    if schedule.epochs == 0 {
        return Err(Error::Contract("epochs must be at least 1".into()));
    }
    let k = config.num_classes;
    if let Some(bad) = train.iter().chain(val).find(|r| r.labels.len() != k) {
        return Err(Error::dim("train_textcnn", &[bad.labels.len()], &[k]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = TextCnnModel::new(config, vocab_size, &mut rng)?;
    let classes: Vec<Vec<usize>> = train.iter().map(|r| r.labels.positives().collect()).collect();
    let seg_counts: Vec<usize> = train.iter().map(|r| r.segments.len()).collect();
    let mut sampler = BalancedSampler::new(&classes, &seg_counts, k, schedule.batch_size)?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: schedule.learning_rate,
            ..AdamConfig::default()
        },
        model.params.tensors(),
    );
    let batches_per_epoch = train.len().div_ceil(schedule.batch_size);
    let m = model.config.seq_len;
    let weights = model.config.loss_weights;

    let mut history = Vec::new();
    let mut stopper = EarlyStopping::new(schedule.patience);
    for epoch in 1..=schedule.epochs {
        sampler.start_epoch();
        let mut epoch_loss = 0.0;
        for _ in 0..batches_per_epoch {
            let draws = sampler.next_batch(&mut rng);
            let seqs: Vec<Vec<usize>> = draws
                .iter()
                .map(|d| {
                    let flat = d.assemble(&train[d.item].segments);
                    let n = flat.len();
                    pad_ids(flat, n, m).ids
                })
                .collect();
            let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
            let labels: Vec<f64> = draws.iter().flat_map(|d| train[d.item].labels.to_f64()).collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let logits = model.forward_logits(&mut g, &p, &refs, Mode::Train, &mut rng)?;
            let loss = batch_loss(&mut g, logits, &labels, objective, weights)?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("non-finite training loss at epoch {epoch}")));
            }
            g.backward(loss)?;
            let grads = p.grads(&g);
            adam.step(model.params.tensors_mut(), &grads)?;
            epoch_loss += lv;
        }
        let train_loss = epoch_loss / batches_per_epoch as f64;
        let val_loss = evaluate_loss(&model, val, objective)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        log::debug!("textcnn epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if stopper.observe(epoch, val_loss, &model.params) {
            log::info!("early stop at epoch {epoch}, best epoch {}", stopper.best_epoch());
            break;
        }
    }
    let best_epoch = stopper.best_epoch();
    model.params = stopper.into_best().expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Bundles a trained classifier with its vocabularies for persistence.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCnnArtifact {
    pub model: TextCnnModel,
    pub vocab: Vocabulary,
    pub terms: TermIndex,
    /// Application metadata carried along unchanged.
    pub extra: serde_json::Value,
}

impl TextCnnArtifact {
    pub fn to_checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(serde_json::json!({
            "vocab": self.vocab,
            "terms": self.terms,
            "app": self.extra,
        }))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, extra) = TextCnnModel::from_checkpoint(ckpt)?;
        let vocab: Vocabulary =
            serde_json::from_value(extra["vocab"].clone()).map_err(|e| Error::Format(format!("vocabulary: {e}")))?;
        let terms: TermIndex =
            serde_json::from_value(extra["terms"].clone()).map_err(|e| Error::Format(format!("term index: {e}")))?;
        if vocab.len() != model.vocab_size() || terms.len() != model.config().num_classes {
            return Err(Error::Format("vocabulary sizes disagree with the model config".into()));
        }
        Ok(Self {
            model,
            vocab,
            terms,
            extra: extra["app"].clone(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::data::save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&crate::data::load_checkpoint(path)?)
    }
}

/// Sigmoid of each logit; exposed for callers holding raw logits.
pub fn sigmoid_scores(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&s| tensor::sigmoid(s)).collect()
}
