//! Image-conditioned LSTM generation of MeSH term sequences.
//!
//! The recurrence keeps an additive state `h` and a gated output `m`:
//!
//! ```text
//! h_t = f_t ⊙ h_{t-1} + i_t ⊙ tanh(Wx·x_t + Wm·m_{t-1} + b)
//! m_t = o_t ⊙ tanh(h_t)
//! ```
//!
//! with `i, f, o` affine-sigmoid gates over `(x_t, m_{t-1})`. Three ways of
//! feeding the image are supported: as the first input token (RNN0), mixed
//! into the recurrent output before the softmax (RNN1), or mixed into every
//! recurrent input (RNN2).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamId, Params};
use crate::preprocess::{Vocabulary, CAPTION_LEN, END, PAD, START, UNK};
use crate::tensor::{self, Tensor};
use crate::textcnn::load_params;
use crate::training::{EarlyStopping, EpochRecord, TrainOutcome, TrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Rnn0,
    Rnn1,
    Rnn2,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Rnn0 => "rnn0",
            Variant::Rnn1 => "rnn1",
            Variant::Rnn2 => "rnn2",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn0" => Ok(Variant::Rnn0),
            "rnn1" => Ok(Variant::Rnn1),
            "rnn2" => Ok(Variant::Rnn2),
            other => Err(Error::Contract(format!("unknown variant '{other}' (rnn0, rnn1, rnn2)"))),
        }
    }
}

/// How the image transition vector is merged with its partner vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Concat,
    Sum,
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::Concat => "concat",
            Combine::Sum => "sum",
        })
    }
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" => Ok(Combine::Concat),
            "sum" => Ok(Combine::Sum),
            other => Err(Error::Contract(format!("unknown combine mode '{other}' (concat, sum)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqGenConfig {
    pub variant: Variant,
    /// `None` for RNN0.
    pub combine: Option<Combine>,
    pub image_dim: usize,
    pub transition_dim: usize,
    pub word_dim: usize,
    pub hidden: usize,
    pub caption_len: usize,
    /// RNN0 only: feed the image as an extra step before START instead of
    /// in place of it.
    pub image_before_start: bool,
    pub vocab_size: usize,
}

impl SeqGenConfig {
    /// Default sizes for a variant, image width and vocabulary.
    pub fn new(variant: Variant, combine: Option<Combine>, image_dim: usize, vocab_size: usize) -> Result<Self> {
        let hidden = 512;
        let (transition_dim, word_dim) = match variant {
            Variant::Rnn0 => {
                let t = if image_dim >= 4096 { 2048 } else { 1024 };
                (t, t)
            }
            Variant::Rnn1 | Variant::Rnn2 => (1024, 256),
        };
        let combine = match variant {
            Variant::Rnn0 => {
                if combine.is_some() {
                    return Err(Error::Contract("rnn0 takes no combine mode".into()));
                }
                None
            }
            _ => Some(combine.unwrap_or(Combine::Concat)),
        };
        let config = Self {
            variant,
            combine,
            image_dim,
            transition_dim,
            word_dim,
            hidden,
            caption_len: CAPTION_LEN,
            image_before_start: false,
            vocab_size,
        }
        .matched();
        config.validate()?;
        Ok(config)
    }

    /// Re-derives dependent sizes after `hidden` or `word_dim` change:
    /// sum-mode transition widths and the RNN0 word width.
    pub fn matched(mut self) -> Self {
        match (self.variant, self.combine) {
            (Variant::Rnn0, _) => self.word_dim = self.transition_dim,
            (Variant::Rnn1, Some(Combine::Sum)) => self.transition_dim = self.hidden,
            (Variant::Rnn2, Some(Combine::Sum)) => self.transition_dim = self.word_dim,
            _ => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.image_dim,
            self.transition_dim,
            self.word_dim,
            self.hidden,
            self.caption_len,
        ];
        if extents.contains(&0) {
            return Err(Error::Contract("sequence model extents must be positive".into()));
        }
        if self.vocab_size <= UNK {
            return Err(Error::Contract(format!(
                "vocabulary of {} entries holds no terms beyond the reserved tokens",
                self.vocab_size
            )));
        }
        match (self.variant, self.combine) {
            (Variant::Rnn0, Some(_)) => Err(Error::Contract("rnn0 takes no combine mode".into())),
            (Variant::Rnn0, None) if self.word_dim != self.transition_dim => {
                Err(Error::dim("rnn0_inputs", &[self.word_dim], &[self.transition_dim]))
            }
            (Variant::Rnn1 | Variant::Rnn2, None) => {
                Err(Error::Contract(format!("{} needs a combine mode", self.variant)))
            }
            (Variant::Rnn1, Some(Combine::Sum)) if self.transition_dim != self.hidden => {
                Err(Error::dim("rnn1_decode_step", &[self.hidden], &[self.transition_dim]))
            }
            (Variant::Rnn2, Some(Combine::Sum)) if self.transition_dim != self.word_dim => {
                Err(Error::dim("rnn2_encode_step", &[self.word_dim], &[self.transition_dim]))
            }
            _ => Ok(()),
        }
    }

    /// Unrolled steps during teacher forcing.
    pub fn steps(&self) -> usize {
        let extra = usize::from(self.variant == Variant::Rnn0 && self.image_before_start);
        self.caption_len + 1 + extra
    }

    /// Input width of the conditioning layer (RNN1/RNN2).
    pub fn conditioning_input_dim(&self) -> Option<usize> {
        let partner = match self.variant {
            Variant::Rnn0 => return None,
            Variant::Rnn1 => self.hidden,
            Variant::Rnn2 => self.word_dim,
        };
        Some(match self.combine? {
            Combine::Concat => partner + self.transition_dim,
            Combine::Sum => partner,
        })
    }
}

/// Graph handles for the LSTM weights. Gate blocks are laid out along the
/// last axis as `[input, forget, output, candidate]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    /// `[in, 4H]`
    pub wx: Var,
    /// `[H, 4H]`
    pub wm: Var,
    /// `[4H]`
    pub b: Var,
}

/// One recurrence step; returns `(h_t, m_t)`.
pub fn lstm_step(g: &mut Graph, cell: &LstmCell, x: Var, h_prev: Var, m_prev: Var) -> Result<(Var, Var)> {
    let hidden = g.shape(cell.wm)[0];
    if g.shape(h_prev).last() != Some(&hidden) || g.shape(m_prev).last() != Some(&hidden) {
        return Err(Error::dim("lstm_step", g.shape(h_prev), &[hidden]));
    }
    let from_x = g.matmul(x, cell.wx)?;
    let from_m = g.matmul(m_prev, cell.wm)?;
    let pre = g.add(from_x, from_m)?;
    let pre = g.add_bias(pre, cell.b)?;
    let gate = |g: &mut Graph, k: usize| g.slice_last(pre, k * hidden, hidden);
    let (i, f, o, c) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
    let (i, f, o, c) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(c));
    let keep = g.mul(f, h_prev)?;
    let write = g.mul(i, c)?;
    let h = g.add(keep, write)?;
    let th = g.tanh(h);
    let m = g.mul(o, th)?;
    Ok((h, m))
}

/// `relu(image · W_dg)`.
pub fn image_transition(g: &mut Graph, image: Var, w_dg: Var) -> Result<Var> {
    let t = g.matmul(image, w_dg)?;
    Ok(g.relu(t))
}

fn conditioned(
    g: &mut Graph,
    op: &'static str,
    partner: Var,
    trans: Var,
    w: Var,
    b: Var,
    combine: Combine,
) -> Result<Var> {
    let joined = match combine {
        Combine::Concat => g.concat(&[partner, trans])?,
        Combine::Sum => {
            if g.shape(partner) != g.shape(trans) {
                return Err(Error::dim(op, g.shape(partner), g.shape(trans)));
            }
            g.add(partner, trans)?
        }
    };
    let z = g.matmul(joined, w)?;
    let z = g.add_bias(z, b)?;
    Ok(g.relu(z))
}

/// `relu(W_z · (m_t ⋆ trans) + b_z)`, the RNN1 decoder vector.
pub fn rnn1_decode_step(g: &mut Graph, m_t: Var, trans: Var, w_z: Var, b_z: Var, combine: Combine) -> Result<Var> {
    conditioned(g, "rnn1_decode_step", m_t, trans, w_z, b_z, combine)
}

/// `relu(W_a · (x_t ⋆ trans) + b_a)`, the RNN2 encoder vector.
pub fn rnn2_encode_step(g: &mut Graph, x_t: Var, trans: Var, w_a: Var, b_a: Var, combine: Combine) -> Result<Var> {
    conditioned(g, "rnn2_encode_step", x_t, trans, w_a, b_a, combine)
}

/// One training or evaluation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqPair {
    pub image: Vec<f64>,
    /// Term ids without START/END, at most `caption_len` long after cropping.
    pub caption: Vec<usize>,
}

/// Teacher-forcing inputs and targets for one caption.
///
/// With `lead` leading non-word steps the inputs are `[START?, w1..wn, PAD..]`
/// and the targets `[w1..wn, END, PAD..]`, both of length `steps`.
fn teacher_forcing(caption: &[usize], caption_len: usize, with_start: bool, steps: usize) -> (Vec<usize>, Vec<usize>) {
    let words: Vec<usize> = caption
        .iter()
        .copied()
        .filter(|&t| t != PAD)
        .take(caption_len)
        .collect();
    let mut inputs = Vec::with_capacity(steps);
    if with_start {
        inputs.push(START);
    }
    inputs.extend(&words);
    inputs.resize(caption_len + usize::from(with_start), PAD);
    let mut targets: Vec<usize> = words.clone();
    targets.push(END);
    targets.resize(caption_len + 1, PAD);
    let lead = steps - targets.len();
    let mut padded = vec![PAD; lead];
    padded.extend(targets);
    (inputs, padded)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqGenModel {
    config: SeqGenConfig,
    params: Params,
    embedding: ParamId,
    w_dg: ParamId,
    wx: ParamId,
    wm: ParamId,
    b: ParamId,
    cond: Option<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Per-item state carried through the unrolled recurrence.
struct Unroll {
    trans: Var,
    h: Var,
    m: Var,
}

impl SeqGenModel {
    pub fn new<R: Rng + ?Sized>(config: SeqGenConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (g, t, d, h, v) = (
            config.image_dim,
            config.transition_dim,
            config.word_dim,
            config.hidden,
            config.vocab_size,
        );
        let mut params = Params::new();
        let embedding = params.add("embedding", Tensor::uniform(&[v, d], 0.05, rng));
        let w_dg = params.add("transition.weight", Tensor::xavier(&[g, t], g, t, rng));
        let lstm_in = d;
        let wx = params.add("lstm.wx", Tensor::xavier(&[lstm_in, 4 * h], lstm_in, h, rng));
        let wm = params.add("lstm.wm", Tensor::xavier(&[h, 4 * h], h, h, rng));
        let b = params.add("lstm.bias", Tensor::zeros(&[4 * h]));
        let cond = match (config.variant, config.conditioning_input_dim()) {
            (Variant::Rnn1, Some(n)) => Some((
                params.add("decoder.weight", Tensor::xavier(&[n, h], n, h, rng)),
                params.add("decoder.bias", Tensor::zeros(&[h])),
            )),
            (Variant::Rnn2, Some(n)) => Some((
                params.add("encoder.weight", Tensor::xavier(&[n, d], n, d, rng)),
                params.add("encoder.bias", Tensor::zeros(&[d])),
            )),
            _ => None,
        };
        let out_w = params.add("output.weight", Tensor::xavier(&[h, v], h, v, rng));
        let out_b = params.add("output.bias", Tensor::zeros(&[v]));
        Ok(Self {
            config,
            params,
            embedding,
            w_dg,
            wx,
            wm,
            b,
            cond,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &SeqGenConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Id of the image-transition weight block.
    pub fn transition_weight(&self) -> ParamId {
        self.w_dg
    }

    fn cell(&self, p: &Bound) -> LstmCell {
        LstmCell {
            wx: p[self.wx],
            wm: p[self.wm],
            b: p[self.b],
        }
    }

    fn image_var(&self, g: &mut Graph, images: &[&[f64]]) -> Result<Var> {
        let gd = self.config.image_dim;
        let mut data = Vec::with_capacity(images.len() * gd);
        for im in images {
            if im.len() != gd {
                return Err(Error::dim("image_embedding", &[im.len()], &[gd]));
            }
            data.extend_from_slice(im);
        }
        Ok(g.constant(Tensor::new(vec![images.len(), gd], data)?))
    }

    fn begin(&self, g: &mut Graph, p: &Bound, images: &[&[f64]]) -> Result<Unroll> {
        let im = self.image_var(g, images)?;
        let trans = image_transition(g, im, p[self.w_dg])?;
        let zeros = Tensor::zeros(&[images.len(), self.config.hidden]);
        let h = g.constant(zeros.clone());
        let m = g.constant(zeros);
        Ok(Unroll { trans, h, m })
    }

    fn embed(&self, g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<Var> {
        g.gather_rows(p[self.embedding], ids)
    }

    /// Advances one step on input vectors `x` and returns the logits.
    fn advance(&self, g: &mut Graph, p: &Bound, st: &mut Unroll, x: Var) -> Result<Var> {
        let cell = self.cell(p);
        let x = match (self.config.variant, self.cond, self.config.combine) {
            (Variant::Rnn2, Some((w, b)), Some(c)) => rnn2_encode_step(g, x, st.trans, p[w], p[b], c)?,
            _ => x,
        };
        let (h, m) = lstm_step(g, &cell, x, st.h, st.m)?;
        st.h = h;
        st.m = m;
        let top = match (self.config.variant, self.cond, self.config.combine) {
            (Variant::Rnn1, Some((w, b)), Some(c)) => rnn1_decode_step(g, m, st.trans, p[w], p[b], c)?,
            _ => m,
        };
        let logits = g.matmul(top, p[self.out_w])?;
        g.add_bias(logits, p[self.out_b])
    }

    /// RNN0 step inputs: the image transition followed by word embeddings
    /// of `inputs` (one id row per item, `steps - 1` columns).
    pub fn build_rnn0_inputs(
        &self,
        g: &mut Graph,
        p: &Bound,
        images: &[&[f64]],
        inputs: &[Vec<usize>],
    ) -> Result<Vec<Var>> {
        if self.config.variant != Variant::Rnn0 {
            return Err(Error::Contract(format!(
                "{} does not take the image as a token",
                self.config.variant
            )));
        }
        let im = self.image_var(g, images)?;
        let trans = image_transition(g, im, p[self.w_dg])?;
        let mut steps = vec![trans];
        steps.extend(self.word_steps(g, p, inputs)?);
        Ok(steps)
    }

    fn word_steps(&self, g: &mut Graph, p: &Bound, inputs: &[Vec<usize>]) -> Result<Vec<Var>> {
        let width = inputs.first().map_or(0, Vec::len);
        (0..width)
            .map(|t| {
                let ids: Vec<usize> = inputs.iter().map(|row| row[t]).collect();
                self.embed(g, p, &ids)
            })
            .collect()
    }

    /// Per-step logits `[B, V]` under teacher forcing, plus targets.
    pub fn teacher_forced_logits(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[&SeqPair],
    ) -> Result<(Vec<Var>, Vec<Vec<usize>>)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let steps = self.config.steps();
        let with_start = self.config.variant != Variant::Rnn0 || self.config.image_before_start;
        let (inputs, targets): (Vec<_>, Vec<_>) = batch
            .iter()
            .map(|pair| teacher_forcing(&pair.caption, self.config.caption_len, with_start, steps))
            .unzip();
        if let Some(&bad) = batch
            .iter()
            .flat_map(|pair| &pair.caption)
            .find(|&&t| t >= self.config.vocab_size)
        {
            return Err(Error::Index {
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        let images: Vec<&[f64]> = batch.iter().map(|pair| pair.image.as_slice()).collect();
        let mut st = self.begin(g, p, &images)?;
        let xs = match self.config.variant {
            Variant::Rnn0 => {
                let mut xs = vec![st.trans];
                xs.extend(self.word_steps(g, p, &inputs)?);
                xs
            }
            _ => self.word_steps(g, p, &inputs)?,
        };
        debug_assert_eq!(xs.len(), steps);
        let mut logits = Vec::with_capacity(steps);
        for x in xs {
            logits.push(self.advance(g, p, &mut st, x)?);
        }
        Ok((logits, targets))
    }

    /// Summed masked cross-entropy over steps, divided by the batch size.
    pub fn batch_loss(&self, g: &mut Graph, p: &Bound, batch: &[&SeqPair]) -> Result<Var> {
        let (logits, targets) = self.teacher_forced_logits(g, p, batch)?;
        let mut total: Option<Var> = None;
        for (t, step) in logits.into_iter().enumerate() {
            let ids: Vec<usize> = targets.iter().map(|row| row[t]).collect();
            let mask: Vec<f64> = ids.iter().map(|&id| if id == PAD { 0.0 } else { 1.0 }).collect();
            let logp = g.log_softmax(step);
            let nll = g.pick_nll(logp, &ids, &mask)?;
            total = Some(match total {
                Some(acc) => g.add(acc, nll)?,
                None => nll,
            });
        }
        let total = total.expect("at least one step");
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    /// Greedy decoding for one image.
    pub fn greedy_generate(&self, image: &[f64]) -> Result<GenerationResult> {
        Ok(self.generate_batch(&[image], None)?.remove(0))
    }

    /// Decodes each image independently. `sampling` switches from argmax to
    /// temperature sampling. PAD, START and UNK are never emitted.
    pub fn generate_batch(
        &self,
        images: &[&[f64]],
        mut sampling: Option<Sampling<'_>>,
    ) -> Result<Vec<GenerationResult>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let n = images.len();
        let mut st = self.begin(&mut g, &p, images)?;
        let mut results = vec![GenerationResult::default(); n];
        let mut done = vec![false; n];

        let mut x = match self.config.variant {
            Variant::Rnn0 => st.trans,
            _ => self.embed(&mut g, &p, &vec![START; n])?,
        };
        if self.config.variant == Variant::Rnn0 && self.config.image_before_start {
            self.advance(&mut g, &p, &mut st, x)?;
            x = self.embed(&mut g, &p, &vec![START; n])?;
        }
        for _ in 0..self.config.caption_len + 1 {
            let logits = self.advance(&mut g, &p, &mut st, x)?;
            let probs = tensor::softmax(g.value(logits));
            let mut next = vec![PAD; n];
            for (i, res) in results.iter_mut().enumerate() {
                if done[i] {
                    continue;
                }
                let dist = probs.row(i).to_vec();
                let tok = match sampling.as_mut() {
                    Some(s) => s.draw(g.value(logits).row(i)),
                    None => argmax_allowed(&dist),
                };
                res.distributions.push(dist);
                if tok == END || res.tokens.len() == self.config.caption_len {
                    done[i] = true;
                } else {
                    res.tokens.push(tok);
                    next[i] = tok;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
            x = self.embed(&mut g, &p, &next)?;
        }
        Ok(results)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            meta: serde_json::json!({ "config": self.config, "extra": extra }),
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
        let config: SeqGenConfig = serde_json::from_value(ckpt.meta["config"].clone())
            .map_err(|e| Error::Format(format!("sequence model config: {e}")))?;
        let mut model = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        load_params(&mut model.params, &ckpt.tensors)?;
        Ok((model, ckpt.meta["extra"].clone()))
    }
}

const CHECKPOINT_KIND: &str = "seqgen";

fn argmax_allowed(dist: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, END);
    for (k, &p) in dist.iter().enumerate() {
        if matches!(k, PAD | START | UNK) {
            continue;
        }
        if p > best.0 {
            best = (p, k);
        }
    }
    best.1
}

/// Temperature sampling state for [`SeqGenModel::generate_batch`].
pub struct Sampling<'a> {
    pub temperature: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Sampling<'_> {
    fn draw(&mut self, logits: &[f64]) -> usize {
        let t = self.temperature.max(1e-6);
        let scaled: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(k, &s)| {
                if matches!(k, PAD | START | UNK) {
                    f64::NEG_INFINITY
                } else {
                    s / t
                }
            })
            .collect();
        let mut probs = vec![0.0; scaled.len()];
        tensor::softmax_row(&scaled, &mut probs);
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        for (k, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        argmax_allowed(&probs)
    }
}

/// Output of one decode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationResult {
    /// Emitted term ids, END excluded, at most `caption_len`.
    pub tokens: Vec<usize>,
    /// Softmax over the vocabulary at every executed step.
    pub distributions: Vec<Vec<f64>>,
}

impl GenerationResult {
    pub fn terms<'a>(&self, vocab: &'a Vocabulary) -> Vec<&'a str> {
        self.tokens.iter().filter_map(|&t| vocab.token(t)).collect()
    }
}

/// `−Σ_t log p_t[target_t]` over non-PAD targets.
pub fn sequence_loss(distributions: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if distributions.len() != targets.len() {
        return Err(Error::dim("sequence_loss", &[distributions.len()], &[targets.len()]));
    }
    let mut loss = 0.0;
    for (dist, &t) in distributions.iter().zip(targets) {
        if t == PAD {
            continue;
        }
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-6 || dist.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Contract(format!("step distribution sums to {total}, not 1")));
        }
        let p = *dist.get(t).ok_or(Error::Index {
            index: t,
            bound: dist.len(),
        })?;
        loss -= p.ln();
    }
    Ok(loss)
}

/// Mean teacher-forced loss over `data`.
pub fn evaluate_loss(model: &SeqGenModel, data: &[SeqPair]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(256) {
        let refs: Vec<&SeqPair> = chunk.iter().collect();
        let mut g = Graph::inference();
        let p = model.params.bind(&mut g);
        let loss = model.batch_loss(&mut g, &p, &refs)?;
        total += g.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

fn check_images(data: &[SeqPair], dim: usize, split: &str) -> Result<()> {
    match data.iter().position(|pair| pair.image.len() != dim) {
        Some(i) => Err(Error::Data(format!(
            "{split} pair {i} has a {}-dim embedding, expected {dim}",
            data[i].image.len()
        ))),
        None => Ok(()),
    }
}

/// Teacher-forced Adam training with reshuffled mini-batches each epoch
/// and early stopping on validation loss.
pub fn train_seqgen(
    train: &[SeqPair],
    val: &[SeqPair],
    config: SeqGenConfig,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainOutcome<SeqGenModel>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract(
            "training and validation splits must be non-empty".into(),
        ));
    }
    if schedule.epochs == 0 || schedule.batch_size == 0 {
        return Err(Error::Contract("epochs and batch size must be at least 1".into()));
    }
    check_images(train, config.image_dim, "train")?;
    check_images(val, config.image_dim, "validation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SeqGenModel::new(config, &mut rng)?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: schedule.learning_rate,
            ..AdamConfig::default()
        },
        model.params.tensors(),
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut stopper = EarlyStopping::new(schedule.patience);
    for epoch in 1..=schedule.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(schedule.batch_size) {
            let batch: Vec<&SeqPair> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let loss = model.batch_loss(&mut g, &p, &batch)?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("non-finite training loss at epoch {epoch}")));
            }
            g.backward(loss)?;
            let grads = p.grads(&g);
            adam.step(model.params.tensors_mut(), &grads)?;
            epoch_loss += lv * batch.len() as f64;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let val_loss = evaluate_loss(&model, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        log::debug!("seqgen epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
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
