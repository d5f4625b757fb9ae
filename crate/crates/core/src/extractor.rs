//! Neural sentence extractor: the policy network.
//!
//! Words are embedded and passed through linear convolutions of several
//! widths; a sentence vector is the mean of its word features. A
//! bidirectional GRU over sentence vectors gives each sentence a context
//! vector `h_t`, and `d = tanh(W_d · mean_t h_t + b_d)` summarizes the
//! document. At step `t` an MLP over `[h_t; g_{t-1}; d]` gives the logit of
//! extracting sentence `t`, where `g` accumulates `tanh(W_g h_t)` over the
//! sentences selected so far.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coherence::TrainingLog;
use crate::corpus::{Document, Sentence};
use crate::numeric::{
    self, check_layout, init_layout, sgd_step, Graph, Init, Layout, NumericError, ParamStore, Tensor, Var, EMBED_SCALE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub kernel_filters: Vec<usize>,
    pub gru_hidden: usize,
    pub doc_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub max_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl ExtractorConfig {
    pub fn new(vocab_size: usize) -> Self {
        ExtractorConfig {
            vocab_size,
            embed_dim: 128,
            kernel_sizes: vec![3, 5, 7],
            kernel_filters: vec![128, 256, 256],
            gru_hidden: 256,
            doc_dim: 512,
            mlp_hidden: vec![512, 256],
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            lr: 0.1,
            batch_size: 64,
            epochs: 10,
        }
    }

    /// Width of a word feature, the sum of all kernel filter counts.
    pub fn feature_dim(&self) -> usize {
        self.kernel_filters.iter().sum()
    }

    /// Width of a bidirectional context vector, also the width of `g`.
    pub fn context_dim(&self) -> usize {
        2 * self.gru_hidden
    }

    pub fn validate(&self) -> Result<(), NumericError> {
        let bad = |msg: &str| Err(NumericError::Contract(msg.to_string()));
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.gru_hidden == 0
            || self.doc_dim == 0
            || self.max_len == 0
            || self.batch_size == 0
        {
            return bad("extractor dimensions must be positive");
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.len() != self.kernel_filters.len() {
            return bad("every convolution kernel needs exactly one filter count");
        }
        if self.kernel_sizes.contains(&0) || self.kernel_filters.contains(&0) || self.mlp_hidden.contains(&0) {
            return bad("extractor layer widths must be positive");
        }
        Ok(())
    }
}

/// Gate names of one GRU direction, in the order `z, r, h`.
const GATES: [&str; 3] = ["z", "r", "h"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn prefix(self) -> &'static str {
        match self {
            Direction::Forward => "gru_fwd",
            Direction::Backward => "gru_bwd",
        }
    }
}

/// Context vectors and document vector as plain values, for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentEncoding {
    /// `h_t` for every sentence, each `2 * gru_hidden` long.
    pub context: Vec<Vec<f64>>,
    pub doc: Vec<f64>,
    /// `tanh(W_g h_t)`: what selecting sentence `t` adds to `g`.
    pub selection: Vec<Vec<f64>>,
}

impl DocumentEncoding {
    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }
}

/// Graph nodes of an encoded document.
#[derive(Clone, Debug)]
pub struct EncodedDocument {
    pub context: Vec<Var>,
    pub doc: Var,
}

/// A document with its per-sentence extraction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDocument {
    pub doc: Document,
    pub labels: Vec<bool>,
}

/// `g_t = g_{t-1} + y_t · tanh(W_g h_t)`, with the `tanh` term supplied.
pub fn selection_update(g_prev: &[f64], selection: &[f64], selected: bool) -> Vec<f64> {
    if selected {
        g_prev.iter().zip(selection).map(|(a, b)| a + b).collect()
    } else {
        g_prev.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub config: ExtractorConfig,
    pub params: ParamStore,
}

impl Extractor {
    pub fn layout(config: &ExtractorConfig) -> Result<Layout, NumericError> {
        config.validate()?;
        let (e, f, h, c) = (
            config.embed_dim,
            config.feature_dim(),
            config.gru_hidden,
            config.context_dim(),
        );
        let mut out = vec![("embedding".to_string(), vec![config.vocab_size, e], Init::Uniform(EMBED_SCALE))];
        for (j, (&k, &filters)) in config.kernel_sizes.iter().zip(&config.kernel_filters).enumerate() {
            out.push((format!("conv{j}.w"), vec![k * e, filters], Init::Glorot));
            out.push((format!("conv{j}.b"), vec![filters], Init::Zeros));
        }
        for dir in [Direction::Forward, Direction::Backward] {
            let p = dir.prefix();
            for gate in GATES {
                out.push((format!("{p}.w_{gate}"), vec![f, h], Init::Glorot));
                out.push((format!("{p}.v_{gate}"), vec![h, h], Init::Glorot));
                out.push((format!("{p}.b_{gate}"), vec![h], Init::Zeros));
            }
        }
        out.push(("doc.w".to_string(), vec![c, config.doc_dim], Init::Glorot));
        out.push(("doc.b".to_string(), vec![config.doc_dim], Init::Zeros));
        out.push(("select.w".to_string(), vec![c, c], Init::Glorot));
        let mut width = 2 * c + config.doc_dim;
        for (i, &units) in config.mlp_hidden.iter().enumerate() {
            out.push((format!("mlp.{i}.w"), vec![width, units], Init::Glorot));
            out.push((format!("mlp.{i}.b"), vec![units], Init::Zeros));
            width = units;
        }
        out.push(("out.w".to_string(), vec![width, 1], Init::Glorot));
        out.push(("out.b".to_string(), vec![1], Init::Zeros));
        Ok(out)
    }

    pub fn init<R: Rng + ?Sized>(config: ExtractorConfig, rng: &mut R) -> Result<Self, NumericError> {
        let params = init_layout(&Extractor::layout(&config)?, rng)?;
        Ok(Extractor { config, params })
    }

    pub fn from_params(config: ExtractorConfig, params: ParamStore) -> Result<Self, NumericError> {
        check_layout(&Extractor::layout(&config)?, &params)?;
        Ok(Extractor { config, params })
    }

    fn check_sentence(&self, s: &Sentence) -> Result<usize, NumericError> {
        if s.ids.len() != self.config.max_len {
            return Err(NumericError::Shape {
                op: "extractor input",
                lhs: vec![s.ids.len()],
                rhs: vec![self.config.max_len],
            });
        }
        let m = s.encoded_len();
        if m == 0 {
            return Err(NumericError::Contract("cannot encode an empty sentence".into()));
        }
        if let Some(&bad) = s.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(NumericError::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(m)
    }

    /// Word features `[sum m, F]` of several sentences stacked, with each
    /// sentence's row range. Windows running past a sentence's last real
    /// token read zeros.
    fn stacked_word_features(
        &self,
        g: &mut Graph<'_>,
        sentences: &[&Sentence],
    ) -> Result<(Var, Vec<(usize, usize)>), NumericError> {
        let e = self.config.embed_dim;
        let mut segments = Vec::with_capacity(sentences.len());
        let mut rows = 0;
        for s in sentences {
            let m = self.check_sentence(s)?;
            segments.push((rows, m));
            rows += m;
        }
        let table = g.param("embedding")?;
        let mut parts = Vec::with_capacity(self.config.kernel_sizes.len());
        for (j, &k) in self.config.kernel_sizes.iter().enumerate() {
            let mut index = Vec::with_capacity(rows * k * e);
            for (s, &(_, m)) in sentences.iter().zip(&segments) {
                for i in 0..m {
                    for pos in i..i + k {
                        if pos < m {
                            let base = s.ids[pos] as usize * e;
                            index.extend((base..base + e).map(Some));
                        } else {
                            index.extend(std::iter::repeat_n(None, e));
                        }
                    }
                }
            }
            let windows = g.gather(table, index, vec![rows, k * e])?;
            let w = g.param(&format!("conv{j}.w"))?;
            let b = g.param(&format!("conv{j}.b"))?;
            parts.push(g.linear(windows, w, b)?);
        }
        Ok((g.concat(&parts)?, segments))
    }

    /// Word features `[m, F]` of one sentence and their mean `[F]`.
    pub fn word_features(&self, g: &mut Graph<'_>, s: &Sentence) -> Result<(Var, Var), NumericError> {
        let (feats, _) = self.stacked_word_features(g, &[s])?;
        let mean = g.mean_rows(feats)?;
        Ok((feats, mean))
    }

    /// One GRU step. `x` is a sentence vector, `h_prev` the previous state.
    pub fn gru_cell(&self, g: &mut Graph<'_>, x: Var, h_prev: Var, dir: Direction) -> Result<Var, NumericError> {
        let p = dir.prefix();
        let gate = |g: &mut Graph<'_>, name: &str, state: Var| -> Result<Var, NumericError> {
            let w = g.param(&format!("{p}.w_{name}"))?;
            let v = g.param(&format!("{p}.v_{name}"))?;
            let b = g.param(&format!("{p}.b_{name}"))?;
            let xw = g.linear(x, w, b)?;
            let hv = g.matmul(state, v)?;
            g.add(xw, hv)
        };
        let z = gate(g, "z", h_prev)?;
        let z = g.sigmoid(z);
        let r = gate(g, "r", h_prev)?;
        let r = g.sigmoid(r);
        let reset = g.mul(r, h_prev)?;
        let cand = gate(g, "h", reset)?;
        let cand = g.tanh(cand);
        let neg_z = g.scale(z, -1.0);
        let keep = g.offset(neg_z, 1.0);
        let fresh = g.mul(keep, cand)?;
        let carried = g.mul(z, h_prev)?;
        g.add(fresh, carried)
    }

    /// Runs `dir` over the sentence vectors from a zero state; the result is
    /// indexed by sentence position in both directions.
    fn run_gru(&self, g: &mut Graph<'_>, xs: &[Var], dir: Direction) -> Result<Vec<Var>, NumericError> {
        let n = xs.len();
        let mut state = g.constant(Tensor::zeros(&[self.config.gru_hidden]));
        let mut out = vec![state; n];
        let order: Vec<usize> = match dir {
            Direction::Forward => (0..n).collect(),
            Direction::Backward => (0..n).rev().collect(),
        };
        for t in order {
            state = self.gru_cell(g, xs[t], state, dir)?;
            out[t] = state;
        }
        Ok(out)
    }

    pub fn encode(&self, g: &mut Graph<'_>, doc: &Document) -> Result<EncodedDocument, NumericError> {
        if doc.is_empty() {
            return Err(NumericError::Contract(format!("document `{}` has no sentences", doc.id)));
        }
        let refs: Vec<&Sentence> = doc.sentences.iter().collect();
        let (feats, segments) = self.stacked_word_features(g, &refs)?;
        let sv = g.segment_mean(feats, segments)?;
        let xs = (0..doc.len()).map(|t| g.row(sv, t)).collect::<Result<Vec<_>, _>>()?;
        let fwd = self.run_gru(g, &xs, Direction::Forward)?;
        let bwd = self.run_gru(g, &xs, Direction::Backward)?;
        let mut context = Vec::with_capacity(doc.len());
        let mut sum = None;
        for (f, b) in fwd.into_iter().zip(bwd) {
            let h = g.concat(&[f, b])?;
            sum = Some(match sum {
                None => h,
                Some(acc) => g.add(acc, h)?,
            });
            context.push(h);
        }
        let mean = g.scale(sum.expect("non-empty document"), 1.0 / doc.len() as f64);
        let (w, b) = (g.param("doc.w")?, g.param("doc.b")?);
        let d = g.linear(mean, w, b)?;
        let doc_vec = g.tanh(d);
        Ok(EncodedDocument { context, doc: doc_vec })
    }

    /// `tanh(W_g h_t)`.
    pub fn selection_term(&self, g: &mut Graph<'_>, h: Var) -> Result<Var, NumericError> {
        let w = g.param("select.w")?;
        let y = g.matmul(h, w)?;
        Ok(g.tanh(y))
    }

    /// Logit of extracting the sentence with context `h` given selection
    /// state `g_prev` and document vector `d`.
    pub fn logit(&self, g: &mut Graph<'_>, h: Var, g_prev: Var, d: Var) -> Result<Var, NumericError> {
        let mut x = g.concat(&[h, g_prev, d])?;
        for i in 0..self.config.mlp_hidden.len() {
            let w = g.param(&format!("mlp.{i}.w"))?;
            let b = g.param(&format!("mlp.{i}.b"))?;
            let y = g.linear(x, w, b)?;
            x = g.tanh(y);
        }
        let (w, b) = (g.param("out.w")?, g.param("out.b")?);
        g.linear(x, w, b)
    }

    /// Encodes `doc` and reads out plain values for stepwise decoding.
    pub fn encode_document(&self, doc: &Document) -> Result<DocumentEncoding, NumericError> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode(&mut g, doc)?;
        let mut selection = Vec::with_capacity(doc.len());
        for &h in &enc.context {
            let s = self.selection_term(&mut g, h)?;
            selection.push(g.value(s).data().to_vec());
        }
        Ok(DocumentEncoding {
            context: enc.context.iter().map(|&h| g.value(h).data().to_vec()).collect(),
            doc: g.value(enc.doc).data().to_vec(),
            selection,
        })
    }

    /// Extraction logit of sentence `t` given the selection state `g_prev`.
    pub fn step_logit(&self, enc: &DocumentEncoding, t: usize, g_prev: &[f64]) -> Result<f64, NumericError> {
        let h = enc.context.get(t).ok_or_else(|| {
            NumericError::Contract(format!("step {t} beyond document of {} sentences", enc.len()))
        })?;
        let mut g = Graph::new(&self.params);
        let h = g.constant(Tensor::vector(h.clone()));
        let gp = g.constant(Tensor::vector(g_prev.to_vec()));
        let d = g.constant(Tensor::vector(enc.doc.clone()));
        let l = self.logit(&mut g, h, gp, d)?;
        Ok(g.scalar(l))
    }

    pub fn extraction_probability(
        &self,
        enc: &DocumentEncoding,
        t: usize,
        g_prev: &[f64],
    ) -> Result<f64, NumericError> {
        Ok(numeric::sigmoid(self.step_logit(enc, t, g_prev)?))
    }

    /// `Σ_t w_t · log π(y_t | state_t)` where the state follows the given
    /// decisions. Shared by supervised pretraining (teacher forcing) and the
    /// policy-gradient surrogate.
    pub fn weighted_log_likelihood(
        &self,
        g: &mut Graph<'_>,
        doc: &Document,
        decisions: &[bool],
        weights: &[f64],
    ) -> Result<Var, NumericError> {
        if decisions.len() != doc.len() || weights.len() != doc.len() {
            return Err(NumericError::Shape {
                op: "decision sequence",
                lhs: vec![decisions.len(), weights.len()],
                rhs: vec![doc.len()],
            });
        }
        let enc = self.encode(g, doc)?;
        let mut state = g.constant(Tensor::zeros(&[self.config.context_dim()]));
        let mut total = None;
        for (t, (&y, &w)) in decisions.iter().zip(weights).enumerate() {
            let logit = self.logit(g, enc.context[t], state, enc.doc)?;
            let signed = if y { logit } else { g.scale(logit, -1.0) };
            let lp = g.log_sigmoid(signed);
            let term = g.scale(lp, w);
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
            if y {
                let s = self.selection_term(g, enc.context[t])?;
                state = g.add(state, s)?;
            }
        }
        Ok(total.expect("non-empty document"))
    }

    /// Teacher-forced negative log-likelihood of `labels`.
    pub fn pretrain_loss(&self, g: &mut Graph<'_>, doc: &Document, labels: &[bool]) -> Result<Var, NumericError> {
        let ones = vec![1.0; labels.len()];
        let ll = self.weighted_log_likelihood(g, doc, labels, &ones)?;
        Ok(g.scale(ll, -1.0))
    }

    /// Teacher-forced extraction probabilities of every sentence.
    pub fn teacher_forced_probabilities(&self, doc: &Document, labels: &[bool]) -> Result<Vec<f64>, NumericError> {
        if labels.len() != doc.len() {
            return Err(NumericError::Shape {
                op: "label sequence",
                lhs: vec![labels.len()],
                rhs: vec![doc.len()],
            });
        }
        let enc = self.encode_document(doc)?;
        let mut state = vec![0.0; self.config.context_dim()];
        let mut probs = Vec::with_capacity(doc.len());
        for (t, &y) in labels.iter().enumerate() {
            probs.push(self.extraction_probability(&enc, t, &state)?);
            state = selection_update(&state, &enc.selection[t], y);
        }
        Ok(probs)
    }

    /// Minibatch SGD on the mean pretraining loss for `config.epochs` passes.
    pub fn pretrain<R: Rng + ?Sized>(
        &mut self,
        data: &[LabeledDocument],
        rng: &mut R,
    ) -> Result<TrainingLog, NumericError> {
        self.pretrain_epochs(data, self.config.epochs, rng, |_, _| false)
    }

    /// Like [`Extractor::pretrain`] but calls `stop(epoch, model)` after each
    /// epoch and ends early when it returns true.
    pub fn pretrain_epochs<R, F>(
        &mut self,
        data: &[LabeledDocument],
        epochs: usize,
        rng: &mut R,
        mut stop: F,
    ) -> Result<TrainingLog, NumericError>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, &Extractor) -> bool,
    {
        if data.is_empty() {
            return Err(NumericError::Contract("no labeled documents to pretrain on".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = TrainingLog::default();
        for epoch in 0..epochs {
            order.shuffle(rng);
            let mut epoch_sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&LabeledDocument> = chunk.iter().map(|&i| &data[i]).collect();
                let (loss, grads) = numeric::batch_gradients(&self.params, &batch, |g, ex| {
                    self.pretrain_loss(g, &ex.doc, &ex.labels)
                })?;
                sgd_step(&mut self.params, &grads, self.config.lr)?;
                log.batch_losses.push(loss);
                epoch_sum += loss * chunk.len() as f64;
            }
            let mean = epoch_sum / data.len() as f64;
            info!("pretrain epoch {} mean loss {mean:.6}", epoch + 1);
            log.epoch_losses.push(mean);
            if stop(epoch, self) {
                break;
            }
        }
        Ok(log)
    }
}

/// Fraction of sentences whose teacher-forced prediction `p > 0.5` matches
/// the label.
pub fn label_agreement(model: &Extractor, data: &[LabeledDocument]) -> Result<f64, NumericError> {
    use rayon::prelude::*;
    let per_doc: Vec<Result<(usize, usize), NumericError>> = data
        .par_iter()
        .map(|ex| {
            let probs = model.teacher_forced_probabilities(&ex.doc, &ex.labels)?;
            let hits = probs.iter().zip(&ex.labels).filter(|(&p, &y)| (p > 0.5) == y).count();
            Ok((hits, probs.len()))
        })
        .collect();
    let (mut hits, mut total) = (0, 0);
    for r in per_doc {
        let (h, n) = r?;
        hits += h;
        total += n;
    }
    if total == 0 {
        return Err(NumericError::Contract("label agreement of an empty set".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Initializes an extractor and pretrains it on `data`.
pub fn pretrain<R: Rng + ?Sized>(
    data: &[LabeledDocument],
    config: ExtractorConfig,
    rng: &mut R,
) -> Result<(Extractor, TrainingLog), NumericError> {
    if data.is_empty() {
        return Err(NumericError::Contract("no labeled documents to pretrain on".into()));
    }
    let mut model = Extractor::init(config, rng)?;
    let log = model.pretrain(data, rng)?;
    Ok((model, log))
}
