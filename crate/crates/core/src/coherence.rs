//! Cross-sentence coherence scorer.
//!
//! Layer 1 scores every pair of `window`-word segments of the two sentences
//! with a shared ReLU unit bank, giving a `T x T x F` interaction grid
//! (`T = max_len - window + 1`). Each convolution layer is followed by 2x2
//! max pooling; layers after the first are 3x3 valid convolutions over the
//! grid. The flattened result passes through ReLU fully-connected layers
//! and a final `tanh` unit, so scores lie in (-1, 1).

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CoherenceTriplet, Sentence};
use crate::numeric::{
    self, check_layout, init_layout, sgd_step, Graph, Init, Layout, NumericError, ParamStore, Var, EMBED_SCALE,
};

/// Spatial size of the kernels of the second and later conv layers.
const KERNEL: usize = 3;
/// Initial bias of every ReLU layer. Zero biases let a whole layer die
/// early in training, after which the score is constant.
pub const RELU_BIAS: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub window: usize,
    pub conv_filters: Vec<usize>,
    pub fc_units: Vec<usize>,
    pub max_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl CoherenceConfig {
    pub fn new(vocab_size: usize) -> Self {
        CoherenceConfig {
            vocab_size,
            embed_dim: 64,
            window: 3,
            conv_filters: vec![128, 256, 512],
            fc_units: vec![512, 256],
            max_len: 50,
            lr: 0.1,
            batch_size: 64,
            epochs: 5,
        }
    }

    /// Grid side lengths after each conv and pool, ending with the
    /// flattened feature size.
    pub fn layer_sizes(&self) -> Result<LayerSizes, NumericError> {
        let bad = |msg: String| Err(NumericError::Contract(msg));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.window == 0 || self.batch_size == 0 {
            return bad("coherence dimensions must be positive".into());
        }
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) || self.fc_units.contains(&0) {
            return bad("coherence layer widths must be positive".into());
        }
        if self.max_len < self.window {
            return bad(format!(
                "max_len {} is shorter than the window {}",
                self.max_len, self.window
            ));
        }
        let mut side = self.max_len - self.window + 1;
        let mut sides = vec![side];
        for (layer, _) in self.conv_filters.iter().enumerate() {
            if layer > 0 {
                if side < KERNEL {
                    return bad(format!("grid of side {side} too small for conv layer {}", layer + 1));
                }
                side = side - KERNEL + 1;
                sides.push(side);
            }
            if side < 2 {
                return bad(format!("grid of side {side} too small to pool after layer {}", layer + 1));
            }
            side /= 2;
            sides.push(side);
        }
        let flat = side * side * self.conv_filters.last().unwrap();
        Ok(LayerSizes { sides, flat })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSizes {
    /// Grid side after layer 1, then after every pool / conv in order.
    pub sides: Vec<usize>,
    pub flat: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceModel {
    pub config: CoherenceConfig,
    pub params: ParamStore,
}

fn conv_w(layer: usize) -> String {
    format!("conv{layer}.w")
}
fn conv_b(layer: usize) -> String {
    format!("conv{layer}.b")
}
fn fc_w(layer: usize) -> String {
    format!("fc{layer}.w")
}
fn fc_b(layer: usize) -> String {
    format!("fc{layer}.b")
}

impl CoherenceModel {
    /// Every parameter with its shape and initializer. ReLU layers start
    /// with a small positive bias so no unit begins dead; the output bias
    /// starts at zero.
    pub fn layout(config: &CoherenceConfig) -> Result<Layout, NumericError> {
        let sizes = config.layer_sizes()?;
        let (de, k) = (config.embed_dim, config.window);
        let mut out = vec![("embedding".to_string(), vec![config.vocab_size, de], Init::Uniform(EMBED_SCALE))];
        let mut channels = 0;
        for (layer, &filters) in config.conv_filters.iter().enumerate() {
            let fan_in = if layer == 0 {
                2 * k * de
            } else {
                KERNEL * KERNEL * channels
            };
            out.push((conv_w(layer), vec![fan_in, filters], Init::Glorot));
            out.push((conv_b(layer), vec![filters], Init::Constant(RELU_BIAS)));
            channels = filters;
        }
        let mut width = sizes.flat;
        for (layer, &units) in config.fc_units.iter().enumerate() {
            out.push((fc_w(layer), vec![width, units], Init::Glorot));
            out.push((fc_b(layer), vec![units], Init::Constant(RELU_BIAS)));
            width = units;
        }
        out.push(("out.w".to_string(), vec![width, 1], Init::Glorot));
        out.push(("out.b".to_string(), vec![1], Init::Zeros));
        Ok(out)
    }

    pub fn init<R: Rng + ?Sized>(config: CoherenceConfig, rng: &mut R) -> Result<Self, NumericError> {
        let params = init_layout(&CoherenceModel::layout(&config)?, rng)?;
        Ok(CoherenceModel { config, params })
    }

    /// Wraps existing parameters after checking every shape against `config`.
    pub fn from_params(config: CoherenceConfig, params: ParamStore) -> Result<Self, NumericError> {
        check_layout(&CoherenceModel::layout(&config)?, &params)?;
        Ok(CoherenceModel { config, params })
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), NumericError> {
        if ids.len() != self.config.max_len {
            return Err(NumericError::Shape {
                op: "coherence input",
                lhs: vec![ids.len()],
                rhs: vec![self.config.max_len],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(NumericError::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// `[T, window * embed_dim]`: row `i` holds the embeddings of
    /// `ids[i..i + window]` side by side.
    fn windows(&self, g: &mut Graph<'_>, ids: &[u32]) -> Result<Var, NumericError> {
        let (de, k) = (self.config.embed_dim, self.config.window);
        let t = ids.len() - k + 1;
        let table = g.param("embedding")?;
        let mut index = Vec::with_capacity(t * k * de);
        for i in 0..t {
            for &id in &ids[i..i + k] {
                let base = id as usize * de;
                index.extend((base..base + de).map(Some));
            }
        }
        g.gather(table, index, vec![t, k * de])
    }

    /// Layer-1 interaction grid `[T, T, F1]`: cell `(i, j)` is
    /// `ReLU(W1 · [e(a_i..a_{i+k-1}); e(b_j..b_{j+k-1})] + b1)`.
    pub fn interaction_layer1(&self, g: &mut Graph<'_>, sa: &[u32], sb: &[u32]) -> Result<Var, NumericError> {
        self.check_ids(sa)?;
        self.check_ids(sb)?;
        let half = self.config.window * self.config.embed_dim;
        let filters = self.config.conv_filters[0];
        let w = g.param(&conv_w(0))?;
        // W1 = [W_top; W_bottom] acting on the concatenated windows.
        let w_top = g.gather(w, (0..half * filters).map(Some).collect(), vec![half, filters])?;
        let w_bot = g.gather(
            w,
            (half * filters..2 * half * filters).map(Some).collect(),
            vec![half, filters],
        )?;
        let wa = self.windows(g, sa)?;
        let wb = self.windows(g, sb)?;
        let a = g.matmul(wa, w_top)?;
        let b = g.matmul(wb, w_bot)?;
        let grid = g.pairwise_sum(a, b)?;
        let bias = g.param(&conv_b(0))?;
        let grid = g.add_bias(grid, bias)?;
        Ok(g.relu(grid))
    }

    /// 3x3 valid convolution with ReLU over a `[h, w, c]` grid.
    fn conv3x3(&self, g: &mut Graph<'_>, x: Var, layer: usize) -> Result<Var, NumericError> {
        let shape = g.shape(x).to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (h - KERNEL + 1, w - KERNEL + 1);
        let mut index = Vec::with_capacity(oh * ow * KERNEL * KERNEL * c);
        for i in 0..oh {
            for j in 0..ow {
                for di in 0..KERNEL {
                    for dj in 0..KERNEL {
                        let base = ((i + di) * w + j + dj) * c;
                        index.extend((base..base + c).map(Some));
                    }
                }
            }
        }
        let cols = g.gather(x, index, vec![oh * ow, KERNEL * KERNEL * c])?;
        let (wv, bv) = (g.param(&conv_w(layer))?, g.param(&conv_b(layer))?);
        let y = g.linear(cols, wv, bv)?;
        let filters = g.shape(y)[1];
        let y = g.reshape(y, vec![oh, ow, filters])?;
        Ok(g.relu(y))
    }

    /// Pre-`tanh` score of the pair.
    pub fn logit(&self, g: &mut Graph<'_>, sa: &[u32], sb: &[u32]) -> Result<Var, NumericError> {
        let mut x = self.interaction_layer1(g, sa, sb)?;
        x = g.max_pool_2x2(x)?;
        for layer in 1..self.config.conv_filters.len() {
            x = self.conv3x3(g, x, layer)?;
            x = g.max_pool_2x2(x)?;
        }
        let n = g.value(x).numel();
        x = g.reshape(x, vec![n])?;
        for layer in 0..self.config.fc_units.len() {
            let (w, b) = (g.param(&fc_w(layer))?, g.param(&fc_b(layer))?);
            let y = g.linear(x, w, b)?;
            x = g.relu(y);
        }
        let (w, b) = (g.param("out.w")?, g.param("out.b")?);
        g.linear(x, w, b)
    }

    /// `Coh(S_A, S_B) = tanh(W_c h + b_c)` as a graph node.
    pub fn forward(&self, g: &mut Graph<'_>, sa: &[u32], sb: &[u32]) -> Result<Var, NumericError> {
        let l = self.logit(g, sa, sb)?;
        Ok(g.tanh(l))
    }

    pub fn score(&self, sa: &[u32], sb: &[u32]) -> Result<f64, NumericError> {
        let mut g = Graph::new(&self.params);
        let s = self.forward(&mut g, sa, sb)?;
        Ok(g.scalar(s))
    }

    pub fn score_sentences(&self, a: &Sentence, b: &Sentence) -> Result<f64, NumericError> {
        self.score(&a.ids, &b.ids)
    }

    /// `max(0, 1 + Coh(a, neg) - Coh(a, pos))` as a graph node.
    pub fn triplet_loss(&self, g: &mut Graph<'_>, t: &CoherenceTriplet) -> Result<Var, NumericError> {
        let pos = self.forward(g, &t.anchor.ids, &t.positive.ids)?;
        let neg = self.forward(g, &t.anchor.ids, &t.negative.ids)?;
        let diff = g.sub(neg, pos)?;
        let margin = g.offset(diff, 1.0);
        Ok(g.relu(margin))
    }

    pub fn mean_loss(&self, triplets: &[CoherenceTriplet]) -> Result<f64, NumericError> {
        numeric::batch_loss(&self.params, triplets, |g, t| self.triplet_loss(g, t))
    }

    /// Minibatch SGD on the mean hinge loss for `config.epochs` passes,
    /// reshuffling every epoch. Returns the loss of each batch measured
    /// before its update.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        triplets: &[CoherenceTriplet],
        rng: &mut R,
    ) -> Result<TrainingLog, NumericError> {
        if triplets.is_empty() {
            return Err(NumericError::Contract("no coherence triplets to train on".into()));
        }
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        let mut log = TrainingLog::default();
        for epoch in 0..self.config.epochs {
            order.shuffle(rng);
            let mut epoch_sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&CoherenceTriplet> = chunk.iter().map(|&i| &triplets[i]).collect();
                let (loss, grads) =
                    numeric::batch_gradients(&self.params, &batch, |g, t| self.triplet_loss(g, t))?;
                sgd_step(&mut self.params, &grads, self.config.lr)?;
                log.batch_losses.push(loss);
                epoch_sum += loss * chunk.len() as f64;
            }
            let mean = epoch_sum / triplets.len() as f64;
            info!("coherence epoch {} mean hinge loss {mean:.6}", epoch + 1);
            log.epoch_losses.push(mean);
        }
        Ok(log)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub batch_losses: Vec<f64>,
    /// Mean pre-update batch loss per epoch, weighted by batch size.
    pub epoch_losses: Vec<f64>,
}

pub fn hinge_loss(coh_pos: f64, coh_neg: f64) -> f64 {
    (1.0 + coh_neg - coh_pos).max(0.0)
}

/// Initializes a model from `config` and trains it on `triplets`.
pub fn train_coherence<R: Rng + ?Sized>(
    triplets: &[CoherenceTriplet],
    config: CoherenceConfig,
    rng: &mut R,
) -> Result<(CoherenceModel, TrainingLog), NumericError> {
    if triplets.is_empty() {
        return Err(NumericError::Contract("no coherence triplets to train on".into()));
    }
    let mut model = CoherenceModel::init(config, rng)?;
    let log = model.train(triplets, rng)?;
    Ok((model, log))
}

/// Fraction of triplets scored `Coh(a, pos) > Coh(a, neg)`. Ties count as
/// errors.
pub fn pairwise_accuracy(model: &CoherenceModel, triplets: &[CoherenceTriplet]) -> Result<f64, NumericError> {
    use rayon::prelude::*;
    if triplets.is_empty() {
        return Err(NumericError::Contract("pairwise accuracy of an empty set".into()));
    }
    let correct: Vec<Result<bool, NumericError>> = triplets
        .par_iter()
        .map(|t| {
            let pos = model.score(&t.anchor.ids, &t.positive.ids)?;
            let neg = model.score(&t.anchor.ids, &t.negative.ids)?;
            Ok(pos > neg)
        })
        .collect();
    let mut hits = 0usize;
    for c in correct {
        hits += usize::from(c?);
    }
    Ok(hits as f64 / triplets.len() as f64)
}
