//! Policy-gradient training of the extractor.
//!
//! An episode samples one extract/skip decision per sentence from the
//! current policy. Every selected sentence earns an immediate coherence
//! reward against the previously selected one (the first is scored against
//! a placeholder start sentence), and the finished summary earns the
//! combined ROUGE reward against the highlights.

use std::collections::VecDeque;

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coherence::CoherenceModel;
use crate::corpus::{flatten, Document, Sentence, PAD};
use crate::extractor::{selection_update, DocumentEncoding, Extractor};
use crate::numeric::{sgd_step, Gradients, Graph, NumericError, Var};
use crate::rouge::{combined_rouge, RewardWeights};

/// Discount factor. Rewards are never discounted.
pub const GAMMA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub weights: RewardWeights,
    pub steps: usize,
    /// Width of the moving averages reported while training.
    pub window: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            lambda: 0.01,
            alpha: 0.001,
            weights: RewardWeights::default(),
            steps: 10_000,
            window: 100,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), NumericError> {
        if self.lambda.is_nan() || self.lambda < 0.0 || self.alpha.is_nan() || self.alpha < 0.0 || self.window == 0 {
            return Err(NumericError::Contract(
                "lambda and alpha must be non-negative and the window positive".into(),
            ));
        }
        Ok(())
    }
}

/// Anything that can score how well sentence `b` follows sentence `a`.
pub trait CoherenceScorer {
    fn coherence(&self, a: &Sentence, b: &Sentence) -> Result<f64, NumericError>;
}

impl CoherenceScorer for CoherenceModel {
    /// Inputs are padded or truncated to the model's sentence length.
    fn coherence(&self, a: &Sentence, b: &Sentence) -> Result<f64, NumericError> {
        let len = self.config.max_len;
        self.score(&fit_ids(&a.ids, len), &fit_ids(&b.ids, len))
    }
}

fn fit_ids(ids: &[u32], len: usize) -> Vec<u32> {
    let mut out = ids[..ids.len().min(len)].to_vec();
    out.resize(len, PAD);
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Episode {
    pub decisions: Vec<bool>,
    /// Probability of the action actually taken at each step.
    pub probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub final_reward: f64,
    pub returns: Vec<f64>,
}

impl Episode {
    pub fn coherence_sum(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// `ROUGE + λ · Σ coherence`, the quantity whose expectation is ascended.
    pub fn objective(&self, lambda: f64) -> f64 {
        self.final_reward + lambda * self.coherence_sum()
    }
}

/// Samples decisions from `model` on an already encoded document.
pub fn sample_decisions<R: Rng + ?Sized>(
    model: &Extractor,
    enc: &DocumentEncoding,
    rng: &mut R,
) -> Result<Episode, NumericError> {
    let mut state = vec![0.0; model.config.context_dim()];
    let mut ep = Episode::default();
    for t in 0..enc.len() {
        let p = model.extraction_probability(enc, t, &state)?;
        let y = rng.gen::<f64>() < p;
        ep.decisions.push(y);
        ep.probs.push(if y { p } else { 1.0 - p });
        state = selection_update(&state, &enc.selection[t], y);
    }
    Ok(ep)
}

/// Samples one episode; rewards and returns are left empty.
pub fn sample_episode<R: Rng + ?Sized>(model: &Extractor, doc: &Document, rng: &mut R) -> Result<Episode, NumericError> {
    let enc = model.encode_document(doc)?;
    sample_decisions(model, &enc, rng)
}

/// Coherence of each selected sentence with the one selected before it,
/// zero for skipped sentences.
pub fn immediate_rewards<S: CoherenceScorer + ?Sized>(
    doc: &Document,
    decisions: &[bool],
    scorer: &S,
) -> Result<Vec<f64>, NumericError> {
    check_len(doc, decisions)?;
    let len = doc.sentences.first().map_or(1, |s| s.ids.len());
    let placeholder = Sentence::placeholder(len);
    let mut previous = &placeholder;
    let mut rewards = vec![0.0; decisions.len()];
    for (t, &y) in decisions.iter().enumerate() {
        if y {
            rewards[t] = scorer.coherence(previous, &doc.sentences[t])?;
            previous = &doc.sentences[t];
        }
    }
    Ok(rewards)
}

/// Combined ROUGE of the extracted sentences against the highlights.
pub fn final_reward(doc: &Document, decisions: &[bool], weights: RewardWeights) -> Result<f64, NumericError> {
    check_len(doc, decisions)?;
    let summary = flatten(doc.sentences.iter().zip(decisions).filter(|(_, &y)| y).map(|(s, _)| s));
    Ok(combined_rouge(&summary, &doc.reference_tokens(), weights))
}

/// `R_t = λ Σ_{i≥t} r_i + r_final`.
pub fn compute_returns(rewards: &[f64], r_final: f64, lambda: f64) -> Vec<f64> {
    let mut returns = vec![0.0; rewards.len()];
    let mut tail = 0.0;
    for t in (0..rewards.len()).rev() {
        tail = rewards[t] + GAMMA * tail;
        returns[t] = lambda * tail + r_final;
    }
    returns
}

/// Fills rewards and returns of a sampled episode. With `λ = 0` the
/// coherence scorer is never consulted.
pub fn score_episode<S: CoherenceScorer + ?Sized>(
    ep: &mut Episode,
    doc: &Document,
    scorer: &S,
    config: &RlConfig,
) -> Result<(), NumericError> {
    ep.rewards = if config.lambda == 0.0 {
        vec![0.0; ep.decisions.len()]
    } else {
        immediate_rewards(doc, &ep.decisions, scorer)?
    };
    ep.final_reward = final_reward(doc, &ep.decisions, config.weights)?;
    ep.returns = compute_returns(&ep.rewards, ep.final_reward, config.lambda);
    Ok(())
}

fn check_len(doc: &Document, decisions: &[bool]) -> Result<(), NumericError> {
    if decisions.len() != doc.len() {
        return Err(NumericError::Shape {
            op: "episode",
            lhs: vec![decisions.len()],
            rhs: vec![doc.len()],
        });
    }
    Ok(())
}

/// `-Σ_t R_t log π(y_t | s_t)`; descending it ascends the expected return.
pub fn surrogate_loss(g: &mut Graph<'_>, model: &Extractor, doc: &Document, ep: &Episode) -> Result<Var, NumericError> {
    if ep.returns.len() != ep.decisions.len() {
        return Err(NumericError::Contract("episode returns have not been computed".into()));
    }
    let ll = model.weighted_log_likelihood(g, doc, &ep.decisions, &ep.returns)?;
    Ok(g.scale(ll, -1.0))
}

/// Gradient of the surrogate loss at the current parameters.
pub fn surrogate_gradients(model: &Extractor, doc: &Document, ep: &Episode) -> Result<Gradients, NumericError> {
    let mut g = Graph::new(&model.params);
    let loss = surrogate_loss(&mut g, model, doc, ep)?;
    g.gradients(loss)
}

/// `Θ ← Θ + α Σ_t R_t ∇ log π(y_t | s_t)`, every term evaluated at the
/// pre-update parameters.
pub fn policy_gradient_step(model: &mut Extractor, doc: &Document, ep: &Episode, alpha: f64) -> Result<(), NumericError> {
    let grads = surrogate_gradients(model, doc, ep)?;
    sgd_step(&mut model.params, &grads, alpha)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub doc_index: usize,
    pub rouge: f64,
    pub coherence: f64,
    pub objective: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RlLog {
    pub steps: Vec<StepRecord>,
}

impl RlLog {
    /// Mean objective of the last `window` steps.
    pub fn moving_average(&self, window: usize) -> Option<f64> {
        let tail = &self.steps[self.steps.len().saturating_sub(window)..];
        (!tail.is_empty()).then(|| tail.iter().map(|s| s.objective).sum::<f64>() / tail.len() as f64)
    }
}

/// REINFORCE with one update per sampled episode. Documents are drawn
/// uniformly with replacement.
pub fn train_rnes<S, R>(
    model: &mut Extractor,
    docs: &[Document],
    scorer: &S,
    config: &RlConfig,
    rng: &mut R,
) -> Result<RlLog, NumericError>
where
    S: CoherenceScorer + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    if docs.is_empty() {
        return Err(NumericError::Contract("no documents to train on".into()));
    }
    let mut log = RlLog::default();
    let mut recent: VecDeque<(f64, f64, f64)> = VecDeque::with_capacity(config.window);
    let mut sums = (0.0, 0.0, 0.0);
    for step in 0..config.steps {
        let doc_index = rng.gen_range(0..docs.len());
        let doc = &docs[doc_index];
        let mut ep = sample_episode(model, doc, rng)?;
        score_episode(&mut ep, doc, scorer, config)?;
        policy_gradient_step(model, doc, &ep, config.alpha)?;

        let entry = (ep.final_reward, ep.coherence_sum(), ep.objective(config.lambda));
        if recent.len() == config.window {
            let old = recent.pop_front().expect("full window");
            sums = (sums.0 - old.0, sums.1 - old.1, sums.2 - old.2);
        }
        recent.push_back(entry);
        sums = (sums.0 + entry.0, sums.1 + entry.1, sums.2 + entry.2);
        let k = recent.len() as f64;
        info!(
            "step {} rouge {:.4} coherence {:.4} objective {:.4} | avg rouge {:.4} coherence {:.4} objective {:.4}",
            step + 1,
            entry.0,
            entry.1,
            entry.2,
            sums.0 / k,
            sums.1 / k,
            sums.2 / k
        );
        log.steps.push(StepRecord {
            step,
            doc_index,
            rouge: entry.0,
            coherence: entry.1,
            objective: entry.2,
        });
    }
    Ok(log)
}

/// Monte Carlo estimate of the expected objective over `docs`, with
/// `episodes` samples per document. Returns `(mean, standard error)`.
pub fn expected_objective<S, R>(
    model: &Extractor,
    docs: &[Document],
    scorer: &S,
    config: &RlConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<(f64, f64), NumericError>
where
    S: CoherenceScorer + ?Sized,
    R: Rng + ?Sized,
{
    let mut values = Vec::with_capacity(docs.len() * episodes);
    for doc in docs {
        let enc = model.encode_document(doc)?;
        for _ in 0..episodes {
            let mut ep = sample_decisions(model, &enc, rng)?;
            score_episode(&mut ep, doc, scorer, config)?;
            values.push(ep.objective(config.lambda));
        }
    }
    if values.is_empty() {
        return Err(NumericError::Contract("no episodes sampled".into()));
    }
    Ok(mean_and_stderr(&values))
}

/// Sample mean and its standard error.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
