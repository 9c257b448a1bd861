//! Pairwise preference training for plain, MoE, and adapter reward models.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rmroute_autograd::rng::{self, StreamRng};
use rmroute_autograd::{AdamWConfig, Graph, OptimizerState, TensorMap, Var};
use serde::{Deserialize, Serialize};

use crate::data::RewardExample;
use crate::encoder::{
    encode_batch, head_outputs, init_weights, tokenize, Batch, EncoderConfig, Mode, ModelWeights,
    Params, TokenSequence, Trainable, Vocab,
};
use crate::error::{Error, Result};
use crate::lora::{attach_adapter, AdapterSpec, AdapterWeights};
use crate::moe::{init_moe_weights, moe_forward, MoeConfig};

/// `−log σ(r_chosen − r_rejected)` as `max(−Δ, 0) + ln(1 + e^{−|Δ|})`.
pub fn pairwise_loss(r_chosen: f64, r_rejected: f64) -> Result<f64> {
    if !r_chosen.is_finite() || !r_rejected.is_finite() {
        return Err(Error::NonFinite(r_chosen, r_rejected));
    }
    let d = r_chosen - r_rejected;
    Ok((-d).max(0.0) + (-d.abs()).exp().ln_1p())
}

/// `∂ loss / ∂Δ = σ(Δ) − 1`.
pub fn pairwise_loss_grad(delta: f64) -> f64 {
    let s = if delta >= 0.0 {
        1.0 / (1.0 + (-delta).exp())
    } else {
        let e = delta.exp();
        e / (1.0 + e)
    };
    s - 1.0
}

/// Mean pairwise loss over a `[2b, 1]` reward column: the b chosen
/// rewards, then the b rejected ones.
pub fn pairwise_loss_var(g: &mut Graph, rewards: Var, b: usize) -> Result<Var> {
    let rc = g.gather_rows(rewards, &(0..b).collect::<Vec<_>>())?;
    let rr = g.gather_rows(rewards, &(b..2 * b).collect::<Vec<_>>())?;
    let d = g.sub(rc, rr)?;
    let nd = g.neg(d);
    let per_pair = g.softplus(nd);
    Ok(g.mean(per_pair))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMethod {
    Baseline,
    BaseLora,
    More,
    PerDomain,
    PerDomainLora,
}

impl TrainMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::BaseLora => "base-lora",
            Self::More => "more",
            Self::PerDomain => "per-domain",
            Self::PerDomainLora => "per-domain-lora",
        }
    }

    pub fn is_per_domain(self) -> bool {
        matches!(self, Self::PerDomain | Self::PerDomainLora)
    }

    pub fn uses_adapter(self) -> bool {
        matches!(self, Self::BaseLora | Self::PerDomainLora)
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Self::Baseline,
            Self::BaseLora,
            Self::More,
            Self::PerDomain,
            Self::PerDomainLora,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown training method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: TrainMethod,
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl TrainConfig {
    /// Desk-scale defaults for a from-scratch tiny encoder.
    pub fn desk(method: TrainMethod, seed: u64) -> Self {
        Self {
            method,
            lr: 1e-3,
            batch_size: 16,
            epochs: 3,
            seed,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// Learning rate 5.0e-6, batch size 32, 3 epochs.
    pub fn paper(method: TrainMethod, seed: u64) -> Self {
        Self {
            lr: 5.0e-6,
            batch_size: 32,
            ..Self::desk(method, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} is not a finite non-negative number",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
}

impl TrainReport {
    /// Training wall-clock, the sum of the per-epoch times.
    pub fn seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    pub fn first_epoch_seconds(&self) -> f64 {
        self.epochs.first().map_or(0.0, |e| e.seconds)
    }

    /// One `epoch=… mean_loss=… seconds=…` line per epoch.
    pub fn log_lines(&self) -> Vec<String> {
        self.epochs
            .iter()
            .map(|e| {
                format!(
                    "epoch={} mean_loss={:.6} seconds={:.3}",
                    e.epoch, e.mean_loss, e.seconds
                )
            })
            .collect()
    }
}

/// Mini-batch loop: the index order is reshuffled every epoch from the
/// `(seed, "shuffle")` stream; `step` gets a batch of indices and the
/// dropout stream and returns the batch's mean loss.
pub(crate) fn run_epochs(
    n: usize,
    cfg: &TrainConfig,
    mut step: impl FnMut(&[usize], &mut StreamRng) -> Result<f32>,
) -> Result<TrainReport> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut dropout = rng::stream(cfg.seed, "dropout");
    let mut report = TrainReport::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let loss = step(chunk, &mut dropout)?;
            total += f64::from(loss) * chunk.len() as f64;
            report.steps += 1;
        }
        report.epochs.push(EpochStats {
            epoch,
            mean_loss: total / n as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

/// Tokenized chosen and rejected sequences of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTokens {
    pub chosen: TokenSequence,
    pub rejected: TokenSequence,
}

pub fn tokenize_pairs(data: &[RewardExample], vocab: &Vocab, max_len: usize) -> Vec<PairTokens> {
    data.iter()
        .map(|e| PairTokens {
            chosen: tokenize(&e.prompt, &e.chosen, vocab, max_len),
            rejected: tokenize(&e.prompt, &e.rejected, vocab, max_len),
        })
        .collect()
}

/// Starting point of a reward-model run.
#[derive(Clone, Copy, Debug)]
pub enum RewardInit<'a> {
    /// Fresh encoder with a scalar head, all of it trained.
    Plain(EncoderConfig),
    /// Fresh encoder with the MoE head, all of it trained.
    Moe(EncoderConfig, MoeConfig),
    /// Fresh adapter (with its own head) on a frozen backbone.
    Adapter(&'a ModelWeights, &'a AdapterSpec),
}

/// A trained reward model. Adapter models need their backbone to score.
#[derive(Clone, Debug, PartialEq)]
pub enum RewardModel {
    Plain(ModelWeights),
    Moe(ModelWeights, MoeConfig),
    Adapter(AdapterWeights),
}

impl RewardModel {
    pub fn content_hash(&self) -> String {
        match self {
            Self::Plain(w) | Self::Moe(w, _) => w.content_hash(),
            Self::Adapter(a) => a.content_hash(),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::Plain(w) | Self::Moe(w, _) => w.num_params(),
            Self::Adapter(a) => a.num_params(),
        }
    }
}

fn check_method(method: TrainMethod, init: &RewardInit<'_>) -> Result<()> {
    let ok = match init {
        RewardInit::Plain(_) => matches!(method, TrainMethod::Baseline | TrainMethod::PerDomain),
        RewardInit::Moe(..) => method == TrainMethod::More,
        RewardInit::Adapter(..) => method.uses_adapter(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "method `{method}` does not match the requested model architecture"
        )))
    }
}

fn check_single_domain(data: &[RewardExample]) -> Result<()> {
    let mut seen: Vec<String> = Vec::new();
    for e in data {
        if !seen.contains(&e.domain) {
            seen.push(e.domain.clone());
        }
    }
    if seen.len() > 1 {
        return Err(Error::DomainMixture(seen));
    }
    Ok(())
}

/// One mini-batch: chosen and rejected sequences packed together, mean
/// pairwise loss (plus the MoE auxiliary term), backward, AdamW.
fn reward_step(
    model: &mut RewardModel,
    backbone: Option<&ModelWeights>,
    pairs: &[&PairTokens],
    opt: &mut OptimizerState,
    rng: &mut StreamRng,
) -> Result<f32> {
    let b = pairs.len();
    let seqs: Vec<&TokenSequence> = pairs
        .iter()
        .map(|p| &p.chosen)
        .chain(pairs.iter().map(|p| &p.rejected))
        .collect();
    let mut g = Graph::new();
    let (loss, grads) = {
        let (mut p, enc, moe) = match &*model {
            RewardModel::Plain(w) => (
                Params::new(w.tensors(), None, Trainable::Base),
                w.config(),
                None,
            ),
            RewardModel::Moe(w, cfg) => (
                Params::new(w.tensors(), None, Trainable::Base),
                w.config(),
                Some(cfg),
            ),
            RewardModel::Adapter(a) => {
                let base = backbone.expect("adapter training needs a backbone");
                (
                    Params::new(base.tensors(), Some(a), Trainable::Adapter),
                    base.config(),
                    None,
                )
            }
        };
        let batch = Batch::pack(&seqs, enc)?;
        let mut mode = Mode::train(rng);
        let (rewards, aux) = match moe {
            Some(cfg) => {
                let out = moe_forward(&mut g, &mut p, enc, cfg, &batch, &mut mode)?;
                let aux = (cfg.load_balance > 0.0).then_some(out.aux);
                (out.rewards, aux)
            }
            None => {
                let pooled = encode_batch(&mut g, &mut p, enc, &batch, &mut mode)?;
                (head_outputs(&mut g, &mut p, pooled)?, None)
            }
        };
        let mut loss = pairwise_loss_var(&mut g, rewards, b)?;
        if let Some(aux) = aux {
            loss = g.add(loss, aux)?;
        }
        g.backward(loss)?;
        (g.item(loss), p.gradients(&g))
    };
    let names: Vec<String> = grads.keys().cloned().collect();
    let target: &mut TensorMap = match model {
        RewardModel::Plain(w) | RewardModel::Moe(w, _) => w.tensors_mut(),
        RewardModel::Adapter(a) => a.tensors_mut(),
    };
    opt.step(target, &grads, &names)?;
    Ok(loss)
}

/// Trains one reward model. Per-domain methods reject mixed-domain data;
/// adapter runs update only the adapter (including its head).
pub fn train_reward_model(
    data: &[RewardExample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    init: RewardInit<'_>,
) -> Result<(RewardModel, TrainReport)> {
    cfg.validate()?;
    check_method(cfg.method, &init)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("reward training data".into()));
    }
    if cfg.method.is_per_domain() {
        check_single_domain(data)?;
    }
    let (mut model, backbone) = match init {
        RewardInit::Plain(enc) => (RewardModel::Plain(init_weights(&enc, cfg.seed)?), None),
        RewardInit::Moe(enc, moe) => (
            RewardModel::Moe(init_moe_weights(&enc, &moe, cfg.seed)?, moe),
            None,
        ),
        RewardInit::Adapter(base, spec) => {
            let a = attach_adapter(base, spec, cfg.seed)?.with_head(
                base.config().hidden_dim,
                1,
                cfg.seed,
            )?;
            (RewardModel::Adapter(a), Some(base))
        }
    };
    let enc = match &model {
        RewardModel::Plain(w) | RewardModel::Moe(w, _) => *w.config(),
        RewardModel::Adapter(_) => *backbone.expect("set above").config(),
    };
    let pairs = tokenize_pairs(data, vocab, enc.max_sequence_length);
    let mut opt = OptimizerState::new(cfg.adamw());
    let report = run_epochs(pairs.len(), cfg, |idx, rng| {
        let batch: Vec<&PairTokens> = idx.iter().map(|&i| &pairs[i]).collect();
        reward_step(&mut model, backbone, &batch, &mut opt, rng)
    })?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainRun {
    pub domain: String,
    pub seed: u64,
    pub model: RewardModel,
    pub report: TrainReport,
}

/// Runs a rayon closure on a pool of `jobs` threads.
pub(crate) fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// One independent run per domain; domain `i` is seeded `cfg.seed + i`.
/// Runs may execute in parallel on `jobs` threads.
pub fn train_all_domains(
    parts: &[(String, Vec<RewardExample>)],
    vocab: &Vocab,
    cfg: &TrainConfig,
    init: RewardInit<'_>,
    jobs: usize,
) -> Result<Vec<DomainRun>> {
    if parts.is_empty() {
        return Err(Error::EmptyDataset("no domains".into()));
    }
    if let Some((d, _)) = parts.iter().find(|(_, ex)| ex.is_empty()) {
        return Err(Error::EmptyDataset(format!("domain `{d}` has no examples")));
    }
    let run = |(i, (domain, ex)): (usize, &(String, Vec<RewardExample>))| -> Result<DomainRun> {
        let seed = cfg.seed + i as u64;
        let c = TrainConfig { seed, ..*cfg };
        let (model, report) = train_reward_model(ex, vocab, &c, init)?;
        Ok(DomainRun {
            domain: domain.clone(),
            seed,
            model,
            report,
        })
    };
    with_jobs(jobs, || parts.par_iter().enumerate().map(run).collect())?
}
