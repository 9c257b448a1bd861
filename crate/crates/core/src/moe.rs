//! Sparse mixture-of-experts reward head: LN, noisy top-k gate, expert
//! FFNs evaluated only on routed inputs, LN, regression.

use std::cmp::Ordering;

use rmroute_autograd::rng::{self, StreamRng};
use rmroute_autograd::{Graph, Tensor, TensorMap, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode_batch, init_tensor_for, init_weights, Batch, EncoderConfig, Mode, ModelWeights, Params,
    TokenSequence, Trainable,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_dim: usize,
    /// Gaussian gate noise during training.
    pub gate_noise: bool,
    /// Keep gate noise on when scoring.
    pub eval_noise: bool,
    pub load_balance: f32,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            num_experts: 5,
            top_k: 2,
            expert_dim: 128,
            gate_noise: true,
            eval_noise: false,
            load_balance: 0.0,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::TopK {
                k: self.top_k,
                experts: self.num_experts,
            });
        }
        if self.expert_dim == 0 {
            return Err(Error::Config("expert_dim must be positive".into()));
        }
        if !(self.load_balance >= 0.0 && self.load_balance.is_finite()) {
            return Err(Error::Config(format!(
                "load-balance coefficient {} must be non-negative",
                self.load_balance
            )));
        }
        Ok(())
    }
}

/// Gate matrices, both `[hidden_dim, num_experts]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    pub wg: Tensor,
    pub wnoise: Tensor,
}

impl GateWeights {
    pub fn from_map(t: &TensorMap) -> Result<Self> {
        let gw = Self {
            wg: t.get("moe.gate.Wg")?.clone(),
            wnoise: t.get("moe.gate.Wnoise")?.clone(),
        };
        if gw.wg.shape() != gw.wnoise.shape() || !gw.wg.is_finite() || !gw.wnoise.is_finite() {
            return Err(Error::Config(
                "gate matrices differ in shape or are not finite".into(),
            ));
        }
        Ok(gw)
    }
}

/// Expert FFN: `w1 [expert_dim, hidden]`, `w2 [hidden, expert_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ExpertWeights {
    pub fn from_map(t: &TensorMap, i: usize) -> Result<Self> {
        let get = |part: &str| -> Result<Tensor> {
            Ok(t.get(&format!("moe.expert.{i}.{part}"))?.clone())
        };
        Ok(Self {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Selected experts, highest logit first (ties: lower index first).
    pub indices: Vec<usize>,
    /// Softmax weights over `indices`, same order.
    pub weights: Vec<f32>,
    /// Gate logits after noise, all experts.
    pub logits: Vec<f32>,
}

/// Indices of the `k` largest values; on exact ties the lower index wins.
pub fn top_k(logits: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Tensor names and shapes of the MoE block and its regression head.
pub fn moe_shapes(enc: &EncoderConfig, cfg: &MoeConfig) -> Vec<(String, Vec<usize>)> {
    let (d, e, n) = (enc.hidden_dim, cfg.expert_dim, cfg.num_experts);
    let mut out = vec![
        ("moe.ln1.gain".to_string(), vec![d]),
        ("moe.ln1.bias".to_string(), vec![d]),
        ("moe.gate.Wg".to_string(), vec![d, n]),
        ("moe.gate.Wnoise".to_string(), vec![d, n]),
    ];
    for i in 0..n {
        out.push((format!("moe.expert.{i}.w1"), vec![e, d]));
        out.push((format!("moe.expert.{i}.b1"), vec![e]));
        out.push((format!("moe.expert.{i}.w2"), vec![d, e]));
        out.push((format!("moe.expert.{i}.b2"), vec![d]));
    }
    out.push(("moe.ln2.gain".to_string(), vec![d]));
    out.push(("moe.ln2.bias".to_string(), vec![d]));
    out
}

/// Encoder body + MoE block + scalar head.
pub fn init_moe_weights(enc: &EncoderConfig, cfg: &MoeConfig, seed: u64) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut tensors = init_weights(enc, seed)?.into_tensors();
    for (name, shape) in moe_shapes(enc, cfg) {
        let t = init_tensor_for(&name, &shape, seed);
        tensors.insert(name, t)?;
    }
    ModelWeights::from_tensors(*enc, tensors)
}

/// Checks the MoE tensors in `weights` match `cfg`.
pub fn check_moe_weights(weights: &ModelWeights, cfg: &MoeConfig) -> Result<()> {
    cfg.validate()?;
    for (name, shape) in moe_shapes(weights.config(), cfg) {
        let t = weights.tensors().get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Config(format!(
                "MoE tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

pub struct MoeOutput {
    /// `[S, 1]` rewards.
    pub rewards: Var,
    /// Coefficient times the load-balance term (a scalar; zero when the
    /// coefficient is zero).
    pub aux: Var,
    /// `[S, num_experts]` gate weights, zero outside the top-k.
    pub probs: Var,
    pub decisions: Vec<GateDecision>,
    /// Number of (input, expert) FFN evaluations performed.
    pub expert_evals: usize,
}

fn layer_norm(g: &mut Graph, p: &mut Params<'_>, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.var(g, &format!("{prefix}.gain"))?;
    let bias = p.var(g, &format!("{prefix}.bias"))?;
    Ok(g.layer_norm(x, gain, bias)?)
}

fn expert_ffn(g: &mut Graph, p: &mut Params<'_>, i: usize, x: Var) -> Result<Var> {
    let w1 = p.var(g, &format!("moe.expert.{i}.w1"))?;
    let b1 = p.var(g, &format!("moe.expert.{i}.b1"))?;
    let w2 = p.var(g, &format!("moe.expert.{i}.w2"))?;
    let b2 = p.var(g, &format!("moe.expert.{i}.b2"))?;
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.gelu(h);
    Ok(g.linear(h, w2, Some(b2))?)
}

/// Noisy top-k gate over rows of `x1 [S, d]`. Noise is drawn only when
/// `noise` is given.
fn gate_rows(
    g: &mut Graph,
    p: &mut Params<'_>,
    cfg: &MoeConfig,
    x1: Var,
    noise: Option<&mut StreamRng>,
) -> Result<(Var, Vec<GateDecision>)> {
    cfg.validate()?;
    let wg = p.var(g, "moe.gate.Wg")?;
    let mut h = g.matmul(x1, wg)?;
    if g.value(h).cols() != cfg.num_experts {
        return Err(Error::Config(format!(
            "gate has {} experts, config says {}",
            g.value(h).cols(),
            cfg.num_experts
        )));
    }
    if let Some(rng) = noise {
        let wn = p.var(g, "moe.gate.Wnoise")?;
        let raw = g.matmul(x1, wn)?;
        let scale = g.softplus(raw);
        let eps: Vec<f32> = (0..g.value(scale).numel())
            .map(|_| rng::normal(rng))
            .collect();
        let noisy = g.mask_mul(scale, eps)?;
        h = g.add(h, noisy)?;
    }
    let logits = g.value(h).clone();
    let keep: Vec<Vec<usize>> = (0..logits.rows())
        .map(|r| top_k(logits.row_slice(r), cfg.top_k))
        .collect();
    let probs = g.sparse_softmax_rows(h, &keep)?;
    let pv = g.value(probs);
    let decisions = keep
        .into_iter()
        .enumerate()
        .map(|(r, indices)| GateDecision {
            weights: indices.iter().map(|&j| pv.row_slice(r)[j]).collect(),
            logits: logits.row_slice(r).to_vec(),
            indices,
        })
        .collect();
    Ok((probs, decisions))
}

/// MoE block on pooled states `[S, d]`: `reward = head(LN2(Σ w_i·expert_i(LN1(x))))`.
pub fn moe_block(
    g: &mut Graph,
    p: &mut Params<'_>,
    cfg: &MoeConfig,
    pooled: Var,
    noise: Option<&mut StreamRng>,
) -> Result<MoeOutput> {
    let s = g.value(pooled).rows();
    let x1 = layer_norm(g, p, "moe.ln1", pooled)?;
    let (probs, decisions) = gate_rows(g, p, cfg, x1, noise)?;
    let mut y: Option<Var> = None;
    let mut expert_evals = 0;
    for i in 0..cfg.num_experts {
        let rows: Vec<usize> = (0..s)
            .filter(|&r| decisions[r].indices.contains(&i))
            .collect();
        if rows.is_empty() {
            continue;
        }
        expert_evals += rows.len();
        let xi = g.gather_rows(x1, &rows)?;
        let out = expert_ffn(g, p, i, xi)?;
        let coords: Vec<(usize, usize)> = rows.iter().map(|&r| (r, i)).collect();
        let w = g.pick(probs, &coords)?;
        let weighted = g.scale_rows(out, w)?;
        let full = g.scatter_rows(weighted, &rows, s)?;
        y = Some(match y {
            Some(acc) => g.add(acc, full)?,
            None => full,
        });
    }
    let y = y.expect("top_k >= 1 routes every row");
    let y2 = layer_norm(g, p, "moe.ln2", y)?;
    let hw = p.var(g, "head.weight")?;
    let hb = p.var(g, "head.bias")?;
    let rewards = g.linear(y2, hw, Some(hb))?;
    let aux = if cfg.load_balance > 0.0 {
        let importance = g.sum_rows(probs);
        let cv = g.cv_squared(importance)?;
        g.scale(cv, cfg.load_balance)
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    Ok(MoeOutput {
        rewards,
        aux,
        probs,
        decisions,
        expert_evals,
    })
}

fn eval_noise_rng(cfg: &MoeConfig) -> Option<StreamRng> {
    cfg.eval_noise.then(|| rng::stream(0, "moe.eval-noise"))
}

/// Encoder then MoE block for a packed batch. In training mode gate noise
/// shares the mode's RNG stream.
pub fn moe_forward(
    g: &mut Graph,
    p: &mut Params<'_>,
    enc: &EncoderConfig,
    cfg: &MoeConfig,
    batch: &Batch,
    mode: &mut Mode<'_>,
) -> Result<MoeOutput> {
    let pooled = encode_batch(g, p, enc, batch, mode)?;
    if mode.is_train() {
        let noise = if cfg.gate_noise { mode.rng() } else { None };
        moe_block(g, p, cfg, pooled, noise)
    } else {
        let mut r = eval_noise_rng(cfg);
        moe_block(g, p, cfg, pooled, r.as_mut())
    }
}

/// Rewards for sequences under a MoE reward model, eval mode.
pub fn score_moe(
    weights: &ModelWeights,
    cfg: &MoeConfig,
    seqs: &[&TokenSequence],
) -> Result<Vec<f32>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let batch = Batch::pack(seqs, weights.config())?;
    let mut g = Graph::new();
    let mut p = Params::new(weights.tensors(), None, Trainable::Nothing);
    let out = moe_forward(
        &mut g,
        &mut p,
        weights.config(),
        cfg,
        &batch,
        &mut Mode::eval(),
    )?;
    Ok(g.value(out.rewards).data().to_vec())
}

/// Gate for one pooled vector. Noise is added when `rng` is given and
/// `cfg.gate_noise` is set.
pub fn gate(
    x: &[f32],
    gw: &GateWeights,
    cfg: &MoeConfig,
    rng: Option<&mut StreamRng>,
) -> Result<GateDecision> {
    cfg.validate()?;
    let mut t = TensorMap::new();
    t.insert("moe.gate.Wg", gw.wg.clone())?;
    t.insert("moe.gate.Wnoise", gw.wnoise.clone())?;
    if gw.wg.rows() != x.len() {
        return Err(rmroute_autograd::TensorError::ShapeMismatch {
            op: "gate",
            lhs: vec![1, x.len()],
            rhs: gw.wg.shape().to_vec(),
        }
        .into());
    }
    let mut g = Graph::new();
    let mut p = Params::new(&t, None, Trainable::Nothing);
    let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let noise = if cfg.gate_noise { rng } else { None };
    let (_, mut d) = gate_rows(&mut g, &mut p, cfg, xv, noise)?;
    Ok(d.remove(0))
}

/// `w2 · gelu(w1 · x + b1) + b2`, no residual.
pub fn expert_forward(x: &[f32], e: &ExpertWeights) -> Result<Vec<f32>> {
    let mut t = TensorMap::new();
    t.insert("moe.expert.0.w1", e.w1.clone())?;
    t.insert("moe.expert.0.b1", e.b1.clone())?;
    t.insert("moe.expert.0.w2", e.w2.clone())?;
    t.insert("moe.expert.0.b2", e.b2.clone())?;
    let mut g = Graph::new();
    let mut p = Params::new(&t, None, Trainable::Nothing);
    let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let out = expert_ffn(&mut g, &mut p, 0, xv)?;
    Ok(g.value(out).data().to_vec())
}

/// MoE head on one pooled vector: `(reward, aux loss, gate decision)`.
/// `weights` must hold the `moe.*` and `head.*` tensors.
pub fn moe_head(
    x: &[f32],
    weights: &TensorMap,
    cfg: &MoeConfig,
    rng: Option<&mut StreamRng>,
) -> Result<(f32, f32, GateDecision)> {
    let mut g = Graph::new();
    let mut p = Params::new(weights, None, Trainable::Nothing);
    let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let noise = if cfg.gate_noise { rng } else { None };
    let mut out = moe_block(&mut g, &mut p, cfg, xv, noise)?;
    Ok((
        g.item(out.rewards),
        g.item(out.aux),
        out.decisions.remove(0),
    ))
}

/// Squared coefficient of variation of per-expert importance (gate weight
/// summed over the batch).
pub fn load_balance_loss(decisions: &[GateDecision], num_experts: usize) -> Result<f32> {
    if decisions.is_empty() || num_experts == 0 {
        return Err(Error::EmptyDataset("load-balance batch".into()));
    }
    let mut importance = vec![0.0f64; num_experts];
    for d in decisions {
        for (&i, &w) in d.indices.iter().zip(&d.weights) {
            importance[i] += f64::from(w);
        }
    }
    let n = num_experts as f64;
    let mean = importance.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let var = importance.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((var / (mean * mean)) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(indices: Vec<usize>, weights: Vec<f32>) -> GateDecision {
        GateDecision {
            indices,
            weights,
            logits: Vec::new(),
        }
    }

    fn gate_for_logits(logits: &[f32]) -> GateWeights {
        // x = e_0 picks row 0 of Wg.
        let n = logits.len();
        let mut wg = vec![0.0; 2 * n];
        wg[..n].copy_from_slice(logits);
        GateWeights {
            wg: Tensor::new(vec![2, n], wg).unwrap(),
            wnoise: Tensor::zeros(&[2, n]),
        }
    }

    #[test]
    fn two_way_softmax_example() {
        let cfg = MoeConfig {
            num_experts: 3,
            gate_noise: false,
            ..MoeConfig::default()
        };
        let d = gate(&[1.0, 0.0], &gate_for_logits(&[2.0, 1.0, 0.0]), &cfg, None).unwrap();
        assert_eq!(d.indices, vec![0, 1]);
        assert!((d.weights[0] - 0.731059).abs() < 1e-4);
        assert!((d.weights[1] - 0.268941).abs() < 1e-4);
    }

    #[test]
    fn equal_logits_full_k_is_uniform() {
        let cfg = MoeConfig {
            num_experts: 4,
            top_k: 4,
            gate_noise: false,
            ..MoeConfig::default()
        };
        let d = gate(&[1.0, 0.0], &gate_for_logits(&[0.5; 4]), &cfg, None).unwrap();
        assert_eq!(d.indices, vec![0, 1, 2, 3]);
        assert!(d.weights.iter().all(|w| (w - 0.25).abs() < 1e-7));
    }

    #[test]
    fn k_one_puts_all_weight_on_argmax() {
        let cfg = MoeConfig {
            num_experts: 3,
            top_k: 1,
            gate_noise: false,
            ..MoeConfig::default()
        };
        let d = gate(&[1.0, 0.0], &gate_for_logits(&[0.0, 3.0, 3.0]), &cfg, None).unwrap();
        assert_eq!((d.indices.clone(), d.weights.clone()), (vec![1], vec![1.0]));
    }

    #[test]
    fn k_above_experts_is_rejected() {
        let cfg = MoeConfig {
            num_experts: 2,
            top_k: 3,
            ..MoeConfig::default()
        };
        assert!(matches!(
            gate(&[1.0, 0.0], &gate_for_logits(&[0.0, 0.0]), &cfg, None),
            Err(Error::TopK { k: 3, experts: 2 })
        ));
    }

    #[test]
    fn zero_expert_outputs_zero() {
        let e = ExpertWeights {
            w1: Tensor::zeros(&[4, 3]),
            b1: Tensor::zeros(&[4]),
            w2: Tensor::zeros(&[3, 4]),
            b2: Tensor::zeros(&[3]),
        };
        assert_eq!(expert_forward(&[1.0, -2.0, 0.5], &e).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn load_balance_examples() {
        let uniform = [decision(vec![0], vec![1.0]), decision(vec![1], vec![1.0])];
        assert_eq!(load_balance_loss(&uniform, 2).unwrap(), 0.0);
        let skewed = [decision(vec![0], vec![1.0]), decision(vec![0], vec![1.0])];
        assert!((load_balance_loss(&skewed, 2).unwrap() - 1.0).abs() < 1e-6);
        let a = [
            decision(vec![0, 1], vec![0.7, 0.3]),
            decision(vec![2, 0], vec![0.6, 0.4]),
        ];
        let b: Vec<GateDecision> = a
            .iter()
            .map(|d| {
                decision(
                    d.indices.clone(),
                    d.weights.iter().map(|w| w * 3.0).collect(),
                )
            })
            .collect();
        let (la, lb) = (
            load_balance_loss(&a, 3).unwrap(),
            load_balance_loss(&b, 3).unwrap(),
        );
        assert!((la - lb).abs() < 1e-6);
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k(&[5.0, 5.0, 5.0], 1), vec![0]);
    }
}
