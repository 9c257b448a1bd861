use std::collections::{BTreeMap, HashMap};

use rmroute_autograd::rng::StreamRng;
use rmroute_autograd::{Graph, Segment, TensorError, TensorMap, Var};

use super::{EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::lora::AdapterWeights;

/// Several sequences packed row-wise; attention is block-diagonal over
/// `segments`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub mask: Vec<bool>,
    pub segments: Vec<Segment>,
}

impl Batch {
    pub fn pack(seqs: &[&TokenSequence], cfg: &EncoderConfig) -> Result<Self> {
        let mut b = Batch {
            ids: Vec::new(),
            positions: Vec::new(),
            mask: Vec::new(),
            segments: Vec::with_capacity(seqs.len()),
        };
        for s in seqs {
            if s.len() > cfg.max_sequence_length {
                return Err(Error::SequenceTooLong {
                    len: s.len(),
                    max: cfg.max_sequence_length,
                });
            }
            if s.is_empty() || s.mask.len() != s.len() {
                return Err(Error::Config(
                    "token sequence is empty or mask length differs".into(),
                ));
            }
            if let Some(&bad) = s.ids.iter().find(|&&id| id >= cfg.vocab_size) {
                return Err(Error::Config(format!(
                    "token id {bad} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            b.segments.push(Segment {
                start: b.ids.len(),
                len: s.len(),
            });
            b.ids.extend_from_slice(&s.ids);
            b.positions.extend(0..s.len());
            b.mask.extend_from_slice(&s.mask);
        }
        Ok(b)
    }

    /// Row index of each sequence's first position.
    pub fn starts(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.start).collect()
    }

    pub fn num_sequences(&self) -> usize {
        self.segments.len()
    }
}

/// Which bound tensors receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Every base tensor (full fine-tuning).
    Base,
    /// Adapter tensors only; the base stays frozen.
    Adapter,
}

/// Lazily binds named tensors into a graph. Adapter tensors (`adapter.*`)
/// come from the adapter; when the adapter carries its own head, `head.*`
/// resolves to `adapter.head.*`.
pub struct Params<'a> {
    base: &'a TensorMap,
    adapter: Option<&'a AdapterWeights>,
    trainable: Trainable,
    bound: HashMap<String, Var>,
}

impl<'a> Params<'a> {
    pub fn new(
        base: &'a TensorMap,
        adapter: Option<&'a AdapterWeights>,
        trainable: Trainable,
    ) -> Self {
        Self {
            base,
            adapter,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn adapter(&self) -> Option<&'a AdapterWeights> {
        self.adapter
    }

    /// Makes `name` resolve to `var` instead of a fresh leaf.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let from_adapter = name.starts_with("adapter.");
        let tensor = if from_adapter {
            self.adapter
                .ok_or_else(|| TensorError::MissingTensor(name.to_string()))?
                .tensors()
                .get(name)?
        } else {
            self.base.get(name)?
        };
        let grad = match self.trainable {
            Trainable::Nothing => false,
            Trainable::Base => !from_adapter,
            Trainable::Adapter => from_adapter,
        };
        let v = g.leaf(tensor.clone(), grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn head_prefix(&self) -> &'static str {
        match self.adapter {
            Some(a) if a.has_head() => "adapter.head",
            _ => "head",
        }
    }

    /// Gradients of every trainable tensor bound so far.
    pub fn gradients(&self, g: &Graph) -> BTreeMap<String, Vec<f32>> {
        self.bound
            .iter()
            .filter(|(_, &v)| g.requires_grad(v))
            .map(|(name, &v)| {
                let grad = g
                    .grad(v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()]);
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Training-mode randomness. `None` means eval mode: dropout and gate
/// noise are off.
pub struct Mode<'r> {
    rng: Option<&'r mut StreamRng>,
}

impl<'r> Mode<'r> {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'r mut StreamRng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn from_rng(rng: Option<&'r mut StreamRng>) -> Self {
        Self { rng }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    pub fn rng(&mut self) -> Option<&mut StreamRng> {
        self.rng.as_deref_mut()
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var, p: f32) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => Ok(g.dropout(x, p, rng)?),
            _ => Ok(x),
        }
    }
}

/// `W x + b`, plus `(alpha/r)·B·A·drop(x)` when the bound adapter targets
/// this site.
pub fn linear_site(
    g: &mut Graph,
    p: &mut Params<'_>,
    site: &str,
    x: Var,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let w = p.var(g, &format!("{site}.weight"))?;
    let b = p.var(g, &format!("{site}.bias"))?;
    let y = g.linear(x, w, Some(b))?;
    let Some(adapter) = p.adapter() else {
        return Ok(y);
    };
    if !adapter.targets_site(site) {
        return Ok(y);
    }
    let spec = adapter.spec();
    let a = p.var(g, &format!("adapter.{site}.A"))?;
    let bm = p.var(g, &format!("adapter.{site}.B"))?;
    let xd = mode.dropout(g, x, spec.dropout)?;
    let low = g.matmul_t(xd, a)?;
    let up = g.matmul_t(low, bm)?;
    let up = g.scale(up, spec.scaling());
    Ok(g.add(y, up)?)
}

fn layer_norm(g: &mut Graph, p: &mut Params<'_>, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.var(g, &format!("{prefix}.gain"))?;
    let bias = p.var(g, &format!("{prefix}.bias"))?;
    Ok(g.layer_norm(x, gain, bias)?)
}

/// Runs the encoder stack over a packed batch and returns the pooled
/// `[num_sequences, hidden_dim]` first-position states.
pub fn encode_batch(
    g: &mut Graph,
    p: &mut Params<'_>,
    cfg: &EncoderConfig,
    batch: &Batch,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let tok = p.var(g, "embed.token")?;
    let pos = p.var(g, "embed.position")?;
    let te = g.embedding(tok, &batch.ids)?;
    let pe = g.embedding(pos, &batch.positions)?;
    let x = g.add(te, pe)?;
    let x = layer_norm(g, p, "embed.ln", x)?;
    let mut x = mode.dropout(g, x, cfg.dropout)?;
    for i in 0..cfg.num_layers {
        let q = linear_site(g, p, &format!("layer.{i}.attn.query"), x, mode)?;
        let k = linear_site(g, p, &format!("layer.{i}.attn.key"), x, mode)?;
        let v = linear_site(g, p, &format!("layer.{i}.attn.value"), x, mode)?;
        let ctx = g.attention(q, k, v, &batch.segments, cfg.num_heads, &batch.mask)?;
        let out = linear_site(g, p, &format!("layer.{i}.attn.dense"), ctx, mode)?;
        let out = mode.dropout(g, out, cfg.dropout)?;
        let res = g.add(x, out)?;
        x = layer_norm(g, p, &format!("layer.{i}.attn.ln"), res)?;

        let h = linear_site(g, p, &format!("layer.{i}.ffn.up"), x, mode)?;
        let h = g.gelu(h);
        let f = linear_site(g, p, &format!("layer.{i}.ffn.down"), h, mode)?;
        let f = mode.dropout(g, f, cfg.dropout)?;
        let res = g.add(x, f)?;
        x = layer_norm(g, p, &format!("layer.{i}.ffn.ln"), res)?;
    }
    Ok(g.gather_rows(x, &batch.starts())?)
}

/// Head applied to pooled states: `[S, outputs]`.
pub fn head_outputs(g: &mut Graph, p: &mut Params<'_>, pooled: Var) -> Result<Var> {
    let prefix = p.head_prefix();
    let w = p.var(g, &format!("{prefix}.weight"))?;
    let b = p.var(g, &format!("{prefix}.bias"))?;
    Ok(g.linear(pooled, w, Some(b))?)
}
