//! Tiny post-LN transformer encoder with a regression (or classification)
//! head on the first-position hidden state.

mod forward;
mod vocab;
mod weights;

use rmroute_autograd::rng::StreamRng;
use rmroute_autograd::Graph;
use serde::{Deserialize, Serialize};

pub use forward::{encode_batch, head_outputs, linear_site, Batch, Mode, Params, Trainable};
pub use vocab::{build_vocab, tokenize, Part, TextSpan, TokenSequence, Vocab, PAD, SEP, UNK};
pub(crate) use weights::init_tensor as init_tensor_for;
pub use weights::{
    body_param_count, init_body, init_weights, init_with_head, linear_sites, site_dims,
    ModelWeights, ATTN_SITES, FFN_SITES,
};

use crate::error::{Error, Result};
use crate::lora::AdapterWeights;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_sequence_length: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f32,
}

impl EncoderConfig {
    /// Default desk-scale encoder.
    pub fn desk() -> Self {
        Self {
            vocab_size: 512,
            max_sequence_length: 64,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
        }
    }

    /// Wider desk encoder used by the single-model baseline, standing in
    /// for the larger model the adapter methods are compared against.
    pub fn reference() -> Self {
        Self {
            hidden_dim: 128,
            ffn_dim: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_sequence_length", self.max_sequence_length),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Pooled (first-position) representation of one sequence.
pub fn encode(
    tokens: &TokenSequence,
    weights: &ModelWeights,
    rng: Option<&mut StreamRng>,
) -> Result<Vec<f32>> {
    let batch = Batch::pack(&[tokens], weights.config())?;
    let mut g = Graph::new();
    let mut params = Params::new(weights.tensors(), None, Trainable::Nothing);
    let mut mode = Mode::from_rng(rng);
    let pooled = encode_batch(&mut g, &mut params, weights.config(), &batch, &mut mode)?;
    Ok(g.value(pooled).data().to_vec())
}

/// Affine regression head: `head.weight · pooled + head.bias`.
pub fn reward_head(pooled: &[f32], weights: &ModelWeights) -> Result<f32> {
    let w = weights.tensors().get("head.weight")?;
    let b = weights.tensors().get("head.bias")?;
    if w.rows() != 1 || w.cols() != pooled.len() {
        return Err(rmroute_autograd::TensorError::ShapeMismatch {
            op: "reward_head",
            lhs: vec![1, pooled.len()],
            rhs: w.shape().to_vec(),
        }
        .into());
    }
    let dot: f32 = w.data().iter().zip(pooled).map(|(a, x)| a * x).sum();
    Ok(dot + b.data()[0])
}

/// Head outputs for a batch of sequences in eval mode. With an adapter, the
/// adapter's low-rank updates (and its own head, if it has one) apply.
pub fn score_sequences(
    weights: &ModelWeights,
    adapter: Option<&AdapterWeights>,
    seqs: &[&TokenSequence],
) -> Result<Vec<Vec<f32>>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let batch = Batch::pack(seqs, weights.config())?;
    let mut g = Graph::new();
    let mut params = Params::new(weights.tensors(), adapter, Trainable::Nothing);
    let mut mode = Mode::eval();
    let pooled = encode_batch(&mut g, &mut params, weights.config(), &batch, &mut mode)?;
    let out = head_outputs(&mut g, &mut params, pooled)?;
    let t = g.value(out);
    Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
}
