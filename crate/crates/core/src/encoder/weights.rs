use std::path::Path;

use rmroute_autograd::checkpoint::{self, CheckpointMeta};
use rmroute_autograd::{rng, Tensor, TensorMap};

use super::EncoderConfig;
use crate::error::{Error, Result};

/// Linear layers inside each attention block, in evaluation order.
pub const ATTN_SITES: [&str; 4] = ["attn.query", "attn.key", "attn.value", "attn.dense"];
pub const FFN_SITES: [&str; 2] = ["ffn.up", "ffn.down"];

const INIT_STD: f32 = 0.02;

/// Every linear layer name, e.g. `layer.0.attn.query`.
pub fn linear_sites(cfg: &EncoderConfig) -> Vec<String> {
    (0..cfg.num_layers)
        .flat_map(|i| {
            ATTN_SITES
                .iter()
                .chain(FFN_SITES.iter())
                .map(move |s| format!("layer.{i}.{s}"))
        })
        .collect()
}

/// `(in_dim, out_dim)` of a linear site.
pub fn site_dims(cfg: &EncoderConfig, site: &str) -> Option<(usize, usize)> {
    let (d, f) = (cfg.hidden_dim, cfg.ffn_dim);
    let kind = site.splitn(3, '.').nth(2)?;
    match kind {
        k if ATTN_SITES.contains(&k) => Some((d, d)),
        "ffn.up" => Some((d, f)),
        "ffn.down" => Some((f, d)),
        _ => None,
    }
}

/// Expected body tensors (no head) with shapes.
fn body_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let mut out = vec![
        ("embed.token".to_string(), vec![cfg.vocab_size, d]),
        (
            "embed.position".to_string(),
            vec![cfg.max_sequence_length, d],
        ),
        ("embed.ln.gain".to_string(), vec![d]),
        ("embed.ln.bias".to_string(), vec![d]),
    ];
    for i in 0..cfg.num_layers {
        for site in linear_sites_of_layer(i) {
            let (din, dout) = site_dims(cfg, &site).expect("known site");
            out.push((format!("{site}.weight"), vec![dout, din]));
            out.push((format!("{site}.bias"), vec![dout]));
        }
        for ln in ["attn.ln", "ffn.ln"] {
            out.push((format!("layer.{i}.{ln}.gain"), vec![d]));
            out.push((format!("layer.{i}.{ln}.bias"), vec![d]));
        }
    }
    out
}

/// Parameter count of the encoder body (embeddings and layers, no head).
pub fn body_param_count(cfg: &EncoderConfig) -> usize {
    body_shapes(cfg)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

fn linear_sites_of_layer(i: usize) -> impl Iterator<Item = String> {
    ATTN_SITES
        .iter()
        .chain(FFN_SITES.iter())
        .map(move |s| format!("layer.{i}.{s}"))
}

/// Initial value for a named tensor: ones for layer-norm gains, zeros for
/// biases, truncated normal (std 0.02) otherwise. Each tensor draws from
/// its own `(seed, name)` stream.
pub(crate) fn init_tensor(name: &str, shape: &[usize], seed: u64) -> Tensor {
    if name.ends_with(".gain") {
        Tensor::ones(shape)
    } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
        Tensor::zeros(shape)
    } else {
        let mut r = rng::stream(seed, name);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| rng::truncated_normal(&mut r, INIT_STD))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }
}

/// Encoder weights: the body plus an optional `head.weight`/`head.bias`
/// (and, for the MoE reward model, `moe.*` tensors).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: EncoderConfig,
    tensors: TensorMap,
}

pub fn init_body(config: &EncoderConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut tensors = TensorMap::new();
    for (name, shape) in body_shapes(config) {
        let t = init_tensor(&name, &shape, seed);
        tensors.insert(name, t)?;
    }
    Ok(ModelWeights {
        config: *config,
        tensors,
    })
}

/// Body plus an `outputs`-wide head.
pub fn init_with_head(config: &EncoderConfig, outputs: usize, seed: u64) -> Result<ModelWeights> {
    if outputs == 0 {
        return Err(Error::Config("head needs at least one output".into()));
    }
    let mut w = init_body(config, seed)?;
    let d = config.hidden_dim;
    w.tensors.insert(
        "head.weight",
        init_tensor("head.weight", &[outputs, d], seed),
    )?;
    w.tensors
        .insert("head.bias", init_tensor("head.bias", &[outputs], seed))?;
    Ok(w)
}

/// Reward model weights: body plus a scalar regression head.
pub fn init_weights(config: &EncoderConfig, seed: u64) -> Result<ModelWeights> {
    init_with_head(config, 1, seed)
}

impl ModelWeights {
    /// Wraps tensors after checking every body tensor is present with the
    /// shape `config` implies. Extra tensors must be `head.*` or `moe.*`.
    pub fn from_tensors(config: EncoderConfig, tensors: TensorMap) -> Result<Self> {
        config.validate()?;
        let expected = body_shapes(&config);
        for (name, shape) in &expected {
            let t = tensors.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        let known = expected.len();
        let extras: Vec<&str> = tensors
            .names()
            .filter(|n| !expected.iter().any(|(e, _)| e == n))
            .collect();
        if let Some(bad) = extras
            .iter()
            .find(|n| !(n.starts_with("head.") || n.starts_with("moe.")))
        {
            return Err(Error::Config(format!("unexpected tensor `{bad}`")));
        }
        debug_assert!(tensors.len() >= known);
        let w = Self { config, tensors };
        if let Some(outputs) = w.head_outputs() {
            let hw = w.tensors.get("head.weight")?;
            let hb = w.tensors.get("head.bias")?;
            if hw.cols() != config.hidden_dim || hb.numel() != outputs {
                return Err(Error::Config("head tensors do not match hidden_dim".into()));
            }
        }
        Ok(w)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut TensorMap {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> TensorMap {
        self.tensors
    }

    /// Width of the head, if the weights carry one.
    pub fn head_outputs(&self) -> Option<usize> {
        self.tensors.get("head.weight").ok().map(|t| t.rows())
    }

    pub fn without_head(mut self) -> Self {
        self.tensors.remove("head.weight");
        self.tensors.remove("head.bias");
        self
    }

    pub fn num_params(&self) -> usize {
        self.tensors.num_params()
    }

    pub fn content_hash(&self) -> String {
        self.tensors.content_hash()
    }

    pub fn save(&self, path: &Path, mut meta: CheckpointMeta) -> Result<String> {
        meta.extra.insert(
            "encoder".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        checkpoint::save(path, &self.tensors, &meta).map_err(|e| Error::checkpoint(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (tensors, meta) = checkpoint::load(path).map_err(|e| Error::checkpoint(path, e))?;
        let cfg = meta.extra.get("encoder").ok_or_else(|| {
            Error::Config(format!("{}: no encoder config in metadata", path.display()))
        })?;
        let config: EncoderConfig = serde_json::from_str(cfg)?;
        Ok((Self::from_tensors(config, tensors)?, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = EncoderConfig::desk();
        let a = init_weights(&cfg, 3).unwrap();
        let b = init_weights(&cfg, 3).unwrap();
        let c = init_weights(&cfg, 4).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn init_rules() {
        let w = init_weights(&EncoderConfig::desk(), 0).unwrap();
        for (name, t) in w.tensors().iter() {
            if name.ends_with(".gain") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert!(t.data().iter().all(|v| v.abs() <= 0.04), "{name}");
                assert!(t.data().iter().any(|&v| v != 0.0), "{name}");
            }
        }
        assert_eq!(w.head_outputs(), Some(1));
        assert_eq!(
            w.tensors().get("layer.1.ffn.up.weight").unwrap().shape(),
            &[128, 64]
        );
    }

    #[test]
    fn body_is_independent_of_head_width() {
        let cfg = EncoderConfig::desk();
        let a = init_with_head(&cfg, 1, 5).unwrap().without_head();
        let b = init_with_head(&cfg, 5, 5).unwrap().without_head();
        assert_eq!(a, b);
    }

    #[test]
    fn from_tensors_validates_shapes() {
        let cfg = EncoderConfig::desk();
        let mut t = init_weights(&cfg, 0).unwrap().into_tensors();
        assert!(ModelWeights::from_tensors(cfg, t.clone()).is_ok());
        t.replace("embed.ln.gain", Tensor::ones(&[64])).unwrap();
        t.remove("layer.0.attn.key.bias");
        assert!(ModelWeights::from_tensors(cfg, t).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let w = init_weights(&EncoderConfig::desk(), 1).unwrap();
        w.save(&p, CheckpointMeta::default()).unwrap();
        let (back, _) = ModelWeights::load(&p).unwrap();
        assert_eq!(back, w);
    }
}
