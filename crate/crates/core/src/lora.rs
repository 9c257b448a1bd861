//! Low-rank adapters on the encoder's linear layers, plus a host that keeps
//! one frozen backbone and hot-swaps which adapter scoring uses.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rmroute_autograd::checkpoint::{self, CheckpointMeta};
use rmroute_autograd::rng::{self, StreamRng};
use rmroute_autograd::{Graph, Tensor, TensorMap};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, linear_sites, site_dims, EncoderConfig, ModelWeights, TokenSequence};
use crate::error::{Error, Result};

const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    /// Short layer kinds (`query`, `dense`, `up`, ...) or full site names
    /// (`layer.0.attn.query`). A short kind targets that layer in every block.
    pub targets: Vec<String>,
}

impl Default for AdapterSpec {
    /// Rank 12, alpha 768, dropout 0.1 on the attention projections.
    fn default() -> Self {
        Self {
            rank: 12,
            alpha: 768.0,
            dropout: 0.1,
            targets: ["query", "key", "value", "dense"]
                .map(String::from)
                .to_vec(),
        }
    }
}

fn matches(target: &str, site: &str) -> bool {
    site == target || site.ends_with(&format!(".{target}"))
}

impl AdapterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "adapter alpha {} must be positive",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "adapter dropout {} outside [0,1)",
                self.dropout
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("adapter needs at least one target".into()));
        }
        Ok(())
    }

    /// `alpha / r`.
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    /// Concrete linear sites the targets select, in backbone order.
    pub fn resolve(&self, cfg: &EncoderConfig) -> Result<Vec<String>> {
        self.validate()?;
        let sites = linear_sites(cfg);
        for t in &self.targets {
            if !sites.iter().any(|s| matches(t, s)) {
                let mut valid: Vec<String> = ["query", "key", "value", "dense", "up", "down"]
                    .map(String::from)
                    .to_vec();
                valid.extend(sites.iter().cloned());
                return Err(Error::UnknownTarget {
                    name: t.clone(),
                    valid: valid.join(", "),
                });
            }
        }
        Ok(sites
            .into_iter()
            .filter(|s| self.targets.iter().any(|t| matches(t, s)))
            .collect())
    }
}

/// Sum over targeted sites of `r·(in + out)`; heads are not included.
pub fn count_adapter_params(spec: &AdapterSpec, cfg: &EncoderConfig) -> Result<usize> {
    let sites = spec.resolve(cfg)?;
    Ok(sites
        .iter()
        .map(|s| {
            let (i, o) = site_dims(cfg, s).expect("resolved site");
            spec.rank * (i + o)
        })
        .sum())
}

/// One adapter set: `adapter.{site}.A [r, in]` and `adapter.{site}.B
/// [out, r]` per site, optionally `adapter.head.{weight,bias}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterWeights {
    id: String,
    spec: AdapterSpec,
    sites: BTreeSet<String>,
    tensors: TensorMap,
}

/// Fresh adapter for `weights`: A truncated normal (std 0.02) per
/// `(seed, tensor name)`, B zero. The backbone is only read.
pub fn attach_adapter(
    weights: &ModelWeights,
    spec: &AdapterSpec,
    seed: u64,
) -> Result<AdapterWeights> {
    let cfg = weights.config();
    let sites = spec.resolve(cfg)?;
    let mut tensors = TensorMap::new();
    for site in &sites {
        let (i, o) = site_dims(cfg, site).expect("resolved site");
        let a_name = format!("adapter.{site}.A");
        let mut r = rng::stream(seed, &a_name);
        let a = (0..spec.rank * i)
            .map(|_| rng::truncated_normal(&mut r, INIT_STD))
            .collect();
        tensors.insert(a_name, Tensor::new(vec![spec.rank, i], a)?)?;
        tensors.insert(format!("adapter.{site}.B"), Tensor::zeros(&[o, spec.rank]))?;
    }
    Ok(AdapterWeights {
        id: "adapter".into(),
        spec: spec.clone(),
        sites: sites.into_iter().collect(),
        tensors,
    })
}

impl AdapterWeights {
    /// Rebuilds an adapter from named tensors, checking every A/B pair.
    pub fn from_tensors(
        id: impl Into<String>,
        spec: AdapterSpec,
        tensors: TensorMap,
    ) -> Result<Self> {
        spec.validate()?;
        let mut sites = BTreeSet::new();
        for name in tensors.names() {
            if name.starts_with("adapter.head.") {
                continue;
            }
            let site = name
                .strip_prefix("adapter.")
                .and_then(|n| n.strip_suffix(".A").or_else(|| n.strip_suffix(".B")))
                .ok_or_else(|| Error::Config(format!("unexpected adapter tensor `{name}`")))?;
            sites.insert(site.to_string());
        }
        for site in &sites {
            let a = tensors.get(&format!("adapter.{site}.A"))?;
            let b = tensors.get(&format!("adapter.{site}.B"))?;
            if a.rows() != spec.rank || b.cols() != spec.rank {
                return Err(Error::Config(format!(
                    "adapter pair for `{site}` has shapes {:?}/{:?}, rank is {}",
                    a.shape(),
                    b.shape(),
                    spec.rank
                )));
            }
        }
        let head = (
            tensors.contains("adapter.head.weight"),
            tensors.contains("adapter.head.bias"),
        );
        if head.0 != head.1 {
            return Err(Error::Config(
                "adapter head needs both weight and bias".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            spec,
            sites,
            tensors,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Adds an `outputs`-wide head owned by this adapter.
    pub fn with_head(mut self, hidden_dim: usize, outputs: usize, seed: u64) -> Result<Self> {
        for (name, shape) in [
            ("adapter.head.weight", vec![outputs, hidden_dim]),
            ("adapter.head.bias", vec![outputs]),
        ] {
            self.tensors.remove(name);
            let t = encoder::init_tensor_for(name, &shape, seed);
            self.tensors.insert(name, t)?;
        }
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &TensorMap {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut TensorMap {
        &mut self.tensors
    }

    pub fn sites(&self) -> impl Iterator<Item = &str> {
        self.sites.iter().map(String::as_str)
    }

    pub fn targets_site(&self, site: &str) -> bool {
        self.sites.contains(site)
    }

    pub fn has_head(&self) -> bool {
        self.tensors.contains("adapter.head.weight")
    }

    pub fn head_outputs(&self) -> Option<usize> {
        self.tensors
            .get("adapter.head.weight")
            .ok()
            .map(|t| t.rows())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.num_params()
    }

    pub fn content_hash(&self) -> String {
        self.tensors.content_hash()
    }

    /// Checks every site exists in `cfg` with matching in/out dims.
    pub fn check_compatible(&self, cfg: &EncoderConfig) -> Result<()> {
        for site in &self.sites {
            let (i, o) = site_dims(cfg, site).ok_or_else(|| Error::UnknownTarget {
                name: site.clone(),
                valid: linear_sites(cfg).join(", "),
            })?;
            let a = self.tensors.get(&format!("adapter.{site}.A"))?;
            let b = self.tensors.get(&format!("adapter.{site}.B"))?;
            if a.cols() != i || b.rows() != o {
                return Err(Error::Config(format!(
                    "adapter `{}` site `{site}` does not fit a {i}->{o} layer",
                    self.id
                )));
            }
        }
        if let Some(w) = self.tensors.get("adapter.head.weight").ok() {
            if w.cols() != cfg.hidden_dim {
                return Err(Error::Config(format!(
                    "adapter `{}` head width mismatch",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, mut meta: CheckpointMeta) -> Result<String> {
        meta.extra.insert("adapter_id".into(), self.id.clone());
        meta.extra.insert(
            "adapter_spec".into(),
            serde_json::to_string(&self.spec).expect("spec serializes"),
        );
        checkpoint::save(path, &self.tensors, &meta).map_err(|e| Error::checkpoint(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (tensors, meta) = checkpoint::load(path).map_err(|e| Error::checkpoint(path, e))?;
        let spec = meta.extra.get("adapter_spec").ok_or_else(|| {
            Error::Config(format!("{}: no adapter spec in metadata", path.display()))
        })?;
        let spec: AdapterSpec = serde_json::from_str(spec)?;
        let id = meta.extra.get("adapter_id").cloned().unwrap_or_default();
        Ok((Self::from_tensors(id, spec, tensors)?, meta))
    }
}

/// Single adapted linear layer on row vector `x`:
/// `W x + b + (alpha/r)·B(A·drop(x))`, dropout only when `rng` is given.
pub fn apply_lora_linear(
    x: &[f32],
    w: &Tensor,
    b: &Tensor,
    a: &Tensor,
    bm: &Tensor,
    spec: &AdapterSpec,
    rng: Option<&mut StreamRng>,
) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
    let (av, bmv) = (g.constant(a.clone()), g.constant(bm.clone()));
    let y = g.linear(xv, wv, Some(bv))?;
    let mut mode = encoder::Mode::from_rng(rng);
    let xd = mode.dropout(&mut g, xv, spec.dropout)?;
    let low = g.matmul_t(xd, av)?;
    let up = g.matmul_t(low, bmv)?;
    let up = g.scale(up, spec.scaling());
    let out = g.add(y, up)?;
    Ok(g.value(out).data().to_vec())
}

/// Materializes `W + (alpha/r)·B·A` at every adapted site; an adapter head
/// replaces the base head. Test oracle only: scoring never merges.
pub fn merge_adapter(base: &ModelWeights, adapter: &AdapterWeights) -> Result<ModelWeights> {
    adapter.check_compatible(base.config())?;
    let mut tensors = base.tensors().clone();
    let s = adapter.spec().scaling();
    for site in adapter.sites() {
        let a = adapter.tensors().get(&format!("adapter.{site}.A"))?;
        let b = adapter.tensors().get(&format!("adapter.{site}.B"))?;
        let w = tensors.get_mut(&format!("{site}.weight"))?;
        let (out, inp, r) = (b.rows(), a.cols(), a.rows());
        let wd = w.data_mut();
        for o in 0..out {
            for i in 0..inp {
                let mut acc = 0.0f32;
                for k in 0..r {
                    acc += b.data()[o * r + k] * a.data()[k * inp + i];
                }
                wd[o * inp + i] += s * acc;
            }
        }
    }
    if adapter.has_head() {
        for part in ["weight", "bias"] {
            let t = adapter
                .tensors()
                .get(&format!("adapter.head.{part}"))?
                .clone();
            let name = format!("head.{part}");
            tensors.remove(&name);
            tensors.insert(name, t)?;
        }
    }
    ModelWeights::from_tensors(*base.config(), tensors)
}

/// Result of a swap request.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwapOutcome {
    /// False when the adapter was already active (no-op fast path).
    pub changed: bool,
    pub latency: Duration,
}

const NONE_ACTIVE: usize = usize::MAX;

/// One frozen backbone plus a read-only adapter registry. The active
/// binding is an index swapped atomically; scoring and swapping are
/// mutually exclusive, so a swap while a scoring call is in flight fails.
pub struct AdapterHost {
    backbone: ModelWeights,
    adapters: Vec<AdapterWeights>,
    active: AtomicUsize,
    in_flight: AtomicBool,
    swaps: AtomicU64,
}

/// Marks a scoring call in flight until dropped.
pub struct ScoringGuard<'a> {
    host: &'a AdapterHost,
}

impl Drop for ScoringGuard<'_> {
    fn drop(&mut self) {
        self.host.in_flight.store(false, Ordering::Release);
    }
}

impl AdapterHost {
    pub fn new(backbone: ModelWeights, adapters: Vec<AdapterWeights>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for a in &adapters {
            a.check_compatible(backbone.config())?;
            if !seen.insert(a.id().to_string()) {
                return Err(Error::Config(format!("duplicate adapter id `{}`", a.id())));
            }
        }
        Ok(Self {
            backbone,
            adapters,
            active: AtomicUsize::new(NONE_ACTIVE),
            in_flight: AtomicBool::new(false),
            swaps: AtomicU64::new(0),
        })
    }

    pub fn into_parts(self) -> (ModelWeights, Vec<AdapterWeights>) {
        (self.backbone, self.adapters)
    }

    pub fn backbone(&self) -> &ModelWeights {
        &self.backbone
    }

    pub fn adapter(&self, id: &str) -> Option<&AdapterWeights> {
        self.adapters.iter().find(|a| a.id() == id)
    }

    pub fn adapter_ids(&self) -> impl Iterator<Item = &str> {
        self.adapters.iter().map(|a| a.id())
    }

    pub fn active(&self) -> Option<&str> {
        self.adapters
            .get(self.active.load(Ordering::Acquire))
            .map(|a| a.id())
    }

    /// Number of swaps that changed the binding.
    pub fn swap_count(&self) -> u64 {
        self.swaps.load(Ordering::Relaxed)
    }

    pub fn reset_swap_count(&self) {
        self.swaps.store(0, Ordering::Relaxed);
    }

    pub fn begin_scoring(&self) -> Result<ScoringGuard<'_>> {
        self.in_flight
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map_err(|_| Error::AdapterBusy)?;
        Ok(ScoringGuard { host: self })
    }

    pub fn swap(&self, id: &str) -> Result<SwapOutcome> {
        let start = Instant::now();
        let idx = self
            .adapters
            .iter()
            .position(|a| a.id() == id)
            .ok_or_else(|| Error::UnknownAdapter(id.to_string()))?;
        if self.in_flight.load(Ordering::Acquire) {
            return Err(Error::AdapterBusy);
        }
        let prev = self.active.swap(idx, Ordering::AcqRel);
        let changed = prev != idx;
        if changed {
            self.swaps.fetch_add(1, Ordering::Relaxed);
        }
        Ok(SwapOutcome {
            changed,
            latency: start.elapsed(),
        })
    }

    /// Head outputs under the active adapter (base head if none is active).
    pub fn score(&self, seqs: &[&TokenSequence]) -> Result<Vec<Vec<f32>>> {
        let _guard = self.begin_scoring()?;
        let adapter = self.adapters.get(self.active.load(Ordering::Acquire));
        encoder::score_sequences(&self.backbone, adapter, seqs)
    }

    /// Scores with a specific adapter without touching the active binding.
    /// Used for a dedicated lane such as a router adapter.
    pub fn score_with(&self, id: &str, seqs: &[&TokenSequence]) -> Result<Vec<Vec<f32>>> {
        let adapter = self
            .adapter(id)
            .ok_or_else(|| Error::UnknownAdapter(id.to_string()))?;
        let _guard = self.begin_scoring()?;
        encoder::score_sequences(&self.backbone, Some(adapter), seqs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{build_vocab, init_weights, tokenize};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 16,
            max_sequence_length: 8,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
            dropout: 0.0,
        }
    }

    #[test]
    fn paper_shapes_on_desk_hidden() {
        let w = init_weights(&EncoderConfig::desk(), 0).unwrap();
        let a = attach_adapter(&w, &AdapterSpec::default(), 0).unwrap();
        let q_a = a.tensors().get("adapter.layer.0.attn.query.A").unwrap();
        let q_b = a.tensors().get("adapter.layer.0.attn.query.B").unwrap();
        assert_eq!(q_a.shape(), &[12, 64]);
        assert_eq!(q_b.shape(), &[64, 12]);
        assert_eq!(AdapterSpec::default().scaling(), 64.0);
        assert_eq!(a.sites().count(), 8);
    }

    #[test]
    fn one_dimensional_example() {
        let spec = AdapterSpec {
            rank: 1,
            alpha: 1.0,
            dropout: 0.0,
            targets: vec!["query".into()],
        };
        let t = |v: f32| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let y = apply_lora_linear(
            &[1.0],
            &t(1.0),
            &Tensor::zeros(&[1]),
            &t(2.0),
            &t(3.0),
            &spec,
            None,
        )
        .unwrap();
        assert_eq!(y, vec![7.0]);
    }

    #[test]
    fn counting() {
        let cfg = EncoderConfig::desk();
        let one = |rank| AdapterSpec {
            rank,
            alpha: 1.0,
            dropout: 0.0,
            targets: vec!["layer.0.attn.query".into()],
        };
        assert_eq!(count_adapter_params(&one(4), &cfg).unwrap(), 512);
        assert_eq!(count_adapter_params(&one(1), &cfg).unwrap(), 128);
        assert!(count_adapter_params(&one(0), &cfg).is_err());
        let mut two = one(4);
        two.targets.push("layer.1.attn.query".into());
        assert_eq!(count_adapter_params(&two, &cfg).unwrap(), 1024);
    }

    #[test]
    fn unknown_target_lists_valid_names() {
        let w = init_weights(&tiny(), 0).unwrap();
        let spec = AdapterSpec {
            targets: vec!["qkv".into()],
            ..AdapterSpec::default()
        };
        let err = attach_adapter(&w, &spec, 0).unwrap_err().to_string();
        assert!(
            err.contains("qkv") && err.contains("layer.0.attn.query"),
            "{err}"
        );
    }

    #[test]
    fn attach_is_deterministic_and_b_is_zero() {
        let w = init_weights(&tiny(), 0).unwrap();
        let a = attach_adapter(&w, &AdapterSpec::default(), 9).unwrap();
        let b = attach_adapter(&w, &AdapterSpec::default(), 9).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.tensors().iter() {
            if name.ends_with(".B") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn swap_rules() {
        let cfg = tiny();
        let w = init_weights(&cfg, 0).unwrap();
        let x = attach_adapter(&w, &AdapterSpec::default(), 1)
            .unwrap()
            .with_id("x");
        let y = attach_adapter(&w, &AdapterSpec::default(), 2)
            .unwrap()
            .with_id("y");
        let host = AdapterHost::new(w, vec![x, y]).unwrap();
        assert!(matches!(host.swap("z"), Err(Error::UnknownAdapter(_))));
        assert!(host.swap("x").unwrap().changed);
        assert!(!host.swap("x").unwrap().changed);
        assert_eq!(host.swap_count(), 1);
        let guard = host.begin_scoring().unwrap();
        assert!(matches!(host.swap("y"), Err(Error::AdapterBusy)));
        drop(guard);
        assert!(host.swap("y").unwrap().changed);
        assert_eq!(host.active(), Some("y"));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let w = init_weights(&tiny(), 0).unwrap();
        let a = attach_adapter(&w, &AdapterSpec::default(), 1)
            .unwrap()
            .with_id("alpha")
            .with_head(8, 1, 1)
            .unwrap();
        a.save(&p, CheckpointMeta::default()).unwrap();
        let (back, _) = AdapterWeights::load(&p).unwrap();
        assert_eq!(back, a);
        let v = build_vocab(&["a b"], 16).unwrap();
        let s = tokenize("a", "b", &v, 8);
        let host = AdapterHost::new(w, vec![back]).unwrap();
        host.swap("alpha").unwrap();
        assert_eq!(host.score(&[&s]).unwrap().len(), 1);
    }
}
