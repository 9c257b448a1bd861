//! Runnable scoring systems for each method, and their on-disk manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use rmroute_autograd::checkpoint::{self, CheckpointMeta};
use serde::{Deserialize, Serialize};

use crate::data::RewardExample;
use crate::encoder::{
    score_sequences, tokenize, EncoderConfig, ModelWeights, TokenSequence, Vocab,
};
use crate::error::{Error, Result};
use crate::lora::{AdapterHost, AdapterSpec, AdapterWeights, SwapOutcome};
use crate::moe::{score_moe, MoeConfig};
use crate::router::{Router, RouterDecision, RouterInput, RouterModel};
use crate::train::{RewardModel, TrainConfig};

const CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Baseline,
    BaseLora,
    More,
    Rodos,
    Arliss,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::BaseLora,
        Method::More,
        Method::Rodos,
        Method::Arliss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::BaseLora => "base-lora",
            Self::More => "more",
            Self::Rodos => "rodos",
            Self::Arliss => "arliss",
        }
    }

    pub fn has_router(self) -> bool {
        matches!(self, Self::Rodos | Self::Arliss)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{s}` (baseline, base-lora, more, rodos, arliss)"
                ))
            })
    }
}

/// One scoring call's outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub reward: f32,
    pub decision: Option<RouterDecision>,
    pub swap: Option<SwapOutcome>,
}

pub enum Parts {
    /// baseline, base-lora (adapter on `backbone`), more.
    Single {
        model: RewardModel,
        backbone: Option<ModelWeights>,
    },
    /// One full reward model per domain plus a full-model router.
    Rodos {
        models: Vec<ModelWeights>,
        router: Router,
    },
    /// One backbone hosting a reward adapter per domain (adapter id = domain
    /// name) plus a router adapter on a dedicated lane.
    Arliss {
        host: AdapterHost,
        router: Router,
        calls: Mutex<()>,
    },
}

pub struct MethodAssembly {
    method: Method,
    vocab: Vocab,
    domains: Vec<String>,
    parts: Parts,
}

fn single_reward(out: Vec<Vec<f32>>) -> Vec<f32> {
    out.into_iter().map(|r| r[0]).collect()
}

impl MethodAssembly {
    pub fn single(
        method: Method,
        vocab: Vocab,
        domains: Vec<String>,
        model: RewardModel,
        backbone: Option<ModelWeights>,
    ) -> Result<Self> {
        let shape_ok = match (&model, method, &backbone) {
            (RewardModel::Plain(_), Method::Baseline, None) => true,
            (RewardModel::Moe(..), Method::More, None) => true,
            (RewardModel::Adapter(a), Method::BaseLora, Some(b)) => {
                a.check_compatible(b.config())?;
                true
            }
            _ => false,
        };
        if !shape_ok {
            return Err(Error::WrongAssembly {
                expected: "single-model method",
                actual: method.to_string(),
            });
        }
        Ok(Self {
            method,
            vocab,
            domains,
            parts: Parts::Single { model, backbone },
        })
    }

    pub fn rodos(
        vocab: Vocab,
        domains: Vec<String>,
        models: Vec<ModelWeights>,
        router: Router,
    ) -> Result<Self> {
        if models.len() != domains.len() || domains.is_empty() {
            return Err(Error::Config(format!(
                "rodos needs one reward model per domain ({} models, {} domains)",
                models.len(),
                domains.len()
            )));
        }
        if models.iter().any(|m| m.head_outputs() != Some(1)) {
            return Err(Error::Config(
                "rodos reward models need a scalar head".into(),
            ));
        }
        if !matches!(router.model, RouterModel::Full(_)) || router.domains != domains {
            return Err(Error::Config(
                "rodos router must be a full model over the same domains".into(),
            ));
        }
        Ok(Self {
            method: Method::Rodos,
            vocab,
            domains,
            parts: Parts::Rodos { models, router },
        })
    }

    pub fn arliss(
        vocab: Vocab,
        domains: Vec<String>,
        backbone: ModelWeights,
        adapters: Vec<AdapterWeights>,
        router: Router,
    ) -> Result<Self> {
        let ids: Vec<&str> = adapters.iter().map(|a| a.id()).collect();
        if ids != domains.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "arliss needs one reward adapter per domain in order, got {ids:?}"
            )));
        }
        if adapters.iter().any(|a| a.head_outputs() != Some(1)) {
            return Err(Error::Config(
                "arliss reward adapters need a scalar head".into(),
            ));
        }
        match &router.model {
            RouterModel::Adapter(a) => a.check_compatible(backbone.config())?,
            RouterModel::Full(_) => {
                return Err(Error::Config("arliss router must be an adapter".into()));
            }
        }
        if router.domains != domains {
            return Err(Error::Config(
                "arliss router covers different domains".into(),
            ));
        }
        Ok(Self {
            method: Method::Arliss,
            vocab,
            domains,
            parts: Parts::Arliss {
                host: AdapterHost::new(backbone, adapters)?,
                router,
                calls: Mutex::new(()),
            },
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn into_parts(self) -> (Method, Vocab, Vec<String>, Parts) {
        (self.method, self.vocab, self.domains, self.parts)
    }

    pub fn parts(&self) -> &Parts {
        &self.parts
    }

    fn encoder_config(&self) -> EncoderConfig {
        match &self.parts {
            Parts::Single { model, backbone } => match (model, backbone) {
                (RewardModel::Plain(w) | RewardModel::Moe(w, _), _) => *w.config(),
                (RewardModel::Adapter(_), Some(b)) => *b.config(),
                (RewardModel::Adapter(_), None) => unreachable!("checked at construction"),
            },
            Parts::Rodos { models, .. } => *models[0].config(),
            Parts::Arliss { host, .. } => *host.backbone().config(),
        }
    }

    pub fn tokens(&self, prompt: &str, response: &str) -> TokenSequence {
        tokenize(
            prompt,
            response,
            &self.vocab,
            self.encoder_config().max_sequence_length,
        )
    }

    pub fn router(&self) -> Option<&Router> {
        match &self.parts {
            Parts::Rodos { router, .. } | Parts::Arliss { router, .. } => Some(router),
            Parts::Single { .. } => None,
        }
    }

    fn router_backbone(&self) -> Option<&ModelWeights> {
        match &self.parts {
            Parts::Arliss { host, .. } => Some(host.backbone()),
            _ => None,
        }
    }

    /// Router decisions for `(prompt, response)` inputs; `None` for
    /// methods without a router.
    pub fn route_batch(&self, inputs: &[(&str, &str)]) -> Result<Option<Vec<RouterDecision>>> {
        let Some(router) = self.router() else {
            return Ok(None);
        };
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(CHUNK) {
            out.extend(router.route_batch(self.router_backbone(), &self.vocab, chunk)?);
        }
        Ok(Some(out))
    }

    fn single_scores(&self, seqs: &[&TokenSequence]) -> Result<Vec<f32>> {
        let Parts::Single { model, backbone } = &self.parts else {
            unreachable!("single-model path")
        };
        match model {
            RewardModel::Plain(w) => Ok(single_reward(score_sequences(w, None, seqs)?)),
            RewardModel::Moe(w, cfg) => score_moe(w, cfg, seqs),
            RewardModel::Adapter(a) => Ok(single_reward(score_sequences(
                backbone.as_ref().expect("checked at construction"),
                Some(a),
                seqs,
            )?)),
        }
    }

    /// Dispatch: route, then score with exactly one resident model.
    pub fn rodos_score(&self, prompt: &str, response: &str) -> Result<(f32, RouterDecision)> {
        let Parts::Rodos { router, .. } = &self.parts else {
            return Err(self.wrong("rodos"));
        };
        let decision = router.route(None, &self.vocab, prompt, response)?;
        let reward = self.rodos_score_forced(prompt, response, &decision.domain)?;
        Ok((reward, decision))
    }

    /// Scores with domain `domain`'s model regardless of the router.
    pub fn rodos_score_forced(&self, prompt: &str, response: &str, domain: &str) -> Result<f32> {
        let Parts::Rodos { models, .. } = &self.parts else {
            return Err(self.wrong("rodos"));
        };
        let i = self
            .domains
            .iter()
            .position(|d| d == domain)
            .ok_or_else(|| Error::UnregisteredDomain(domain.to_string()))?;
        let seq = self.tokens(prompt, response);
        Ok(score_sequences(&models[i], None, &[&seq])?[0][0])
    }

    /// Route with the router adapter, swap the selected reward adapter in,
    /// score. Calls are serialized. Returns the swap latency.
    pub fn arliss_score(
        &self,
        prompt: &str,
        response: &str,
    ) -> Result<(f32, RouterDecision, Duration)> {
        let Parts::Arliss {
            host,
            router,
            calls,
        } = &self.parts
        else {
            return Err(self.wrong("arliss"));
        };
        let _lock = calls.lock().unwrap_or_else(|e| e.into_inner());
        let decision = router.route(Some(host.backbone()), &self.vocab, prompt, response)?;
        let swap = host.swap(&decision.domain)?;
        let seq = self.tokens(prompt, response);
        let reward = host.score(&[&seq])?[0][0];
        Ok((reward, decision, swap.latency))
    }

    /// Arliss scoring with a forced domain.
    pub fn arliss_score_forced(&self, prompt: &str, response: &str, domain: &str) -> Result<f32> {
        let Parts::Arliss { host, calls, .. } = &self.parts else {
            return Err(self.wrong("arliss"));
        };
        let _lock = calls.lock().unwrap_or_else(|e| e.into_inner());
        host.swap(domain)?;
        let seq = self.tokens(prompt, response);
        Ok(host.score(&[&seq])?[0][0])
    }

    /// One request through the method's full inference path.
    pub fn score_one(&self, prompt: &str, response: &str) -> Result<Scored> {
        match &self.parts {
            Parts::Single { .. } => {
                let seq = self.tokens(prompt, response);
                Ok(Scored {
                    reward: self.single_scores(&[&seq])?[0],
                    decision: None,
                    swap: None,
                })
            }
            Parts::Rodos { .. } => {
                let (reward, decision) = self.rodos_score(prompt, response)?;
                Ok(Scored {
                    reward,
                    decision: Some(decision),
                    swap: None,
                })
            }
            Parts::Arliss { host, .. } => {
                let before = host.swap_count();
                let (reward, decision, latency) = self.arliss_score(prompt, response)?;
                Ok(Scored {
                    reward,
                    decision: Some(decision),
                    swap: Some(SwapOutcome {
                        changed: host.swap_count() != before,
                        latency,
                    }),
                })
            }
        }
    }

    /// Reward-adapter swaps that changed the binding (arliss only).
    pub fn swap_count(&self) -> u64 {
        match &self.parts {
            Parts::Arliss { host, .. } => host.swap_count(),
            _ => 0,
        }
    }

    pub fn reset_swap_count(&self) {
        if let Parts::Arliss { host, .. } = &self.parts {
            host.reset_swap_count();
        }
    }

    /// Rewards of chosen and rejected responses for every example, batched.
    /// Routed methods group examples by routed domain (one adapter swap per
    /// group for arliss).
    pub fn score_pairs(&self, examples: &[RewardExample]) -> Result<PairScores> {
        let seqs: Vec<(TokenSequence, TokenSequence)> = examples
            .iter()
            .map(|e| {
                (
                    self.tokens(&e.prompt, &e.chosen),
                    self.tokens(&e.prompt, &e.rejected),
                )
            })
            .collect();
        let inputs: Vec<(&str, &str)> = examples
            .iter()
            .map(|e| (e.prompt.as_str(), e.chosen.as_str()))
            .collect();
        let decisions = self.route_batch(&inputs)?;
        let mut chosen = vec![0.0; examples.len()];
        let mut rejected = vec![0.0; examples.len()];
        let groups: Vec<(Option<usize>, Vec<usize>)> = match &decisions {
            None => vec![(None, (0..examples.len()).collect())],
            Some(ds) => {
                let mut by: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (i, d) in ds.iter().enumerate() {
                    by.entry(d.index).or_default().push(i);
                }
                by.into_iter().map(|(k, v)| (Some(k), v)).collect()
            }
        };
        for (domain, idx) in groups {
            let _lock = match &self.parts {
                Parts::Arliss { calls, .. } => {
                    Some(calls.lock().unwrap_or_else(|e| e.into_inner()))
                }
                _ => None,
            };
            if let (Parts::Arliss { host, .. }, Some(d)) = (&self.parts, domain) {
                host.swap(&self.domains[d])?;
            }
            for chunk in idx.chunks(CHUNK / 2) {
                let batch: Vec<&TokenSequence> = chunk
                    .iter()
                    .map(|&i| &seqs[i].0)
                    .chain(chunk.iter().map(|&i| &seqs[i].1))
                    .collect();
                let scores = match (&self.parts, domain) {
                    (Parts::Single { .. }, _) => self.single_scores(&batch)?,
                    (Parts::Rodos { models, .. }, Some(d)) => {
                        single_reward(score_sequences(&models[d], None, &batch)?)
                    }
                    (Parts::Arliss { host, .. }, Some(_)) => single_reward(host.score(&batch)?),
                    _ => unreachable!("routed methods always have a domain"),
                };
                let k = chunk.len();
                for (j, &i) in chunk.iter().enumerate() {
                    chosen[i] = scores[j];
                    rejected[i] = scores[k + j];
                }
            }
        }
        Ok(PairScores {
            chosen,
            rejected,
            decisions,
        })
    }

    fn wrong(&self, expected: &'static str) -> Error {
        Error::WrongAssembly {
            expected,
            actual: self.method.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    pub chosen: Vec<f32>,
    pub rejected: Vec<f32>,
    pub decisions: Option<Vec<RouterDecision>>,
}

impl PairScores {
    pub fn pairs(&self) -> Vec<(f32, f32)> {
        self.chosen
            .iter()
            .copied()
            .zip(self.rejected.iter().copied())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Reward,
    Router,
    Backbone,
    RewardAdapter,
    RouterAdapter,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub role: Role,
    pub domain: Option<String>,
    /// Relative to the manifest's directory.
    pub path: String,
    /// SHA-256 of the checkpoint payload.
    pub sha256: String,
    pub params: usize,
}

/// `assembly.json`: everything needed to rebuild an assembly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssemblyManifest {
    pub method: Method,
    pub seed: u64,
    pub domains: Vec<String>,
    pub encoder: EncoderConfig,
    pub moe: Option<MoeConfig>,
    pub adapter: Option<AdapterSpec>,
    pub router_input: RouterInput,
    pub reference_encoder: Option<EncoderConfig>,
    pub train: Option<TrainConfig>,
    pub vocab: String,
    pub components: Vec<ComponentEntry>,
}

pub const MANIFEST_FILE: &str = "assembly.json";

/// Settings recorded alongside the checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ManifestInfo {
    pub seed: u64,
    pub adapter: Option<AdapterSpec>,
    pub reference_encoder: Option<EncoderConfig>,
    pub train: Option<TrainConfig>,
}

fn meta(method: Method, seed: u64, config: &impl Serialize) -> CheckpointMeta {
    CheckpointMeta {
        method: method.to_string(),
        seed,
        config_hash: checkpoint::config_hash(config),
        extra: BTreeMap::new(),
    }
}

impl MethodAssembly {
    /// Writes checkpoints, `vocab.json` and `assembly.json` into `dir`.
    pub fn save(&self, dir: &Path, info: &ManifestInfo) -> Result<AssemblyManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let enc = self.encoder_config();
        let vocab_path = dir.join("vocab.json");
        fs::write(&vocab_path, serde_json::to_string(&self.vocab)?)
            .map_err(|e| Error::io(&vocab_path, e))?;
        let mut m = meta(self.method, info.seed, &enc);
        if let Some(train) = &info.train {
            m.extra.insert("train".into(), serde_json::to_string(train)?);
        }
        let mut components = Vec::new();
        let mut put_model =
            |role: Role, domain: Option<&str>, file: String, w: &ModelWeights| -> Result<()> {
                let sha256 = w.save(&dir.join(&file), m.clone())?;
                components.push(ComponentEntry {
                    role,
                    domain: domain.map(String::from),
                    path: file,
                    sha256,
                    params: w.num_params(),
                });
                Ok(())
            };
        let mut adapters: Vec<(Role, Option<&str>, String, &AdapterWeights)> = Vec::new();
        let mut moe = None;
        match &self.parts {
            Parts::Single { model, backbone } => match model {
                RewardModel::Plain(w) => put_model(Role::Reward, None, "model.ckpt".into(), w)?,
                RewardModel::Moe(w, cfg) => {
                    moe = Some(*cfg);
                    put_model(Role::Reward, None, "model.ckpt".into(), w)?;
                }
                RewardModel::Adapter(a) => {
                    let b = backbone.as_ref().expect("checked at construction");
                    put_model(Role::Backbone, None, "backbone.ckpt".into(), b)?;
                    adapters.push((Role::RewardAdapter, None, "adapter.ckpt".into(), a));
                }
            },
            Parts::Rodos { models, router } => {
                for (d, w) in self.domains.iter().zip(models) {
                    put_model(Role::Reward, Some(d), format!("reward-{d}.ckpt"), w)?;
                }
                if let RouterModel::Full(w) = &router.model {
                    put_model(Role::Router, None, "router.ckpt".into(), w)?;
                }
            }
            Parts::Arliss { host, router, .. } => {
                put_model(
                    Role::Backbone,
                    None,
                    "backbone.ckpt".into(),
                    host.backbone(),
                )?;
                for d in &self.domains {
                    let a = host.adapter(d).expect("one adapter per domain");
                    adapters.push((Role::RewardAdapter, Some(d), format!("adapter-{d}.ckpt"), a));
                }
                if let RouterModel::Adapter(a) = &router.model {
                    adapters.push((Role::RouterAdapter, None, "adapter-router.ckpt".into(), a));
                }
            }
        }
        for (role, domain, file, a) in adapters {
            let sha256 = a.save(&dir.join(&file), m.clone())?;
            components.push(ComponentEntry {
                role,
                domain: domain.map(String::from),
                path: file,
                sha256,
                params: a.num_params(),
            });
        }
        let manifest = AssemblyManifest {
            method: self.method,
            seed: info.seed,
            domains: self.domains.clone(),
            encoder: enc,
            moe,
            adapter: info.adapter.clone(),
            router_input: self.router().map(|r| r.input).unwrap_or_default(),
            reference_encoder: info.reference_encoder,
            train: info.train,
            vocab: "vocab.json".into(),
            components,
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Reads `dir/assembly.json` and every checkpoint it lists, verifying
    /// each payload hash against the manifest.
    pub fn load(dir: &Path) -> Result<(Self, AssemblyManifest)> {
        let manifest = read_manifest(dir)?;
        let vocab_path = dir.join(&manifest.vocab);
        let text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab: Vocab = serde_json::from_str(&text)?;
        let path_of = |c: &ComponentEntry| -> Result<PathBuf> {
            let p = dir.join(&c.path);
            let header = checkpoint::read_header(&p).map_err(|e| Error::checkpoint(&p, e))?;
            if header.payload_sha256 != c.sha256 {
                return Err(Error::Config(format!(
                    "{}: payload hash {} does not match manifest {}",
                    p.display(),
                    header.payload_sha256,
                    c.sha256
                )));
            }
            Ok(p)
        };
        let model = |c: &ComponentEntry| -> Result<ModelWeights> {
            Ok(ModelWeights::load(&path_of(c)?)?.0)
        };
        let adapter = |c: &ComponentEntry| -> Result<AdapterWeights> {
            Ok(AdapterWeights::load(&path_of(c)?)?.0)
        };
        let find = |role: Role| manifest.components.iter().filter(move |c| c.role == role);
        let one = |role: Role| -> Result<&ComponentEntry> {
            find(role)
                .next()
                .ok_or_else(|| Error::Config(format!("manifest lacks a {role:?} component")))
        };
        let domains = manifest.domains.clone();
        let assembly = match manifest.method {
            Method::Baseline => MethodAssembly::single(
                Method::Baseline,
                vocab,
                domains,
                RewardModel::Plain(model(one(Role::Reward)?)?),
                None,
            )?,
            Method::More => {
                let cfg = manifest
                    .moe
                    .ok_or_else(|| Error::Config("more manifest lacks its MoE config".into()))?;
                let w = model(one(Role::Reward)?)?;
                crate::moe::check_moe_weights(&w, &cfg)?;
                MethodAssembly::single(
                    Method::More,
                    vocab,
                    domains,
                    RewardModel::Moe(w, cfg),
                    None,
                )?
            }
            Method::BaseLora => {
                let b = model(one(Role::Backbone)?)?;
                let a = adapter(one(Role::RewardAdapter)?)?;
                MethodAssembly::single(
                    Method::BaseLora,
                    vocab,
                    domains,
                    RewardModel::Adapter(a),
                    Some(b),
                )?
            }
            Method::Rodos => {
                let models = domains
                    .iter()
                    .map(|d| {
                        let c = find(Role::Reward)
                            .find(|c| c.domain.as_deref() == Some(d))
                            .ok_or_else(|| Error::UnregisteredDomain(d.clone()))?;
                        model(c)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let router = Router::new(
                    RouterModel::Full(model(one(Role::Router)?)?),
                    domains.clone(),
                    manifest.router_input,
                )?;
                MethodAssembly::rodos(vocab, domains, models, router)?
            }
            Method::Arliss => {
                let b = model(one(Role::Backbone)?)?;
                let adapters = domains
                    .iter()
                    .map(|d| {
                        let c = find(Role::RewardAdapter)
                            .find(|c| c.domain.as_deref() == Some(d))
                            .ok_or_else(|| Error::UnknownAdapter(d.clone()))?;
                        Ok(adapter(c)?.with_id(d.clone()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let router = Router::new(
                    RouterModel::Adapter(adapter(one(Role::RouterAdapter)?)?),
                    domains.clone(),
                    manifest.router_input,
                )?;
                MethodAssembly::arliss(vocab, domains, b, adapters, router)?
            }
        };
        Ok((assembly, manifest))
    }
}

pub fn read_manifest(dir: &Path) -> Result<AssemblyManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Parameter count of every serialized tensor the manifest lists, read
/// from the checkpoint headers.
pub fn count_serialized_params(dir: &Path) -> Result<usize> {
    let manifest = read_manifest(dir)?;
    manifest
        .components
        .iter()
        .map(|c| {
            let p = dir.join(&c.path);
            Ok(checkpoint::read_header(&p)
                .map_err(|e| Error::checkpoint(&p, e))?
                .num_params())
        })
        .sum()
}
