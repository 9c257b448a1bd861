//! Training plans: one method, one seed, one dataset in; a runnable
//! assembly and its training timings out.

use std::time::Instant;

use rmroute_autograd::rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{ManifestInfo, Method, MethodAssembly, Parts};
use crate::data::{group_by_domain, RewardExample};
use crate::encoder::{build_vocab, init_body, EncoderConfig, ModelWeights, Vocab};
use crate::error::{Error, Result};
use crate::lora::{AdapterSpec, AdapterWeights};
use crate::moe::MoeConfig;
use crate::router::{train_router, Router, RouterInit, RouterInput, RouterModel};
use crate::train::{
    train_all_domains, train_reward_model, RewardInit, RewardModel, TrainConfig, TrainMethod, TrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn train_config(self, method: TrainMethod, seed: u64) -> TrainConfig {
        match self {
            Self::Desk => TrainConfig::desk(method, seed),
            Self::Paper => TrainConfig::paper(method, seed),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}` (desk, paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Encoder of every method except the baseline.
    pub encoder: EncoderConfig,
    /// Encoder of the single-model baseline, also the 100% reference for
    /// parameter reports.
    pub reference_encoder: EncoderConfig,
    pub moe: MoeConfig,
    pub adapter: AdapterSpec,
    pub preset: Preset,
    pub router_input: RouterInput,
}

impl Settings {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            reference_encoder: EncoderConfig::reference(),
            moe: MoeConfig::default(),
            adapter: AdapterSpec::default(),
            preset: Preset::Desk,
            router_input: RouterInput::Prompt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.reference_encoder.validate()?;
        if self.reference_encoder.vocab_size != self.encoder.vocab_size {
            return Err(Error::Config(
                "reference encoder must share the vocabulary size".into(),
            ));
        }
        self.moe.validate()?;
        self.adapter.validate()?;
        self.adapter.resolve(&self.encoder).map(|_| ())
    }

    pub fn manifest_info(&self, method: Method, seed: u64) -> ManifestInfo {
        ManifestInfo {
            seed,
            adapter: matches!(method, Method::BaseLora | Method::Arliss).then(|| self.adapter.clone()),
            reference_encoder: Some(self.reference_encoder),
            train: Some(self.preset.train_config(train_method(method), seed)),
        }
    }
}

fn train_method(method: Method) -> TrainMethod {
    match method {
        Method::Baseline => TrainMethod::Baseline,
        Method::BaseLora => TrainMethod::BaseLora,
        Method::More => TrainMethod::More,
        Method::Rodos => TrainMethod::PerDomain,
        Method::Arliss => TrainMethod::PerDomainLora,
    }
}

/// Seed of the frozen backbone that adapter methods train on.
pub fn backbone_seed(seed: u64) -> u64 {
    rng::child_seed(seed, "backbone", 0)
}

/// Vocabulary over every prompt and response in `data`.
pub fn vocab_for(data: &[RewardExample], max_size: usize) -> Result<Vocab> {
    build_vocab(&corpus(data), max_size)
}

fn corpus(data: &[RewardExample]) -> Vec<&str> {
    data.iter()
        .flat_map(|e| [e.prompt.as_str(), e.chosen.as_str(), e.rejected.as_str()])
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentTime {
    /// `model`, `reward.{domain}`, `adapter.{domain}` or `router`.
    pub name: String,
    pub first_epoch_seconds: f64,
    pub seconds: f64,
    pub log: Vec<String>,
}

impl ComponentTime {
    fn new(name: String, report: &TrainReport) -> Self {
        Self {
            name,
            first_epoch_seconds: report.first_epoch_seconds(),
            seconds: report.seconds(),
            log: report.log_lines(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTiming {
    pub components: Vec<ComponentTime>,
    /// Sum of the components' first-epoch seconds.
    pub total_first_epoch_seconds: f64,
    /// Sum of the components' full training seconds.
    pub total_seconds: f64,
    /// Wall-clock of the whole plan including tokenization and setup.
    pub wall_seconds: f64,
}

impl TrainTiming {
    fn push(&mut self, c: ComponentTime) {
        self.total_first_epoch_seconds += c.first_epoch_seconds;
        self.total_seconds += c.seconds;
        self.components.push(c);
    }
}

pub struct TrainedMethod {
    pub assembly: MethodAssembly,
    pub timing: TrainTiming,
    pub seed: u64,
}

/// Trains `method` on `train`. Domains are trained in `domains` order;
/// per-domain runs go in parallel on `jobs` threads.
pub fn build_method(
    method: Method,
    seed: u64,
    train: &[RewardExample],
    domains: &[String],
    settings: &Settings,
    jobs: usize,
) -> Result<TrainedMethod> {
    settings.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training data".into()));
    }
    for e in train {
        e.validate(domains)?;
    }
    let start = Instant::now();
    let vocab = vocab_for(train, settings.encoder.vocab_size)?;
    let cfg = settings.preset.train_config(train_method(method), seed);
    let enc = settings.encoder;
    let domains = domains.to_vec();
    let mut timing = TrainTiming::default();
    let assembly = match method {
        Method::Baseline | Method::More | Method::BaseLora => {
            let backbone = (method == Method::BaseLora)
                .then(|| init_body(&enc, backbone_seed(seed)))
                .transpose()?;
            let init = match (method, &backbone) {
                (Method::Baseline, _) => RewardInit::Plain(settings.reference_encoder),
                (Method::More, _) => RewardInit::Moe(enc, settings.moe),
                (_, Some(b)) => RewardInit::Adapter(b, &settings.adapter),
                _ => unreachable!("backbone built for base-lora"),
            };
            let (model, report) = train_reward_model(train, &vocab, &cfg, init)?;
            timing.push(ComponentTime::new("model".into(), &report));
            MethodAssembly::single(method, vocab, domains, model, backbone)?
        }
        Method::Rodos => {
            let parts = group_by_domain(train, &domains);
            let runs = train_all_domains(&parts, &vocab, &cfg, RewardInit::Plain(enc), jobs)?;
            let mut models = Vec::new();
            for run in runs {
                timing.push(ComponentTime::new(format!("reward.{}", run.domain), &run.report));
                let RewardModel::Plain(w) = run.model else {
                    unreachable!("plain init")
                };
                models.push(w);
            }
            let router = fit_router(train, &domains, &vocab, seed, settings, None, &mut timing)?;
            MethodAssembly::rodos(vocab, domains, models, router)?
        }
        Method::Arliss => {
            let backbone = init_body(&enc, backbone_seed(seed))?;
            let parts = group_by_domain(train, &domains);
            let runs = train_all_domains(
                &parts,
                &vocab,
                &cfg,
                RewardInit::Adapter(&backbone, &settings.adapter),
                jobs,
            )?;
            let mut adapters = Vec::new();
            for run in runs {
                timing.push(ComponentTime::new(format!("adapter.{}", run.domain), &run.report));
                let RewardModel::Adapter(a) = run.model else {
                    unreachable!("adapter init")
                };
                adapters.push(a.with_id(run.domain));
            }
            let router = fit_router(train, &domains, &vocab, seed, settings, Some(&backbone), &mut timing)?;
            MethodAssembly::arliss(vocab, domains, backbone, adapters, router)?
        }
    };
    timing.wall_seconds = start.elapsed().as_secs_f64();
    Ok(TrainedMethod { assembly, timing, seed })
}

fn fit_router(
    train: &[RewardExample],
    domains: &[String],
    vocab: &Vocab,
    seed: u64,
    settings: &Settings,
    backbone: Option<&ModelWeights>,
    timing: &mut TrainTiming,
) -> Result<Router> {
    let cfg = settings.preset.train_config(TrainMethod::Baseline, seed);
    let init = match backbone {
        Some(b) => RouterInit::Adapter(b, &settings.adapter),
        None => RouterInit::Full(settings.encoder),
    };
    let (model, report) = train_router(train, domains, vocab, &cfg, init, settings.router_input)?;
    timing.push(ComponentTime::new("router".into(), &report));
    Router::new(model, domains.to_vec(), settings.router_input)
}

/// Adds `domain` to a trained rodos or arliss assembly: trains only the new
/// domain's model (or adapter) with seed `seed + n` and retrains the router
/// on `train`, which must include the new domain's examples. Existing
/// vocabulary ids, models and adapters are kept as they are.
pub fn extend_assembly(
    assembly: MethodAssembly,
    domain: &str,
    train: &[RewardExample],
    seed: u64,
    settings: &Settings,
) -> Result<(MethodAssembly, TrainTiming)> {
    let (method, mut vocab, mut domains, parts) = assembly.into_parts();
    if domains.iter().any(|d| d == domain) {
        return Err(Error::Config(format!("domain `{domain}` is already registered")));
    }
    domains.push(domain.to_string());
    for e in train {
        e.validate(&domains)?;
    }
    let own: Vec<RewardExample> = train.iter().filter(|e| e.domain == domain).cloned().collect();
    if own.is_empty() {
        return Err(Error::EmptyDataset(format!("domain `{domain}` has no examples")));
    }
    vocab.extend(&corpus(&own), settings.encoder.vocab_size);
    let n = domains.len() as u64 - 1;
    let cfg = settings.preset.train_config(train_method(method), seed + n);
    let mut timing = TrainTiming::default();
    let start = Instant::now();
    let out = match parts {
        Parts::Rodos { mut models, .. } => {
            let enc = *models[0].config();
            let (model, report) = train_reward_model(&own, &vocab, &cfg, RewardInit::Plain(enc))?;
            timing.push(ComponentTime::new(format!("reward.{domain}"), &report));
            let RewardModel::Plain(w) = model else {
                unreachable!("plain init")
            };
            models.push(w);
            let router = fit_router(train, &domains, &vocab, seed, settings, None, &mut timing)?;
            MethodAssembly::rodos(vocab, domains, models, router)?
        }
        Parts::Arliss { host, .. } => {
            let (backbone, mut adapters): (ModelWeights, Vec<AdapterWeights>) = host.into_parts();
            let init = RewardInit::Adapter(&backbone, &settings.adapter);
            let (model, report) = train_reward_model(&own, &vocab, &cfg, init)?;
            timing.push(ComponentTime::new(format!("adapter.{domain}"), &report));
            let RewardModel::Adapter(a) = model else {
                unreachable!("adapter init")
            };
            adapters.push(a.with_id(domain));
            let router = fit_router(train, &domains, &vocab, seed, settings, Some(&backbone), &mut timing)?;
            MethodAssembly::arliss(vocab, domains, backbone, adapters, router)?
        }
        Parts::Single { .. } => {
            return Err(Error::WrongAssembly {
                expected: "rodos or arliss",
                actual: method.to_string(),
            })
        }
    };
    timing.wall_seconds = start.elapsed().as_secs_f64();
    Ok((out, timing))
}

/// Content hashes of every per-domain component, in domain order.
pub fn component_hashes(assembly: &MethodAssembly) -> Vec<(String, String)> {
    let d = assembly.domains();
    match assembly.parts() {
        Parts::Rodos { models, .. } => d.iter().cloned().zip(models.iter().map(|m| m.content_hash())).collect(),
        Parts::Arliss { host, .. } => d
            .iter()
            .map(|x| (x.clone(), host.adapter(x).map(|a| a.content_hash()).unwrap_or_default()))
            .collect(),
        Parts::Single { model, .. } => vec![("model".into(), model.content_hash())],
    }
}

/// Hash of the router's weights, when there is one.
pub fn router_hash(assembly: &MethodAssembly) -> Option<String> {
    assembly.router().map(|r| match &r.model {
        RouterModel::Full(w) => w.content_hash(),
        RouterModel::Adapter(a) => a.content_hash(),
    })
}
