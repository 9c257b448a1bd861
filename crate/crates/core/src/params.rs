//! Parameter accounting per method, as counts and as a percentage of a
//! reference baseline.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assembly::{AssemblyManifest, Method, Role};
use crate::encoder::{body_param_count, EncoderConfig};
use crate::error::{Error, Result};
use crate::lora::{count_adapter_params, AdapterSpec};
use crate::moe::{moe_shapes, MoeConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCount {
    pub name: String,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub method: Method,
    pub components: Vec<ComponentCount>,
    pub total: usize,
    pub reference_total: usize,
    pub percent: f64,
}

impl ParameterReport {
    pub fn new(method: Method, components: Vec<ComponentCount>, reference_total: usize) -> Self {
        let total = components.iter().map(|c| c.params).sum();
        Self {
            method,
            components,
            total,
            reference_total,
            percent: percent_of(total, reference_total),
        }
    }
}

pub fn percent_of(total: usize, reference: usize) -> f64 {
    if reference == 0 {
        return f64::NAN;
    }
    100.0 * total as f64 / reference as f64
}

/// n full domain models plus a router of the same size.
pub fn rodos_total(model: usize, domains: usize) -> usize {
    (domains + 1) * model
}

/// One backbone plus n reward adapters and one router adapter.
pub fn arliss_total(backbone: usize, adapter: usize, domains: usize) -> usize {
    backbone + (domains + 1) * adapter
}

/// Encoder with an `outputs`-wide head.
pub fn encoder_params(cfg: &EncoderConfig, outputs: usize) -> usize {
    body_param_count(cfg) + outputs * (cfg.hidden_dim + 1)
}

pub fn moe_block_params(enc: &EncoderConfig, cfg: &MoeConfig) -> usize {
    moe_shapes(enc, cfg)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// What a report needs to know about a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportInputs {
    pub encoder: EncoderConfig,
    pub moe: MoeConfig,
    pub adapter: AdapterSpec,
    pub domains: usize,
    /// Encoder of the single-model baseline; its scalar reward model is the
    /// 100% reference.
    pub reference: EncoderConfig,
}

/// Counts from configurations alone. Every adapter carries its own head.
pub fn parameter_report(method: Method, inp: &ReportInputs) -> Result<ParameterReport> {
    let n = inp.domains;
    if n == 0 {
        return Err(Error::Config("parameter report needs at least one domain".into()));
    }
    let enc = &inp.encoder;
    let reference_total = encoder_params(&inp.reference, 1);
    let adapter = count_adapter_params(&inp.adapter, enc)?;
    let head = |outputs: usize| outputs * (enc.hidden_dim + 1);
    let c = |name: String, params: usize| ComponentCount { name, params };
    let components = match method {
        Method::Baseline => vec![c("model".into(), reference_total)],
        Method::More => vec![
            c("model".into(), encoder_params(enc, 1)),
            c("moe".into(), moe_block_params(enc, &inp.moe)),
        ],
        Method::BaseLora => vec![
            c("backbone".into(), body_param_count(enc)),
            c("adapter".into(), adapter + head(1)),
        ],
        Method::Rodos => (0..n)
            .map(|i| c(format!("reward.{i}"), encoder_params(enc, 1)))
            .chain([c("router".into(), encoder_params(enc, n))])
            .collect(),
        Method::Arliss => [c("backbone".into(), body_param_count(enc))]
            .into_iter()
            .chain((0..n).map(|i| c(format!("adapter.{i}"), adapter + head(1))))
            .chain([c("router-adapter".into(), adapter + head(n))])
            .collect(),
    };
    Ok(ParameterReport::new(method, components, reference_total))
}

/// Report built from the counts recorded in a saved assembly's manifest.
pub fn report_from_manifest(manifest: &AssemblyManifest, reference_total: usize) -> ParameterReport {
    let components = manifest
        .components
        .iter()
        .map(|c| {
            let role = match c.role {
                Role::Reward => "reward",
                Role::Router => "router",
                Role::Backbone => "backbone",
                Role::RewardAdapter => "adapter",
                Role::RouterAdapter => "router-adapter",
            };
            ComponentCount {
                name: match &c.domain {
                    Some(d) => format!("{role}.{d}"),
                    None => role.to_string(),
                },
                params: c.params,
            }
        })
        .collect();
    ParameterReport::new(manifest.method, components, reference_total)
}

/// Aligned table: one row per method with total and percentage.
pub fn params_table(reports: &[ParameterReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>12} {:>9}", "method", "params", "% ref");
    for r in reports {
        let _ = writeln!(out, "{:<10} {:>12} {:>8.1}%", r.method.as_str(), r.total, r.percent);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> ReportInputs {
        ReportInputs {
            encoder: EncoderConfig::desk(),
            moe: MoeConfig::default(),
            adapter: AdapterSpec::default(),
            domains: 5,
            reference: EncoderConfig::reference(),
        }
    }

    #[test]
    fn toy_formulas() {
        assert_eq!(rodos_total(1_000_000, 5), 6_000_000);
        let a = arliss_total(1_000_000, 20_000, 5);
        assert_eq!(a, 1_120_000);
        assert!((percent_of(a, 6_000_000) - 18.7).abs() < 0.05);
        assert!((percent_of(6_000_000, 1_000_000) - 600.0).abs() < 1e-9);
        assert_eq!(arliss_total(1_000_000, 0, 1), 1_000_000);
    }

    #[test]
    fn published_sizes() {
        assert!((percent_of(197, 435) - 45.3).abs() < 0.1);
    }

    #[test]
    fn desk_counts_by_hand() {
        // body: embeddings 512*64 + 64*64 + 2*64, per layer 4*(64*64+64)
        // + (64*128+128) + (128*64+64) + 4*64
        let body = 512 * 64 + 64 * 64 + 128 + 2 * (4 * 4160 + 8320 + 8256 + 256);
        assert_eq!(body_param_count(&EncoderConfig::desk()), body);
        let r = parameter_report(Method::Arliss, &inputs()).unwrap();
        let adapter = 2 * 4 * 12 * 128;
        assert_eq!(r.total, body + 5 * (adapter + 65) + adapter + 5 * 65);
        assert_eq!(r.components.len(), 7);
    }

    #[test]
    fn ordering_and_sums() {
        let tot = |m| parameter_report(m, &inputs()).unwrap();
        let (a, mo, b, r) = (tot(Method::Arliss), tot(Method::More), tot(Method::Baseline), tot(Method::Rodos));
        assert!(a.total < mo.total && mo.total < b.total && b.total < r.total);
        for rep in [a, mo, b, r] {
            assert_eq!(rep.total, rep.components.iter().map(|c| c.params).sum::<usize>());
            assert!((rep.percent - 100.0 * rep.total as f64 / rep.reference_total as f64).abs() < 1e-12);
        }
    }
}
