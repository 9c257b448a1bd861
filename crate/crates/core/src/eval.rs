//! Binary accuracy, multi-seed aggregation and training-time reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assembly::{Method, MethodAssembly};
use crate::data::RewardExample;
use crate::error::{Error, Result};
use crate::pipeline::{build_method, Settings, TrainTiming};
use crate::router::routing_accuracy;

/// How a pair with equal rewards counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieMode {
    /// A pair is correct only if the chosen reward is strictly larger.
    #[default]
    Strict,
    /// Pairs with |chosen - rejected| < eps count one half.
    Half { eps: f32 },
}

fn pair_credit(chosen: f32, rejected: f32, tie: TieMode) -> f64 {
    match tie {
        TieMode::Half { eps } if (chosen - rejected).abs() < eps => 0.5,
        _ if chosen > rejected => 1.0,
        _ => 0.0,
    }
}

/// Fraction of `(chosen, rejected)` reward pairs ranked correctly.
pub fn binary_accuracy(pairs: &[(f32, f32)], tie: TieMode) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("accuracy over no pairs".into()));
    }
    let hits: f64 = pairs.iter().map(|&(c, r)| pair_credit(c, r, tie)).sum();
    Ok(hits / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain: String,
    pub accuracy: f64,
    pub count: usize,
}

/// Accuracy of one trained assembly on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub domains: Vec<DomainAccuracy>,
    /// Unweighted mean over domains.
    pub macro_avg: f64,
    /// Mean over pairs.
    pub weighted: f64,
}

/// Per-domain accuracy over `domains`; domains with no examples are
/// skipped.
pub fn accuracy_by_domain(
    examples: &[RewardExample],
    pairs: &[(f32, f32)],
    domains: &[String],
    tie: TieMode,
) -> Result<Accuracy> {
    if examples.len() != pairs.len() {
        return Err(Error::Config(format!(
            "{} examples but {} score pairs",
            examples.len(),
            pairs.len()
        )));
    }
    let mut out = Vec::new();
    for d in domains {
        let own: Vec<(f32, f32)> = examples
            .iter()
            .zip(pairs)
            .filter(|(e, _)| &e.domain == d)
            .map(|(_, &p)| p)
            .collect();
        if own.is_empty() {
            continue;
        }
        out.push(DomainAccuracy {
            domain: d.clone(),
            accuracy: binary_accuracy(&own, tie)?,
            count: own.len(),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("no test examples in any known domain".into()));
    }
    let macro_avg = out.iter().map(|d| d.accuracy).sum::<f64>() / out.len() as f64;
    Ok(Accuracy {
        domains: out,
        macro_avg,
        weighted: binary_accuracy(pairs, tie)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: Accuracy,
    /// Fraction of test prompts routed to their own domain.
    pub routing_accuracy: Option<f64>,
}

pub fn evaluate(assembly: &MethodAssembly, test: &[RewardExample], tie: TieMode) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test data".into()));
    }
    let scores = assembly.score_pairs(test)?;
    let accuracy = accuracy_by_domain(test, &scores.pairs(), assembly.domains(), tie)?;
    Ok(Evaluation {
        accuracy,
        routing_accuracy: scores.decisions.as_ref().map(|d| routing_accuracy(d, test)),
    })
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two
/// values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        Self {
            mean: mean(values),
            std: sample_std(values),
        }
    }
}

/// One (method, seed) cell of the experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub seed: u64,
    pub evaluation: Evaluation,
    pub timing: TrainTiming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub domains: Vec<String>,
    pub counts: Vec<usize>,
    pub per_domain: Vec<Stat>,
    pub macro_avg: Stat,
    pub weighted: Stat,
    pub routing: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub method: Method,
    /// Component name and mean first-epoch seconds across seeds.
    pub components: Vec<(String, f64)>,
    pub total_first_epoch_seconds: f64,
}

/// Aggregates cells of one method over seeds.
pub fn aggregate(cells: &[&Cell]) -> Result<(EvalReport, TimingSummary)> {
    let first = cells
        .first()
        .ok_or_else(|| Error::EmptyDataset("no cells to aggregate".into()))?;
    let domains: Vec<String> = first.evaluation.accuracy.domains.iter().map(|d| d.domain.clone()).collect();
    let per_domain = (0..domains.len())
        .map(|i| Stat::of(&cells.iter().map(|c| c.evaluation.accuracy.domains[i].accuracy).collect::<Vec<_>>()))
        .collect();
    let routing: Vec<f64> = cells.iter().filter_map(|c| c.evaluation.routing_accuracy).collect();
    let report = EvalReport {
        method: first.method,
        seeds: cells.iter().map(|c| c.seed).collect(),
        counts: first.evaluation.accuracy.domains.iter().map(|d| d.count).collect(),
        domains,
        per_domain,
        macro_avg: Stat::of(&cells.iter().map(|c| c.evaluation.accuracy.macro_avg).collect::<Vec<_>>()),
        weighted: Stat::of(&cells.iter().map(|c| c.evaluation.accuracy.weighted).collect::<Vec<_>>()),
        routing: (!routing.is_empty()).then(|| Stat::of(&routing)),
    };
    let components = first
        .timing
        .components
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let v: Vec<f64> = cells.iter().map(|x| x.timing.components[i].first_epoch_seconds).collect();
            (c.name.clone(), mean(&v))
        })
        .collect::<Vec<_>>();
    let total = mean(&cells.iter().map(|c| c.timing.total_first_epoch_seconds).collect::<Vec<_>>());
    Ok((
        report,
        TimingSummary {
            method: first.method,
            components,
            total_first_epoch_seconds: total,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub cells: Vec<Cell>,
    pub reports: Vec<EvalReport>,
    pub timings: Vec<TimingSummary>,
}

/// Trains and evaluates every (method, seed) cell. Cells run one after
/// another; `jobs` parallelizes per-domain training inside a cell.
pub fn run_matrix(
    methods: &[Method],
    seeds: &[u64],
    train: &[RewardExample],
    test: &[RewardExample],
    domains: &[String],
    settings: &Settings,
    tie: TieMode,
    jobs: usize,
) -> Result<MatrixReport> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config("run_matrix needs at least one method and one seed".into()));
    }
    let mut cells = Vec::new();
    for &method in methods {
        for &seed in seeds {
            let cell = run_cell(method, seed, train, test, domains, settings, tie, jobs).map_err(|e| Error::Cell {
                method: method.to_string(),
                seed,
                source: Box::new(e),
            })?;
            cells.push(cell);
        }
    }
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    for &method in methods {
        let own: Vec<&Cell> = cells.iter().filter(|c| c.method == method).collect();
        let (r, t) = aggregate(&own)?;
        reports.push(r);
        timings.push(t);
    }
    Ok(MatrixReport { cells, reports, timings })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    method: Method,
    seed: u64,
    train: &[RewardExample],
    test: &[RewardExample],
    domains: &[String],
    settings: &Settings,
    tie: TieMode,
    jobs: usize,
) -> Result<Cell> {
    let trained = build_method(method, seed, train, domains, settings, jobs)?;
    Ok(Cell {
        method,
        seed,
        evaluation: evaluate(&trained.assembly, test, tie)?,
        timing: trained.timing,
    })
}

/// Method × domain grid of `mean ± std`, then macro and weighted columns.
pub fn accuracy_table(reports: &[EvalReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "method");
    for d in &first.domains {
        let _ = write!(out, " {:>15}", d);
    }
    let _ = writeln!(out, " {:>15} {:>15} {:>15}", "macro", "weighted", "router");
    let cell = |s: &Stat| format!("{:.3} ± {:.3}", s.mean, s.std);
    for r in reports {
        let _ = write!(out, "{:<10}", r.method.as_str());
        for s in &r.per_domain {
            let _ = write!(out, " {:>15}", cell(s));
        }
        let router = r.routing.as_ref().map_or_else(|| "-".to_string(), cell);
        let _ = writeln!(out, " {:>15} {:>15} {:>15}", cell(&r.macro_avg), cell(&r.weighted), router);
    }
    out
}

/// First-epoch training seconds per component, and the total.
pub fn timing_table(timings: &[TimingSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>10}  components", "method", "total s");
    for t in timings {
        let parts: Vec<String> = t.components.iter().map(|(n, s)| format!("{n}={s:.3}")).collect();
        let _ = writeln!(
            out,
            "{:<10} {:>10.3}  {}",
            t.method.as_str(),
            t.total_first_epoch_seconds,
            parts.join(" ")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(binary_accuracy(&[(1.0, 0.5), (0.2, 0.7)], TieMode::Strict).unwrap(), 0.5);
        assert_eq!(binary_accuracy(&[(0.3, 0.3); 4], TieMode::Strict).unwrap(), 0.0);
        assert_eq!(binary_accuracy(&[(0.3, 0.3); 4], TieMode::Half { eps: 1e-6 }).unwrap(), 0.5);
        assert!(binary_accuracy(&[], TieMode::Strict).is_err());
    }

    #[test]
    fn std_matches_formula() {
        let v = [0.9, 0.95, 1.0];
        let m = 0.95;
        let direct = (((0.9f64 - m).powi(2) + 0.0 + (1.0f64 - m).powi(2)) / 2.0).sqrt();
        assert!((sample_std(&v) - direct).abs() < 1e-15);
        assert_eq!(sample_std(&[0.5]), 0.0);
    }

    #[test]
    fn macro_versus_weighted() {
        let ex = |d: &str| RewardExample {
            prompt: "p".into(),
            chosen: "a".into(),
            rejected: "b".into(),
            domain: d.into(),
        };
        let examples = vec![ex("a"), ex("a"), ex("a"), ex("b")];
        let pairs = [(1.0, 0.0), (1.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
        let acc = accuracy_by_domain(&examples, &pairs, &["a".into(), "b".into()], TieMode::Strict).unwrap();
        assert_eq!(acc.macro_avg, 0.5);
        assert_eq!(acc.weighted, 0.75);
        assert_eq!(acc.domains[0].count, 3);
    }
}
