//! Per-call inference latency through each method's full scoring path.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rmroute_autograd::rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{Method, MethodAssembly};
use crate::data::{group_by_domain, RewardExample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CallOrder {
    /// Domains interleaved at random; the worst case for adapter swapping.
    #[default]
    Shuffled,
    /// All calls of a domain back to back.
    Sorted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub per_domain: usize,
    pub seed: u64,
    pub order: CallOrder,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            per_domain: 100,
            seed: 0,
            order: CallOrder::Shuffled,
            reps: 3,
            warmup: 10,
        }
    }
}

/// `per_domain` (prompt, response) requests from each domain, cycling
/// through that domain's examples, in the requested order.
pub fn bench_requests(
    test: &[RewardExample],
    domains: &[String],
    opts: &BenchOptions,
) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (d, ex) in group_by_domain(test, domains) {
        if ex.is_empty() {
            return Err(Error::EmptyDataset(format!("no benchmark examples for `{d}`")));
        }
        out.extend(
            ex.iter()
                .cycle()
                .take(opts.per_domain)
                .map(|e| (e.prompt.clone(), e.chosen.clone())),
        );
    }
    if opts.order == CallOrder::Shuffled {
        out.shuffle(&mut rng::stream(opts.seed, "bench-order"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepTiming {
    pub median_seconds: f64,
    pub mean_seconds: f64,
    pub swaps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceTiming {
    pub method: Method,
    pub calls: usize,
    /// Median over repetitions of each repetition's per-call median.
    pub median_seconds: f64,
    pub mean_seconds: f64,
    /// Swaps per repetition, averaged.
    pub swaps: f64,
    pub swaps_per_call: f64,
    pub reps: Vec<RepTiming>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times every request individually through `score_one`. Warm-up calls
/// run first and are excluded; the swap counter is reset before each
/// repetition.
pub fn bench_inference(
    assembly: &MethodAssembly,
    requests: &[(String, String)],
    opts: &BenchOptions,
) -> Result<InferenceTiming> {
    if requests.is_empty() || opts.reps == 0 {
        return Err(Error::Config("benchmark needs requests and at least one repetition".into()));
    }
    for (p, r) in requests.iter().cycle().take(opts.warmup) {
        assembly.score_one(p, r)?;
    }
    let mut reps = Vec::with_capacity(opts.reps);
    for _ in 0..opts.reps {
        assembly.reset_swap_count();
        let mut times = Vec::with_capacity(requests.len());
        for (p, r) in requests {
            let t = Instant::now();
            let out = assembly.score_one(p, r)?;
            times.push(t.elapsed().as_secs_f64());
            if !out.reward.is_finite() {
                return Err(Error::NonFinite(f64::from(out.reward), 0.0));
            }
        }
        let mean_seconds = times.iter().sum::<f64>() / times.len() as f64;
        reps.push(RepTiming {
            median_seconds: median(&mut times),
            mean_seconds,
            swaps: assembly.swap_count(),
        });
    }
    let swaps = reps.iter().map(|r| r.swaps as f64).sum::<f64>() / reps.len() as f64;
    Ok(InferenceTiming {
        method: assembly.method(),
        calls: requests.len(),
        median_seconds: median(&mut reps.iter().map(|r| r.median_seconds).collect::<Vec<_>>()),
        mean_seconds: reps.iter().map(|r| r.mean_seconds).sum::<f64>() / reps.len() as f64,
        swaps,
        swaps_per_call: swaps / requests.len() as f64,
        reps,
    })
}

/// One row per method, sorted by method.
pub fn bench_table(timings: &[InferenceTiming]) -> String {
    let mut rows: Vec<&InferenceTiming> = timings.iter().collect();
    rows.sort_by_key(|t| t.method);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>7} {:>12} {:>12} {:>9}",
        "method", "calls", "median ms", "mean ms", "swaps"
    );
    for t in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>12.3} {:>12.3} {:>9.1}",
            t.method.as_str(),
            t.calls,
            t.median_seconds * 1e3,
            t.mean_seconds * 1e3,
            t.swaps
        );
    }
    out
}
