use std::fs;
use std::path::{Path, PathBuf};

use rmroute::assembly::{count_serialized_params, read_manifest, Method, MethodAssembly};
use rmroute::bench::{bench_inference, bench_requests, bench_table, BenchOptions, CallOrder};
use rmroute::data::{
    convert_records, load_dataset, synth_generate, write_examples, write_synth, Dataset, DatasetManifest, RawRecord,
    Separability, Split, SynthOptions,
};
use rmroute::error::Error;
use rmroute::eval::{accuracy_table, aggregate, evaluate, timing_table, Cell, TieMode};
use rmroute::params::{
    arliss_total, parameter_report, params_table, percent_of, report_from_manifest, rodos_total, ParameterReport,
    ReportInputs,
};
use rmroute::pipeline::{build_method, TrainTiming};
use serde::Serialize;

use crate::config::{run_dir, RunConfig};
use crate::CliError;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub struct SynthCmd {
    pub domains: usize,
    pub per_domain: usize,
    pub test_per_domain: usize,
    pub mode: String,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn synth(c: SynthCmd) -> Result<(), CliError> {
    let mode: Separability = c.mode.parse()?;
    let opts = SynthOptions {
        domains: c.domains,
        train_per_domain: c.per_domain,
        test_per_domain: c.test_per_domain,
        mode,
        seed: c.seed,
    };
    let data = synth_generate(&opts)?;
    write_synth(&data, &c.out, c.seed)?;
    print!("{}", data.manifest(Split::Train, c.seed).table());
    println!("wrote {}", c.out.display());
    Ok(())
}

pub fn convert(input: &Path, name: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(input).map_err(|e| CliError::Validation(format!("{}: {e}", input.display())))?;
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => problems.push(format!("line {}: {e}", i + 1)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::InvalidData(problems).into());
    }
    let examples = convert_records(&records, seed)?;
    let mut domains: Vec<String> = Vec::new();
    for e in &examples {
        if !domains.contains(&e.domain) {
            domains.push(e.domain.clone());
        }
    }
    let split = if name.starts_with("test") { Split::Test } else { Split::Train };
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    write_examples(&out.join(format!("{name}.jsonl")), &examples)?;
    let manifest = DatasetManifest::compute(&examples, &domains, split, Some(seed));
    manifest.write(&out.join(format!("{name}.manifest.json")))?;
    print!("{}", manifest.table());
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, CliError> {
    Ok(load_dataset(&cfg.data_dir()?)?)
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let methods = cfg.methods()?;
    let settings = cfg.settings()?;
    let out = cfg.out_dir()?;
    let data = load_data(cfg)?;
    if methods.iter().any(|m| m.has_router()) && data.domains.len() < 2 {
        return Err(Error::SingleDomain(data.domains.clone()).into());
    }
    let jobs = cfg.jobs.unwrap_or(1);
    for &method in &methods {
        for seed in cfg.seeds() {
            let trained = build_method(method, seed, &data.train, &data.domains, &settings, jobs)?;
            let dir = run_dir(&out, method, seed);
            let manifest = trained.assembly.save(&dir, &settings.manifest_info(method, seed))?;
            write_json(&dir.join("timing.json"), &trained.timing)?;
            let mut log = String::new();
            for c in &trained.timing.components {
                for line in &c.log {
                    log.push_str(&format!("component={} {line}\n", c.name));
                }
            }
            write_text(&dir.join("train_log.txt"), &log)?;
            println!(
                "{method} seed {seed}: {} checkpoints, {:.2}s first epoch, {}",
                manifest.components.len(),
                trained.timing.total_first_epoch_seconds,
                dir.display()
            );
        }
    }
    Ok(())
}

fn load_run(out: &Path, method: Method, seed: u64) -> Result<(MethodAssembly, PathBuf), CliError> {
    let dir = run_dir(out, method, seed);
    if !dir.join(rmroute::assembly::MANIFEST_FILE).exists() {
        return Err(CliError::Runtime(format!(
            "no trained {method} assembly for seed {seed} under {} (run `train` first)",
            out.display()
        )));
    }
    Ok((MethodAssembly::load(&dir)?.0, dir))
}

pub fn eval(cfg: &RunConfig, tie_eps: Option<f32>) -> Result<(), CliError> {
    let methods = cfg.methods()?;
    let out = cfg.out_dir()?;
    let data = load_data(cfg)?;
    let tie = tie_eps.map_or(TieMode::Strict, |eps| TieMode::Half { eps });
    let mut cells = Vec::new();
    for &method in &methods {
        for seed in cfg.seeds() {
            let (assembly, dir) = load_run(&out, method, seed)?;
            let evaluation = evaluate(&assembly, &data.test, tie).map_err(|e| Error::Cell {
                method: method.to_string(),
                seed,
                source: Box::new(e),
            })?;
            let timing_path = dir.join("timing.json");
            let timing: TrainTiming = match fs::read_to_string(&timing_path) {
                Ok(t) => serde_json::from_str(&t).map_err(|e| CliError::Runtime(format!("{}: {e}", timing_path.display())))?,
                Err(_) => TrainTiming::default(),
            };
            cells.push(Cell {
                method,
                seed,
                evaluation,
                timing,
            });
        }
    }
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    for &method in &methods {
        let own: Vec<&Cell> = cells.iter().filter(|c| c.method == method).collect();
        let (r, t) = aggregate(&own)?;
        reports.push(r);
        timings.push(t);
    }
    let text = format!("{}\n{}", accuracy_table(&reports), timing_table(&timings));
    print!("{text}");
    write_text(&out.join("eval.txt"), &text)?;
    write_json(
        &out.join("eval.json"),
        &serde_json::json!({ "cells": cells, "reports": reports, "timings": timings }),
    )?;
    Ok(())
}

pub struct BenchCmd {
    pub per_domain: usize,
    pub order: CallOrder,
    pub reps: usize,
    pub warmup: usize,
}

pub fn bench(cfg: &RunConfig, c: BenchCmd) -> Result<(), CliError> {
    let mut methods = cfg.methods()?;
    methods.sort();
    let out = cfg.out_dir()?;
    let data = load_data(cfg)?;
    let seed = cfg.seeds()[0];
    let opts = BenchOptions {
        per_domain: c.per_domain,
        seed,
        order: c.order,
        reps: c.reps,
        warmup: c.warmup,
    };
    let requests = bench_requests(&data.test, &data.domains, &opts)?;
    let mut timings = Vec::new();
    for method in methods {
        let (assembly, _) = load_run(&out, method, seed)?;
        timings.push(bench_inference(&assembly, &requests, &opts)?);
    }
    let text = bench_table(&timings);
    print!("{text}");
    write_text(&out.join("bench.txt"), &text)?;
    write_json(&out.join("bench.json"), &timings)
}

pub struct ParamsCmd {
    pub domains: Option<usize>,
    pub toy_backbone: Option<usize>,
    pub toy_adapter: Option<usize>,
}

#[derive(Serialize)]
struct ParamsRow {
    #[serde(flatten)]
    report: ParameterReport,
    /// Brute-force count over a trained assembly's checkpoints, if present.
    serialized: Option<usize>,
}

pub fn report_params(cfg: &RunConfig, c: ParamsCmd) -> Result<(), CliError> {
    let out = cfg.out_dir()?;
    if let Some(backbone) = c.toy_backbone {
        let n = c.domains.unwrap_or(5);
        let adapter = c.toy_adapter.unwrap_or(0);
        let rodos = rodos_total(backbone, n);
        let arliss = arliss_total(backbone, adapter, n);
        let text = format!(
            "{:<10} {:>12} {:>9}\n{:<10} {:>12} {:>8.1}%\n{:<10} {:>12} {:>8.1}%\n{:<10} {:>12} {:>8.1}%\narliss/rodos {:.1}%\n",
            "method", "params", "% ref",
            "baseline", backbone, 100.0,
            "rodos", rodos, percent_of(rodos, backbone),
            "arliss", arliss, percent_of(arliss, backbone),
            percent_of(arliss, rodos),
        );
        print!("{text}");
        return write_text(&out.join("params.txt"), &text);
    }
    let settings = cfg.settings()?;
    let methods = cfg.method.clone().map_or_else(|| Method::ALL.to_vec(), |m| m.into_vec());
    let seed = cfg.seeds()[0];
    let domains = match c.domains {
        Some(n) => n,
        None => match &cfg.data {
            Some(_) => load_data(cfg)?.domains.len(),
            None => 5,
        },
    };
    let inputs = ReportInputs {
        encoder: settings.encoder,
        moe: settings.moe,
        adapter: settings.adapter.clone(),
        domains,
        reference: settings.reference_encoder,
    };
    let mut rows = Vec::new();
    for method in methods {
        let dir = run_dir(&out, method, seed);
        let (report, serialized) = if dir.join(rmroute::assembly::MANIFEST_FILE).exists() {
            let manifest = read_manifest(&dir)?;
            let reference = parameter_report(method, &inputs)?.reference_total;
            let counted = count_serialized_params(&dir)?;
            let report = report_from_manifest(&manifest, reference);
            if report.total != counted {
                return Err(CliError::Runtime(format!(
                    "{method}: manifest counts {} parameters but checkpoints hold {counted}",
                    report.total
                )));
            }
            (report, Some(counted))
        } else {
            (parameter_report(method, &inputs)?, None)
        };
        rows.push(ParamsRow { report, serialized });
    }
    let reports: Vec<ParameterReport> = rows.iter().map(|r| r.report.clone()).collect();
    let text = params_table(&reports);
    print!("{text}");
    write_text(&out.join("params.txt"), &text)?;
    write_json(&out.join("params.json"), &rows)
}
