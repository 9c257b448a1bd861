//! Preference-pair datasets: schema, validation, line-oriented files and
//! per-domain manifests, plus converters and a synthetic generator.

mod convert;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use convert::{
    convert_dialogue, convert_dual_summary, convert_multi_ending, convert_preranked,
    convert_records, RawRecord, SourceTag,
};
pub use synth::{domain_name, synth_generate, write_synth, Separability, SynthData, SynthOptions};

/// One preference pair. On disk each example is a single JSON object per
/// line; newlines inside text are written as the JSON escape `\n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardExample {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub domain: String,
}

impl RewardExample {
    /// Problems with this example, empty when valid. `domains` empty means
    /// any domain label is accepted.
    pub fn problems(&self, domains: &[String]) -> Vec<String> {
        let mut out = Vec::new();
        if self.chosen == self.rejected {
            out.push("degenerate pair (chosen == rejected)".to_string());
        }
        if self.domain.is_empty() {
            out.push("empty domain label".to_string());
        } else if !domains.is_empty() && !domains.contains(&self.domain) {
            out.push(format!("unknown domain `{}`", self.domain));
        }
        out
    }

    pub fn validate(&self, domains: &[String]) -> Result<()> {
        let p = self.problems(domains);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidData(p))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainShare {
    pub domain: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: Option<u64>,
    pub total: usize,
    pub domains: Vec<DomainShare>,
}

impl DatasetManifest {
    /// Counts per domain, in `domains` order (first-seen order when empty).
    pub fn compute(
        examples: &[RewardExample],
        domains: &[String],
        split: Split,
        seed: Option<u64>,
    ) -> Self {
        let mut order: Vec<String> = domains.to_vec();
        for e in examples {
            if !order.contains(&e.domain) {
                order.push(e.domain.clone());
            }
        }
        let total = examples.len();
        let shares = order
            .into_iter()
            .map(|d| {
                let count = examples.iter().filter(|e| e.domain == d).count();
                let percent = if total == 0 {
                    0.0
                } else {
                    100.0 * count as f64 / total as f64
                };
                DomainShare {
                    domain: d,
                    count,
                    percent,
                }
            })
            .collect();
        Self {
            split,
            seed,
            total,
            domains: shares,
        }
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.domain.clone()).collect()
    }

    /// Aligned table: domain, count, share.
    pub fn table(&self) -> String {
        let mut s = format!("{:<16} {:>8} {:>8}\n", "domain", "count", "share");
        for d in &self.domains {
            s.push_str(&format!(
                "{:<16} {:>8} {:>7.1}%\n",
                d.domain, d.count, d.percent
            ));
        }
        s.push_str(&format!(
            "{:<16} {:>8} {:>7.1}%\n",
            "total", self.total, 100.0
        ));
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Parses JSONL text. Every bad line is reported with its 1-based number.
pub fn parse_examples(text: &str, domains: &[String]) -> Result<Vec<RewardExample>> {
    let mut out = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RewardExample>(line) {
            Ok(ex) => {
                let p = ex.problems(domains);
                if p.is_empty() {
                    out.push(ex);
                } else {
                    problems.extend(p.into_iter().map(|m| format!("line {}: {m}", i + 1)));
                }
            }
            Err(e) => problems.push(format!("line {}: malformed record: {e}", i + 1)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::InvalidData(problems));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("no records".into()));
    }
    Ok(out)
}

/// Reads a dataset file. The manifest split is taken from the file stem
/// (`test*` → test, otherwise train).
pub fn load_examples(
    path: &Path,
    domains: &[String],
) -> Result<(Vec<RewardExample>, DatasetManifest)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let examples = parse_examples(&text, domains).map_err(|e| match e {
        Error::EmptyDataset(_) => Error::EmptyDataset(path.display().to_string()),
        other => other,
    })?;
    let split = match path.file_stem().and_then(|s| s.to_str()) {
        Some(s) if s.starts_with("test") => Split::Test,
        _ => Split::Train,
    };
    let manifest = DatasetManifest::compute(&examples, domains, split, None);
    Ok((examples, manifest))
}

pub fn examples_to_jsonl(examples: &[RewardExample]) -> String {
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(e).expect("example serializes"));
        s.push('\n');
    }
    s
}

pub fn write_examples(path: &Path, examples: &[RewardExample]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(examples_to_jsonl(examples).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// A `train.jsonl` / `test.jsonl` pair with its domain list.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub domains: Vec<String>,
    pub train: Vec<RewardExample>,
    pub test: Vec<RewardExample>,
}

/// Domain order comes from `train.manifest.json` when present, otherwise
/// from first appearance in the training file.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let sidecar = dir.join("train.manifest.json");
    let domains = if sidecar.exists() {
        DatasetManifest::read(&sidecar)?.domain_names()
    } else {
        let (train, _) = load_examples(&dir.join("train.jsonl"), &[])?;
        let mut d: Vec<String> = Vec::new();
        for e in &train {
            if !d.contains(&e.domain) {
                d.push(e.domain.clone());
            }
        }
        d
    };
    let (train, _) = load_examples(&dir.join("train.jsonl"), &domains)?;
    let (test, _) = load_examples(&dir.join("test.jsonl"), &domains)?;
    Ok(Dataset {
        domains,
        train,
        test,
    })
}

/// Examples grouped by domain, in `domains` order.
pub fn group_by_domain(
    examples: &[RewardExample],
    domains: &[String],
) -> Vec<(String, Vec<RewardExample>)> {
    let mut map: BTreeMap<&str, Vec<RewardExample>> = BTreeMap::new();
    for e in examples {
        map.entry(&e.domain).or_default().push(e.clone());
    }
    domains
        .iter()
        .map(|d| (d.clone(), map.remove(d.as_str()).unwrap_or_default()))
        .collect()
}

/// Keeps only examples whose domain passes `keep`. Stands in for source
/// filtering such as language selection.
pub fn filter_domains(
    examples: Vec<RewardExample>,
    keep: impl Fn(&str) -> bool,
) -> Vec<RewardExample> {
    examples.into_iter().filter(|e| keep(&e.domain)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(domain: &str, chosen: &str) -> RewardExample {
        RewardExample {
            prompt: "p".into(),
            chosen: chosen.into(),
            rejected: "r".into(),
            domain: domain.into(),
        }
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn three_lines_two_domains() {
        let text = examples_to_jsonl(&[ex("a", "x"), ex("a", "y"), ex("b", "z")]);
        let got = parse_examples(&text, &names(&["a", "b"])).unwrap();
        assert_eq!(got.len(), 3);
        let m = DatasetManifest::compute(&got, &names(&["a", "b"]), Split::Train, None);
        assert!((m.domains[0].percent - 66.7).abs() < 0.05);
        assert!((m.domains[1].percent - 33.3).abs() < 0.05);
        let sum: f64 = m.domains.iter().map(|d| d.percent).sum();
        assert!((sum - 100.0).abs() < 0.1);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(matches!(
            parse_examples("", &[]),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn bad_lines_carry_numbers() {
        let text = format!(
            "{}\n{{not json\n{}",
            serde_json::to_string(&ex("a", "r")).unwrap(),
            serde_json::to_string(&ex("zzz", "q")).unwrap()
        );
        let Err(Error::InvalidData(p)) = parse_examples(&text, &names(&["a"])) else {
            panic!("expected invalid data");
        };
        assert!(p[0].starts_with("line 1: degenerate pair"), "{p:?}");
        assert!(p[1].starts_with("line 2: malformed"), "{p:?}");
        assert!(p[2].starts_with("line 3: unknown domain"), "{p:?}");
    }

    #[test]
    fn newlines_round_trip() {
        let mut e = ex("a", "two\nlines");
        e.prompt = "Human: hi\nAssistant: hello".into();
        let text = examples_to_jsonl(&[e.clone()]);
        assert_eq!(text.lines().count(), 1);
        assert_eq!(parse_examples(&text, &[]).unwrap(), vec![e]);
    }
}
