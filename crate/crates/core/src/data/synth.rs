use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rmroute_autograd::rng::{self, StreamRng};
use serde::{Deserialize, Serialize};

use super::{write_examples, DatasetManifest, RewardExample, Split};
use crate::error::{Error, Result};

const NAMES: [&str; 26] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliett",
    "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
    "uniform", "victor", "whiskey", "xray", "yankee", "zulu",
];

const TOPIC_WORDS: usize = 24;
const MARKERS: usize = 4;
const PROMPT_LEN: usize = 6;
const RESPONSE_TOPIC: usize = 4;
const RESPONSE_MARKERS: usize = 2;

/// Name of the i-th synthetic domain.
pub fn domain_name(i: usize) -> String {
    NAMES
        .get(i)
        .map_or_else(|| format!("domain{i}"), |s| s.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Separability {
    /// Every domain has a private vocabulary.
    Disjoint,
    /// Prompts and responses mix private words with a shared pool.
    Overlapping,
}

impl FromStr for Separability {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" | "disjoint-vocab" => Ok(Self::Disjoint),
            "overlapping" => Ok(Self::Overlapping),
            other => Err(Error::Config(format!(
                "unknown separability mode `{other}` (disjoint, overlapping)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub domains: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub mode: Separability,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            domains: 5,
            train_per_domain: 200,
            test_per_domain: 50,
            mode: Separability::Disjoint,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub domains: Vec<String>,
    pub train: Vec<RewardExample>,
    pub test: Vec<RewardExample>,
}

impl SynthData {
    pub fn manifest(&self, split: Split, seed: u64) -> DatasetManifest {
        let examples = match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        };
        DatasetManifest::compute(examples, &self.domains, split, Some(seed))
    }
}

fn pick_words(rng: &mut StreamRng, own: &str, n: usize, mode: Separability) -> Vec<String> {
    (0..n)
        .map(|_| {
            let j = rng.gen_range(0..TOPIC_WORDS);
            if mode == Separability::Overlapping && rng.gen_bool(0.5) {
                format!("common.t{j}")
            } else {
                format!("{own}.t{j}")
            }
        })
        .collect()
}

/// Chosen and rejected share their topic words; the chosen one carries the
/// domain's `good` markers, the rejected one its `bad` markers.
fn example(rng: &mut StreamRng, name: &str, mode: Separability) -> RewardExample {
    let prompt = pick_words(rng, name, PROMPT_LEN, mode).join(" ");
    let topic = pick_words(rng, name, RESPONSE_TOPIC, mode);
    let slots: Vec<usize> = {
        let mut s: Vec<usize> = (0..RESPONSE_TOPIC + RESPONSE_MARKERS).collect();
        s.shuffle(rng);
        s.truncate(RESPONSE_MARKERS);
        s
    };
    let markers: Vec<usize> = (0..RESPONSE_MARKERS)
        .map(|_| rng.gen_range(0..MARKERS))
        .collect();
    let build = |kind: &str| {
        let mut words = topic.clone();
        let mut pos: Vec<(usize, usize)> =
            slots.iter().copied().zip(markers.iter().copied()).collect();
        pos.sort_unstable();
        for (slot, m) in pos {
            words.insert(slot.min(words.len()), format!("{name}.{kind}{m}"));
        }
        words.join(" ")
    };
    RewardExample {
        prompt,
        chosen: build("good"),
        rejected: build("bad"),
        domain: name.to_string(),
    }
}

/// Deterministic per seed. Each domain draws from its own stream, so the
/// first n domains are identical whatever the total domain count.
pub fn synth_generate(opts: &SynthOptions) -> Result<SynthData> {
    if opts.domains == 0 || opts.train_per_domain == 0 || opts.test_per_domain == 0 {
        return Err(Error::Config(
            "domains and per-domain example counts must be positive".into(),
        ));
    }
    let domains: Vec<String> = (0..opts.domains).map(domain_name).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, name) in domains.iter().enumerate() {
        let dseed = rng::child_seed(opts.seed, "synth-domain", i as u64);
        let mut r = rng::stream(dseed, "train");
        train.extend((0..opts.train_per_domain).map(|_| example(&mut r, name, opts.mode)));
        let mut r = rng::stream(dseed, "test");
        test.extend((0..opts.test_per_domain).map(|_| example(&mut r, name, opts.mode)));
    }
    Ok(SynthData {
        domains,
        train,
        test,
    })
}

/// Writes `train.jsonl`, `test.jsonl` and their `.manifest.json` sidecars.
pub fn write_synth(data: &SynthData, dir: &Path, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in [Split::Train, Split::Test] {
        let examples = match split {
            Split::Train => &data.train,
            Split::Test => &data.test,
        };
        write_examples(&dir.join(format!("{}.jsonl", split.as_str())), examples)?;
        data.manifest(split, seed)
            .write(&dir.join(format!("{}.manifest.json", split.as_str())))?;
    }
    Ok(())
}
