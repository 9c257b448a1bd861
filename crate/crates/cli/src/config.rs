use std::fs;
use std::path::{Path, PathBuf};

use rmroute::assembly::Method;
use rmroute::encoder::EncoderConfig;
use rmroute::lora::AdapterSpec;
use rmroute::moe::MoeConfig;
use rmroute::pipeline::{Preset, Settings};
use rmroute::router::RouterInput;
use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::CliError;

/// A method tag or a list of them.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Methods {
    One(Method),
    Many(Vec<Method>),
}

impl Methods {
    pub fn into_vec(self) -> Vec<Method> {
        match self {
            Self::One(m) => vec![m],
            Self::Many(v) => v,
        }
    }
}

/// `--config` file contents. Relative paths are taken relative to the
/// file's directory.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Option<Methods>,
    pub encoder: Option<PathBuf>,
    pub reference_encoder: Option<PathBuf>,
    pub adapter: Option<PathBuf>,
    pub moe: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub preset: Option<Preset>,
    pub router_input: Option<RouterInput>,
    pub jobs: Option<usize>,
}

/// Parses TOML into `T`; errors carry the file name and position.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.encoder,
            &mut cfg.reference_encoder,
            &mut cfg.adapter,
            &mut cfg.moe,
            &mut cfg.data,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Flag values replace file values.
    pub fn overlay(mut self, flags: RunConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if flags.$f.is_some() { self.$f = flags.$f; } )* };
        }
        take!(method, encoder, reference_encoder, adapter, moe, data, out, seeds, preset, router_input, jobs);
        self
    }

    fn existing(path: &Option<PathBuf>, what: &str) -> Result<Option<PathBuf>, CliError> {
        match path {
            Some(p) if !p.exists() => Err(CliError::Validation(format!(
                "{what} file {} does not exist",
                p.display()
            ))),
            other => Ok(other.clone()),
        }
    }

    pub fn settings(&self) -> Result<Settings, CliError> {
        let mut s = Settings::desk();
        if let Some(p) = Self::existing(&self.encoder, "encoder")? {
            s.encoder = read_toml::<EncoderConfig>(&p)?;
            s.reference_encoder.vocab_size = s.encoder.vocab_size;
            s.reference_encoder.max_sequence_length = s.encoder.max_sequence_length;
        }
        if let Some(p) = Self::existing(&self.reference_encoder, "reference encoder")? {
            s.reference_encoder = read_toml::<EncoderConfig>(&p)?;
        }
        if let Some(p) = Self::existing(&self.adapter, "adapter")? {
            s.adapter = read_toml::<AdapterSpec>(&p)?;
        }
        if let Some(p) = Self::existing(&self.moe, "moe")? {
            s.moe = read_toml::<MoeConfig>(&p)?;
        }
        if let Some(p) = self.preset {
            s.preset = p;
        }
        if let Some(r) = self.router_input {
            s.router_input = r;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn methods(&self) -> Result<Vec<Method>, CliError> {
        let m = self
            .method
            .clone()
            .ok_or_else(|| CliError::Usage("no method given (--method or `method` in the config)".into()))?
            .into_vec();
        if m.is_empty() {
            return Err(CliError::Usage("empty method list".into()));
        }
        Ok(m)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| vec![0])
    }

    pub fn data_dir(&self) -> Result<PathBuf, CliError> {
        let d = self
            .data
            .clone()
            .ok_or_else(|| CliError::Usage("no data directory given (--data)".into()))?;
        if !d.is_dir() {
            return Err(CliError::Validation(format!("data directory {} does not exist", d.display())));
        }
        Ok(d)
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        self.out
            .clone()
            .ok_or_else(|| CliError::Usage("no output directory given (--out or RMROUTE_OUT)".into()))
    }
}

/// Where a trained assembly lives under the output root.
pub fn run_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(method.as_str()).join(format!("seed-{seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_and_overlays() {
        let cfg: RunConfig = toml::from_str(
            "method = [\"rodos\", \"arliss\"]\nseeds = [0, 1]\npreset = \"paper\"\n",
        )
        .unwrap();
        assert_eq!(cfg.methods().unwrap(), vec![Method::Rodos, Method::Arliss]);
        let flags = RunConfig {
            method: Some(Methods::One(Method::Baseline)),
            ..RunConfig::default()
        };
        let merged = cfg.overlay(flags);
        assert_eq!(merged.methods().unwrap(), vec![Method::Baseline]);
        assert_eq!(merged.seeds(), vec![0, 1]);
        assert_eq!(merged.settings().unwrap().preset, Preset::Paper);
    }

    #[test]
    fn unknown_keys_report_position() {
        let err = toml::from_str::<RunConfig>("seeds = [0]\nlearning_rate = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate") && msg.contains("line 2"), "{msg}");
    }
}
