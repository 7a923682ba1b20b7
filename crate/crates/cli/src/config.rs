//! Run configuration: TOML file, `--set key=value` overrides, then named flags.
//!
//! ```toml
//! frames = 8
//! first_frame = 0
//!
//! [solver]
//! lambda = 0.2
//!
//! [registration]
//! max_translation = 20.0
//!
//! [noise]
//! inner = 9
//!
//! [metrics.canny]
//! high_percentile = 0.7
//!
//! [synth]
//! looks = 4.0
//! ```

use std::path::Path;

use octden::metrics::MetricsOptions;
use octden::synthetic::{PhantomSpec, SpeckleSpec};
use octden::{BitDepth, NoiseOptions, RegistrationOptions, SolverParams};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Number of consecutive manifest frames to use.
    pub frames: usize,
    /// Index of the first manifest frame used.
    pub first_frame: usize,
    /// Registration anchor as a manifest index; defaults to the manifest's
    /// own choice, or the middle of the selected frames.
    pub reference_frame: Option<usize>,
    /// Pixels are clamped below at this value before the log transform.
    pub log_floor: f64,
    pub registration: RegistrationOptions,
    pub noise: NoiseOptions,
    pub solver: SolverParams,
    pub metrics: MetricsOptions,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frames: 8,
            first_frame: 0,
            reference_frame: None,
            log_floor: 1.0,
            registration: RegistrationOptions::default(),
            noise: NoiseOptions::default(),
            solver: SolverParams::default(),
            metrics: MetricsOptions::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub bit_depth: u32,
    pub frames: usize,
    pub looks: f64,
    pub max_translation: f64,
    /// Degrees.
    pub max_rotation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let s = SpeckleSpec::default();
        SynthConfig {
            rows: 128,
            cols: 128,
            bit_depth: 8,
            frames: s.frames,
            looks: s.looks,
            max_translation: s.max_translation,
            max_rotation: s.max_rotation,
            seed: s.seed,
        }
    }
}

impl SynthConfig {
    pub fn phantom(&self) -> Result<PhantomSpec, CliError> {
        let mut spec = PhantomSpec::retina(self.rows, self.cols);
        spec.depth = BitDepth::from_bits(self.bit_depth).map_err(|e| CliError::config("synth.bit_depth", e.to_string()))?;
        Ok(spec)
    }

    pub fn speckle(&self) -> SpeckleSpec {
        SpeckleSpec {
            frames: self.frames,
            looks: self.looks,
            max_translation: self.max_translation,
            max_rotation: self.max_rotation,
            seed: self.seed,
            anchor: None,
        }
    }
}

impl RunConfig {
    /// Reads `path` if given, applies `overrides` in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Core(octden::Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                }))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::config(&p.display().to_string(), e.message().to_string()))?
            }
            None => Table::new(),
        };
        for (key, value) in overrides {
            set_path(&mut table, key, parse_value(value))?;
        }
        let cfg = RunConfig::deserialize(Value::Table(table)).map_err(|e| CliError::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.frames < 2 {
            return Err(CliError::config("frames", format!("need at least 2 frames, got {}", self.frames)));
        }
        if !(self.log_floor >= 1.0 && self.log_floor.is_finite()) {
            return Err(CliError::config("log_floor", format!("must be finite and >= 1, got {}", self.log_floor)));
        }
        if let Some(r) = self.reference_frame {
            if r < self.first_frame || r >= self.first_frame + self.frames {
                return Err(CliError::config(
                    "reference_frame",
                    format!("{r} lies outside the selected frames {}..{}", self.first_frame, self.first_frame + self.frames),
                ));
            }
        }
        let scoped = |section: &'static str| move |e: octden::Error| match e {
            octden::Error::Parameter { name, reason } => CliError::config(&format!("{section}.{name}"), reason),
            other => CliError::Core(other),
        };
        self.registration.validate().map_err(scoped("registration"))?;
        self.noise.validate().map_err(scoped("noise"))?;
        self.solver.validate().map_err(scoped("solver"))?;
        self.synth.phantom()?.validate().map_err(scoped("synth"))?;
        self.synth.speckle().validate().map_err(scoped("synth"))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Value {
        Value::try_from(self).expect("config serializes")
    }
}

/// Parses `key=value`.
pub fn split_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    let k = k.trim();
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(format!("malformed key in `{s}`"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// A TOML literal if the text parses as one, otherwise a bare string.
fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
