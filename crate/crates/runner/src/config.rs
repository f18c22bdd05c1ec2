//! Experiment configuration files.

use std::fmt;
use std::path::{Path, PathBuf};

use mpnqs::dmc::DmcConfig;
use mpnqs::mpnn::NetworkConfig;
use mpnqs::observables::ObservablesConfig;
use mpnqs::sampler::SamplerConfig;
use mpnqs::sr::{SrConfig, SrSolver};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarization {
    Unpolarized,
    Polarized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrbitalChoice {
    #[default]
    PlaneWaves,
    GaussianBcc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub n_particles: usize,
    pub r_s: f64,
    pub polarization: Polarization,
    #[serde(default)]
    pub orbitals: OrbitalChoice,
    /// Target total momentum in units of `2π/L`.
    #[serde(default)]
    pub k_tot: [i32; 3],
    /// Initial Gaussian exponent; an r_s-dependent default when absent.
    #[serde(default)]
    pub gaussian_alpha: Option<f64>,
    #[serde(default = "default_image_cutoff")]
    pub image_cutoff: i32,
    /// Switches the Coulomb interaction off.
    #[serde(default = "default_true")]
    pub interaction: bool,
    /// Identity backflow and no orbital factor: the plain determinant.
    #[serde(default)]
    pub bare_determinant: bool,
    #[serde(default = "default_ewald_tolerance")]
    pub ewald_tolerance: f64,
}

fn default_image_cutoff() -> i32 {
    1
}

fn default_true() -> bool {
    true
}

fn default_ewald_tolerance() -> f64 {
    1e-10
}

impl SystemConfig {
    pub fn spins(&self) -> (usize, usize) {
        match self.polarization {
            Polarization::Polarized => (self.n_particles, 0),
            Polarization::Unpolarized => (self.n_particles - self.n_particles / 2, self.n_particles / 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Overrides the density table.
    pub learning_rate: Option<f64>,
    pub diag_shift: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
    pub solver: SrSolver,
    pub steps: usize,
    pub checkpoint_interval: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let sr = SrConfig::default();
        Self {
            learning_rate: sr.learning_rate,
            diag_shift: sr.diag_shift,
            cg_tolerance: sr.cg_tolerance,
            cg_max_iterations: sr.cg_max_iterations,
            solver: sr.solver,
            steps: 2000,
            checkpoint_interval: 100,
        }
    }
}

impl OptimizerConfig {
    pub fn sr(&self) -> SrConfig {
        SrConfig {
            learning_rate: self.learning_rate,
            diag_shift: self.diag_shift,
            cg_tolerance: self.cg_tolerance,
            cg_max_iterations: self.cg_max_iterations,
            solver: self.solver,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("output"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub observables: ObservablesConfig,
    #[serde(default)]
    pub dmc: Option<DmcConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A problem with the configuration, located in the source when possible.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigIssue {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.key, self.line) {
            (Some(k), Some(l)) => write!(f, "line {l}: {k}: {}", self.message),
            (Some(k), None) => write!(f, "{k}: {}", self.message),
            (None, Some(l)) => write!(f, "line {l}: {}", self.message),
            (None, None) => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub struct ConfigError {
    pub source_name: String,
    pub issues: Vec<ConfigIssue>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration {}", self.source_name)?;
        for i in &self.issues {
            write!(f, "\n  {i}")?;
        }
        Ok(())
    }
}

impl ConfigError {
    pub fn single(source_name: &str, message: impl Into<String>) -> Self {
        Self {
            source_name: source_name.to_string(),
            issues: vec![ConfigIssue {
                key: None,
                line: None,
                message: message.into(),
            }],
        }
    }
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line where `section.key` (or a top-level `key`) is assigned.
pub fn locate_key(text: &str, dotted: &str) -> Option<usize> {
    let (section, key) = match dotted.rsplit_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, dotted),
    };
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = Some(rest.trim_end_matches(']').trim().to_string());
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim();
        let in_section = match (section, current.as_deref()) {
            (Some(s), Some(c)) => s == c && lhs == key,
            (Some(s), None) => lhs == format!("{s}.{key}"),
            (None, None) => lhs == key,
            (None, Some(_)) => false,
        };
        if in_section {
            return Some(idx + 1);
        }
    }
    // a whole section, e.g. when a required key is missing
    let header = format!("[{dotted}]");
    text.lines().position(|l| l.trim() == header).map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, source_name: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError {
            source_name: source_name.to_string(),
            issues: vec![ConfigIssue {
                key: None,
                line: e.span().map(|s| line_of(text, s.start)),
                message: e.message().to_string(),
            }],
        })?;
        let issues: Vec<ConfigIssue> = cfg
            .semantic_issues()
            .into_iter()
            .map(|(key, message)| ConfigIssue {
                line: locate_key(text, &key),
                key: Some(key),
                message,
            })
            .collect();
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError {
                source_name: source_name.to_string(),
                issues,
            })
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::single(&name, format!("cannot read file: {e}")))?;
        Self::from_toml(&text, &name)
    }

    /// Every semantic problem as `(dotted key, message)`.
    pub fn semantic_issues(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let s = &self.system;
        if s.n_particles == 0 {
            out.push(("system.n_particles".into(), "must be positive".into()));
        }
        if !(s.r_s.is_finite() && s.r_s > 0.0) {
            out.push(("system.r_s".into(), format!("must be positive, got {}", s.r_s)));
        }
        if !(s.ewald_tolerance > 0.0 && s.ewald_tolerance < 1.0) {
            out.push(("system.ewald_tolerance".into(), "must lie in (0, 1)".into()));
        }
        if s.orbitals == OrbitalChoice::GaussianBcc {
            let half = s.n_particles / 2;
            let m = (half as f64).cbrt().round() as usize;
            if s.n_particles % 2 != 0 || m == 0 || 2 * m * m * m != s.n_particles {
                out.push((
                    "system.n_particles".into(),
                    format!("BCC Gaussian orbitals need N = 2·m³ (2, 16, 54, 128, ...), got {}", s.n_particles),
                ));
            }
            if let Some(a) = s.gaussian_alpha {
                if !(a.is_finite() && a > 0.0) {
                    out.push(("system.gaussian_alpha".into(), "must be positive".into()));
                }
            }
            if s.image_cutoff < 0 {
                out.push(("system.image_cutoff".into(), "must be non-negative".into()));
            }
        }
        let mut core = |r: mpnqs::Result<()>, section: &str| {
            if let Err(e) = r {
                let msg = match e {
                    mpnqs::Error::Config(m) => m,
                    other => other.to_string(),
                };
                // core messages start with the dotted key they refer to
                let key = msg.split_whitespace().next().filter(|k| k.starts_with(&format!("{section}."))).map(str::to_string);
                match key {
                    Some(k) => {
                        let rest = msg[k.len()..].trim().to_string();
                        out.push((k, rest));
                    }
                    None => out.push((section.to_string(), msg)),
                }
            }
        };
        core(self.network.validate(), "network");
        core(self.sampler.validate(), "sampler");
        core(self.optimizer.sr().validate(), "optimizer");
        core(self.observables.validate(), "observables");
        if let Some(d) = &self.dmc {
            core(d.validate(), "dmc");
        }
        if self.optimizer.checkpoint_interval == 0 {
            out.push(("optimizer.checkpoint_interval".into(), "must be positive".into()));
        }
        out
    }

    /// Learning rate in effect, and whether it comes from the table without
    /// an exact density match.
    pub fn learning_rate(&self) -> (f64, bool) {
        match self.optimizer.learning_rate {
            Some(eta) => (eta, false),
            None => {
                let (eta, exact) = mpnqs::sr::learning_rate_for(self.system.r_s);
                (eta, !exact)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// SHA-256 over the blocks that give checkpointed parameters their
    /// meaning: the system, the network layout and the seed.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Scope<'a> {
            system: &'a SystemConfig,
            network: &'a NetworkConfig,
            seed: u64,
        }
        let json = serde_json::to_string(&Scope {
            system: &self.system,
            network: &self.network,
            seed: self.seed,
        })
        .expect("configuration serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
