//! TOML schemas for the `fit` and `simulate` commands.
//!
//! Relative paths inside a config file resolve against the file's own
//! directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tvpinn_core::losses::{BcScaling, ConstraintSpec};
use tvpinn_core::neural::NetworkConfig;
use tvpinn_core::ode::{DosingSchedule, ParamSet, RateProfile, CONSTANT_NAMES};
use tvpinn_core::trainer::{
    pinned_constants, AdamConfig, ConstantSetting, LogVarianceInit, RateModel, TrainConfig,
};

use crate::CliError;

/// Parse TOML into `T`, reporting the dotted path of the offending field.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T, CliError> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<root>".to_string() } else { path };
        CliError::config(field, e.inner().message().trim().to_string())
    })
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config("<file>", format!("cannot read {}: {e}", path.display())))?;
    parse_toml(&text)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn default_histology() -> Vec<ConstraintSpec> {
    ConstraintSpec::histology_default()
}

fn default_initial() -> ConstraintSpec {
    ConstraintSpec::initial_default()
}

fn default_dosing() -> DosingSchedule {
    DosingSchedule::gem_then_ot1(0.5, 10.0)
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_epochs() -> usize {
    20_000
}

fn default_lr() -> f64 {
    1e-3
}

fn default_m_interp() -> usize {
    100
}

fn default_log_interval() -> usize {
    100
}

fn default_eval_points() -> usize {
    500
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_rate_scale() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateNetworkSection {
    pub hidden: Vec<usize>,
}

impl Default for StateNetworkSection {
    fn default() -> Self {
        Self {
            hidden: NetworkConfig::state_default().hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateNetworkSection {
    pub hidden: Vec<usize>,
    /// s_MT per unit network output.
    #[serde(default = "default_rate_scale")]
    pub scale: f64,
    /// Replace the network by a known profile.
    #[serde(default)]
    pub pinned: Option<RateProfile>,
}

impl Default for RateNetworkSection {
    fn default() -> Self {
        Self {
            hidden: NetworkConfig::rate_default().hidden,
            scale: default_rate_scale(),
            pinned: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworksSection {
    #[serde(default)]
    pub state: StateNetworkSection,
    #[serde(default)]
    pub rate: RateNetworkSection,
}

/// Proportion anchors written by `simulate`, usable by `fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorFile {
    pub initial: Option<ConstraintSpec>,
    pub histology: Vec<ConstraintSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// Observation CSV (`day,total_volume`).
    pub data: PathBuf,
    #[serde(default)]
    pub t0: Option<f64>,
    #[serde(default)]
    pub tf: Option<f64>,
    #[serde(default = "default_initial")]
    pub initial: ConstraintSpec,
    #[serde(default = "default_histology")]
    pub histology: Vec<ConstraintSpec>,
    /// JSON anchors replacing `initial` and `histology`.
    #[serde(default)]
    pub anchors_file: Option<PathBuf>,
    #[serde(default = "default_dosing")]
    pub dosing: DosingSchedule,
    /// Per-constant settings; unlisted constants are pinned to the
    /// synthetic fixture values.
    #[serde(default)]
    pub constants: BTreeMap<String, ConstantSetting>,
    #[serde(default)]
    pub networks: NetworksSection,
    #[serde(default = "default_m_interp")]
    pub m_interp: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    #[serde(default = "default_eval_points")]
    pub eval_points: usize,
    #[serde(default)]
    pub bc_scaling: BcScaling,
    #[serde(default)]
    pub log_variance_init: LogVarianceInit,
    #[serde(default)]
    pub checkpoint_interval: usize,
}

impl FitConfig {
    /// A config with every default and the given data path.
    pub fn with_data(data: impl Into<PathBuf>) -> Self {
        let mut cfg = parse_toml::<Self>("data = \"\"").expect("defaults parse");
        cfg.data = data.into();
        cfg
    }

    /// Make relative paths absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        self.data = resolve(base, &self.data);
        self.output = resolve(base, &self.output);
        if let Some(a) = &self.anchors_file {
            self.anchors_file = Some(resolve(base, a));
        }
    }

    /// Load the anchor file, if any, into `initial` and `histology`.
    pub fn load_anchors(&mut self) -> Result<(), CliError> {
        let Some(path) = self.anchors_file.take() else {
            return Ok(());
        };
        let text = std::fs::read_to_string(&path).map_err(|e| {
            CliError::config("anchors_file", format!("cannot read {}: {e}", path.display()))
        })?;
        let anchors: AnchorFile = serde_json::from_str(&text)
            .map_err(|e| CliError::config("anchors_file", e.to_string()))?;
        let initial = anchors
            .initial
            .ok_or_else(|| CliError::config("anchors_file.initial", "missing"))?;
        self.initial = initial;
        self.histology = anchors.histology;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "at least one seed is required"));
        }
        if let (Some(a), Some(b)) = (self.t0, self.tf) {
            if !(b > a) {
                return Err(CliError::config("tf", format!("must exceed t0 = {a}")));
            }
        }
        check_proportions("initial", &self.initial)?;
        for (i, h) in self.histology.iter().enumerate() {
            check_proportions(&format!("histology[{i}]"), h)?;
        }
        for name in self.constants.keys() {
            if !CONSTANT_NAMES.contains(&name.as_str()) {
                return Err(CliError::config(
                    format!("constants.{name}"),
                    format!("unknown constant; expected one of {}", CONSTANT_NAMES.join(", ")),
                ));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CliError::config("learning_rate", "must be positive"));
        }
        for (k, &w) in self.networks.state.hidden.iter().enumerate() {
            if w == 0 {
                return Err(CliError::config(
                    format!("networks.state.hidden[{k}]"),
                    "layer size must be positive",
                ));
            }
        }
        for (k, &w) in self.networks.rate.hidden.iter().enumerate() {
            if w == 0 {
                return Err(CliError::config(
                    format!("networks.rate.hidden[{k}]"),
                    "layer size must be positive",
                ));
            }
        }
        Ok(())
    }

    /// Check that anchor and dosing days fall inside `[t0, tF]`.
    pub fn validate_days(&self, t0: f64, tf: f64) -> Result<(), CliError> {
        let inside = |d: f64| d >= t0 && d <= tf;
        if !inside(self.initial.day) {
            return Err(CliError::config(
                "initial.day",
                format!("day {} outside [{t0}, {tf}]", self.initial.day),
            ));
        }
        for (i, h) in self.histology.iter().enumerate() {
            if !inside(h.day) {
                return Err(CliError::config(
                    format!("histology[{i}].day"),
                    format!("day {} outside [{t0}, {tf}]", h.day),
                ));
            }
        }
        for (i, inj) in self.dosing.injections.iter().enumerate() {
            if !inside(inj.day) {
                return Err(CliError::config(
                    format!("dosing.injections[{i}].day"),
                    format!("day {} outside [{t0}, {tf}]", inj.day),
                ));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut constants = pinned_constants(&ParamSet::fixture());
        for (i, name) in CONSTANT_NAMES.iter().enumerate() {
            if let Some(c) = self.constants.get(*name) {
                constants[i] = *c;
            }
        }
        let mut cfg = TrainConfig::new(constants, self.dosing.clone());
        cfg.state_network = NetworkConfig::new(self.networks.state.hidden.clone(), 4);
        cfg.rate = match &self.networks.rate.pinned {
            Some(profile) => RateModel::Pinned {
                profile: profile.clone(),
            },
            None => RateModel::Network {
                network: NetworkConfig::new(self.networks.rate.hidden.clone(), 1),
                scale: self.networks.rate.scale,
            },
        };
        cfg.epochs = self.epochs;
        cfg.adam = AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        };
        cfg.m_interp = self.m_interp;
        cfg.log_interval = self.log_interval;
        cfg.eval_points = self.eval_points;
        cfg.bc_scaling = self.bc_scaling;
        cfg.log_variance_init = self.log_variance_init;
        cfg.checkpoint_interval = self.checkpoint_interval;
        cfg.window = match (self.t0, self.tf) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        };
        cfg
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), so the
    /// hash ignores field order in the source file.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of `value` serialized as canonical JSON.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    // serde_json::Value maps are BTreeMaps, so keys come out sorted
    let canonical = serde_json::to_value(value).expect("config serializes to JSON");
    let text = serde_json::to_string(&canonical).expect("JSON value serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_proportions(field: &str, spec: &ConstraintSpec) -> Result<(), CliError> {
    spec.validate()
        .map_err(|e| CliError::config(format!("{field}.proportions"), e.to_string()))
}

/// The ten constants other than s_MT, all required.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantValues {
    pub p_c: f64,
    pub k_tc: f64,
    pub k_gc: f64,
    pub n_t: f64,
    pub s_ct: f64,
    pub k_gt: f64,
    pub r_m: f64,
    pub k_gm: f64,
    pub d_m: f64,
    pub d_g: f64,
}

impl ConstantValues {
    pub fn param_set(&self) -> ParamSet {
        ParamSet::from_constants(
            [
                self.p_c, self.k_tc, self.k_gc, self.n_t, self.s_ct, self.k_gt, self.r_m,
                self.k_gm, self.d_m, self.d_g,
            ],
            0.0,
        )
    }

    pub fn fixture() -> Self {
        let p = ParamSet::fixture();
        Self {
            p_c: p.p_c,
            k_tc: p.k_tc,
            k_gc: p.k_gc,
            n_t: p.n_t,
            s_ct: p.s_ct,
            k_gt: p.k_gt,
            r_m: p.r_m,
            k_gm: p.k_gm,
            d_m: p.d_m,
            d_g: p.d_g,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    pub s_mt: RateProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateOutputs {
    pub trajectory: PathBuf,
    pub observations: PathBuf,
    /// `t,U_T,U_G` on the trajectory grid.
    #[serde(default)]
    pub dosing: Option<PathBuf>,
    #[serde(default)]
    pub anchors: Option<PathBuf>,
}

fn default_step() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub params: ConstantValues,
    pub truth: TruthSection,
    pub t0: f64,
    pub tf: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    /// Total volume at `t0`, split by `initial.proportions`; G starts at 0.
    pub initial_volume: f64,
    #[serde(default = "default_initial")]
    pub initial: ConstraintSpec,
    #[serde(default = "default_dosing")]
    pub dosing: DosingSchedule,
    pub sample_days: Vec<f64>,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Days whose (C, T, M) proportions are read off the trajectory as
    /// histology anchors.
    #[serde(default)]
    pub histology_days: Vec<f64>,
    pub output: SimulateOutputs,
}

impl SimulateConfig {
    pub fn resolve_paths(&mut self, base: &Path) {
        let o = &mut self.output;
        o.trajectory = resolve(base, &o.trajectory);
        o.observations = resolve(base, &o.observations);
        o.dosing = o.dosing.as_ref().map(|p| resolve(base, p));
        o.anchors = o.anchors.as_ref().map(|p| resolve(base, p));
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.params
            .param_set()
            .validate()
            .map_err(CliError::from)?;
        self.truth.s_mt.validate().map_err(CliError::from)?;
        if !(self.tf > self.t0) {
            return Err(CliError::config("tf", format!("must exceed t0 = {}", self.t0)));
        }
        if !(self.step > 0.0) {
            return Err(CliError::config("step", "must be positive"));
        }
        if !(self.initial_volume > 0.0 && self.initial_volume.is_finite()) {
            return Err(CliError::config("initial_volume", "must be positive"));
        }
        check_proportions("initial", &self.initial)?;
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(CliError::config("noise", "must be non-negative"));
        }
        if self.sample_days.is_empty() {
            return Err(CliError::config("sample_days", "need at least one day"));
        }
        let inside = |d: f64| d >= self.t0 && d <= self.tf;
        for (i, &d) in self.sample_days.iter().enumerate() {
            if !inside(d) {
                return Err(CliError::config(format!("sample_days[{i}]"), "outside [t0, tF]"));
            }
        }
        for (i, &d) in self.histology_days.iter().enumerate() {
            if !inside(d) {
                return Err(CliError::config(format!("histology_days[{i}]"), "outside [t0, tF]"));
            }
        }
        if !inside(self.initial.day) {
            return Err(CliError::config("initial.day", "outside [t0, tF]"));
        }
        self.dosing
            .validate(self.t0, self.tf)
            .map_err(CliError::from)
    }
}

pub fn load_fit_config(path: &Path) -> Result<FitConfig, CliError> {
    let mut cfg: FitConfig = read_toml(path)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.load_anchors()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_simulate_config(path: &Path) -> Result<SimulateConfig, CliError> {
    let mut cfg: SimulateConfig = read_toml(path)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.validate()?;
    Ok(cfg)
}
