//! The `fit`, `simulate` and `verify` commands as library functions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use tvpinn_core::interp::ObservationSet;
use tvpinn_core::io::format_sig;
use tvpinn_core::ode::{solve_rk4, synthesize_observations, SystemState, Trajectory};
use tvpinn_core::trainer::run_ensemble;

use crate::bundle::{to_json, write_bundle, Summary};
use crate::config::{load_fit_config, load_simulate_config, AnchorFile, FitConfig, SimulateConfig};
use crate::verify::{verify, VerifyReport};
use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOverrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub out: Option<PathBuf>,
}

impl FitOverrides {
    pub fn apply(&self, cfg: &mut FitConfig) {
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub output: PathBuf,
    pub summary: Summary,
}

pub fn read_observations(path: &Path) -> Result<ObservationSet, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(ObservationSet::from_csv(&text, &path.display().to_string())?)
}

/// Ingest, train the ensemble, and write the result bundle.
pub fn fit_config(mut cfg: FitConfig, overrides: &FitOverrides) -> Result<FitOutcome, CliError> {
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let raw = read_observations(&cfg.data)?;
    let days = raw.days();
    let t0 = cfg.t0.unwrap_or(days[0]);
    let tf = cfg.tf.unwrap_or(days[days.len() - 1]);
    cfg.validate_days(t0, tf)?;
    let obs = raw.with_anchors(Some(cfg.initial), cfg.histology.clone())?;
    let train = cfg.train_config();
    let start = Instant::now();
    let ensemble = run_ensemble(&obs, &train, &cfg.seeds)?;
    let wall = start.elapsed().as_secs_f64();
    let summary = write_bundle(&cfg.output, &cfg, &train, &obs, &ensemble, wall)?;
    Ok(FitOutcome {
        output: cfg.output.clone(),
        summary,
    })
}

pub fn fit(config_path: &Path, overrides: &FitOverrides) -> Result<FitOutcome, CliError> {
    fit_config(load_fit_config(config_path)?, overrides)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateOutcome {
    pub trajectory: Trajectory,
    pub observations: ObservationSet,
}

/// `t,U_T,U_G` on the trajectory grid.
pub fn dosing_csv(cfg: &SimulateConfig, times: &[f64]) -> String {
    let mut out = String::from("t,U_T,U_G\n");
    for &t in times {
        let (ut, ug) = cfg.dosing.rates(t);
        writeln!(
            out,
            "{},{},{}",
            format_sig(t, 9),
            format_sig(ut, 9),
            format_sig(ug, 9)
        )
        .expect("write to string");
    }
    out
}

pub fn simulate_config(cfg: &SimulateConfig) -> Result<SimulateOutcome, CliError> {
    cfg.validate()?;
    let params = cfg.params.param_set();
    let q = cfg.initial.proportions;
    let v0 = cfg.initial_volume;
    let initial = SystemState::new(q[0] * v0, q[1] * v0, q[2] * v0, 0.0);
    let profile = cfg.truth.s_mt.clone();
    let trajectory = solve_rk4(
        initial,
        &params,
        &|t| profile.eval(t),
        &cfg.dosing,
        cfg.t0,
        cfg.tf,
        cfg.step,
    )?;
    let observations = synthesize_observations(
        &trajectory,
        &cfg.sample_days,
        cfg.noise,
        cfg.noise_seed,
        Some(cfg.initial.day),
        &cfg.histology_days,
    )?;
    let out = &cfg.output;
    let write = |path: &Path, text: &str| -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    };
    write(&out.trajectory, &trajectory.to_csv())?;
    write(&out.observations, &observations.to_csv())?;
    if let Some(p) = &out.dosing {
        write(p, &dosing_csv(cfg, &trajectory.times))?;
    }
    if let Some(p) = &out.anchors {
        let anchors = AnchorFile {
            initial: observations.initial().copied(),
            histology: observations.histology().to_vec(),
        };
        write(p, &to_json(&anchors))?;
    }
    Ok(SimulateOutcome {
        trajectory,
        observations,
    })
}

pub fn simulate(config_path: &Path) -> Result<SimulateOutcome, CliError> {
    simulate_config(&load_simulate_config(config_path)?)
}

/// Verify and write `verification.json` into the bundle.
pub fn verify_bundle(bundle: &Path, oracle: &Path) -> Result<VerifyReport, CliError> {
    let report = verify(bundle, oracle)?;
    let path = bundle.join("verification.json");
    std::fs::write(&path, to_json(&report)).map_err(|e| CliError::io(&path, e))?;
    Ok(report)
}
