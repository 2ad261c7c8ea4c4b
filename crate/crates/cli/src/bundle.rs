//! On-disk layout of a fit result.
//!
//! ```text
//! <out>/summary.json
//! <out>/config.json            effective fit config (hashed into the summary)
//! <out>/train_config.json      resolved training config
//! <out>/observations.csv
//! <out>/band_<Q>.csv           t,mean,lower,upper for Q in C,T,M,G,s_MT,total
//! <out>/member_<i>_seed_<s>/   trajectory.csv, losses.csv, epoch_totals.csv,
//!                              state_network.csv, rate_network.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tvpinn_core::interp::ObservationSet;
use tvpinn_core::io::{format_sig, parse_csv};
use tvpinn_core::losses::{loss_history_to_csv, LossBreakdown};
use tvpinn_core::ode::{SystemState, Trajectory, CONSTANT_NAMES};
use tvpinn_core::trainer::{
    AbortedMember, Band, EnsembleResult, TrainConfig, TrainingRun, CURVE_NAMES,
};

use crate::config::FitConfig;
use crate::CliError;

pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const TOTALS_FILE: &str = "epoch_totals.csv";
pub const BAND_HEADER: [&str; 4] = ["t", "mean", "lower", "upper"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub seed: u64,
    /// Directory name relative to the bundle root.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub wall_time_s: f64,
    pub t0: f64,
    pub tf: f64,
    pub members: Vec<MemberEntry>,
    pub aborted: Vec<AbortedMember>,
    /// Keyed by member directory.
    pub final_losses: BTreeMap<String, LossBreakdown>,
    /// Keyed by member directory, then constant name.
    pub learned_constants: BTreeMap<String, BTreeMap<String, f64>>,
}

pub fn band_file(quantity: &str) -> String {
    format!("band_{quantity}.csv")
}

pub fn member_dir(index: usize, seed: u64) -> String {
    format!("member_{index:02}_seed_{seed}")
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Dense curves of a run as a trajectory table.
pub fn run_trajectory(run: &TrainingRun) -> Trajectory {
    let c = &run.curves;
    Trajectory {
        times: c.times.clone(),
        states: (0..c.times.len())
            .map(|i| SystemState::new(c.cancer[i], c.t_cells[i], c.mdsc[i], c.gem[i]))
            .collect(),
        s_mt: c.s_mt.clone(),
    }
}

pub fn band_to_csv(times: &[f64], band: &Band) -> String {
    let mut out = BAND_HEADER.join(",");
    out.push('\n');
    for i in 0..times.len() {
        let row = [times[i], band.mean[i], band.lower[i], band.upper[i]];
        let cells: Vec<String> = row.iter().map(|v| format_sig(*v, 9)).collect();
        writeln!(out, "{}", cells.join(",")).expect("write to string");
    }
    out
}

/// `(times, mean, lower, upper)` columns of a band file.
pub fn band_from_csv(text: &str, name: &str) -> Result<[Vec<f64>; 4], CliError> {
    let rows = parse_csv(text, name, &BAND_HEADER)?;
    let mut cols: [Vec<f64>; 4] = Default::default();
    for (_, r) in rows {
        for k in 0..4 {
            cols[k].push(r[k]);
        }
    }
    Ok(cols)
}

pub fn totals_to_csv(totals: &[f64]) -> String {
    let mut out = String::from("epoch,total\n");
    for (i, t) in totals.iter().enumerate() {
        writeln!(out, "{},{}", i + 1, format_sig(*t, 9)).expect("write to string");
    }
    out
}

pub fn totals_from_csv(text: &str, name: &str) -> Result<Vec<f64>, CliError> {
    Ok(parse_csv(text, name, &["epoch", "total"])?
        .into_iter()
        .map(|(_, r)| r[1])
        .collect())
}

pub fn write_member(dir: &Path, run: &TrainingRun) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write(&dir.join(TRAJECTORY_FILE), &run_trajectory(run).to_csv())?;
    write(&dir.join(LOSSES_FILE), &loss_history_to_csv(&run.history))?;
    write(&dir.join(TOTALS_FILE), &totals_to_csv(&run.totals))?;
    write(
        &dir.join("state_network.csv"),
        &run.state_network.to_checkpoint_csv(run.seed)?,
    )?;
    if let Some(net) = &run.rate_network {
        write(&dir.join("rate_network.csv"), &net.to_checkpoint_csv(run.seed)?)?;
    }
    Ok(())
}

pub fn write_bundle(
    out: &Path,
    fit: &FitConfig,
    train: &TrainConfig,
    obs: &ObservationSet,
    ensemble: &EnsembleResult,
    wall_time_s: f64,
) -> Result<Summary, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write(&out.join(CONFIG_FILE), &to_json(fit))?;
    write(&out.join(TRAIN_CONFIG_FILE), &to_json(train))?;
    write(&out.join(OBSERVATIONS_FILE), &obs.to_csv())?;
    for (name, band) in CURVE_NAMES.iter().zip(&ensemble.bands) {
        write(&out.join(band_file(name)), &band_to_csv(&ensemble.times, band))?;
    }
    let mut members = Vec::new();
    let mut final_losses = BTreeMap::new();
    let mut learned_constants = BTreeMap::new();
    for (i, run) in ensemble.members.iter().enumerate() {
        let dir = member_dir(i, run.seed);
        write_member(&out.join(&dir), run)?;
        final_losses.insert(dir.clone(), run.final_losses);
        let constants: BTreeMap<String, f64> = CONSTANT_NAMES
            .iter()
            .zip(run.constants)
            .map(|(n, v)| (n.to_string(), v))
            .collect();
        learned_constants.insert(dir.clone(), constants);
        members.push(MemberEntry {
            seed: run.seed,
            dir,
        });
    }
    let first = &ensemble.members[0];
    let summary = Summary {
        config_hash: fit.hash(),
        seeds: fit.seeds.clone(),
        wall_time_s,
        t0: first.t0,
        tf: first.tf,
        members,
        aborted: ensemble.aborted.clone(),
        final_losses,
        learned_constants,
    };
    write(&out.join(SUMMARY_FILE), &to_json(&summary))?;
    Ok(summary)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// A bundle read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedBundle {
    pub root: PathBuf,
    pub summary: Summary,
    pub train_config: TrainConfig,
    pub observations: ObservationSet,
    pub members: Vec<(MemberEntry, Trajectory)>,
}

pub fn load_bundle(root: &Path) -> Result<LoadedBundle, CliError> {
    let summary: Summary = serde_json::from_str(&read(&root.join(SUMMARY_FILE))?)
        .map_err(|e| CliError::new(crate::EXIT_OTHER, format!("{SUMMARY_FILE}: {e}")))?;
    let train_config: TrainConfig = serde_json::from_str(&read(&root.join(TRAIN_CONFIG_FILE))?)
        .map_err(|e| CliError::new(crate::EXIT_OTHER, format!("{TRAIN_CONFIG_FILE}: {e}")))?;
    let obs_path = root.join(OBSERVATIONS_FILE);
    let observations =
        ObservationSet::from_csv(&read(&obs_path)?, &obs_path.display().to_string())?;
    let mut members = Vec::new();
    for m in &summary.members {
        let path = root.join(&m.dir).join(TRAJECTORY_FILE);
        let traj = Trajectory::from_csv(&read(&path)?, &path.display().to_string())?;
        members.push((m.clone(), traj));
    }
    if members.is_empty() {
        return Err(CliError::new(crate::EXIT_OTHER, "bundle has no members"));
    }
    Ok(LoadedBundle {
        root: root.to_path_buf(),
        summary,
        train_config,
        observations,
        members,
    })
}
