//! Comparison of a fit bundle against an oracle trajectory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tvpinn_core::interp::SplineCurve;
use tvpinn_core::ode::{rhs, ParamSet, SystemState, Trajectory, CONSTANT_NAMES};

use crate::bundle::{load_bundle, LoadedBundle};
use crate::CliError;

/// Interval on which s_MT recovery is scored; both ends excluded.
pub const S_MT_WINDOW: (f64, f64) = (8.0, 21.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentErrors {
    pub cancer: f64,
    pub t_cells: f64,
    pub mdsc: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataResidual {
    pub day: f64,
    pub observed: f64,
    pub learned: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub members: usize,
    /// Whether the oracle had to be resampled onto the bundle grid.
    pub resampled: bool,
    pub notes: Vec<String>,
    /// Ensemble-mean curves against the oracle, relative L2 on the grid.
    pub relative_l2: ComponentErrors,
    /// Relative L2 of each member's C+T+M, in member order.
    pub member_total_relative_l2: Vec<f64>,
    pub data_residuals: Vec<DataResidual>,
    pub data_rmse: f64,
    /// `data_rmse` divided by the largest observed volume.
    pub data_rmse_fraction: f64,
    /// RMS over interior grid points of `|du/dt - f(u)|` for the learned
    /// curves, averaged over members (mm^3/day).
    pub residual_rms: f64,
    /// Relative L2 of the mean s_MT against the oracle on the open window.
    pub s_mt_relative_l2: f64,
    pub s_mt_window: (f64, f64),
}

pub fn relative_l2(learned: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = learned
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    if num == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

/// Oracle columns (C, T, M, G, s_MT) on `times`, resampled by cubic spline
/// when the grids differ.
fn oracle_on(oracle: &Trajectory, times: &[f64]) -> Result<([Vec<f64>; 5], bool), CliError> {
    let cols: [Vec<f64>; 5] = [
        oracle.states.iter().map(|s| s.cancer).collect(),
        oracle.states.iter().map(|s| s.t_cells).collect(),
        oracle.states.iter().map(|s| s.mdsc).collect(),
        oracle.states.iter().map(|s| s.gem).collect(),
        oracle.s_mt.clone(),
    ];
    let span = times[times.len() - 1] - times[0];
    let tol = 1e-9 * span.abs().max(1.0);
    let same = oracle.times.len() == times.len()
        && oracle.times.iter().zip(times).all(|(a, b)| (a - b).abs() <= tol);
    if same {
        return Ok((cols, false));
    }
    let (o0, of) = oracle.span();
    if times[0] < o0 - tol || times[times.len() - 1] > of + tol {
        return Err(CliError::new(
            crate::EXIT_OTHER,
            format!(
                "oracle covers [{o0}, {of}] but the bundle grid spans [{}, {}]",
                times[0],
                times[times.len() - 1]
            ),
        ));
    }
    let mut out: [Vec<f64>; 5] = Default::default();
    for (k, col) in cols.iter().enumerate() {
        let spline = SplineCurve::fit(&oracle.times, col)?;
        out[k] = times.iter().map(|&t| spline.eval(t)).collect();
    }
    Ok((out, true))
}

fn column(traj: &Trajectory, k: usize) -> Vec<f64> {
    traj.states.iter().map(|s| s.to_array()[k]).collect()
}

fn total(traj: &Trajectory) -> Vec<f64> {
    traj.states.iter().map(|s| s.total_volume()).collect()
}

fn mean_trajectory(members: &[(crate::bundle::MemberEntry, Trajectory)]) -> Result<Trajectory, CliError> {
    let first = &members[0].1;
    for (m, t) in members {
        if t.times != first.times {
            return Err(CliError::new(
                crate::EXIT_OTHER,
                format!("member {} uses a different time grid", m.dir),
            ));
        }
    }
    let k = members.len() as f64;
    let n = first.len();
    let mut states = Vec::with_capacity(n);
    let mut s_mt = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = [0.0; 4];
        let mut r = 0.0;
        for (_, t) in members {
            let a = t.states[i].to_array();
            for j in 0..4 {
                acc[j] += a[j];
            }
            r += t.s_mt[i];
        }
        states.push(SystemState::from_array(acc.map(|x| x / k)));
        s_mt.push(r / k);
    }
    Ok(Trajectory {
        times: first.times.clone(),
        states,
        s_mt,
    })
}

/// RMS of `|du/dt - f(u)|` over interior grid points, with `du/dt` from a
/// cubic spline through the curve.
fn curve_residual_rms(
    traj: &Trajectory,
    params: &ParamSet,
    schedule: &tvpinn_core::ode::DosingSchedule,
) -> Result<f64, CliError> {
    let splines: Vec<SplineCurve> = (0..4)
        .map(|k| SplineCurve::fit(&traj.times, &column(traj, k)))
        .collect::<Result<_, _>>()?;
    let n = traj.len();
    let mut acc = 0.0;
    for i in 1..n - 1 {
        let t = traj.times[i];
        let f = rhs(&traj.states[i], params, traj.s_mt[i], t, schedule)?.to_array();
        let r2: f64 = (0..4).map(|k| (splines[k].derivative(t) - f[k]).powi(2)).sum();
        acc += r2;
    }
    Ok((acc / (n - 2).max(1) as f64).sqrt())
}

pub fn verify_loaded(bundle: &LoadedBundle, oracle: &Trajectory) -> Result<VerifyReport, CliError> {
    let mean = mean_trajectory(&bundle.members)?;
    let times = &mean.times;
    let (truth, resampled) = oracle_on(oracle, times)?;
    let mut notes = Vec::new();
    if resampled {
        notes.push(format!(
            "oracle resampled from {} points onto the {}-point bundle grid by cubic spline",
            oracle.len(),
            times.len()
        ));
    }
    let truth_total: Vec<f64> = (0..times.len())
        .map(|i| truth[0][i] + truth[1][i] + truth[2][i])
        .collect();
    let relative = ComponentErrors {
        cancer: relative_l2(&column(&mean, 0), &truth[0]),
        t_cells: relative_l2(&column(&mean, 1), &truth[1]),
        mdsc: relative_l2(&column(&mean, 2), &truth[2]),
        total: relative_l2(&total(&mean), &truth_total),
    };
    let member_total_relative_l2 = bundle
        .members
        .iter()
        .map(|(_, t)| relative_l2(&total(t), &truth_total))
        .collect();

    let total_spline = SplineCurve::fit(times, &total(&mean))?;
    let data_residuals: Vec<DataResidual> = bundle
        .observations
        .points()
        .iter()
        .map(|p| DataResidual {
            day: p.day,
            observed: p.total_volume,
            learned: total_spline.eval(p.day),
        })
        .collect();
    let data_rmse = (data_residuals
        .iter()
        .map(|r| (r.learned - r.observed).powi(2))
        .sum::<f64>()
        / data_residuals.len() as f64)
        .sqrt();
    let data_rmse_fraction = data_rmse / bundle.observations.max_volume();

    let mut residual_sum = 0.0;
    for (m, traj) in &bundle.members {
        let constants = bundle.summary.learned_constants.get(&m.dir).ok_or_else(|| {
            CliError::new(crate::EXIT_OTHER, format!("summary lacks constants for {}", m.dir))
        })?;
        let mut c = [0.0; 10];
        for (i, name) in CONSTANT_NAMES.iter().enumerate() {
            c[i] = *constants.get(*name).ok_or_else(|| {
                CliError::new(crate::EXIT_OTHER, format!("{}: missing constant {name}", m.dir))
            })?;
        }
        let params = ParamSet::from_constants(c, 0.0);
        residual_sum += curve_residual_rms(traj, &params, &bundle.train_config.schedule)?;
    }
    let residual_rms = residual_sum / bundle.members.len() as f64;

    let (a, b) = S_MT_WINDOW;
    let inside: Vec<usize> = (0..times.len())
        .filter(|&i| times[i] > a && times[i] < b)
        .collect();
    let s_mt_relative_l2 = if inside.is_empty() {
        notes.push(format!("no grid points inside ({a}, {b}); s_MT error not scored"));
        f64::NAN
    } else {
        let learned: Vec<f64> = inside.iter().map(|&i| mean.s_mt[i]).collect();
        let reference: Vec<f64> = inside.iter().map(|&i| truth[4][i]).collect();
        relative_l2(&learned, &reference)
    };

    Ok(VerifyReport {
        members: bundle.members.len(),
        resampled,
        notes,
        relative_l2: relative,
        member_total_relative_l2,
        data_residuals,
        data_rmse,
        data_rmse_fraction,
        residual_rms,
        s_mt_relative_l2,
        s_mt_window: S_MT_WINDOW,
    })
}

pub fn verify(bundle_dir: &Path, oracle_csv: &Path) -> Result<VerifyReport, CliError> {
    let bundle = load_bundle(bundle_dir)?;
    let text =
        std::fs::read_to_string(oracle_csv).map_err(|e| CliError::io(oracle_csv, e))?;
    let oracle = Trajectory::from_csv(&text, &oracle_csv.display().to_string())?;
    verify_loaded(&bundle, &oracle)
}

impl VerifyReport {
    pub fn render(&self) -> String {
        let mut lines = vec![
            format!("members: {}", self.members),
            format!(
                "relative L2  C {:.4}  T {:.4}  M {:.4}  C+T+M {:.4}",
                self.relative_l2.cancer,
                self.relative_l2.t_cells,
                self.relative_l2.mdsc,
                self.relative_l2.total
            ),
            format!(
                "data RMSE {:.6} ({:.4} of max volume)",
                self.data_rmse, self.data_rmse_fraction
            ),
            format!("curve residual RMS {:.6}", self.residual_rms),
            format!(
                "s_MT relative L2 on ({}, {}): {:.4}",
                self.s_mt_window.0, self.s_mt_window.1, self.s_mt_relative_l2
            ),
        ];
        lines.extend(self.notes.iter().map(|n| format!("note: {n}")));
        lines.join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_l2_basics() {
        assert_eq!(relative_l2(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e = relative_l2(&[1.1, 2.2], &[1.0, 2.0]);
        assert!((e - 0.1).abs() < 1e-12);
    }

    #[test]
    fn identical_grids_are_not_resampled() {
        let traj = Trajectory {
            times: vec![0.0, 1.0, 2.0],
            states: vec![SystemState::new(1.0, 2.0, 3.0, 4.0); 3],
            s_mt: vec![0.1; 3],
        };
        let (cols, resampled) = oracle_on(&traj, &[0.0, 1.0, 2.0]).unwrap();
        assert!(!resampled);
        assert_eq!(cols[2], vec![3.0; 3]);
        let (cols, resampled) = oracle_on(&traj, &[0.5, 1.5]).unwrap();
        assert!(resampled);
        assert!((cols[0][0] - 1.0).abs() < 1e-12);
        assert!(oracle_on(&traj, &[0.0, 3.0]).is_err());
    }
}
