//! Combination-therapy model: cancer (C), OT-1 T cells (T), MDSCs (M) and
//! gemcitabine (G).
//!
//! ```text
//! dC/dt = p_C C - k_TC C T - k_GC C G
//! dT/dt = U_T(t) + n_T T - s_CT T C - s_MT(t) T M - k_GT T G
//! dM/dt = r_M C - k_GM M G - d_M M
//! dG/dt = U_G(t) - d_G G
//! ```
//!
//! Volumes are in mm^3, drug amount in mg, time in days. Injections enter
//! as Gaussian pulses that integrate to the injected dose.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{DataPoint, ObservationSet};
use crate::io::{format_sig, parse_csv};
use crate::losses::ConstraintSpec;

pub const STATE_NAMES: [&str; 4] = ["C", "T", "M", "G"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub cancer: f64,
    pub t_cells: f64,
    pub mdsc: f64,
    pub gem: f64,
}

impl SystemState {
    pub fn new(cancer: f64, t_cells: f64, mdsc: f64, gem: f64) -> Self {
        Self {
            cancer,
            t_cells,
            mdsc,
            gem,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cancer, self.t_cells, self.mdsc, self.gem]
    }

    /// C + T + M; the quantity an ultrasound measurement sees.
    pub fn total_volume(&self) -> f64 {
        self.cancer + self.t_cells + self.mdsc
    }

    /// (C, T, M) as fractions of the total volume.
    pub fn proportions(&self) -> [f64; 3] {
        let total = self.total_volume();
        [
            self.cancer / total,
            self.t_cells / total,
            self.mdsc / total,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    fn axpy(self, h: f64, d: SystemState) -> SystemState {
        let (a, b) = (self.to_array(), d.to_array());
        SystemState::from_array(std::array::from_fn(|i| a[i] + h * b[i]))
    }
}

/// Rate constants. `s_mt` is the constant fallback for the MDSC
/// suppression rate; time-varying runs supply it as a function of time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSet {
    pub p_c: f64,
    pub k_tc: f64,
    pub k_gc: f64,
    pub n_t: f64,
    pub s_ct: f64,
    pub s_mt: f64,
    pub k_gt: f64,
    pub r_m: f64,
    pub k_gm: f64,
    pub d_m: f64,
    pub d_g: f64,
}

/// Names of the constants other than `s_mt`, in [`ParamSet::constants`]
/// order.
pub const CONSTANT_NAMES: [&str; 10] = [
    "p_c", "k_tc", "k_gc", "n_t", "s_ct", "k_gt", "r_m", "k_gm", "d_m", "d_g",
];

impl ParamSet {
    /// Synthetic fixture used throughout the tests and the default
    /// simulation config. Not measured values.
    pub fn fixture() -> Self {
        Self {
            p_c: 0.3,
            k_tc: 0.05,
            k_gc: 0.02,
            n_t: 0.1,
            s_ct: 0.01,
            s_mt: 0.04,
            k_gt: 0.01,
            r_m: 0.05,
            k_gm: 0.6,
            d_m: 0.2,
            d_g: 0.5,
        }
    }

    pub fn zero() -> Self {
        Self::from_constants([0.0; 10], 0.0)
    }

    /// The ten constants other than `s_mt`, ordered as [`CONSTANT_NAMES`].
    pub fn constants(&self) -> [f64; 10] {
        [
            self.p_c, self.k_tc, self.k_gc, self.n_t, self.s_ct, self.k_gt, self.r_m, self.k_gm,
            self.d_m, self.d_g,
        ]
    }

    pub fn from_constants(c: [f64; 10], s_mt: f64) -> Self {
        Self {
            p_c: c[0],
            k_tc: c[1],
            k_gc: c[2],
            n_t: c[3],
            s_ct: c[4],
            k_gt: c[5],
            r_m: c[6],
            k_gm: c[7],
            d_m: c[8],
            d_g: c[9],
            s_mt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .constants()
            .into_iter()
            .zip(CONSTANT_NAMES)
            .chain(std::iter::once((self.s_mt, "s_mt")));
        for (v, name) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    format!("params.{name}"),
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Gem,
    Ot1,
}

/// One injection. GEM doses are in mg; OT-1 doses in mm^3 of T cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub agent: Agent,
    pub day: f64,
    pub dose: f64,
    #[serde(default = "default_pulse_width")]
    pub width: f64,
}

pub const DEFAULT_PULSE_WIDTH: f64 = 0.25;

fn default_pulse_width() -> f64 {
    DEFAULT_PULSE_WIDTH
}

impl Injection {
    /// Dosing rate contributed at time `t`: `dose * N(t; day, width)`.
    pub fn rate(&self, t: f64) -> f64 {
        let z = (t - self.day) / self.width;
        self.dose * (-0.5 * z * z).exp() / (self.width * (2.0 * PI).sqrt())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DosingSchedule {
    #[serde(default)]
    pub injections: Vec<Injection>,
}

impl DosingSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    /// GEM at day 10 and OT-1 at day 14, the protocol the model describes.
    /// `ot1_volume_equivalent` converts the injected T-cell count to mm^3.
    pub fn gem_then_ot1(gem_mg: f64, ot1_volume_equivalent: f64) -> Self {
        Self {
            injections: vec![
                Injection {
                    agent: Agent::Gem,
                    day: 10.0,
                    dose: gem_mg,
                    width: DEFAULT_PULSE_WIDTH,
                },
                Injection {
                    agent: Agent::Ot1,
                    day: 14.0,
                    dose: ot1_volume_equivalent,
                    width: DEFAULT_PULSE_WIDTH,
                },
            ],
        }
    }

    /// `(U_T, U_G)` at time `t`.
    pub fn rates(&self, t: f64) -> (f64, f64) {
        self.injections
            .iter()
            .fold((0.0, 0.0), |(ut, ug), inj| match inj.agent {
                Agent::Ot1 => (ut + inj.rate(t), ug),
                Agent::Gem => (ut, ug + inj.rate(t)),
            })
    }

    pub fn total_dose(&self, agent: Agent) -> f64 {
        self.injections
            .iter()
            .filter(|i| i.agent == agent)
            .map(|i| i.dose)
            .sum()
    }

    pub fn validate(&self, t0: f64, tf: f64) -> Result<()> {
        for (i, inj) in self.injections.iter().enumerate() {
            let field = |f: &str| format!("dosing.injections[{i}].{f}");
            if !(inj.day >= t0 && inj.day <= tf) {
                return Err(Error::config(
                    field("day"),
                    format!("day {} outside [{t0}, {tf}]", inj.day),
                ));
            }
            if !(inj.dose >= 0.0 && inj.dose.is_finite()) {
                return Err(Error::config(field("dose"), "dose must be non-negative"));
            }
            if !(inj.width > 0.0 && inj.width.is_finite()) {
                return Err(Error::config(field("width"), "pulse width must be positive"));
            }
        }
        Ok(())
    }
}

/// `(U_T, U_G)` for `schedule` at `t`.
pub fn dosing_rate(schedule: &DosingSchedule, t: f64) -> (f64, f64) {
    schedule.rates(t)
}

/// Right-hand side of the model at one time point.
pub fn rhs(
    state: &SystemState,
    params: &ParamSet,
    s_mt: f64,
    t: f64,
    schedule: &DosingSchedule,
) -> Result<SystemState> {
    if !state.is_finite() || !s_mt.is_finite() || !t.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite input to rhs at t = {t}: {state:?}, s_MT = {s_mt}"
        )));
    }
    let (u_t, u_g) = schedule.rates(t);
    Ok(rhs_with_forcing(state, params, s_mt, u_t, u_g))
}

pub(crate) fn rhs_with_forcing(
    s: &SystemState,
    p: &ParamSet,
    s_mt: f64,
    u_t: f64,
    u_g: f64,
) -> SystemState {
    let (c, t, m, g) = (s.cancer, s.t_cells, s.mdsc, s.gem);
    SystemState {
        cancer: p.p_c * c - p.k_tc * c * t - p.k_gc * c * g,
        t_cells: u_t + p.n_t * t - p.s_ct * t * c - s_mt * t * m - p.k_gt * t * g,
        mdsc: p.r_m * c - p.k_gm * m * g - p.d_m * m,
        gem: u_g - p.d_g * g,
    }
}

/// Ground-truth shapes for the suppression rate in simulations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateProfile {
    Constant {
        value: f64,
    },
    /// `low + (high - low) / (1 + exp((t - midpoint) / width))`, which falls
    /// from `high` to `low` around `midpoint`.
    Sigmoid {
        high: f64,
        low: f64,
        midpoint: f64,
        width: f64,
    },
    /// Linear interpolation between `(day, value)` points, held constant
    /// outside them.
    PiecewiseLinear {
        points: Vec<(f64, f64)>,
    },
}

impl RateProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            RateProfile::Constant { value } => *value,
            RateProfile::Sigmoid {
                high,
                low,
                midpoint,
                width,
            } => low + (high - low) * (1.0 - crate::autodiff::sigmoid((t - midpoint) / width)),
            RateProfile::PiecewiseLinear { points } => {
                let first = points[0];
                let last = points[points.len() - 1];
                if t <= first.0 {
                    return first.1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let k = points.partition_point(|p| p.0 <= t);
                let (a, b) = (points[k - 1], points[k]);
                a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config("truth.s_mt", m.to_string()));
        match self {
            RateProfile::Constant { value } if *value < 0.0 => bad("value must be non-negative"),
            RateProfile::Sigmoid {
                high, low, width, ..
            } if *high < 0.0 || *low < 0.0 || *width <= 0.0 => {
                bad("levels must be non-negative and width positive")
            }
            RateProfile::PiecewiseLinear { points } if points.is_empty() => {
                bad("needs at least one point")
            }
            RateProfile::PiecewiseLinear { points }
                if points.windows(2).any(|w| w[1].0 <= w[0].0) =>
            {
                bad("days must be strictly increasing")
            }
            RateProfile::PiecewiseLinear { points } if points.iter().any(|p| p.1 < 0.0) => {
                bad("values must be non-negative")
            }
            _ => Ok(()),
        }
    }
}

/// States on a uniform time grid together with the suppression rate used.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SystemState>,
    pub s_mt: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn span(&self) -> (f64, f64) {
        (self.times[0], self.times[self.times.len() - 1])
    }

    /// State at `t`, linear between grid points and exact on them.
    pub fn state_at(&self, t: f64) -> Result<SystemState> {
        let (t0, tf) = self.span();
        let tol = 1e-9 * (tf - t0).abs().max(1.0);
        if t < t0 - tol || t > tf + tol {
            return Err(Error::OutOfRange {
                what: "time".into(),
                value: t,
                lo: t0,
                hi: tf,
            });
        }
        let k = self.times.partition_point(|&x| x < t - tol);
        let k = k.min(self.times.len() - 1);
        if (self.times[k] - t).abs() <= tol || k == 0 {
            return Ok(self.states[k]);
        }
        let (ta, tb) = (self.times[k - 1], self.times[k]);
        let w = (t - ta) / (tb - ta);
        let (a, b) = (self.states[k - 1].to_array(), self.states[k].to_array());
        Ok(SystemState::from_array(std::array::from_fn(|i| {
            a[i] + w * (b[i] - a[i])
        })))
    }

    /// CSV with header `t,C,T,M,G,s_MT`, 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,C,T,M,G,s_MT\n");
        for ((t, s), r) in self.times.iter().zip(&self.states).zip(&self.s_mt) {
            let row = [*t, s.cancer, s.t_cells, s.mdsc, s.gem, *r];
            let cells: Vec<String> = row.iter().map(|v| format_sig(*v, 9)).collect();
            writeln!(out, "{}", cells.join(",")).expect("write to string");
        }
        out
    }

    pub fn from_csv(text: &str, source_name: &str) -> Result<Self> {
        let rows = parse_csv(text, source_name, &["t", "C", "T", "M", "G", "s_MT"])?;
        let mut traj = Trajectory {
            times: Vec::with_capacity(rows.len()),
            states: Vec::with_capacity(rows.len()),
            s_mt: Vec::with_capacity(rows.len()),
        };
        for (line, r) in rows {
            if let Some(&prev) = traj.times.last() {
                if r[0] <= prev {
                    return Err(Error::csv(source_name, line, "times must be strictly increasing"));
                }
            }
            traj.times.push(r[0]);
            traj.states.push(SystemState::new(r[1], r[2], r[3], r[4]));
            traj.s_mt.push(r[5]);
        }
        if traj.is_empty() {
            return Err(Error::csv(source_name, 1, "no data rows"));
        }
        Ok(traj)
    }
}

/// Classical fourth-order Runge-Kutta on a uniform grid from `t0` to `tf`.
/// The step is `(tf - t0) / n` with `n = ceil((tf - t0) / h)`, so the grid
/// ends exactly at `tf`. Negative components are clipped to zero after
/// every step.
pub fn solve_rk4(
    initial: SystemState,
    params: &ParamSet,
    s_mt: &dyn Fn(f64) -> f64,
    schedule: &DosingSchedule,
    t0: f64,
    tf: f64,
    h: f64,
) -> Result<Trajectory> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("step must be positive, got {h}")));
    }
    if !(tf > t0) {
        return Err(Error::DegenerateRange(format!("tF = {tf} must exceed t0 = {t0}")));
    }
    if !initial.is_finite() {
        return Err(Error::SolverFailure { t: t0 });
    }
    let n = ((tf - t0) / h - 1e-9).ceil().max(1.0) as usize;
    let step = (tf - t0) / n as f64;
    let f = |t: f64, u: &SystemState| -> SystemState {
        let (ut, ug) = schedule.rates(t);
        rhs_with_forcing(u, params, s_mt(t), ut, ug)
    };

    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut u = initial;
    times.push(t0);
    states.push(u);
    for i in 0..n {
        let t = t0 + i as f64 * step;
        let k1 = f(t, &u);
        let k2 = f(t + 0.5 * step, &u.axpy(0.5 * step, k1));
        let k3 = f(t + 0.5 * step, &u.axpy(0.5 * step, k2));
        let k4 = f(t + step, &u.axpy(step, k3));
        let (a, d1, d2, d3, d4) = (
            u.to_array(),
            k1.to_array(),
            k2.to_array(),
            k3.to_array(),
            k4.to_array(),
        );
        let next = SystemState::from_array(std::array::from_fn(|j| {
            a[j] + step / 6.0 * (d1[j] + 2.0 * d2[j] + 2.0 * d3[j] + d4[j])
        }));
        let t_next = if i + 1 == n { tf } else { t0 + (i + 1) as f64 * step };
        // checked before clipping: f64::max maps NaN to 0
        if !next.is_finite() {
            return Err(Error::SolverFailure { t: t_next });
        }
        u = SystemState::from_array(next.to_array().map(|x| x.max(0.0)));
        times.push(t_next);
        states.push(u);
    }
    let s_mt_values = times.iter().map(|&t| s_mt(t)).collect();
    Ok(Trajectory {
        times,
        states,
        s_mt: s_mt_values,
    })
}

/// Sample total volumes at `days` with multiplicative Gaussian noise and
/// read exact proportion anchors off the trajectory.
pub fn synthesize_observations(
    trajectory: &Trajectory,
    days: &[f64],
    noise_level: f64,
    seed: u64,
    ic_day: Option<f64>,
    histology_days: &[f64],
) -> Result<ObservationSet> {
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "noise level must be non-negative, got {noise_level}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(days.len());
    for &day in days {
        let state = trajectory.state_at(day)?;
        let z: f64 = StandardNormal.sample(&mut rng);
        points.push(DataPoint {
            day,
            total_volume: state.total_volume() * (1.0 + noise_level * z),
        });
    }
    let anchor = |day: f64| -> Result<ConstraintSpec> {
        let s = trajectory.state_at(day)?;
        Ok(ConstraintSpec {
            day,
            proportions: s.proportions(),
        })
    };
    let initial = ic_day.map(anchor).transpose()?;
    let histology = histology_days
        .iter()
        .map(|&d| anchor(d))
        .collect::<Result<Vec<_>>>()?;
    ObservationSet::new(points, initial, histology)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_equilibrium_without_dosing() {
        let d = rhs(
            &SystemState::default(),
            &ParamSet::fixture(),
            0.04,
            3.0,
            &DosingSchedule::empty(),
        )
        .unwrap();
        assert_eq!(d, SystemState::default());
    }

    #[test]
    fn unit_cancer_state_picks_out_growth_and_recruitment() {
        let p = ParamSet::fixture();
        let d = rhs(
            &SystemState::new(1.0, 0.0, 0.0, 0.0),
            &p,
            p.s_mt,
            0.0,
            &DosingSchedule::empty(),
        )
        .unwrap();
        assert_eq!(d, SystemState::new(p.p_c, 0.0, p.r_m, 0.0));
    }

    #[test]
    fn fixture_rhs_by_hand() {
        let p = ParamSet::fixture();
        let s = SystemState::new(10.0, 2.0, 1.0, 0.3);
        let d = rhs(&s, &p, p.s_mt, 0.0, &DosingSchedule::empty()).unwrap();
        // 10*0.3 - 0.05*10*2 - 0.02*10*0.3
        let dc = 3.0 - 1.0 - 0.06;
        // 0.1*2 - 0.01*2*10 - 0.04*2*1 - 0.01*2*0.3
        let dt = 0.2 - 0.2 - 0.08 - 0.006;
        // 0.05*10 - 0.6*1*0.3 - 0.2*1
        let dm = 0.5 - 0.18 - 0.2;
        let dg = -0.15;
        for (got, want) in d.to_array().iter().zip([dc, dt, dm, dg]) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
        assert!((d.cancer - 1.94).abs() < 1e-12);
        assert!((d.mdsc - 0.12).abs() < 1e-12);
    }

    #[test]
    fn rhs_rejects_nan() {
        let s = SystemState::new(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(
            rhs(&s, &ParamSet::fixture(), 0.04, 0.0, &DosingSchedule::empty()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn gaussian_pulse_peak_and_tail() {
        let sched = DosingSchedule {
            injections: vec![Injection {
                agent: Agent::Gem,
                day: 10.0,
                dose: 0.5,
                width: 0.25,
            }],
        };
        let (ut, ug) = sched.rates(10.0);
        assert_eq!(ut, 0.0);
        assert!((ug - 0.5 / (0.25 * (2.0 * PI).sqrt())).abs() < 1e-15);
        assert!((ug - 0.7979).abs() < 1e-4);
        assert!(sched.rates(6.0).1 < 1e-30);
        assert_eq!(DosingSchedule::empty().rates(10.0), (0.0, 0.0));
    }

    #[test]
    fn pure_decay_matches_exponential() {
        let mut p = ParamSet::zero();
        p.d_g = 0.5;
        let traj = solve_rk4(
            SystemState::new(0.0, 0.0, 0.0, 1.0),
            &p,
            &|_| 0.0,
            &DosingSchedule::empty(),
            0.0,
            2.0,
            0.01,
        )
        .unwrap();
        assert_eq!(traj.len(), 201);
        assert_eq!(*traj.times.last().unwrap(), 2.0);
        let g = traj.states.last().unwrap().gem;
        assert!((g - (-1.0f64).exp()).abs() <= 1e-8);
    }

    #[test]
    fn zero_field_gives_constant_trajectory() {
        let init = SystemState::new(3.0, 1.0, 0.5, 0.2);
        let traj = solve_rk4(
            init,
            &ParamSet::zero(),
            &|_| 0.0,
            &DosingSchedule::empty(),
            6.0,
            23.0,
            0.1,
        )
        .unwrap();
        assert!(traj.states.iter().all(|s| *s == init));
    }

    #[test]
    fn solver_reports_blowup_time() {
        let mut p = ParamSet::zero();
        p.p_c = 1e5;
        let err = solve_rk4(
            SystemState::new(1.0, 0.0, 0.0, 0.0),
            &p,
            &|_| 0.0,
            &DosingSchedule::empty(),
            0.0,
            10.0,
            0.5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::SolverFailure { t } if t > 0.0 && t <= 10.0));
    }

    #[test]
    fn rate_profiles() {
        let s = RateProfile::Sigmoid {
            high: 0.04,
            low: 0.01,
            midpoint: 15.0,
            width: 1.5,
        };
        assert!((s.eval(15.0) - 0.025).abs() < 1e-15);
        assert!(s.eval(8.0) > s.eval(12.0) && s.eval(12.0) > s.eval(20.0));
        let pl = RateProfile::PiecewiseLinear {
            points: vec![(6.0, 1.0), (10.0, 3.0)],
        };
        assert_eq!(pl.eval(0.0), 1.0);
        assert_eq!(pl.eval(8.0), 2.0);
        assert_eq!(pl.eval(11.0), 3.0);
    }

    #[test]
    fn state_at_interpolates_and_checks_range() {
        let traj = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![
                SystemState::new(0.0, 0.0, 0.0, 0.0),
                SystemState::new(2.0, 4.0, 6.0, 8.0),
            ],
            s_mt: vec![0.0, 0.0],
        };
        assert_eq!(
            traj.state_at(0.5).unwrap(),
            SystemState::new(1.0, 2.0, 3.0, 4.0)
        );
        assert_eq!(traj.state_at(1.0).unwrap().gem, 8.0);
        assert!(matches!(
            traj.state_at(1.5),
            Err(Error::OutOfRange { .. })
        ));
    }
}
