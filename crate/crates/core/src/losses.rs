//! Loss terms recorded on the tape and their adaptive combination.
//!
//! Everything here works in normalized units: time `s = (t - t0) / tau`,
//! volumes divided by the peak observed total, drug amount divided by the
//! total injected GEM dose. The state node is `N x 4` with columns
//! `(c, t, m, g)` in those units; its time derivative node is `d/ds` of the
//! same columns.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::interp::PROPORTION_SUM_TOL;
use crate::io::{format_sig, parse_csv};
use crate::ode::CONSTANT_NAMES;

/// Known (C, T, M) proportions of the total volume at one day.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub day: f64,
    pub proportions: [f64; 3],
}

impl ConstraintSpec {
    /// Flow-cytometry proportions at day 6.
    pub fn initial_default() -> Self {
        Self {
            day: 6.0,
            proportions: [0.99887, 0.0, 1.0 - 0.99887],
        }
    }

    /// Histology proportions at days 17 and 23.
    pub fn histology_default() -> Vec<Self> {
        vec![
            Self {
                day: 17.0,
                proportions: [0.95755, 0.01818, 0.02427],
            },
            Self {
                day: 23.0,
                proportions: [0.95665, 0.00078, 0.04256],
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.day.is_finite() {
            return Err(Error::InvalidInput("anchor day must be finite".into()));
        }
        if self
            .proportions
            .iter()
            .any(|q| !(0.0..=1.0).contains(q))
        {
            return Err(Error::InvalidInput(format!(
                "proportions at day {} must lie in [0, 1]: {:?}",
                self.day, self.proportions
            )));
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > PROPORTION_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "proportions at day {} sum to {sum}, not 1",
                self.day
            )));
        }
        Ok(())
    }
}

/// How the histology term is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcScaling {
    /// Plain sum over anchor days.
    #[default]
    Sum,
    /// Sum divided by the number of anchor days.
    Mean,
}

/// Unit conversions between physical and normalized quantities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    /// `tF - t0`, days.
    pub time: f64,
    /// mm^3 per normalized volume unit.
    pub volume: f64,
    /// mg per normalized drug unit.
    pub drug: f64,
    /// s_MT (mm^-3 day^-1) per unit of rate-network output.
    pub rate: f64,
}

/// Collocation rows and targets, prepared once per training run.
#[derive(Clone, Debug, PartialEq)]
pub struct LossContext {
    /// Normalized times of every evaluated row.
    pub times: Vec<f64>,
    /// Rows `0..residual_rows` form the residual grid.
    pub residual_rows: usize,
    /// U_T (mm^3/day) at each row.
    pub forcing_t: Vec<f64>,
    /// U_G (mg/day) at each row.
    pub forcing_g: Vec<f64>,
    pub scales: Scales,
    pub data_rows: Vec<usize>,
    /// Normalized observed totals at `data_rows`.
    pub data_targets: Vec<f64>,
    /// Row of the first observation day and normalized `q * u_hat(t0)`.
    pub initial: Option<(usize, [f64; 3])>,
    pub histology: Vec<(usize, [f64; 3])>,
    pub bc_scaling: BcScaling,
}

/// A rate constant as it enters the residual: a fixed number or a node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConstantTerm {
    Fixed(f64),
    Node(Var),
}

/// The ten rate constants other than s_MT, ordered as
/// [`crate::ode::CONSTANT_NAMES`].
pub type ConstantTerms = [ConstantTerm; 10];

fn idx(name: &str) -> usize {
    CONSTANT_NAMES
        .iter()
        .position(|n| *n == name)
        .expect("known constant name")
}

/// `constant * factor * x`.
fn coef(tape: &mut Tape, constant: ConstantTerm, factor: f64, x: Var) -> Var {
    match constant {
        ConstantTerm::Fixed(v) => tape.scale(x, v * factor),
        ConstantTerm::Node(k) => {
            let kx = tape.mul(k, x);
            tape.scale(kx, factor)
        }
    }
}

/// Normalized right-hand side `tau / scale_k * f_k` for every row, as an
/// `N x 4` node. `rate_out` is the `N x 1` rate-network output.
pub fn normalized_rhs(
    tape: &mut Tape,
    states: Var,
    rate_out: Var,
    constants: &ConstantTerms,
    ctx: &LossContext,
) -> Var {
    let Scales {
        time: tau,
        volume: vs,
        drug: gs,
        rate: rs,
    } = ctx.scales;
    let k = |name: &str| constants[idx(name)];
    let c = tape.column(states, 0);
    let t = tape.column(states, 1);
    let m = tape.column(states, 2);
    let g = tape.column(states, 3);
    let ct = tape.mul(c, t);
    let cg = tape.mul(c, g);
    let tm = tape.mul(t, m);
    let tg = tape.mul(t, g);
    let mg = tape.mul(m, g);

    // dc/ds = tau (p_C c - k_TC V c t - k_GC G c g)
    let a = coef(tape, k("p_c"), tau, c);
    let b = coef(tape, k("k_tc"), tau * vs, ct);
    let d = coef(tape, k("k_gc"), tau * gs, cg);
    let fc = tape.sub(a, b);
    let fc = tape.sub(fc, d);

    // dt/ds = tau (U_T / V + n_T t - s_CT V t c - s_MT V t m - k_GT G t g)
    let ut = tape.constant(Tensor::column(
        &ctx.forcing_t.iter().map(|u| tau * u / vs).collect::<Vec<_>>(),
    ));
    let a = coef(tape, k("n_t"), tau, t);
    let b = coef(tape, k("s_ct"), tau * vs, ct);
    let smt_tm = tape.mul(rate_out, tm);
    let e = tape.scale(smt_tm, rs * tau * vs);
    let d = coef(tape, k("k_gt"), tau * gs, tg);
    let ft = tape.add(ut, a);
    let ft = tape.sub(ft, b);
    let ft = tape.sub(ft, e);
    let ft = tape.sub(ft, d);

    // dm/ds = tau (r_M c - k_GM G m g - d_M m)
    let a = coef(tape, k("r_m"), tau, c);
    let b = coef(tape, k("k_gm"), tau * gs, mg);
    let d = coef(tape, k("d_m"), tau, m);
    let fm = tape.sub(a, b);
    let fm = tape.sub(fm, d);

    // dg/ds = tau (U_G / G - d_G g)
    let ug = tape.constant(Tensor::column(
        &ctx.forcing_g.iter().map(|u| tau * u / gs).collect::<Vec<_>>(),
    ));
    let a = coef(tape, k("d_g"), tau, g);
    let fg = tape.sub(ug, a);

    tape.concat_cols(&[fc, ft, fm, fg])
}

/// Mean over the residual grid of the squared Euclidean norm of
/// `du/dt - f(u)` with volumes and drug normalized and time in days, i.e.
/// `(du/ds - tau f) / tau`. Under log-variance weighting the constant
/// `1 / tau^2` only shifts `s_r`; it sets the units of the reported value.
pub fn residual_loss(
    tape: &mut Tape,
    states: Var,
    d_states: Var,
    rate_out: Var,
    constants: &ConstantTerms,
    ctx: &LossContext,
) -> Var {
    let f = normalized_rhs(tape, states, rate_out, constants, ctx);
    let r = tape.sub(d_states, f);
    let rows: Vec<usize> = (0..ctx.residual_rows).collect();
    let r = if ctx.residual_rows == tape.value(r).rows() {
        r
    } else {
        tape.gather_rows(r, &rows)
    };
    let sq = tape.square(r);
    let s = tape.sum(sq);
    let tau = ctx.scales.time;
    tape.scale(s, 1.0 / (tau * tau * ctx.residual_rows as f64))
}

fn volume_mask(tape: &mut Tape) -> Var {
    tape.constant(Tensor::row(&[1.0, 1.0, 1.0, 0.0]))
}

/// Mean squared mismatch between `c + t + m` and the observed totals.
pub fn data_loss(tape: &mut Tape, states: Var, ctx: &LossContext) -> Var {
    assert!(!ctx.data_rows.is_empty(), "data loss needs observations");
    let rows = tape.gather_rows(states, &ctx.data_rows);
    let mask = volume_mask(tape);
    let masked = tape.mul(rows, mask);
    let totals = tape.sum_cols(masked);
    let target = tape.constant(Tensor::column(&ctx.data_targets));
    let diff = tape.sub(totals, target);
    let sq = tape.square(diff);
    tape.mean(sq)
}

fn anchor_loss(tape: &mut Tape, states: Var, anchors: &[(usize, [f64; 3])]) -> Var {
    let rows: Vec<usize> = anchors.iter().map(|a| a.0).collect();
    let picked = tape.gather_rows(states, &rows);
    let mask = volume_mask(tape);
    let picked = tape.mul(picked, mask);
    let targets: Vec<f64> = anchors
        .iter()
        .flat_map(|(_, q)| [q[0], q[1], q[2], 0.0])
        .collect();
    let target = tape.constant(Tensor::new(anchors.len(), 4, targets));
    let diff = tape.sub(picked, target);
    let sq = tape.square(diff);
    tape.sum(sq)
}

/// Squared mismatch of (c, t, m) against `q * u_hat(t0)` at the first day;
/// a zero constant when no initial anchor is configured.
pub fn ic_loss(tape: &mut Tape, states: Var, ctx: &LossContext) -> Var {
    match ctx.initial {
        Some(a) => anchor_loss(tape, states, &[a]),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

/// Squared mismatch of (c, t, m) against `q_k * u_hat(t_k)` summed over
/// histology days (optionally averaged).
pub fn bc_loss(tape: &mut Tape, states: Var, ctx: &LossContext) -> Var {
    if ctx.histology.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let s = anchor_loss(tape, states, &ctx.histology);
    match ctx.bc_scaling {
        BcScaling::Sum => s,
        BcScaling::Mean => tape.scale(s, 1.0 / ctx.histology.len() as f64),
    }
}

/// `sum_k exp(-s_k) L_k + s_k` over the active terms. `log_vars` is a
/// `1 x 4` node ordered (residual, data, IC, bc). Inactive terms (no
/// anchors configured) are left out entirely so their `s_k` stays put.
pub fn total_loss(tape: &mut Tape, terms: [Var; 4], log_vars: Var, active: [bool; 4]) -> Var {
    let losses = tape.concat_cols(&terms);
    let neg = tape.neg(log_vars);
    let w = tape.exp(neg);
    let weighted = tape.mul(w, losses);
    let per_term = tape.add(weighted, log_vars);
    let mask = tape.constant(Tensor::row(&active.map(|a| if a { 1.0 } else { 0.0 })));
    let masked = tape.mul(per_term, mask);
    tape.sum(masked)
}

/// Values of the four terms, their weights and the total at one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub residual: f64,
    pub data: f64,
    pub initial: f64,
    pub constraint: f64,
    /// `exp(-s_k)` in (residual, data, IC, bc) order.
    pub weights: [f64; 4],
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 4] {
        [self.residual, self.data, self.initial, self.constraint]
    }
}

pub const LOSS_CSV_HEADER: [&str; 10] = [
    "epoch", "L_r", "L_d", "L_IC", "L_bc", "w_r", "w_d", "w_IC", "w_bc", "total",
];

pub fn loss_history_to_csv(history: &[(usize, LossBreakdown)]) -> String {
    let mut out = LOSS_CSV_HEADER.join(",");
    out.push('\n');
    for (epoch, b) in history {
        let vals = [
            b.residual, b.data, b.initial, b.constraint, b.weights[0], b.weights[1],
            b.weights[2], b.weights[3], b.total,
        ];
        let cells: Vec<String> = vals.iter().map(|v| format_sig(*v, 9)).collect();
        writeln!(out, "{epoch},{}", cells.join(",")).expect("write to string");
    }
    out
}

pub fn loss_history_from_csv(text: &str, source_name: &str) -> Result<Vec<(usize, LossBreakdown)>> {
    let rows = parse_csv(text, source_name, &LOSS_CSV_HEADER)?;
    Ok(rows
        .into_iter()
        .map(|(_, r)| {
            (
                r[0] as usize,
                LossBreakdown {
                    residual: r[1],
                    data: r[2],
                    initial: r[3],
                    constraint: r[4],
                    weights: [r[5], r[6], r[7], r[8]],
                    total: r[9],
                },
            )
        })
        .collect())
}
