//! Central finite-difference checks of tape gradients for every loss term on
//! a downsized random problem.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::losses::{
    bc_loss, data_loss, ic_loss, residual_loss, total_loss, BcScaling, ConstantTerm, LossContext,
    Scales,
};
use crate::neural::{Network, NetworkConfig};

pub const TERM_NAMES: [&str; 5] = ["L_r", "L_d", "L_IC", "L_bc", "total"];
pub const GROUP_NAMES: [&str; 4] = ["state_network", "rate_network", "constants", "log_variances"];

/// A random downsized problem: `[1, 5, 5, 4]` state network, `[1, 5, 1]`
/// rate network, a handful of collocation rows, two data points.
#[derive(Clone, Debug)]
pub struct Problem {
    pub state: Network,
    pub rate: Network,
    /// `(value, trainable)` for the ten constants.
    pub constants: [(f64, bool); 10],
    pub log_vars: [f64; 4],
    pub ctx: LossContext,
}

impl Problem {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = Network::init(&NetworkConfig::new(vec![5, 5], 4), seed).expect("valid");
        let mut rate = Network::init(&NetworkConfig::new(vec![5], 1), seed ^ 1).expect("valid");
        // non-zero biases so every parameter gets exercised
        for net in [&mut state, &mut rate] {
            let p: Vec<f64> = net
                .parameters()
                .into_iter()
                .map(|w| w + rng.random_range(-0.5..0.5))
                .collect();
            net.set_parameters(&p).expect("same length");
        }
        let constants = std::array::from_fn(|_| {
            (rng.random_range(0.01..1.0), rng.random_bool(0.5))
        });
        let log_vars = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let rows = 7;
        let mut times: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..1.0)).collect();
        times.sort_by(f64::total_cmp);
        let q = |rng: &mut ChaCha8Rng| {
            let a: f64 = rng.random_range(0.5..0.9);
            let b: f64 = rng.random_range(0.0..(1.0 - a));
            [a, b, 1.0 - a - b]
        };
        let ctx = LossContext {
            times,
            residual_rows: rows - 1,
            forcing_t: (0..rows).map(|_| rng.random_range(0.0..2.0)).collect(),
            forcing_g: (0..rows).map(|_| rng.random_range(0.0..2.0)).collect(),
            scales: Scales {
                time: rng.random_range(5.0..20.0),
                volume: rng.random_range(1.0..30.0),
                drug: rng.random_range(0.1..1.0),
                rate: 0.05,
            },
            data_rows: vec![0, rows - 2],
            data_targets: vec![rng.random_range(0.05..0.2), rng.random_range(0.5..1.0)],
            initial: Some((0, q(&mut rng).map(|x| x * 0.1))),
            histology: vec![(rows - 1, q(&mut rng)), (2, q(&mut rng))],
            bc_scaling: if rng.random_bool(0.5) {
                BcScaling::Sum
            } else {
                BcScaling::Mean
            },
        };
        Self {
            state,
            rate,
            constants,
            log_vars,
            ctx,
        }
    }

    fn trainable(&self) -> Vec<usize> {
        (0..10).filter(|&i| self.constants[i].1).collect()
    }

    /// All leaves flattened: state network, rate network, raw values of
    /// trainable constants (softplus-parameterized), log-variances.
    pub fn flat(&self) -> (Vec<f64>, [usize; 4]) {
        let mut out = self.state.parameters();
        let a = out.len();
        out.extend(self.rate.parameters());
        let b = out.len();
        for i in self.trainable() {
            out.push(crate::autodiff::softplus_inv(self.constants[i].0));
        }
        let c = out.len();
        out.extend(self.log_vars);
        let d = out.len();
        (out, [a, b, c, d])
    }

    /// Record the five terms at `flat` and return them with the leaves.
    fn record(&self, tape: &mut Tape, flat: &[f64]) -> ([Var; 5], Vec<Var>) {
        let (_, ends) = self.flat();
        let mut state = self.state.clone();
        let mut rate = self.rate.clone();
        state.set_parameters(&flat[..ends[0]]).expect("length");
        rate.set_parameters(&flat[ends[0]..ends[1]]).expect("length");
        let input = tape.constant(Tensor::column(&self.ctx.times));
        let su = state.bind(tape);
        let (u, du) = su.forward_with_time_derivative(tape, input);
        let sr = rate.bind(tape);
        let r = sr.forward(tape, input);
        let mut leaves: Vec<Var> = su
            .leaves()
            .iter()
            .chain(sr.leaves())
            .flat_map(|&(w, b)| [w, b])
            .collect();
        let mut constants = self.constants.map(|(v, _)| ConstantTerm::Fixed(v));
        for (k, i) in self.trainable().into_iter().enumerate() {
            let raw = tape.leaf(Tensor::scalar(flat[ends[1] + k]));
            let value = tape.softplus(raw);
            constants[i] = ConstantTerm::Node(value);
            leaves.push(raw);
        }
        let lv = tape.leaf(Tensor::row(&flat[ends[2]..ends[3]]));
        leaves.push(lv);
        let lr = residual_loss(tape, u, du, r, &constants, &self.ctx);
        let ld = data_loss(tape, u, &self.ctx);
        let lic = ic_loss(tape, u, &self.ctx);
        let lbc = bc_loss(tape, u, &self.ctx);
        let total = total_loss(tape, [lr, ld, lic, lbc], lv, [true; 4]);
        ([lr, ld, lic, lbc, total], leaves)
    }

    /// Values of the five terms at `flat`.
    pub fn values(&self, flat: &[f64]) -> [f64; 5] {
        let mut tape = Tape::new();
        let (terms, _) = self.record(&mut tape, flat);
        terms.map(|t| tape.value(t).item())
    }

    /// Tape gradient of term `k` with respect to `flat`.
    pub fn gradient(&self, flat: &[f64], k: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let (terms, leaves) = self.record(&mut tape, flat);
        let g = tape.backward(terms[k]);
        leaves
            .iter()
            .flat_map(|&v| g.wrt(v).into_vec())
            .collect()
    }
}

/// Worst relative error of one term's gradient over the leaf groups.
#[derive(Clone, Debug, PartialEq)]
pub struct TermCheck {
    pub term: &'static str,
    /// `|g_tape - g_fd| / |g_fd|` per group (Euclidean norms); zero when
    /// both gradients vanish.
    pub group_errors: [f64; 4],
}

impl TermCheck {
    pub fn max_error(&self) -> f64 {
        self.group_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Central differences with step `h * max(1, |x|)`.
pub fn finite_difference(problem: &Problem, flat: &[f64], h: f64) -> Vec<[f64; 5]> {
    let mut x = flat.to_vec();
    (0..flat.len())
        .map(|i| {
            let step = h * flat[i].abs().max(1.0);
            x[i] = flat[i] + step;
            let up = problem.values(&x);
            x[i] = flat[i] - step;
            let down = problem.values(&x);
            x[i] = flat[i];
            std::array::from_fn(|k| (up[k] - down[k]) / (2.0 * step))
        })
        .collect()
}

/// Compare tape and finite-difference gradients of every term for the
/// random problem with `seed`.
pub fn check_seed(seed: u64) -> Vec<TermCheck> {
    let problem = Problem::random(seed);
    let (flat, ends) = problem.flat();
    let fd = finite_difference(&problem, &flat, 1e-6);
    let starts = [0, ends[0], ends[1], ends[2]];
    (0..5)
        .map(|k| {
            let g = problem.gradient(&flat, k);
            let group_errors = std::array::from_fn(|grp| {
                let range = starts[grp]..ends[grp];
                let diff: f64 = range
                    .clone()
                    .map(|i| (g[i] - fd[i][k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let norm: f64 = range.map(|i| fd[i][k].powi(2)).sum::<f64>().sqrt();
                if diff == 0.0 {
                    0.0
                } else if norm < 1e-12 {
                    // both should vanish; report the absolute discrepancy
                    diff
                } else {
                    diff / norm
                }
            });
            TermCheck {
                term: TERM_NAMES[k],
                group_errors,
            }
        })
        .collect()
}
