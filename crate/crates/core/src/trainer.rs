//! Full-batch Adam training of the state and rate networks, checkpointing,
//! and the seeded ensemble runner.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::interp::{augment, fit_spline, Normalizer, ObservationSet};
use crate::losses::{
    bc_loss, data_loss, ic_loss, residual_loss, total_loss, BcScaling, ConstantTerm, LossBreakdown,
    LossContext, Scales,
};
use crate::neural::{Network, NetworkConfig, TrainableScalar};
use crate::ode::{Agent, DosingSchedule, ParamSet, RateProfile, CONSTANT_NAMES};

/// Seed offset separating the rate network's initialization from the state
/// network's.
const RATE_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Consecutive bad epochs tolerated before a run is aborted.
pub const DIVERGENCE_PATIENCE: usize = 100;
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves both the
/// parameters and the state untouched and returns `false`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> bool {
    assert_eq!(params.len(), grads.len(), "gradient length mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state length mismatch");
    if grads.iter().any(|g| !g.is_finite()) {
        return false;
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    true
}

/// A rate constant other than s_MT: its value and whether it is learned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantSetting {
    /// Pinned value, or the initial guess when trainable.
    pub value: f64,
    #[serde(default)]
    pub trainable: bool,
}

/// Settings for all ten constants, in [`CONSTANT_NAMES`] order, all pinned
/// to `params`.
pub fn pinned_constants(params: &ParamSet) -> [ConstantSetting; 10] {
    params.constants().map(|value| ConstantSetting {
        value,
        trainable: false,
    })
}

/// Where s_MT(t) comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateModel {
    /// Learned by a network; its output is multiplied by `scale`.
    Network { network: NetworkConfig, scale: f64 },
    /// Fixed to a known profile.
    Pinned { profile: RateProfile },
}

impl RateModel {
    pub fn default_network() -> Self {
        RateModel::Network {
            network: NetworkConfig::rate_default(),
            scale: 0.05,
        }
    }
}

/// Starting values of the loss log-variances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogVarianceInit {
    /// `s_k = 0`, all weights one.
    Zero,
    /// `s_k = ln L_k` at the initial parameters, the stationary point of
    /// the weighting for the starting losses.
    #[default]
    InitialLosses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub state_network: NetworkConfig,
    pub rate: RateModel,
    pub constants: [ConstantSetting; 10],
    pub schedule: DosingSchedule,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Spline points added between observation days.
    pub m_interp: usize,
    pub log_interval: usize,
    pub eval_points: usize,
    pub bc_scaling: BcScaling,
    pub log_variance_init: LogVarianceInit,
    /// Epochs between checkpoints when a checkpoint path is given; 0 means
    /// only at the end.
    pub checkpoint_interval: usize,
    /// `[t0, tF]`; defaults to the first and last observation days.
    #[serde(default)]
    pub window: Option<(f64, f64)>,
}

impl TrainConfig {
    pub fn new(constants: [ConstantSetting; 10], schedule: DosingSchedule) -> Self {
        Self {
            state_network: NetworkConfig::state_default(),
            rate: RateModel::default_network(),
            constants,
            schedule,
            epochs: 20_000,
            adam: AdamConfig::default(),
            m_interp: 100,
            log_interval: 100,
            eval_points: 500,
            bc_scaling: BcScaling::Sum,
            log_variance_init: LogVarianceInit::InitialLosses,
            checkpoint_interval: 0,
            window: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.state_network.validate()?;
        if self.state_network.output_dim != 4 {
            return Err(Error::config(
                "state_network.output_dim",
                "state network must output (C, T, M, G)",
            ));
        }
        match &self.rate {
            RateModel::Network { network, scale } => {
                network.validate()?;
                if network.output_dim != 1 {
                    return Err(Error::config("rate.network.output_dim", "must be 1"));
                }
                if !(*scale > 0.0 && scale.is_finite()) {
                    return Err(Error::config("rate.scale", "must be positive"));
                }
            }
            RateModel::Pinned { profile } => profile.validate()?,
        }
        for (setting, name) in self.constants.iter().zip(CONSTANT_NAMES) {
            let ok = if setting.trainable {
                setting.value > 0.0 && setting.value.is_finite()
            } else {
                setting.value >= 0.0 && setting.value.is_finite()
            };
            if !ok {
                return Err(Error::config(
                    format!("constants.{name}"),
                    format!("invalid value {}", setting.value),
                ));
            }
        }
        let a = self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0)
        {
            return Err(Error::config("adam", "need lr > 0, betas in [0, 1), eps > 0"));
        }
        if self.log_interval == 0 {
            return Err(Error::config("log_interval", "must be positive"));
        }
        if self.eval_points < 2 {
            return Err(Error::config("eval_points", "need at least 2"));
        }
        if let Some((t0, tf)) = self.window {
            if !(t0.is_finite() && tf.is_finite() && tf > t0) {
                return Err(Error::config("window", format!("need t0 < tF, got [{t0}, {tf}]")));
            }
        }
        Ok(())
    }

    /// Normalization for `obs` under this config.
    pub fn normalizer(&self, obs: &ObservationSet) -> Result<Normalizer> {
        match self.window {
            None => Normalizer::from_observations(obs),
            Some((t0, tf)) => {
                for day in obs.days() {
                    if day < t0 || day > tf {
                        return Err(Error::config(
                            "window",
                            format!("observation day {day} outside [{t0}, {tf}]"),
                        ));
                    }
                }
                Normalizer::new(t0, tf, obs.max_volume())
            }
        }
    }
}

/// Offsets of each parameter group in the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    state: std::ops::Range<usize>,
    rate: std::ops::Range<usize>,
    /// Position of each trainable constant's raw value, by constant index.
    constants: Vec<(usize, usize)>,
    log_vars: std::ops::Range<usize>,
    len: usize,
}

impl Layout {
    fn new(config: &TrainConfig) -> Self {
        let state = 0..config.state_network.num_parameters();
        let rate_len = match &config.rate {
            RateModel::Network { network, .. } => network.num_parameters(),
            RateModel::Pinned { .. } => 0,
        };
        let rate = state.end..state.end + rate_len;
        let mut next = rate.end;
        let mut constants = Vec::new();
        for (i, c) in config.constants.iter().enumerate() {
            if c.trainable {
                constants.push((i, next));
                next += 1;
            }
        }
        let log_vars = next..next + 4;
        Self {
            state,
            rate,
            constants,
            log_vars,
            len: next + 4,
        }
    }
}

/// Everything that changes from epoch to epoch; enough to resume a run
/// bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub history: Vec<(usize, LossBreakdown)>,
    /// Total loss at every completed epoch.
    pub totals: Vec<f64>,
    /// Epochs whose step was rejected for a non-finite gradient.
    pub flagged_epochs: Vec<usize>,
    pub bad_streak: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub config: TrainConfig,
    pub state: TrainState,
}

/// Dense curves in original units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub times: Vec<f64>,
    pub cancer: Vec<f64>,
    pub t_cells: Vec<f64>,
    pub mdsc: Vec<f64>,
    pub gem: Vec<f64>,
    pub s_mt: Vec<f64>,
}

pub const CURVE_NAMES: [&str; 6] = ["C", "T", "M", "G", "s_MT", "total"];

impl Curves {
    pub fn total(&self) -> Vec<f64> {
        (0..self.times.len())
            .map(|i| self.cancer[i] + self.t_cells[i] + self.mdsc[i])
            .collect()
    }

    /// Columns in [`CURVE_NAMES`] order.
    pub fn columns(&self) -> [Vec<f64>; 6] {
        [
            self.cancer.clone(),
            self.t_cells.clone(),
            self.mdsc.clone(),
            self.gem.clone(),
            self.s_mt.clone(),
            self.total(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub seed: u64,
    pub config: TrainConfig,
    pub history: Vec<(usize, LossBreakdown)>,
    pub totals: Vec<f64>,
    pub flagged_epochs: Vec<usize>,
    /// Losses at the final parameters.
    pub final_losses: LossBreakdown,
    pub state_network: Network,
    pub rate_network: Option<Network>,
    /// Constant values after training, in [`CONSTANT_NAMES`] order.
    pub constants: [f64; 10],
    pub log_variances: [f64; 4],
    pub scales: Scales,
    pub t0: f64,
    pub tf: f64,
    pub curves: Curves,
}

impl TrainingRun {
    /// s_MT(t) at physical times, from the learned network or the pinned
    /// profile.
    pub fn s_mt_at(&self, times: &[f64]) -> Result<Vec<f64>> {
        let norm = Normalizer::new(self.t0, self.tf, self.scales.volume)?;
        match (&self.config.rate, &self.rate_network) {
            (RateModel::Network { scale, .. }, Some(net)) => {
                let s: Vec<f64> = times.iter().map(|&t| norm.time(t)).collect();
                let out = net.forward_named(&s, "rate")?;
                Ok(out.as_slice().iter().map(|v| v * scale).collect())
            }
            (RateModel::Pinned { profile }, _) => Ok(times.iter().map(|&t| profile.eval(t)).collect()),
            _ => Err(Error::InvalidInput("rate network missing".into())),
        }
    }

    /// State curves at physical times in original units, rows (C, T, M, G).
    pub fn states_at(&self, times: &[f64]) -> Result<Vec<[f64; 4]>> {
        let norm = Normalizer::new(self.t0, self.tf, self.scales.volume)?;
        let s: Vec<f64> = times.iter().map(|&t| norm.time(t)).collect();
        let out = self.state_network.forward_named(&s, "state")?;
        let (vs, gs) = (self.scales.volume, self.scales.drug);
        Ok((0..times.len())
            .map(|i| {
                [
                    out.get(i, 0) * vs,
                    out.get(i, 1) * vs,
                    out.get(i, 2) * vs,
                    out.get(i, 3) * gs,
                ]
            })
            .collect())
    }
}

/// Training run in progress.
pub struct Trainer {
    seed: u64,
    config: TrainConfig,
    layout: Layout,
    ctx: LossContext,
    active: [bool; 4],
    normalizer: Normalizer,
    state_net: Network,
    rate_net: Option<Network>,
    /// Pinned-profile rate values divided by nothing: the node holds s_MT
    /// in units of `scales.rate`.
    pinned_rate: Option<Vec<f64>>,
    state: TrainState,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            if i + 1 == n {
                b
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

fn build_context(
    obs: &ObservationSet,
    config: &TrainConfig,
    normalizer: &Normalizer,
) -> Result<(LossContext, [bool; 4])> {
    let spline = fit_spline(obs)?;
    let grid = augment(&spline, config.m_interp);
    let mut times: Vec<f64> = grid.iter().map(|p| p.0).collect();
    let residual_rows = times.len();
    let (t0, tf) = (normalizer.t0, normalizer.tf);
    let tol = 1e-9 * (tf - t0);

    let row_of = |day: f64, times: &mut Vec<f64>| -> Result<usize> {
        if !(day >= t0 - tol && day <= tf + tol) {
            return Err(Error::OutOfRange {
                what: "anchor day".into(),
                value: day,
                lo: t0,
                hi: tf,
            });
        }
        if let Some(i) = times.iter().position(|&t| (t - day).abs() <= tol) {
            return Ok(i);
        }
        times.push(day);
        Ok(times.len() - 1)
    };

    let mut data_rows = Vec::with_capacity(obs.len());
    for p in obs.points() {
        data_rows.push(row_of(p.day, &mut times)?);
    }
    let data_targets = obs.volumes().iter().map(|&v| normalizer.volume(v)).collect();
    let anchor = |day: f64, q: [f64; 3]| -> [f64; 3] {
        let u = normalizer.volume(spline.eval(day));
        q.map(|x| x * u)
    };
    let initial = match obs.initial() {
        Some(spec) => Some((row_of(spec.day, &mut times)?, anchor(spec.day, spec.proportions))),
        None => None,
    };
    let mut histology = Vec::new();
    for spec in obs.histology() {
        histology.push((row_of(spec.day, &mut times)?, anchor(spec.day, spec.proportions)));
    }

    let (forcing_t, forcing_g): (Vec<f64>, Vec<f64>) =
        times.iter().map(|&t| config.schedule.rates(t)).unzip();
    let gem_total = config.schedule.total_dose(Agent::Gem);
    let rate_scale = match &config.rate {
        RateModel::Network { scale, .. } => *scale,
        RateModel::Pinned { .. } => 1.0,
    };
    let scales = Scales {
        time: normalizer.duration(),
        volume: normalizer.volume_scale,
        drug: if gem_total > 0.0 { gem_total } else { 1.0 },
        rate: rate_scale,
    };
    let active = [true, true, initial.is_some(), !histology.is_empty()];
    let ctx = LossContext {
        times: times.iter().map(|&t| normalizer.time(t)).collect(),
        residual_rows,
        forcing_t,
        forcing_g,
        scales,
        data_rows,
        data_targets,
        initial,
        histology,
        bc_scaling: config.bc_scaling,
    };
    Ok((ctx, active))
}

/// Recorded losses of one evaluation.
struct Evaluation {
    breakdown: LossBreakdown,
    grads: Option<Vec<f64>>,
}

impl Trainer {
    pub fn new(obs: &ObservationSet, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let normalizer = config.normalizer(obs)?;
        config.schedule.validate(normalizer.t0, normalizer.tf)?;
        let state_net = Network::init(&config.state_network, seed)?;
        let rate_net = match &config.rate {
            RateModel::Network { network, .. } => {
                Some(Network::init(network, seed ^ RATE_SEED_OFFSET)?)
            }
            RateModel::Pinned { .. } => None,
        };
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.len];
        params[layout.state.clone()].copy_from_slice(&state_net.parameters());
        if let Some(net) = &rate_net {
            params[layout.rate.clone()].copy_from_slice(&net.parameters());
        }
        for &(i, pos) in &layout.constants {
            params[pos] = TrainableScalar::from_value(config.constants[i].value)?.raw;
        }
        let mut trainer = Self::assemble(obs, config, seed, normalizer, state_net, rate_net, params)?;
        if trainer.config.log_variance_init == LogVarianceInit::InitialLosses {
            let eval = trainer.evaluate(false)?;
            let terms = eval.breakdown.terms();
            for (k, pos) in trainer.layout.log_vars.clone().enumerate() {
                trainer.state.params[pos] = if trainer.active[k] {
                    terms[k].max(1e-12).ln()
                } else {
                    0.0
                };
            }
        }
        Ok(trainer)
    }

    fn assemble(
        obs: &ObservationSet,
        config: TrainConfig,
        seed: u64,
        normalizer: Normalizer,
        state_net: Network,
        rate_net: Option<Network>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let (ctx, active) = build_context(obs, &config, &normalizer)?;
        let pinned_rate = match &config.rate {
            RateModel::Pinned { profile } => Some(
                ctx.times
                    .iter()
                    .map(|&s| profile.eval(normalizer.time_inv(s)))
                    .collect(),
            ),
            RateModel::Network { .. } => None,
        };
        let layout = Layout::new(&config);
        let adam = AdamState::new(config.adam, layout.len);
        Ok(Self {
            seed,
            config,
            layout,
            ctx,
            active,
            normalizer,
            state_net,
            rate_net,
            pinned_rate,
            state: TrainState {
                epoch: 0,
                params,
                adam,
                history: Vec::new(),
                totals: Vec::new(),
                flagged_epochs: Vec::new(),
                bad_streak: 0,
            },
        })
    }

    /// Continue from a checkpoint taken on the same observations.
    pub fn resume(obs: &ObservationSet, checkpoint: Checkpoint) -> Result<Self> {
        let Checkpoint {
            seed,
            config,
            state,
        } = checkpoint;
        config.validate()?;
        let normalizer = config.normalizer(obs)?;
        let state_net = Network::zeros(&config.state_network)?;
        let rate_net = match &config.rate {
            RateModel::Network { network, .. } => Some(Network::zeros(network)?),
            RateModel::Pinned { .. } => None,
        };
        let mut trainer =
            Self::assemble(obs, config, seed, normalizer, state_net, rate_net, state.params.clone())?;
        if state.params.len() != trainer.layout.len || state.adam.m.len() != trainer.layout.len {
            return Err(Error::InvalidInput(
                "checkpoint does not match the configured networks".into(),
            ));
        }
        trainer.state = state;
        trainer.sync_networks()?;
        Ok(trainer)
    }

    pub fn load_checkpoint(obs: &ObservationSet, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cp: Checkpoint = serde_json::from_str(&text)?;
        Self::resume(obs, cp)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.seed,
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.checkpoint())?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn context(&self) -> &LossContext {
        &self.ctx
    }

    fn sync_networks(&mut self) -> Result<()> {
        self.state_net
            .set_parameters(&self.state.params[self.layout.state.clone()])?;
        if let Some(net) = &mut self.rate_net {
            net.set_parameters(&self.state.params[self.layout.rate.clone()])?;
        }
        Ok(())
    }

    fn constant_values(&self) -> [f64; 10] {
        let mut values = self.config.constants.map(|c| c.value);
        for &(i, pos) in &self.layout.constants {
            values[i] = softplus(self.state.params[pos]);
        }
        values
    }

    fn log_variances(&self) -> [f64; 4] {
        let p = &self.state.params[self.layout.log_vars.clone()];
        [p[0], p[1], p[2], p[3]]
    }

    /// Record the total loss at the current parameters; with `grad`, also
    /// its gradient in flat-parameter order.
    fn evaluate(&mut self, grad: bool) -> Result<Evaluation> {
        self.sync_networks()?;
        let mut tape = Tape::new();
        let input = tape.constant(Tensor::column(&self.ctx.times));
        let u_bound = self.state_net.bind(&mut tape);
        let (states, d_states) = u_bound.forward_with_time_derivative(&mut tape, input);
        let (rate_bound, rate_out) = match (&self.rate_net, &self.pinned_rate) {
            (Some(net), _) => {
                let b = net.bind(&mut tape);
                let out = b.forward(&mut tape, input);
                (Some(b), out)
            }
            (None, Some(values)) => (None, tape.constant(Tensor::column(values))),
            (None, None) => unreachable!("rate model is either a network or pinned"),
        };
        let mut constants = self.config.constants.map(|c| ConstantTerm::Fixed(c.value));
        let mut const_leaves: Vec<Var> = Vec::with_capacity(self.layout.constants.len());
        for &(i, pos) in &self.layout.constants {
            let raw = tape.leaf(Tensor::scalar(self.state.params[pos]));
            let value = tape.softplus(raw);
            constants[i] = ConstantTerm::Node(value);
            const_leaves.push(raw);
        }
        let s = self.log_variances();
        let log_vars = tape.leaf(Tensor::row(&s));

        let lr = residual_loss(&mut tape, states, d_states, rate_out, &constants, &self.ctx);
        let ld = data_loss(&mut tape, states, &self.ctx);
        let lic = ic_loss(&mut tape, states, &self.ctx);
        let lbc = bc_loss(&mut tape, states, &self.ctx);
        let total = total_loss(&mut tape, [lr, ld, lic, lbc], log_vars, self.active);

        let breakdown = LossBreakdown {
            residual: tape.value(lr).item(),
            data: tape.value(ld).item(),
            initial: tape.value(lic).item(),
            constraint: tape.value(lbc).item(),
            weights: s.map(|x| (-x).exp()),
            total: tape.value(total).item(),
        };
        if !breakdown.total.is_finite() || !grad {
            return Ok(Evaluation {
                breakdown,
                grads: None,
            });
        }
        let g = tape.backward(total);
        let mut flat = Vec::with_capacity(self.layout.len);
        u_bound.flat_gradient(&g, &mut flat);
        if let Some(b) = &rate_bound {
            b.flat_gradient(&g, &mut flat);
        }
        for raw in const_leaves {
            flat.push(g.wrt(raw).item());
        }
        flat.extend_from_slice(g.wrt(log_vars).as_slice());
        debug_assert_eq!(flat.len(), self.layout.len);
        Ok(Evaluation {
            breakdown,
            grads: Some(flat),
        })
    }

    /// Physical time of the residual-grid row with the largest (or a
    /// non-finite) residual state, for divergence diagnostics.
    fn worst_row(&self) -> String {
        let out = match self.state_net.forward(&self.ctx.times) {
            Ok(o) => o,
            Err(e) => return e.to_string(),
        };
        let mut worst = (0usize, f64::NEG_INFINITY);
        for i in 0..out.rows() {
            let row_max = (0..4)
                .map(|k| {
                    let v = out.get(i, k);
                    if v.is_finite() {
                        v.abs()
                    } else {
                        f64::INFINITY
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if row_max > worst.1 {
                worst = (i, row_max);
            }
        }
        format!(
            "largest state magnitude {} at t = {}",
            worst.1,
            self.normalizer.time_inv(self.ctx.times[worst.0])
        )
    }

    /// Run one epoch: evaluate, record, step.
    pub fn step(&mut self) -> Result<()> {
        let epoch = self.state.epoch;
        let eval = self.evaluate(true)?;
        let total = eval.breakdown.total;
        if !total.is_finite() || total > DIVERGENCE_THRESHOLD {
            self.state.bad_streak += 1;
        } else {
            self.state.bad_streak = 0;
        }
        let accepted = match &eval.grads {
            Some(g) => adam_step(&mut self.state.params, g, &mut self.state.adam),
            None => false,
        };
        if !accepted {
            self.state.flagged_epochs.push(epoch);
        }
        self.state.totals.push(total);
        self.state.epoch += 1;
        if self.state.epoch % self.config.log_interval == 0 {
            self.state.history.push((self.state.epoch, eval.breakdown));
        }
        if self.state.bad_streak >= DIVERGENCE_PATIENCE {
            return Err(Error::AbortedRun {
                seed: self.seed,
                epoch,
                reason: format!(
                    "total loss {total} out of range for {DIVERGENCE_PATIENCE} consecutive epochs; {}",
                    self.worst_row()
                ),
            });
        }
        Ok(())
    }

    /// Train to `config.epochs`, writing a checkpoint to `checkpoint` at the
    /// configured interval and at the end.
    pub fn run(&mut self, checkpoint: Option<&Path>) -> Result<()> {
        let interval = self.config.checkpoint_interval;
        while self.state.epoch < self.config.epochs {
            self.step()?;
            if let Some(path) = checkpoint {
                if interval > 0 && self.state.epoch % interval == 0 {
                    self.save_checkpoint(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.save_checkpoint(path)?;
        }
        Ok(())
    }

    /// Run until `epoch` (or the configured end, whichever is first).
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.state.epoch < epoch.min(self.config.epochs) {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<TrainingRun> {
        let final_losses = self.evaluate(false)?.breakdown;
        let constants = self.constant_values();
        let log_variances = self.log_variances();
        let (t0, tf) = (self.normalizer.t0, self.normalizer.tf);
        let times = linspace(t0, tf, self.config.eval_points);
        let mut run = TrainingRun {
            seed: self.seed,
            config: self.config,
            history: self.state.history,
            totals: self.state.totals,
            flagged_epochs: self.state.flagged_epochs,
            final_losses,
            state_network: self.state_net,
            rate_network: self.rate_net,
            constants,
            log_variances,
            scales: self.ctx.scales,
            t0,
            tf,
            curves: Curves {
                times: Vec::new(),
                cancer: Vec::new(),
                t_cells: Vec::new(),
                mdsc: Vec::new(),
                gem: Vec::new(),
                s_mt: Vec::new(),
            },
        };
        let states = run.states_at(&times)?;
        run.curves = Curves {
            cancer: states.iter().map(|s| s[0]).collect(),
            t_cells: states.iter().map(|s| s[1]).collect(),
            mdsc: states.iter().map(|s| s[2]).collect(),
            gem: states.iter().map(|s| s[3]).collect(),
            s_mt: run.s_mt_at(&times)?,
            times,
        };
        Ok(run)
    }
}

pub fn train(obs: &ObservationSet, config: &TrainConfig, seed: u64) -> Result<TrainingRun> {
    let mut trainer = Trainer::new(obs, config.clone(), seed)?;
    trainer.run(None)?;
    trainer.finish()
}

/// Pointwise mean and population standard deviation of one quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Band {
    pub fn from_members(members: &[&[f64]]) -> Self {
        assert!(!members.is_empty(), "band needs at least one member");
        let n = members[0].len();
        let k = members.len() as f64;
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for i in 0..n {
            // Welford: identical members give exactly their value and zero spread
            let (mut mu, mut m2) = (0.0, 0.0);
            for (j, m) in members.iter().enumerate() {
                let x = m[i];
                let d = x - mu;
                mu += d / (j + 1) as f64;
                m2 += d * (x - mu);
            }
            mean[i] = mu;
            std[i] = (m2 / k).max(0.0).sqrt();
        }
        let lower = mean.iter().zip(&std).map(|(m, s)| m - s).collect();
        let upper = mean.iter().zip(&std).map(|(m, s)| m + s).collect();
        Self {
            mean,
            std,
            lower,
            upper,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortedMember {
    pub seed: u64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    /// Surviving runs in seed-list order.
    pub members: Vec<TrainingRun>,
    pub aborted: Vec<AbortedMember>,
    pub times: Vec<f64>,
    /// Bands in [`CURVE_NAMES`] order.
    pub bands: Vec<Band>,
}

/// Minimum survivors needed to report bands when some members abort.
pub const MIN_SURVIVORS: usize = 3;

pub fn run_ensemble(
    obs: &ObservationSet,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<EnsembleResult> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    config.validate()?;
    let results: Vec<Result<TrainingRun>> =
        seeds.par_iter().map(|&seed| train(obs, config, seed)).collect();
    let mut members = Vec::new();
    let mut aborted = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(run) => members.push(run),
            Err(e @ Error::AbortedRun { .. }) => aborted.push(AbortedMember {
                seed: *seed,
                message: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    if !aborted.is_empty() && members.len() < MIN_SURVIVORS {
        let detail: Vec<String> = aborted.iter().map(|a| a.message.clone()).collect();
        return Err(Error::Ensemble(format!(
            "{} of {} runs aborted: {}",
            aborted.len(),
            seeds.len(),
            detail.join("; ")
        )));
    }
    Ok(ensemble_from_members(members, aborted))
}

pub fn ensemble_from_members(members: Vec<TrainingRun>, aborted: Vec<AbortedMember>) -> EnsembleResult {
    let times = members[0].curves.times.clone();
    let columns: Vec<[Vec<f64>; 6]> = members.iter().map(|m| m.curves.columns()).collect();
    let bands = (0..CURVE_NAMES.len())
        .map(|q| {
            let series: Vec<&[f64]> = columns.iter().map(|c| c[q].as_slice()).collect();
            Band::from_members(&series)
        })
        .collect();
    EnsembleResult {
        members,
        aborted,
        times,
        bands,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ConstraintSpec;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![0.5, -1.0, 3.0];
        let mut st = AdamState::new(AdamConfig::default(), 3);
        assert!(adam_step(&mut p, &[1.0, 1.0, 1.0], &mut st));
        let expected = 1e-3 / (1.0 + 1e-8);
        for (after, before) in p.iter().zip([0.5, -1.0, 3.0]) {
            assert!((before - after - expected).abs() < 1e-15);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_only_decays_moments() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(AdamConfig::default(), 2);
        adam_step(&mut p, &[0.5, -0.5], &mut st);
        let (p1, m1, v1) = (p.clone(), st.m.clone(), st.v.clone());
        // bias-corrected m_hat is not zero, so parameters still move; with a
        // fresh state a zero gradient leaves them unchanged
        adam_step(&mut p, &[0.0, 0.0], &mut st);
        for i in 0..2 {
            assert_eq!(st.m[i], 0.9 * m1[i]);
            assert_eq!(st.v[i], 0.999 * v1[i]);
        }
        assert_ne!(p, p1);
        let mut q = vec![1.0, 2.0];
        let mut fresh = AdamState::new(AdamConfig::default(), 2);
        adam_step(&mut q, &[0.0, 0.0], &mut fresh);
        assert_eq!(q, vec![1.0, 2.0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(AdamConfig::default(), 2);
        let before = st.clone();
        assert!(!adam_step(&mut p, &[f64::NAN, 0.0], &mut st));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st, before);
    }

    fn pts(raw: &[(f64, f64)]) -> Vec<crate::interp::DataPoint> {
        raw.iter()
            .map(|&(day, total_volume)| crate::interp::DataPoint { day, total_volume })
            .collect()
    }

    fn small_problem() -> (ObservationSet, TrainConfig) {
        let obs = ObservationSet::new(
            pts(&[(6.0, 2.0), (9.0, 5.3), (13.0, 17.4), (16.0, 26.8)]),
            Some(ConstraintSpec::initial_default()),
            vec![ConstraintSpec {
                day: 13.0,
                proportions: [0.9, 0.05, 0.05],
            }],
        )
        .unwrap();
        let mut cfg = TrainConfig::new(
            pinned_constants(&ParamSet::fixture()),
            DosingSchedule::gem_then_ot1(0.5, 10.0),
        );
        cfg.state_network = NetworkConfig::new(vec![8, 8], 4);
        cfg.rate = RateModel::Network {
            network: NetworkConfig::new(vec![6], 1),
            scale: 0.05,
        };
        cfg.m_interp = 12;
        cfg.epochs = 30;
        cfg.log_interval = 10;
        cfg.eval_points = 25;
        (obs, cfg)
    }

    #[test]
    fn zero_epochs_returns_initial_networks() {
        let (obs, mut cfg) = small_problem();
        cfg.epochs = 0;
        let run = train(&obs, &cfg, 3).unwrap();
        assert!(run.history.is_empty());
        assert!(run.totals.is_empty());
        let init = Network::init(&cfg.state_network, 3).unwrap();
        assert_eq!(run.state_network, init);
        assert_eq!(run.curves.times.len(), 25);
        assert_eq!(run.curves.times[0], 6.0);
        assert_eq!(*run.curves.times.last().unwrap(), 16.0);
    }

    #[test]
    fn history_length_and_determinism() {
        let (obs, cfg) = small_problem();
        let a = train(&obs, &cfg, 11).unwrap();
        let b = train(&obs, &cfg, 11).unwrap();
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.history[2].0, 30);
        assert_eq!(a.totals.len(), 30);
        assert_eq!(a, b);
        let c = train(&obs, &cfg, 12).unwrap();
        assert_ne!(a.totals, c.totals);
    }

    #[test]
    fn initial_log_variances_are_stationary() {
        let (obs, cfg) = small_problem();
        let mut t = Trainer::new(&obs, cfg, 5).unwrap();
        let e = t.evaluate(true).unwrap();
        let g = e.grads.unwrap();
        let lv = t.layout.log_vars.clone();
        for k in 0..4 {
            assert!(g[lv.start + k].abs() < 1e-9, "s_{k} gradient {}", g[lv.start + k]);
        }
        for w in e.breakdown.weights.iter().zip(e.breakdown.terms()) {
            assert!((w.0 * w.1 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (obs, cfg) = small_problem();
        let full = train(&obs, &cfg, 21).unwrap();
        let mut first = Trainer::new(&obs, cfg, 21).unwrap();
        first.run_until(13).unwrap();
        let text = serde_json::to_string(&first.checkpoint()).unwrap();
        let cp: Checkpoint = serde_json::from_str(&text).unwrap();
        let mut resumed = Trainer::resume(&obs, cp).unwrap();
        resumed.run(None).unwrap();
        assert_eq!(resumed.finish().unwrap(), full);
    }

    #[test]
    fn trainable_constants_receive_updates() {
        let (obs, mut cfg) = small_problem();
        let idx = CONSTANT_NAMES.iter().position(|n| *n == "d_g").unwrap();
        cfg.constants[idx].trainable = true;
        let run = train(&obs, &cfg, 2).unwrap();
        assert_ne!(run.constants[idx], cfg.constants[idx].value);
        assert!(run.constants[idx] > 0.0);
        for (i, c) in run.constants.iter().enumerate() {
            if i != idx {
                assert_eq!(*c, cfg.constants[i].value);
            }
        }
    }

    #[test]
    fn anchor_outside_range_is_rejected() {
        let obs = ObservationSet::new(
            pts(&[(6.0, 2.0), (9.0, 5.3), (13.0, 17.4)]),
            None,
            vec![ConstraintSpec {
                day: 20.0,
                proportions: [0.9, 0.05, 0.05],
            }],
        )
        .unwrap();
        let (_, mut cfg) = small_problem();
        cfg.schedule = DosingSchedule::empty();
        assert!(matches!(
            Trainer::new(&obs, cfg, 0),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn ensemble_bands() {
        let (obs, mut cfg) = small_problem();
        cfg.epochs = 5;
        let one = run_ensemble(&obs, &cfg, &[4]).unwrap();
        assert_eq!(one.members.len(), 1);
        for b in &one.bands {
            assert_eq!(b.lower, b.mean);
            assert_eq!(b.upper, b.mean);
        }
        let same = run_ensemble(&obs, &cfg, &[7, 7, 7]).unwrap();
        assert!(same.bands.iter().all(|b| b.std.iter().all(|s| *s == 0.0)));

        let many = run_ensemble(&obs, &cfg, &[1, 2, 3]).unwrap();
        assert_eq!(many.members.iter().map(|m| m.seed).collect::<Vec<_>>(), vec![1, 2, 3]);
        let c = &many.bands[0];
        for i in 0..many.times.len() {
            let mean = many.members.iter().map(|m| m.curves.cancer[i]).sum::<f64>() / 3.0;
            assert!((c.mean[i] - mean).abs() <= 1e-12 * mean.abs());
            assert!(c.lower[i] <= c.mean[i] && c.mean[i] <= c.upper[i]);
        }
        assert!(run_ensemble(&obs, &cfg, &[]).is_err());
    }

    #[test]
    fn divergence_aborts_with_diagnostics() {
        let (obs, mut cfg) = small_problem();
        cfg.adam.lr = 1e3;
        cfg.epochs = 2_000;
        cfg.log_variance_init = LogVarianceInit::Zero;
        match train(&obs, &cfg, 1) {
            Err(Error::AbortedRun { seed: 1, reason, .. }) => assert!(reason.contains("t = ")),
            other => panic!("expected abort, got {:?}", other.map(|r| r.final_losses)),
        }
    }
}
