//! Multi-level joint optimization of the trajectory spline and the denoiser
//! thresholds.
//!
//! Training runs as a sequence of phases: phase 0 trains the thresholds with
//! the trajectory frozen, phase `l + 1` is optimization level `l`. Every
//! quantity that depends on randomness (epoch order, acquisition noise) is a
//! pure function of the seed and the position in the schedule, so a
//! [`TrainState`] snapshot is all that a bit-exact resume needs.

use std::io::Write as _;
use std::path::Path;

use num_complex::Complex64 as C;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{psnr, ssim};
use crate::grad::{loss_and_grad, recon_loss, theta_loss_and_grad, Acquisition, PenaltyWeights};
use crate::mrisys::{Dataset, SenseModel};
use crate::recon::{cs_recon, init_recon, unrolled_forward, Denoiser, UnrolledConfig, WaveletShrink};
use crate::trajectory::{fit_with_basis, nonparametric, penalty, FitResidual, HardwareLimits, SplineBasis, SplineParam, Thresholds, Trajectory};

/// First-moment and second-moment estimates of one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, betas: [f64; 2]) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let [b1, b2] = betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for k in 0..params.len() {
        let g = grad[k];
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g;
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g;
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        params[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Quadratic B-splines refitted at each level's decimation.
    Spline,
    /// Every sample is a free variable (`B = I`); the decimation schedule
    /// only sets the number of levels.
    Nonparametric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_levels: usize,
    pub epochs_per_level: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    /// Peak trajectory step size, rad/pixel.
    pub lr_omega: f64,
    pub lr_theta: f64,
    pub adam_betas: [f64; 2],
    /// Penalty weights; `None` calibrates at the first trajectory step.
    pub mu1: Option<f64>,
    pub mu2: Option<f64>,
    /// Calibrated weight = `penalty_gain · max|∂loss/∂ω|`.
    pub penalty_gain: f64,
    /// Training uses limits shrunk by this fraction; feasibility is judged
    /// against the full limits.
    pub feasibility_margin: f64,
    pub decim_schedule: Vec<usize>,
    pub parameterization: Parameterization,
    /// Penalty-only descent steps allowed after training when the result
    /// violates the limits; 0 disables the repair.
    pub repair_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_levels: 4,
            epochs_per_level: 3,
            pretrain_epochs: 3,
            batch_size: 4,
            lr_omega: 3e-2,
            lr_theta: 2e-3,
            adam_betas: [0.5, 0.999],
            mu1: None,
            mu2: None,
            penalty_gain: 10.0,
            feasibility_margin: 0.1,
            decim_schedule: vec![64, 32, 16, 8],
            parameterization: Parameterization::Spline,
            repair_iters: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.decim_schedule.len() != self.n_levels {
            return bad(format!("decim_schedule has {} entries for {} levels", self.decim_schedule.len(), self.n_levels));
        }
        if self.decim_schedule.windows(2).any(|w| w[1] >= w[0]) {
            return bad("decim_schedule must be strictly decreasing".into());
        }
        if self.decim_schedule.contains(&0) {
            return bad("decimation must be >= 1".into());
        }
        if !(self.lr_omega > 0.0 && self.lr_theta > 0.0) || !self.lr_omega.is_finite() || !self.lr_theta.is_finite() {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        for mu in [self.mu1, self.mu2].into_iter().flatten() {
            if !(mu >= 0.0) || !mu.is_finite() {
                return bad(format!("penalty weight {mu} must be >= 0"));
            }
        }
        if !(self.penalty_gain > 0.0) || !self.penalty_gain.is_finite() {
            return bad("penalty_gain must be positive".into());
        }
        if !(0.0..1.0).contains(&self.feasibility_margin) {
            return bad("feasibility_margin must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// One line of the metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    /// 0 while pretraining the thresholds, then 1-based optimization level.
    pub level: usize,
    pub epoch: usize,
    pub recon_loss: f64,
    pub g_penalty: f64,
    pub s_penalty: f64,
    pub lr_omega: f64,
    pub lr_theta: f64,
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: usize,
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
    pub spline: SplineParam,
    pub theta: Vec<f64>,
    pub adam_c: AdamState,
    pub adam_theta: AdamState,
    pub mu: Option<(f64, f64)>,
    /// Best pretraining thresholds by validation loss.
    pub best_theta: Vec<f64>,
    pub best_val: f64,
    pub val_history: Vec<f64>,
    pub refit_residuals: Vec<FitResidual>,
    pub history: Vec<MetricRecord>,
    /// Repair steps taken after the last level, if any were needed.
    pub repair_steps: Option<usize>,
    pub done: bool,
}

/// Summary written next to the learned trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub feasible: bool,
    pub grad_hinge: f64,
    pub slew_hinge: f64,
    pub mu1: Option<f64>,
    pub mu2: Option<f64>,
    pub steps: u64,
    pub pretrain_val_loss: Vec<f64>,
    pub refit_residuals: Vec<FitResidual>,
    /// Mean distance of the final samples from the initial ones, rad/pixel.
    pub mean_displacement: f64,
    pub repair_steps: Option<usize>,
    pub history: Vec<MetricRecord>,
}

impl FitReport {
    pub fn to_jsonl(&self) -> String {
        history_jsonl(&self.history)
    }
}

pub fn history_jsonl(history: &[MetricRecord]) -> String {
    let mut s = String::new();
    for r in history {
        s.push_str(&serde_json::to_string(r).expect("metric records serialize"));
        s.push('\n');
    }
    s
}

pub struct FitOutput {
    pub trajectory: Trajectory,
    pub theta: Vec<f64>,
    pub report: FitReport,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash of a sequence of integers, used to derive independent seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6a09_e667_f3bc_c908, |h, &p| splitmix(h ^ p))
}

const NOISE_SALT: u64 = 0x6e6f_6973_65;
const ORDER_SALT: u64 = 0x6f72_6465_72;
/// Salt for noise on held-out images; shared by validation and evaluation.
pub const HELDOUT_SALT: u64 = 0x6865_6c64;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KJCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub struct Trainer<'a> {
    config: TrainConfig,
    unrolled: UnrolledConfig,
    dataset: &'a Dataset,
    acq: &'a Acquisition,
    init: Trajectory,
    limits: Thresholds,
    denoiser: WaveletShrink,
    hash: [u8; 32],
    state: TrainState,
}

impl<'a> Trainer<'a> {
    /// `unrolled.denoiser_theta` holds the initial thresholds.
    pub fn new(
        config: TrainConfig,
        unrolled: UnrolledConfig,
        dataset: &'a Dataset,
        acq: &'a Acquisition,
        init: &Trajectory,
        limits: &HardwareLimits,
    ) -> Result<Self> {
        config.validate()?;
        limits.validate()?;
        let denoiser = WaveletShrink::new(dataset.grid_n, dataset.grid_n);
        unrolled.validate(denoiser.num_params()).map_err(|e| Error::Config(e.to_string()))?;
        if init.nd != 2 || init.grid_n != dataset.grid_n || acq.grid_n != dataset.grid_n {
            return Err(Error::Config(format!(
                "trajectory grid {} (Nd {}), acquisition grid {} and image grid {} must agree in 2-D",
                init.grid_n, init.nd, acq.grid_n, dataset.grid_n
            )));
        }
        if dataset.train.is_empty() {
            return Err(Error::Config("the training split is empty".into()));
        }
        if config.parameterization == Parameterization::Spline {
            if let Some(&d) = config.decim_schedule.iter().find(|&&d| d > init.samples_per_shot) {
                return Err(Error::Config(format!("decimation {d} exceeds {} samples per shot", init.samples_per_shot)));
            }
        }
        let hash = config_hash(&config, &unrolled, dataset, acq, init, limits)?;
        let theta = unrolled.denoiser_theta.clone();
        let spline = nonparametric(init);
        let n_c = spline.coeffs.len();
        let state = TrainState {
            phase: 0,
            epoch: 0,
            batch: 0,
            step: 0,
            spline,
            adam_c: AdamState::new(n_c),
            adam_theta: AdamState::new(theta.len()),
            mu: match (config.mu1, config.mu2) {
                (Some(a), Some(b)) => Some((a, b)),
                _ => None,
            },
            best_theta: theta.clone(),
            best_val: f64::INFINITY,
            theta,
            val_history: Vec::new(),
            refit_residuals: Vec::new(),
            history: Vec::new(),
            repair_steps: None,
            done: false,
        };
        let limits_rad = limits.thresholds(init.fov, init.grid_n);
        let mut t = Self { config, unrolled, dataset, acq, init: init.clone(), limits: limits_rad, denoiser, hash, state };
        t.enter_phase()?;
        Ok(t)
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    pub fn config_hash(&self) -> [u8; 32] {
        self.hash
    }

    fn steps_per_epoch(&self) -> usize {
        self.dataset.train.len().div_ceil(self.config.batch_size)
    }

    fn phase_epochs(&self, phase: usize) -> usize {
        if phase == 0 {
            self.config.pretrain_epochs
        } else {
            self.config.epochs_per_level
        }
    }

    /// Skip empty phases and prepare the first non-empty one.
    fn enter_phase(&mut self) -> Result<()> {
        loop {
            let p = self.state.phase;
            if p > self.config.n_levels {
                let train_limits = self.limits.scaled(1.0 - self.config.feasibility_margin);
                if self.state.step > 0 && !penalty(&self.state.spline.materialize(), self.state.spline.layout(), self.limits, 0.0, 0.0).is_feasible() {
                    let n = repair(&mut self.state.spline, train_limits, self.limits, self.config.repair_iters);
                    self.state.repair_steps = Some(n);
                }
                self.state.done = true;
                return Ok(());
            }
            if self.phase_epochs(p) == 0 {
                self.state.phase += 1;
                continue;
            }
            if p == 0 {
                if !self.dataset.val.is_empty() {
                    let v = self.validation_loss(&self.state.theta)?;
                    self.state.val_history.push(v);
                    self.state.best_val = v;
                }
            } else {
                let coords = self.state.spline.materialize();
                let traj = self.init.with_coords(coords)?;
                let basis = match self.config.parameterization {
                    Parameterization::Spline => SplineBasis::quadratic(traj.nshots, traj.samples_per_shot, self.config.decim_schedule[p - 1])?,
                    Parameterization::Nonparametric => SplineBasis::identity(traj.nshots, traj.samples_per_shot),
                };
                let (spline, res) = fit_with_basis(&traj, basis)?;
                self.state.adam_c = AdamState::new(spline.coeffs.len());
                self.state.spline = spline;
                self.state.refit_residuals.push(res);
            }
            return Ok(());
        }
    }

    fn unrolled_with(&self, theta: &[f64]) -> UnrolledConfig {
        UnrolledConfig { denoiser_theta: theta.to_vec(), ..self.unrolled.clone() }
    }

    fn validation_loss(&self, theta: &[f64]) -> Result<f64> {
        let coords = self.state.spline.materialize();
        let model = self.acq.model(&coords)?;
        let cfg = self.unrolled_with(theta);
        let items: Vec<(usize, &[C])> = self.dataset.val.iter().map(|&i| (i, self.dataset.images[i].as_slice())).collect();
        let losses: Vec<f64> = items
            .par_iter()
            .map(|&(i, x)| {
                let y = self.acq.acquire(&model, x, derive_seed(&[self.config.seed, HELDOUT_SALT, i as u64]))?.y;
                let (r, _) = unrolled_forward(&model, &y, &cfg, &self.denoiser)?;
                Ok(recon_loss(&r.image, x).0)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn batch_indices(&self) -> Vec<usize> {
        let s = &self.state;
        let mut order = self.dataset.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, ORDER_SALT, s.phase as u64, s.epoch as u64]));
        order.shuffle(&mut rng);
        let bs = self.config.batch_size;
        order[s.batch * bs..((s.batch + 1) * bs).min(order.len())].to_vec()
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<()> {
        if self.state.done {
            return Ok(());
        }
        let idx = self.batch_indices();
        let s = &self.state;
        let batch: Vec<&[C]> = idx.iter().map(|&i| self.dataset.images[i].as_slice()).collect();
        let seeds: Vec<u64> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| derive_seed(&[self.config.seed, NOISE_SALT, s.phase as u64, s.epoch as u64, s.batch as u64, k as u64, i as u64]))
            .collect();
        let spe = self.steps_per_epoch();
        let total = (self.phase_epochs(s.phase) * spe) as f64;
        let done_frac = (s.epoch * spe + s.batch) as f64 / total;
        let decay = 1.0 - done_frac;
        let lr_theta = self.config.lr_theta * decay;
        let cfg = self.unrolled_with(&s.theta);
        let record = if s.phase == 0 {
            let model = self.acq.model(&s.spline.materialize())?;
            let (loss, d_theta) = theta_loss_and_grad(&batch, &seeds, &model, self.acq, &cfg, &self.denoiser)?;
            let st = &mut self.state;
            adam_step(&mut st.theta, &d_theta, &mut st.adam_theta, lr_theta, self.config.adam_betas);
            MetricRecord { step: st.step, level: 0, epoch: st.epoch, recon_loss: loss, g_penalty: 0.0, s_penalty: 0.0, lr_omega: 0.0, lr_theta }
        } else {
            let lr_omega = self.config.lr_omega * decay;
            let train_limits = self.limits.scaled(1.0 - self.config.feasibility_margin);
            let (mu1, mu2) = s.mu.unwrap_or((0.0, 0.0));
            let pen = PenaltyWeights { thresholds: train_limits, mu1, mu2 };
            let mut g = loss_and_grad(&batch, &seeds, &s.spline, self.acq, &cfg, &self.denoiser, &pen)?;
            if s.mu.is_none() {
                let gmax = g.d_omega_recon.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let auto = if gmax > 0.0 { self.config.penalty_gain * gmax } else { self.config.penalty_gain };
                let (m1, m2) = (self.config.mu1.unwrap_or(auto), self.config.mu2.unwrap_or(auto));
                let coords = s.spline.materialize();
                let p = penalty(&coords, s.spline.layout(), train_limits, m1, m2);
                let extra = s.spline.pull_back(&p.gradient);
                g.d_coeffs.iter_mut().zip(&extra).for_each(|(a, b)| *a += b);
                self.state.mu = Some((m1, m2));
            }
            let st = &mut self.state;
            adam_step(&mut st.spline.coeffs, &g.d_coeffs, &mut st.adam_c, lr_omega, self.config.adam_betas);
            adam_step(&mut st.theta, &g.d_theta, &mut st.adam_theta, lr_theta, self.config.adam_betas);
            MetricRecord {
                step: st.step,
                level: st.phase,
                epoch: st.epoch,
                recon_loss: g.loss_value,
                g_penalty: g.g_penalty,
                s_penalty: g.s_penalty,
                lr_omega,
                lr_theta,
            }
        };
        let st = &mut self.state;
        st.theta.iter_mut().for_each(|t| *t = t.max(0.0));
        st.history.push(record);
        st.step += 1;
        st.batch += 1;
        if st.batch == spe {
            st.batch = 0;
            if st.phase == 0 && !self.dataset.val.is_empty() {
                let theta = self.state.theta.clone();
                let v = self.validation_loss(&theta)?;
                let st = &mut self.state;
                st.val_history.push(v);
                if v < st.best_val {
                    st.best_val = v;
                    st.best_theta = theta;
                }
            }
            let phase_epochs = self.phase_epochs(self.state.phase);
            let st = &mut self.state;
            st.epoch += 1;
            if st.epoch == phase_epochs {
                if st.phase == 0 && !self.dataset.val.is_empty() {
                    st.theta = st.best_theta.clone();
                }
                st.epoch = 0;
                st.phase += 1;
                self.enter_phase()?;
            }
        }
        Ok(())
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        self.init.with_coords(self.state.spline.materialize())
    }

    pub fn report(&self) -> Result<FitReport> {
        let coords = self.state.spline.materialize();
        let p = penalty(&coords, self.state.spline.layout(), self.limits, 0.0, 0.0);
        Ok(FitReport {
            feasible: p.is_feasible(),
            grad_hinge: p.grad_hinge,
            slew_hinge: p.slew_hinge,
            mu1: self.state.mu.map(|m| m.0),
            mu2: self.state.mu.map(|m| m.1),
            steps: self.state.step,
            pretrain_val_loss: self.state.val_history.clone(),
            refit_residuals: self.state.refit_residuals.clone(),
            mean_displacement: mean_displacement(&self.init.coords, &coords, 2),
            repair_steps: self.state.repair_steps,
            history: self.state.history.clone(),
        })
    }

    /// Run to completion, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self) -> Result<()>) -> Result<FitOutput> {
        while !self.state.done {
            self.step()?;
            on_step(self)?;
        }
        Ok(FitOutput { trajectory: self.trajectory()?, theta: self.state.theta.clone(), report: self.report()? })
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let payload = bincode::serialize(&self.state).map_err(|e| Error::Format(format!("checkpoint encoding: {e}")))?;
        let mut out = Vec::with_capacity(48 + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.hash);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Replace the state with a checkpoint written under the same setup.
    pub fn restore(&mut self, bytes: &[u8]) -> Result<()> {
        let state = decode_checkpoint(bytes, &self.hash)?;
        if state.spline.coeffs.len() != state.adam_c.m.len() || state.theta.len() != self.denoiser.num_params() {
            return Err(Error::Format("checkpoint state is inconsistent".into()));
        }
        self.state = state;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), &self.checkpoint_bytes()?)
    }

    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.restore(&std::fs::read(path)?)
    }
}

fn decode_checkpoint(bytes: &[u8], hash: &[u8; 32]) -> Result<TrainState> {
    if bytes.len() < 48 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    if &bytes[8..40] != hash {
        return Err(Error::Config("checkpoint was written with a different configuration".into()));
    }
    let len = u64::from_le_bytes(bytes[40..48].try_into().unwrap()) as usize;
    if bytes.len() - 48 != len {
        return Err(Error::Format(format!("checkpoint payload is {} bytes, header says {len}", bytes.len() - 48)));
    }
    bincode::deserialize(&bytes[48..]).map_err(|e| Error::Format(format!("checkpoint payload: {e}")))
}

fn config_hash(
    config: &TrainConfig,
    unrolled: &UnrolledConfig,
    dataset: &Dataset,
    acq: &Acquisition,
    init: &Trajectory,
    limits: &HardwareLimits,
) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(config, unrolled, limits))?);
    h.update(acq.noise_ratio.to_le_bytes());
    h.update((acq.grid_n as u64).to_le_bytes());
    h.update(acq.nufft.oversample.to_le_bytes());
    h.update((acq.nufft.kernel_width as u64).to_le_bytes());
    for m in &acq.smaps {
        for v in m {
            h.update(v.re.to_le_bytes());
            h.update(v.im.to_le_bytes());
        }
    }
    let mut tb = Vec::new();
    init.write_to(&mut tb)?;
    h.update(&tb);
    for split in [&dataset.train, &dataset.val, &dataset.test] {
        h.update((split.len() as u64).to_le_bytes());
        for &i in split.iter() {
            h.update((i as u64).to_le_bytes());
        }
    }
    for img in &dataset.images {
        for v in img {
            h.update(v.re.to_le_bytes());
            h.update(v.im.to_le_bytes());
        }
    }
    Ok(h.finalize().into())
}

/// Backtracking descent on the unweighted hinge penalty at `target` until
/// the samples satisfy `truth`. Returns the number of accepted steps.
pub fn repair(spline: &mut SplineParam, target: Thresholds, truth: Thresholds, max_iters: usize) -> usize {
    let layout = spline.layout();
    let mut coords = spline.materialize();
    let mut f = penalty(&coords, layout, target, 1.0, 1.0).value;
    let mut eta = target.slew;
    for it in 0..max_iters {
        if penalty(&coords, layout, truth, 0.0, 0.0).is_feasible() {
            return it;
        }
        let p = penalty(&coords, layout, target, 1.0, 1.0);
        let g = spline.pull_back(&p.gradient);
        loop {
            let trial: Vec<f64> = spline.coeffs.iter().zip(&g).map(|(c, d)| c - eta * d).collect();
            let tc = spline.basis.apply(&trial, spline.nd);
            let ft = penalty(&tc, layout, target, 1.0, 1.0).value;
            if ft < f {
                spline.coeffs = trial;
                coords = tc;
                f = ft;
                eta *= 1.5;
                break;
            }
            eta *= 0.5;
            if eta < 1e-12 * target.slew {
                return it;
            }
        }
    }
    max_iters
}

/// Mean Euclidean distance between corresponding samples.
pub fn mean_displacement(a: &[f64], b: &[f64], nd: usize) -> f64 {
    let n = a.len() / nd;
    a.chunks_exact(nd).zip(b.chunks_exact(nd)).map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()).sum::<f64>()
        / n.max(1) as f64
}

/// Algorithm driver: pretrain, then every level, to completion.
pub fn fit(
    dataset: &Dataset,
    init: &Trajectory,
    config: &TrainConfig,
    unrolled: &UnrolledConfig,
    acq: &Acquisition,
    limits: &HardwareLimits,
) -> Result<FitOutput> {
    Trainer::new(config.clone(), unrolled.clone(), dataset, acq, init, limits)?.run(|_| Ok(()))
}

/// Train only the thresholds on a fixed trajectory.
pub fn pretrain_theta(
    dataset: &Dataset,
    traj: &Trajectory,
    config: &TrainConfig,
    unrolled: &UnrolledConfig,
    acq: &Acquisition,
    limits: &HardwareLimits,
) -> Result<Vec<f64>> {
    let cfg = TrainConfig { epochs_per_level: 0, ..config.clone() };
    Ok(fit(dataset, traj, &cfg, unrolled, acq, limits)?.theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMethod {
    /// Unrolled network.
    Unn,
    /// Wavelet-sparse compressed sensing.
    Cs,
    /// Regularized least squares used to start the network.
    Init,
}

impl std::str::FromStr for ReconMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unn" => Ok(Self::Unn),
            "cs" => Ok(Self::Cs),
            "init" => Ok(Self::Init),
            _ => Err(Error::Config(format!("unknown reconstruction method {s:?} (unn, cs, init)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsSettings {
    pub ratio: f64,
    pub iters: usize,
}

impl Default for CsSettings {
    fn default() -> Self {
        Self { ratio: 1e-7, iters: 50 }
    }
}

pub fn reconstruct(method: ReconMethod, model: &SenseModel, y: &[C], unrolled: &UnrolledConfig, cs: CsSettings) -> Result<Vec<C>> {
    match method {
        ReconMethod::Unn => {
            let n = model.plan().grid()[0];
            Ok(unrolled_forward(model, y, unrolled, &WaveletShrink::new(n, n))?.0.image)
        }
        ReconMethod::Cs => Ok(cs_recon(model, y, cs.ratio, cs.iters)?.image),
        ReconMethod::Init => Ok(init_recon(model, y, unrolled.init_lambda, unrolled.init_cg_iters, unrolled.cg_tol)?.x),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    pub ssim: f64,
    pub psnr: f64,
}

/// Reconstruct each listed image from simulated data and score it. Noise is
/// seeded by `(seed, image index)` so different trajectories see the same
/// unit noise.
pub fn evaluate(
    dataset: &Dataset,
    indices: &[usize],
    coords: &[f64],
    acq: &Acquisition,
    method: ReconMethod,
    unrolled: &UnrolledConfig,
    cs: CsSettings,
    seed: u64,
) -> Result<Vec<ImageMetrics>> {
    let model = acq.model(coords)?;
    let n = dataset.grid_n;
    indices
        .par_iter()
        .map(|&i| {
            let x = &dataset.images[i];
            let y = acq.acquire(&model, x, derive_seed(&[seed, HELDOUT_SALT, i as u64]))?.y;
            let xhat = reconstruct(method, &model, &y, unrolled, cs)?;
            Ok(ImageMetrics { index: i, ssim: ssim(&xhat, x, n)?, psnr: psnr(&xhat, x)? })
        })
        .collect()
}

/// Write the metric history as JSON lines.
pub fn write_history(path: impl AsRef<Path>, history: &[MetricRecord]) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(history_jsonl(history).as_bytes())?;
    crate::io::write_atomic(path.as_ref(), &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrisys::{gen_phantoms, synth_coil_maps};
    use crate::trajectory::gen_radial;
    use proptest::prelude::*;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut st, 0.1, [0.5, 0.999]);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.t, 1);
    }

    proptest! {
        #[test]
        fn adam_first_step_closed_form(g in prop::collection::vec(-10.0f64..10.0, 1..8), lr in 1e-4f64..1.0) {
            let mut p = vec![0.0; g.len()];
            let mut st = AdamState::new(g.len());
            adam_step(&mut p, &g, &mut st, lr, [0.5, 0.999]);
            for (pk, gk) in p.iter().zip(&g) {
                let expect = -lr * gk / (gk.abs() + ADAM_EPS);
                prop_assert!((pk - expect).abs() <= 1e-12 * lr.max(expect.abs()));
            }
        }
    }

    #[test]
    fn adam_constant_gradient_moves_at_lr() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        for _ in 0..50 {
            adam_step(&mut p, &[0.3], &mut st, 0.01, [0.5, 0.999]);
        }
        assert!((p[0] + 0.5).abs() < 1e-6, "{}", p[0]);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { decim_schedule: vec![16, 16, 8, 4], ..ok.clone() },
            TrainConfig { decim_schedule: vec![8, 16, 32, 64], ..ok.clone() },
            TrainConfig { n_levels: 3, ..ok.clone() },
            TrainConfig { lr_omega: 0.0, ..ok.clone() },
            TrainConfig { lr_theta: -1.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { adam_betas: [1.0, 0.9], ..ok.clone() },
            TrainConfig { feasibility_margin: 1.0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
        let e = serde_json::from_str::<TrainConfig>(r#"{"n_level": 3}"#);
        assert!(e.is_err());
    }

    #[test]
    fn seeds_are_position_dependent() {
        let a = derive_seed(&[1, 2, 3]);
        assert_ne!(a, derive_seed(&[1, 3, 2]));
        assert_ne!(a, derive_seed(&[1, 2, 3, 0]));
        assert_eq!(a, derive_seed(&[1, 2, 3]));
    }

    struct Setup {
        ds: Dataset,
        acq: Acquisition,
        traj: Trajectory,
        unrolled: UnrolledConfig,
    }

    fn setup() -> Setup {
        let n = 16;
        let ds = gen_phantoms(10, n, 3).unwrap();
        let acq = Acquisition::new(synth_coil_maps(n, 2).unwrap(), n, 0.01);
        let traj = gen_radial(4, 32, true, n, 0.22, 4e-6).unwrap();
        let d = WaveletShrink::new(n, n);
        let unrolled = UnrolledConfig { n_blocks: 2, cg_iters: 4, init_cg_iters: 4, denoiser_theta: d.default_theta(0.05), ..Default::default() };
        Setup { ds, acq, traj, unrolled }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            n_levels: 2,
            epochs_per_level: 1,
            pretrain_epochs: 1,
            batch_size: 3,
            decim_schedule: vec![8, 4],
            lr_omega: 1e-2,
            lr_theta: 1e-2,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let s = setup();
        let cfg = TrainConfig { n_levels: 1, decim_schedule: vec![8], epochs_per_level: 0, pretrain_epochs: 0, ..small_config() };
        let out = fit(&s.ds, &s.traj, &cfg, &s.unrolled, &s.acq, &HardwareLimits::default()).unwrap();
        assert_eq!(out.trajectory, s.traj);
        assert_eq!(out.theta, s.unrolled.denoiser_theta);
        assert!(out.report.history.is_empty());
        assert!(out.report.feasible);
    }

    #[test]
    fn training_schedule_and_report() {
        let s = setup();
        let cfg = small_config();
        let out = fit(&s.ds, &s.traj, &cfg, &s.unrolled, &s.acq, &HardwareLimits::default()).unwrap();
        let h = &out.report.history;
        // 8 training images, batch 3 -> 3 steps per epoch, 3 phases
        assert_eq!(h.len(), 9);
        assert_eq!(h.iter().map(|r| r.level).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        assert!(h[..3].iter().all(|r| r.lr_omega == 0.0));
        assert!((h[3].lr_omega - 1e-2).abs() < 1e-15);
        assert!((h[5].lr_omega - 1e-2 / 3.0).abs() < 1e-15);
        assert!(h.iter().all(|r| r.recon_loss.is_finite() && r.recon_loss > 0.0));
        assert_eq!(out.report.refit_residuals.len(), 2);
        assert!(out.report.refit_residuals.iter().all(|r| r.max_abs < 1e-3));
        assert!(out.report.mean_displacement > 0.0);
        assert!(out.theta.iter().all(|t| *t >= 0.0));
        assert!(out.report.mu1.unwrap() > 0.0);
        for line in out.report.to_jsonl().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
            assert_eq!(keys.len(), 8);
        }
    }

    #[test]
    fn pretraining_does_not_worsen_validation() {
        let s = setup();
        let cfg = TrainConfig { pretrain_epochs: 2, ..small_config() };
        let mut t = Trainer::new(TrainConfig { epochs_per_level: 0, ..cfg }, s.unrolled.clone(), &s.ds, &s.acq, &s.traj, &HardwareLimits::default()).unwrap();
        let out = t.run(|_| Ok(())).unwrap();
        let v = &out.report.pretrain_val_loss;
        assert_eq!(v.len(), 3);
        let chosen = t.validation_loss(&out.theta).unwrap();
        assert!(chosen <= v[0]);
        assert_eq!(out.trajectory, s.traj);
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let s = setup();
        let cfg = small_config();
        let limits = HardwareLimits::default();
        let mut a = Trainer::new(cfg.clone(), s.unrolled.clone(), &s.ds, &s.acq, &s.traj, &limits).unwrap();
        for _ in 0..4 {
            a.step().unwrap();
        }
        let blob = a.checkpoint_bytes().unwrap();
        a.step().unwrap();
        let mut b = Trainer::new(cfg.clone(), s.unrolled.clone(), &s.ds, &s.acq, &s.traj, &limits).unwrap();
        b.restore(&blob).unwrap();
        b.step().unwrap();
        assert_eq!(a.state(), b.state());
        // run both to the end
        let ra = a.run(|_| Ok(())).unwrap();
        let rb = b.run(|_| Ok(())).unwrap();
        assert_eq!(ra.trajectory, rb.trajectory);
        assert_eq!(ra.report, rb.report);
    }

    #[test]
    fn checkpoint_rejects_other_config_and_corruption() {
        let s = setup();
        let limits = HardwareLimits::default();
        let a = Trainer::new(small_config(), s.unrolled.clone(), &s.ds, &s.acq, &s.traj, &limits).unwrap();
        let blob = a.checkpoint_bytes().unwrap();
        let mut b = Trainer::new(TrainConfig { seed: 12, ..small_config() }, s.unrolled.clone(), &s.ds, &s.acq, &s.traj, &limits).unwrap();
        assert!(matches!(b.restore(&blob), Err(Error::Config(_))));
        let mut c = Trainer::new(small_config(), s.unrolled.clone(), &s.ds, &s.acq, &s.traj, &limits).unwrap();
        let mut bad = blob.clone();
        bad[4] = 9;
        assert!(matches!(c.restore(&bad), Err(Error::Format(_))));
        assert!(c.restore(&blob[..blob.len() - 1]).is_err());
        c.restore(&blob).unwrap();
    }

    #[test]
    fn repair_restores_feasibility() {
        let traj = gen_radial(2, 64, true, 32, 0.22, 4e-6).unwrap();
        let (mut sp, _) = crate::trajectory::refit(&traj, 8).unwrap();
        // bend one shot well past the slew limit
        for (k, c) in sp.coeffs.iter_mut().enumerate() {
            if k % 4 == 1 {
                *c += 0.5;
            }
        }
        let truth = HardwareLimits::default().thresholds(0.22, 32);
        let layout = sp.layout();
        assert!(!penalty(&sp.materialize(), layout, truth, 0.0, 0.0).is_feasible());
        let steps = repair(&mut sp, truth.scaled(0.9), truth, 500);
        assert!(steps > 0 && steps < 500);
        assert!(penalty(&sp.materialize(), layout, truth, 0.0, 0.0).is_feasible());
    }

    #[test]
    fn nonparametric_keeps_identity_basis() {
        let s = setup();
        let cfg = TrainConfig { parameterization: Parameterization::Nonparametric, pretrain_epochs: 0, ..small_config() };
        let mut t = Trainer::new(cfg, s.unrolled.clone(), &s.ds, &s.acq, &s.traj, &HardwareLimits::default()).unwrap();
        assert_eq!(t.state().spline.decim(), None);
        assert_eq!(t.state().spline.coeffs.len(), s.traj.coords.len());
        t.step().unwrap();
        assert_ne!(t.state().spline.coeffs, s.traj.coords);
    }

    #[test]
    fn evaluation_is_deterministic_and_scored() {
        let s = setup();
        let idx = s.ds.test.clone();
        let a = evaluate(&s.ds, &idx, &s.traj.coords, &s.acq, ReconMethod::Unn, &s.unrolled, CsSettings::default(), 5).unwrap();
        let b = evaluate(&s.ds, &idx, &s.traj.coords, &s.acq, ReconMethod::Unn, &s.unrolled, CsSettings::default(), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|m| (0.0..=1.0).contains(&m.ssim) && m.psnr.is_finite()));
        assert!("bad".parse::<ReconMethod>().is_err());
        assert_eq!("cs".parse::<ReconMethod>().unwrap(), ReconMethod::Cs);
    }
}
