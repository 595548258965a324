//! Reverse-mode gradients of the training loss with respect to spline
//! coefficients and denoiser thresholds.
//!
//! Complex cotangents follow `G = ∂L/∂Re z + i ∂L/∂Im z`, so a linear map
//! `z = M w` pulls back as `G_w = M^H G_z`. CG solves are differentiated
//! implicitly: for `x = H⁻¹b`, `G_b = H⁻¹G_x` and `dH` enters as `−⟨G_b, dH x⟩`.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{add, axpy, dot, re_dot};
use crate::mrisys::{complex_noise, SenseModel};
use crate::nufft::{pixel_coordinate_map, NufftOptions, NufftPlan};
use crate::recon::{cg_solve, dc_operator, init_operator, unrolled_forward, Denoiser, InitMode, UnrolledConfig};
use crate::trajectory::{penalty, SplineParam, Thresholds};

type C = Complex64;

/// `[NUFFT(r_d ⊙ x)]_d` for every image axis.
fn ramp_transforms(plan: &NufftPlan, x: &[C]) -> Result<Vec<Vec<C>>> {
    (0..plan.nd())
        .map(|d| {
            let r = pixel_coordinate_map(plan.grid(), d);
            let rx: Vec<C> = x.iter().zip(&r).map(|(v, r)| v * r).collect();
            plan.forward(&rx)
        })
        .collect()
}

fn check_image(plan: &NufftPlan, x: &[C]) -> Result<()> {
    if x.len() != plan.num_pixels() {
        return Err(Error::Shape(format!("image has {} pixels, plan expects {}", x.len(), plan.num_pixels())));
    }
    Ok(())
}

/// Directional derivative of `ω ↦ NUFFT(ω) x` along `v` (`Ns x Nd`).
pub fn jac_forward_omega(plan: &NufftPlan, x: &[C], v: &[f64]) -> Result<Vec<C>> {
    check_image(plan, x)?;
    let nd = plan.nd();
    if v.len() != plan.num_samples() * nd {
        return Err(Error::Shape(format!("perturbation has {} entries, expected {}", v.len(), plan.num_samples() * nd)));
    }
    let f = ramp_transforms(plan, x)?;
    Ok((0..plan.num_samples())
        .map(|j| -C::i() * (0..nd).map(|d| v[j * nd + d] * f[d][j]).sum::<C>())
        .collect())
}

/// `∂ Re⟨u, NUFFT(ω) x⟩ / ∂ω`, row-major `Ns x Nd`.
pub fn jac_adjoint_omega(plan: &NufftPlan, x: &[C], u: &[C]) -> Result<Vec<f64>> {
    check_image(plan, x)?;
    if u.len() != plan.num_samples() {
        return Err(Error::Shape(format!("cotangent has {} entries, expected {}", u.len(), plan.num_samples())));
    }
    let nd = plan.nd();
    let mut out = vec![0.0; plan.num_samples() * nd];
    if u.iter().all(|v| *v == C::default()) {
        return Ok(out);
    }
    let f = ramp_transforms(plan, x)?;
    for j in 0..plan.num_samples() {
        for d in 0..nd {
            out[j * nd + d] = (u[j].conj() * -C::i() * f[d][j]).re;
        }
    }
    Ok(out)
}

/// `∂ Re⟨u, A(ω) w⟩ / ∂ω` for the SENSE operator.
pub fn sense_jac_adjoint(model: &SenseModel, w: &[C], u: &[C]) -> Result<Vec<f64>> {
    let ns = model.num_samples();
    if u.len() != model.data_len() {
        return Err(Error::Shape(format!("cotangent has {} entries, expected {}", u.len(), model.data_len())));
    }
    let parts: Vec<Vec<f64>> = (0..model.num_coils())
        .into_par_iter()
        .map(|c| jac_adjoint_omega(model.plan(), &model.coil_image(c, w), &u[c * ns..(c + 1) * ns]))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; ns * model.plan().nd()];
    for p in parts {
        out.iter_mut().zip(p).for_each(|(o, v)| *o += v * model.scale());
    }
    Ok(out)
}

/// Directional derivative of `ω ↦ A(ω) w` for the SENSE operator.
pub fn sense_jac_forward(model: &SenseModel, w: &[C], v: &[f64]) -> Result<Vec<C>> {
    let parts: Vec<Vec<C>> = (0..model.num_coils())
        .into_par_iter()
        .map(|c| jac_forward_omega(model.plan(), &model.coil_image(c, w), v))
        .collect::<Result<_>>()?;
    let mut out = parts.concat();
    out.iter_mut().for_each(|z| *z *= model.scale());
    Ok(out)
}

/// Cotangent of `b` for `x* = H⁻¹ b`: one more CG solve with the same `H`.
pub fn cg_implicit_vjp<F>(apply_h: F, cotangent: &[C], cg_iters: usize, tol: f64) -> Result<Vec<C>>
where
    F: Fn(&[C]) -> Result<Vec<C>>,
{
    Ok(cg_solve(apply_h, cotangent, cg_iters, tol)?.x)
}

/// `ω`-cotangent through `H = A'A + (ω-independent)` at solution `x` with
/// `b`-cotangent `v`: `−∂ Re⟨v, A'A x⟩/∂ω`.
pub fn normal_omega_vjp(model: &SenseModel, x: &[C], v: &[C]) -> Result<Vec<f64>> {
    let av = model.forward(v)?;
    let ax = model.forward(x)?;
    let a = sense_jac_adjoint(model, x, &av)?;
    let b = sense_jac_adjoint(model, v, &ax)?;
    Ok(a.iter().zip(&b).map(|(p, q)| -(p + q)).collect())
}

/// `‖e‖₁/Nv + ‖e‖₂²/Nv` with `e = x̂ − x`, and its cotangent w.r.t. `x̂`.
pub fn recon_loss(xhat: &[C], x: &[C]) -> (f64, Vec<C>) {
    let nv = x.len() as f64;
    let mut loss = 0.0;
    let g = xhat
        .iter()
        .zip(x)
        .map(|(a, b)| {
            let e = a - b;
            let n = e.norm();
            loss += n + n * n;
            let sign = if n > 0.0 { e / n } else { C::default() };
            (sign + 2.0 * e) / nv
        })
        .collect();
    (loss / nv, g)
}

/// Fixed acquisition setup: coil maps, image grid and relative noise.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub smaps: Vec<Vec<C>>,
    pub grid_n: usize,
    pub nd: usize,
    /// Noise std as a fraction of the mean clean-data magnitude.
    pub noise_ratio: f64,
    pub nufft: NufftOptions,
}

impl Acquisition {
    pub fn new(smaps: Vec<Vec<C>>, grid_n: usize, noise_ratio: f64) -> Self {
        Self { smaps, grid_n, nd: 2, noise_ratio, nufft: NufftOptions::default() }
    }

    /// Noise-free model at `coords`; noise is added by [`Acquisition::acquire`].
    pub fn model(&self, coords: &[f64]) -> Result<SenseModel> {
        SenseModel::from_coords(coords, self.nd, self.grid_n, self.smaps.clone(), 0.0, self.nufft)
    }

    /// `y = Ax + σ(Ax)·n` with `σ = ratio · mean|Ax|` and unit noise `n`.
    pub fn acquire(&self, model: &SenseModel, x: &[C], seed: u64) -> Result<Acquired> {
        let clean = model.forward(x)?;
        let mean_mag = clean.iter().map(|v| v.norm()).sum::<f64>() / clean.len().max(1) as f64;
        let sigma = self.noise_ratio * mean_mag;
        let unit = if sigma > 0.0 { complex_noise(clean.len(), 1.0, seed) } else { Vec::new() };
        let mut y = clean.clone();
        if sigma > 0.0 {
            y.iter_mut().zip(&unit).for_each(|(a, n)| *a += sigma * n);
        }
        Ok(Acquired { y, clean, unit, sigma })
    }
}

#[derive(Debug, Clone)]
pub struct Acquired {
    pub y: Vec<C>,
    pub clean: Vec<C>,
    pub unit: Vec<C>,
    pub sigma: f64,
}

/// Penalty weights and thresholds (rad/pixel).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyWeights {
    pub thresholds: Thresholds,
    pub mu1: f64,
    pub mu2: f64,
}

/// Gradient bundle for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeGradient {
    pub d_coeffs: Vec<f64>,
    pub d_theta: Vec<f64>,
    /// Batch-mean reconstruction loss.
    pub loss_value: f64,
    /// `mu1·φ_g + mu2·φ_s`.
    pub penalty_value: f64,
    pub g_penalty: f64,
    pub s_penalty: f64,
    /// Batch-mean reconstruction gradient w.r.t. the coordinates.
    pub d_omega_recon: Vec<f64>,
}

/// Loss and gradients of one batch item.
#[derive(Debug, Clone)]
pub struct ItemGradient {
    pub loss: f64,
    pub d_omega: Vec<f64>,
    pub d_theta: Vec<f64>,
    pub image: Vec<C>,
}

fn finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient at {name}")))
    }
}

fn finite_c(name: &str, v: &[C]) -> Result<()> {
    if v.iter().all(|x| x.re.is_finite() && x.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient at {name}")))
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Full reverse pass for one ground-truth image.
pub fn item_loss_and_grad<D: Denoiser>(
    model: &SenseModel,
    acq: &Acquisition,
    x_true: &[C],
    seed: u64,
    config: &UnrolledConfig,
    denoiser: &D,
) -> Result<ItemGradient> {
    item_grad(model, acq, x_true, seed, config, denoiser, true)
}

fn item_grad<D: Denoiser>(
    model: &SenseModel,
    acq: &Acquisition,
    x_true: &[C],
    seed: u64,
    config: &UnrolledConfig,
    denoiser: &D,
    want_omega: bool,
) -> Result<ItemGradient> {
    let data = acq.acquire(model, x_true, seed)?;
    let y = &data.y;
    let (res, tape) = unrolled_forward(model, y, config, denoiser)?;
    let (loss, g_out) = recon_loss(&res.image, x_true);
    let theta = &config.denoiser_theta;
    let mu = config.mu;
    let m = tape.m;
    let ns_nd = model.num_samples() * model.plan().nd();
    let mut d_omega = vec![0.0; ns_nd];
    let mut d_theta = vec![0.0; denoiser.num_params()];

    let z_last = tape.zs.last().unwrap();
    let mut g_m = re_dot(&g_out, z_last);
    let mut g_z: Vec<C> = g_out.iter().map(|g| g * m).collect();
    let mut g_b = vec![C::default(); model.num_pixels()];
    for i in (0..config.n_blocks).rev() {
        let (g_x, gt) = denoiser.vjp(&tape.denoise[i], theta, &g_z);
        finite_c("denoiser", &g_x)?;
        add_into(&mut d_theta, &gt);
        let v = cg_implicit_vjp(|p| dc_operator(model, mu, p), &g_x, config.cg_iters, config.cg_tol)?;
        finite_c("data-consistency solve", &v)?;
        if want_omega {
            add_into(&mut d_omega, &normal_omega_vjp(model, &tape.xs[i], &v)?);
        }
        axpy(C::new(1.0, 0.0), &v, &mut g_b);
        g_z = v.iter().map(|p| p * mu).collect();
    }
    if !want_omega {
        finite("denoiser thresholds", &d_theta)?;
        return Ok(ItemGradient { loss, d_omega: Vec::new(), d_theta, image: res.image });
    }
    // z0 = x0/m, b = A'y/m
    let x0 = &tape.x0;
    let mut g_x0: Vec<C> = g_z.iter().map(|g| g / m).collect();
    g_m -= re_dot(&g_z, x0) / (m * m);
    g_m -= re_dot(&g_b, &tape.b) / m;
    let g_aty: Vec<C> = g_b.iter().map(|g| g / m).collect();
    for &(k, w) in &tape.median_at {
        let a = x0[k].norm();
        g_x0[k] += g_m * w * x0[k] / a;
    }
    // image-domain cotangent of A'y, summed over both uses
    let w_y = match config.init_mode {
        InitMode::Roughness => {
            let v0 = cg_implicit_vjp(|p| init_operator(model, config.init_lambda, p), &g_x0, config.init_cg_iters, config.cg_tol)?;
            finite_c("initialization solve", &v0)?;
            add_into(&mut d_omega, &normal_omega_vjp(model, x0, &v0)?);
            add(&g_aty, &v0)
        }
        InitMode::Adjoint => add(&g_aty, &g_x0),
    };
    // A'y: data cotangent A w_y, plus the ω-dependence of A'
    let g_y = model.forward(&w_y)?;
    add_into(&mut d_omega, &sense_jac_adjoint(model, &w_y, y)?);
    // y = Ax + σ(Ax)·n
    let mut g_clean = g_y.clone();
    if data.sigma > 0.0 {
        let g_sigma = re_dot(&g_y, &data.unit);
        let k = g_sigma * acq.noise_ratio / data.clean.len() as f64;
        for (g, c) in g_clean.iter_mut().zip(&data.clean) {
            let a = c.norm();
            if a > 0.0 {
                *g += k * c / a;
            }
        }
    }
    add_into(&mut d_omega, &sense_jac_adjoint(model, x_true, &g_clean)?);
    finite("trajectory", &d_omega)?;
    finite("denoiser thresholds", &d_theta)?;
    Ok(ItemGradient { loss, d_omega, d_theta, image: res.image })
}

/// Batch-mean loss plus penalty, with gradients pulled back to `c` via `Bᵀ`.
///
/// Items are evaluated concurrently and reduced in batch order.
pub fn loss_and_grad<D: Denoiser>(
    batch: &[&[C]],
    seeds: &[u64],
    spline: &SplineParam,
    acq: &Acquisition,
    config: &UnrolledConfig,
    denoiser: &D,
    penalties: &PenaltyWeights,
) -> Result<TapeGradient> {
    if batch.is_empty() || batch.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!("{} images with {} seeds", batch.len(), seeds.len())));
    }
    let coords = spline.materialize();
    let model = acq.model(&coords)?;
    let items: Vec<ItemGradient> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(x, &s)| item_loss_and_grad(&model, acq, x, s, config, denoiser))
        .collect::<Result<_>>()?;
    let nb = items.len() as f64;
    let mut d_omega = vec![0.0; coords.len()];
    let mut d_theta = vec![0.0; denoiser.num_params()];
    let mut loss = 0.0;
    for it in &items {
        loss += it.loss / nb;
        d_omega.iter_mut().zip(&it.d_omega).for_each(|(a, b)| *a += b / nb);
        d_theta.iter_mut().zip(&it.d_theta).for_each(|(a, b)| *a += b / nb);
    }
    let pen = penalty(&coords, spline.layout(), penalties.thresholds, penalties.mu1, penalties.mu2);
    let total: Vec<f64> = d_omega.iter().zip(&pen.gradient).map(|(a, b)| a + b).collect();
    let d_coeffs = spline.pull_back(&total);
    finite("spline coefficients", &d_coeffs)?;
    Ok(TapeGradient {
        d_coeffs,
        d_theta,
        loss_value: loss,
        penalty_value: pen.value,
        g_penalty: pen.grad_hinge,
        s_penalty: pen.slew_hinge,
        d_omega_recon: d_omega,
    })
}

/// Batch-mean loss and threshold gradient with the trajectory held fixed.
pub fn theta_loss_and_grad<D: Denoiser>(
    batch: &[&[C]],
    seeds: &[u64],
    model: &SenseModel,
    acq: &Acquisition,
    config: &UnrolledConfig,
    denoiser: &D,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() || batch.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!("{} images with {} seeds", batch.len(), seeds.len())));
    }
    let items: Vec<ItemGradient> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(x, &s)| item_grad(model, acq, x, s, config, denoiser, false))
        .collect::<Result<_>>()?;
    let nb = items.len() as f64;
    let mut d_theta = vec![0.0; denoiser.num_params()];
    let mut loss = 0.0;
    for it in &items {
        loss += it.loss / nb;
        d_theta.iter_mut().zip(&it.d_theta).for_each(|(a, b)| *a += b / nb);
    }
    Ok((loss, d_theta))
}

/// `Re⟨u, J v⟩`, the pairing used to check the adjoint Jacobian.
pub fn jac_pairing(plan: &NufftPlan, x: &[C], u: &[C], v: &[f64]) -> Result<f64> {
    Ok(dot(u, &jac_forward_omega(plan, x, v)?).re)
}
