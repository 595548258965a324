//! Conjugate gradient, quadratic-roughness initialization, the unrolled
//! data-consistency / denoiser alternation, and a wavelet-ℓ1 CS baseline.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, norm_sq};
use crate::mrisys::{support_mask, SenseModel};

type C = Complex64;

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub x: Vec<C>,
    /// `‖b − Hx_k‖ / ‖b‖` after each iteration.
    pub residuals: Vec<f64>,
}

/// Conjugate gradient for Hermitian positive-definite `H`, from `x = 0`.
pub fn cg_solve<F>(apply_h: F, b: &[C], iters: usize, tol: f64) -> Result<CgResult>
where
    F: Fn(&[C]) -> Result<Vec<C>>,
{
    let mut x = vec![C::default(); b.len()];
    let bnorm = norm(b);
    let mut residuals = Vec::with_capacity(iters);
    if bnorm == 0.0 {
        return Ok(CgResult { x, residuals });
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = norm_sq(&r);
    for k in 0..iters {
        let hp = apply_h(&p)?;
        let php = dot(&p, &hp);
        if k == 0 {
            let pp = norm_sq(&p);
            if php.im.abs() > 1e-6 * pp || !(php.re > 0.0) {
                return Err(Error::NotHermitianPd(format!("<Hp,p> = {php} for |p|^2 = {pp}")));
            }
        }
        if !php.re.is_finite() || php.re <= 0.0 {
            return Err(Error::NonFinite("cg curvature".into()));
        }
        let alpha = rr / php.re;
        axpy(C::new(alpha, 0.0), &p, &mut x);
        axpy(C::new(-alpha, 0.0), &hp, &mut r);
        let rr_new = norm_sq(&r);
        let rel = rr_new.sqrt() / bnorm;
        residuals.push(rel);
        if rel < tol {
            break;
        }
        let beta = rr_new / rr;
        p.iter_mut().zip(&r).for_each(|(p, r)| *p = r + beta * *p);
        rr = rr_new;
    }
    Ok(CgResult { x, residuals })
}

/// Largest eigenvalue of a Hermitian PSD map by power iteration.
pub fn power_norm<F>(apply: F, n: usize, iters: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[C]) -> Result<Vec<C>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<C> = (0..n).map(|_| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let mut lam = 0.0;
    for _ in 0..iters {
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let hv = apply(&v)?;
        lam = dot(&v, &hv).re;
        v = hv;
    }
    Ok(lam)
}

/// `R'R x` for first differences along each image axis (no wrap).
pub fn roughness_normal(x: &[C], n0: usize, n1: usize) -> Vec<C> {
    let mut out = vec![C::default(); x.len()];
    for i in 0..n0 {
        for j in 0..n1 {
            let k = i * n1 + j;
            if j + 1 < n1 {
                let d = x[k + 1] - x[k];
                out[k + 1] += d;
                out[k] -= d;
            }
            if i + 1 < n0 {
                let d = x[k + n1] - x[k];
                out[k + n1] += d;
                out[k] -= d;
            }
        }
    }
    out
}

fn model_grid(model: &SenseModel) -> (usize, usize) {
    let g = model.plan().grid();
    if g.len() == 1 {
        (1, g[0])
    } else {
        (g[0], g[1])
    }
}

/// `(A'A + λR'R)x`.
pub fn init_operator(model: &SenseModel, lambda: f64, x: &[C]) -> Result<Vec<C>> {
    let (n0, n1) = model_grid(model);
    let mut h = model.normal(x)?;
    if lambda != 0.0 {
        let r = roughness_normal(x, n0, n1);
        axpy(C::new(lambda, 0.0), &r, &mut h);
    }
    Ok(h)
}

/// `(A'A + μI)x`.
pub fn dc_operator(model: &SenseModel, mu: f64, x: &[C]) -> Result<Vec<C>> {
    let mut h = model.normal(x)?;
    axpy(C::new(mu, 0.0), x, &mut h);
    Ok(h)
}

/// `x₀ = (A'A + λR'R)⁻¹ A'y` (not normalized).
pub fn init_recon(model: &SenseModel, y: &[C], lambda: f64, cg_iters: usize, tol: f64) -> Result<CgResult> {
    let b = model.adjoint(y)?;
    cg_solve(|v| init_operator(model, lambda, v), &b, cg_iters, tol)
}

/// `x = (A'A + μI)⁻¹ (A'y + μz)`.
pub fn dc_update(model: &SenseModel, y: &[C], z: &[C], mu: f64, cg_iters: usize, tol: f64) -> Result<CgResult> {
    let mut b = model.adjoint(y)?;
    axpy(C::new(mu, 0.0), z, &mut b);
    cg_solve(|v| dc_operator(model, mu, v), &b, cg_iters, tol)
}

/// `λ = ratio · ‖A'A‖`, the default roughness weight for a model.
pub fn default_init_lambda(model: &SenseModel, ratio: f64) -> Result<f64> {
    Ok(ratio * power_norm(|v| model.normal(v), model.num_pixels(), 30, 0)?)
}

/// Periodic orthonormal Daubechies wavelet with four vanishing moments.
const DB4_LO: [f64; 8] = [
    -0.010_597_401_785_069_032,
    0.032_883_011_666_885_2,
    0.030_841_381_835_560_764,
    -0.187_034_811_719_093_08,
    -0.027_983_769_416_859_854,
    0.630_880_767_929_858_9,
    0.714_846_570_552_915_6,
    0.230_377_813_308_896_5,
];

fn db4_hi() -> [f64; 8] {
    std::array::from_fn(|k| if k % 2 == 0 { DB4_LO[7 - k] } else { -DB4_LO[7 - k] })
}

fn analyze_1d(x: &[C], lo: &mut [C], hi: &mut [C], g: &[f64; 8]) {
    let n = x.len();
    for m in 0..n / 2 {
        let (mut a, mut d) = (C::default(), C::default());
        for k in 0..8 {
            let v = x[(2 * m + k) % n];
            a += DB4_LO[k] * v;
            d += g[k] * v;
        }
        lo[m] = a;
        hi[m] = d;
    }
}

fn synthesize_1d(lo: &[C], hi: &[C], x: &mut [C], g: &[f64; 8]) {
    let n = x.len();
    x.iter_mut().for_each(|v| *v = C::default());
    for m in 0..n / 2 {
        for k in 0..8 {
            x[(2 * m + k) % n] += DB4_LO[k] * lo[m] + g[k] * hi[m];
        }
    }
}

/// 2-D periodic db4 transform with symmetric padding to a multiple of
/// `2^levels`. Coefficients use the usual in-place pyramid layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wavelet2d {
    pub rows: usize,
    pub cols: usize,
    pub levels: usize,
    prows: usize,
    pcols: usize,
}

impl Wavelet2d {
    pub fn new(rows: usize, cols: usize, levels: usize) -> Self {
        let m = 1usize << levels;
        Self { rows, cols, levels, prows: rows.div_ceil(m) * m, pcols: cols.div_ceil(m) * m }
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        (self.prows, self.pcols)
    }

    pub fn num_coeffs(&self) -> usize {
        self.prows * self.pcols
    }

    /// Number of subbands: three detail bands per level plus the coarse band.
    pub fn num_subbands(&self) -> usize {
        3 * self.levels + 1
    }

    pub fn is_padded(&self) -> bool {
        (self.prows, self.pcols) != (self.rows, self.cols)
    }

    /// Subband id of every coefficient: `3(l−1) + b` for detail band `b` of
    /// level `l` (1 = finest; b = 0 horizontal detail, 1 vertical, 2
    /// diagonal) and `3·levels` for the coarse approximation.
    pub fn subband_map(&self) -> Vec<usize> {
        let (pr, pc) = (self.prows, self.pcols);
        let mut map = vec![3 * self.levels; pr * pc];
        for l in 1..=self.levels {
            let (hr, hc) = (pr >> l, pc >> l);
            for i in 0..2 * hr {
                for j in 0..2 * hc {
                    let band = match (i >= hr, j >= hc) {
                        (false, true) => 0,
                        (true, false) => 1,
                        (true, true) => 2,
                        (false, false) => continue,
                    };
                    map[i * pc + j] = 3 * (l - 1) + band;
                }
            }
        }
        map
    }

    fn sym_index(i: usize, n: usize, pn: usize) -> usize {
        // half-sample symmetric extension around the centered image
        let before = (pn - n) / 2;
        let mut t = i as i64 - before as i64;
        let period = 2 * n as i64;
        t = t.rem_euclid(period);
        if t >= n as i64 {
            t = period - 1 - t;
        }
        t as usize
    }

    pub fn pad(&self, x: &[C]) -> Vec<C> {
        if !self.is_padded() {
            return x.to_vec();
        }
        let mut out = Vec::with_capacity(self.num_coeffs());
        for i in 0..self.prows {
            let si = Self::sym_index(i, self.rows, self.prows);
            for j in 0..self.pcols {
                out.push(x[si * self.cols + Self::sym_index(j, self.cols, self.pcols)]);
            }
        }
        out
    }

    /// Adjoint of [`pad`](Self::pad): fold the extension back.
    pub fn pad_adjoint(&self, p: &[C]) -> Vec<C> {
        if !self.is_padded() {
            return p.to_vec();
        }
        let mut out = vec![C::default(); self.rows * self.cols];
        for i in 0..self.prows {
            let si = Self::sym_index(i, self.rows, self.prows);
            for j in 0..self.pcols {
                out[si * self.cols + Self::sym_index(j, self.cols, self.pcols)] += p[i * self.pcols + j];
            }
        }
        out
    }

    /// Left inverse of [`pad`](Self::pad).
    pub fn crop(&self, p: &[C]) -> Vec<C> {
        if !self.is_padded() {
            return p.to_vec();
        }
        let (b0, b1) = ((self.prows - self.rows) / 2, (self.pcols - self.cols) / 2);
        (0..self.rows)
            .flat_map(|i| (0..self.cols).map(move |j| (i, j)))
            .map(|(i, j)| p[(i + b0) * self.pcols + j + b1])
            .collect()
    }

    /// Adjoint of [`crop`](Self::crop): zero embedding.
    pub fn crop_adjoint(&self, x: &[C]) -> Vec<C> {
        if !self.is_padded() {
            return x.to_vec();
        }
        let (b0, b1) = ((self.prows - self.rows) / 2, (self.pcols - self.cols) / 2);
        let mut out = vec![C::default(); self.num_coeffs()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i + b0) * self.pcols + j + b1] = x[i * self.cols + j];
            }
        }
        out
    }

    /// Orthonormal analysis on an already padded array.
    pub fn dwt(&self, x: &[C]) -> Vec<C> {
        let hi = db4_hi();
        let pc = self.pcols;
        let mut c = x.to_vec();
        let (mut r, mut w) = (self.prows, self.pcols);
        for _ in 0..self.levels {
            let mut line = vec![C::default(); r.max(w)];
            let mut lo = vec![C::default(); r.max(w) / 2];
            let mut hb = vec![C::default(); r.max(w) / 2];
            for i in 0..r {
                line[..w].copy_from_slice(&c[i * pc..i * pc + w]);
                analyze_1d(&line[..w], &mut lo[..w / 2], &mut hb[..w / 2], &hi);
                c[i * pc..i * pc + w / 2].copy_from_slice(&lo[..w / 2]);
                c[i * pc + w / 2..i * pc + w].copy_from_slice(&hb[..w / 2]);
            }
            for j in 0..w {
                for i in 0..r {
                    line[i] = c[i * pc + j];
                }
                analyze_1d(&line[..r], &mut lo[..r / 2], &mut hb[..r / 2], &hi);
                for i in 0..r / 2 {
                    c[i * pc + j] = lo[i];
                    c[(i + r / 2) * pc + j] = hb[i];
                }
            }
            r /= 2;
            w /= 2;
        }
        c
    }

    /// Inverse (= adjoint) of [`dwt`](Self::dwt).
    pub fn idwt(&self, coeffs: &[C]) -> Vec<C> {
        let hi = db4_hi();
        let pc = self.pcols;
        let mut c = coeffs.to_vec();
        for l in (0..self.levels).rev() {
            let (r, w) = (self.prows >> l, self.pcols >> l);
            let mut line = vec![C::default(); r.max(w)];
            let mut lo = vec![C::default(); r.max(w) / 2];
            let mut hb = vec![C::default(); r.max(w) / 2];
            for j in 0..w {
                for i in 0..r / 2 {
                    lo[i] = c[i * pc + j];
                    hb[i] = c[(i + r / 2) * pc + j];
                }
                synthesize_1d(&lo[..r / 2], &hb[..r / 2], &mut line[..r], &hi);
                for i in 0..r {
                    c[i * pc + j] = line[i];
                }
            }
            for i in 0..r {
                lo[..w / 2].copy_from_slice(&c[i * pc..i * pc + w / 2]);
                hb[..w / 2].copy_from_slice(&c[i * pc + w / 2..i * pc + w]);
                synthesize_1d(&lo[..w / 2], &hb[..w / 2], &mut line[..w], &hi);
                c[i * pc..i * pc + w].copy_from_slice(&line[..w]);
            }
        }
        c
    }

    /// `W x = dwt(pad(x))`.
    pub fn forward(&self, x: &[C]) -> Vec<C> {
        self.dwt(&self.pad(x))
    }

    /// `W' c = pad'(idwt(c))`.
    pub fn adjoint(&self, c: &[C]) -> Vec<C> {
        self.pad_adjoint(&self.idwt(c))
    }
}

/// Complex soft-threshold `w · max(1 − θ/|w|, 0)`.
#[inline]
pub fn soft_threshold(w: C, theta: f64) -> C {
    let a = w.norm();
    if a > theta {
        w * (1.0 - theta / a)
    } else {
        C::default()
    }
}

/// Cotangents `(d_w, d_θ)` of the soft-threshold for output cotangent `g`.
#[inline]
pub fn soft_threshold_vjp(w: C, theta: f64, g: C) -> (C, f64) {
    let a = w.norm();
    if a <= theta {
        return (C::default(), 0.0);
    }
    let u = w / a;
    let im = (g.conj() * u).im;
    (g + (theta / a) * im * C::i() * u, -(g.conj() * u).re)
}

/// Differentiable image-to-image map with a real parameter vector.
pub trait Denoiser: Send + Sync {
    type Tape: Send + Sync;

    fn num_params(&self) -> usize;

    fn apply(&self, x: &[C], theta: &[f64]) -> (Vec<C>, Self::Tape);

    /// Returns `(∂/∂x, ∂/∂θ)` for the output cotangent `g`.
    fn vjp(&self, tape: &Self::Tape, theta: &[f64], g: &[C]) -> (Vec<C>, Vec<f64>);
}

/// Per-subband complex soft-thresholding in a 3-level db4 basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletShrink {
    wavelet: Wavelet2d,
    subband: Vec<usize>,
}

impl WaveletShrink {
    pub const LEVELS: usize = 3;

    pub fn new(rows: usize, cols: usize) -> Self {
        let wavelet = Wavelet2d::new(rows, cols, Self::LEVELS);
        let subband = wavelet.subband_map();
        Self { wavelet, subband }
    }

    pub fn wavelet(&self) -> &Wavelet2d {
        &self.wavelet
    }

    /// Default thresholds: none on the coarse band, `t` on every detail band.
    pub fn default_theta(&self, t: f64) -> Vec<f64> {
        let mut th = vec![t; self.num_params()];
        th[3 * Self::LEVELS] = 0.0;
        th
    }
}

impl Denoiser for WaveletShrink {
    type Tape = Vec<C>;

    fn num_params(&self) -> usize {
        self.wavelet.num_subbands()
    }

    fn apply(&self, x: &[C], theta: &[f64]) -> (Vec<C>, Vec<C>) {
        let w = self.wavelet.forward(x);
        let s: Vec<C> = w.iter().zip(&self.subband).map(|(v, &b)| soft_threshold(*v, theta[b])).collect();
        (self.wavelet.crop(&self.wavelet.idwt(&s)), w)
    }

    fn vjp(&self, w: &Vec<C>, theta: &[f64], g: &[C]) -> (Vec<C>, Vec<f64>) {
        let gs = self.wavelet.dwt(&self.wavelet.crop_adjoint(g));
        let mut gtheta = vec![0.0; self.num_params()];
        let gw: Vec<C> = w
            .iter()
            .zip(&gs)
            .zip(&self.subband)
            .map(|((wv, gv), &b)| {
                let (dw, dt) = soft_threshold_vjp(*wv, theta[b], *gv);
                gtheta[b] += dt;
                dw
            })
            .collect();
        (self.wavelet.adjoint(&gw), gtheta)
    }
}

/// `denoise(z, θ)` with the default wavelet shrinkage.
pub fn denoise(z: &[C], rows: usize, cols: usize, theta: &[f64]) -> Vec<C> {
    WaveletShrink::new(rows, cols).apply(z, theta).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `(A'A + λR'R)⁻¹ A'y`.
    Roughness,
    /// `A'y`.
    Adjoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnrolledConfig {
    pub n_blocks: usize,
    pub mu: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub init_lambda: f64,
    pub init_cg_iters: usize,
    pub init_mode: InitMode,
    pub denoiser_theta: Vec<f64>,
}

impl Default for UnrolledConfig {
    fn default() -> Self {
        Self {
            n_blocks: 6,
            mu: 2.0,
            cg_iters: 6,
            cg_tol: 1e-6,
            init_lambda: 1e-3,
            init_cg_iters: 6,
            init_mode: InitMode::Roughness,
            denoiser_theta: Vec::new(),
        }
    }
}

impl UnrolledConfig {
    pub fn validate(&self, num_params: usize) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::InvalidArgument(format!("mu = {} must be positive", self.mu)));
        }
        if !(self.init_lambda >= 0.0) {
            return Err(Error::InvalidArgument("init_lambda must be >= 0".into()));
        }
        if self.denoiser_theta.len() != num_params {
            return Err(Error::InvalidArgument(format!(
                "{} denoiser thresholds for {num_params} subbands",
                self.denoiser_theta.len()
            )));
        }
        if self.denoiser_theta.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::InvalidArgument("thresholds must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    pub image: Vec<C>,
    /// Final relative CG residual of each block's data-consistency solve.
    pub per_block_residuals: Vec<f64>,
    /// CG residual histories: the initialization first, then one per block.
    pub cg_residuals: Vec<Vec<f64>>,
}

/// Intermediate values kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct UnrolledTape<T> {
    pub x0: Vec<C>,
    /// Pixels whose magnitudes define the median, with their weights.
    pub median_at: Vec<(usize, f64)>,
    pub m: f64,
    /// `A'ỹ` with `ỹ = y/m`.
    pub b: Vec<C>,
    /// Data-consistency outputs `x_i`.
    pub xs: Vec<Vec<C>>,
    /// Denoiser outputs `z_i` (`z_0 = x₀/m`).
    pub zs: Vec<Vec<C>>,
    pub denoise: Vec<T>,
}

/// Median of `|x|` over the support and the pixels realizing it.
pub fn median_magnitude(x: &[C]) -> Result<(f64, Vec<(usize, f64)>)> {
    let mask = support_mask(x);
    let mut idx: Vec<usize> = (0..x.len()).filter(|&k| mask[k]).collect();
    if idx.is_empty() {
        return Err(Error::NonFinite("median normalization of an all-zero image".into()));
    }
    idx.sort_by(|&a, &b| x[a].norm().total_cmp(&x[b].norm()).then(a.cmp(&b)));
    let n = idx.len();
    let at = if n % 2 == 1 { vec![(idx[n / 2], 1.0)] } else { vec![(idx[n / 2 - 1], 0.5), (idx[n / 2], 0.5)] };
    let m = at.iter().map(|&(k, w)| w * x[k].norm()).sum::<f64>();
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::NonFinite(format!("median magnitude {m}")));
    }
    Ok((m, at))
}

/// Forward pass of the unrolled reconstruction, recording a tape.
pub fn unrolled_forward<D: Denoiser>(
    model: &SenseModel,
    y: &[C],
    config: &UnrolledConfig,
    denoiser: &D,
) -> Result<(ReconResult, UnrolledTape<D::Tape>)> {
    config.validate(denoiser.num_params())?;
    let mut cg_residuals = Vec::with_capacity(config.n_blocks + 1);
    let x0 = match config.init_mode {
        InitMode::Roughness => {
            let r = init_recon(model, y, config.init_lambda, config.init_cg_iters, config.cg_tol)?;
            cg_residuals.push(r.residuals);
            r.x
        }
        InitMode::Adjoint => {
            cg_residuals.push(Vec::new());
            model.adjoint(y)?
        }
    };
    let (m, median_at) = median_magnitude(&x0)?;
    let z0: Vec<C> = x0.iter().map(|v| v / m).collect();
    let b: Vec<C> = model.adjoint(y)?.iter().map(|v| v / m).collect();
    let mut xs = Vec::with_capacity(config.n_blocks);
    let mut zs = vec![z0];
    let mut tapes = Vec::with_capacity(config.n_blocks);
    let mut per_block_residuals = Vec::with_capacity(config.n_blocks);
    for _ in 0..config.n_blocks {
        let mut rhs = b.clone();
        axpy(C::new(config.mu, 0.0), zs.last().unwrap(), &mut rhs);
        let r = cg_solve(|v| dc_operator(model, config.mu, v), &rhs, config.cg_iters, config.cg_tol)?;
        per_block_residuals.push(r.residuals.last().copied().unwrap_or(0.0));
        cg_residuals.push(r.residuals);
        let (z, t) = denoiser.apply(&r.x, &config.denoiser_theta);
        xs.push(r.x);
        zs.push(z);
        tapes.push(t);
    }
    let image: Vec<C> = zs.last().unwrap().iter().map(|v| v * m).collect();
    if image.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("unrolled reconstruction".into()));
    }
    Ok((
        ReconResult { image, per_block_residuals, cg_residuals },
        UnrolledTape { x0, median_at, m, b, xs, zs, denoise: tapes },
    ))
}

/// Unrolled reconstruction with the wavelet-shrinkage denoiser.
pub fn unrolled_recon(model: &SenseModel, y: &[C], config: &UnrolledConfig) -> Result<ReconResult> {
    let (n0, n1) = model_grid(model);
    Ok(unrolled_forward(model, y, config, &WaveletShrink::new(n0, n1))?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsResult {
    pub image: Vec<C>,
    /// `‖Ax−y‖² + λ‖Wx‖₁` after each iteration.
    pub objective: Vec<f64>,
    pub lambda: f64,
}

/// `‖Ax − y‖² + λ‖Wx‖₁`.
pub fn cs_objective(model: &SenseModel, wavelet: &Wavelet2d, y: &[C], x: &[C], lambda: f64) -> Result<f64> {
    let ax = model.forward(x)?;
    let fid: f64 = ax.iter().zip(y).map(|(a, b)| (a - b).norm_sqr()).sum();
    let l1 = if lambda == 0.0 { 0.0 } else { wavelet.forward(x).iter().map(|v| v.norm()).sum::<f64>() };
    Ok(fid + lambda * l1)
}

/// Wavelet-ℓ1 regularized least squares by primal-dual hybrid gradient,
/// with `λ = ratio·‖A'y‖∞` and steps from a power estimate of `‖[A; W]‖`.
pub fn cs_recon(model: &SenseModel, y: &[C], ratio: f64, iters: usize) -> Result<CsResult> {
    let (n0, n1) = model_grid(model);
    let wavelet = Wavelet2d::new(n0, n1, WaveletShrink::LEVELS);
    let aty = model.adjoint(y)?;
    let lambda = ratio * aty.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let knorm2 = power_norm(
        |v| {
            let mut h = model.normal(v)?;
            let ww = wavelet.adjoint(&wavelet.forward(v));
            axpy(C::new(1.0, 0.0), &ww, &mut h);
            Ok(h)
        },
        model.num_pixels(),
        40,
        1,
    )?;
    let step = 0.99 / (1.02 * knorm2).sqrt();
    let (tau, sigma) = (step, step);
    let nv = model.num_pixels();
    let mut x = vec![C::default(); nv];
    let mut xbar = x.clone();
    let mut p = vec![C::default(); y.len()];
    let mut q = vec![C::default(); wavelet.num_coeffs()];
    let mut objective = Vec::with_capacity(iters);
    for _ in 0..iters {
        let ax = model.forward(&xbar)?;
        for ((pv, a), yv) in p.iter_mut().zip(&ax).zip(y) {
            *pv = (*pv + sigma * a - sigma * yv) / (1.0 + sigma / 2.0);
        }
        if lambda > 0.0 {
            let wx = wavelet.forward(&xbar);
            for (qv, w) in q.iter_mut().zip(&wx) {
                let v = *qv + sigma * w;
                let a = v.norm();
                *qv = if a > lambda { v * (lambda / a) } else { v };
            }
        }
        let mut grad = model.adjoint(&p)?;
        if lambda > 0.0 {
            axpy(C::new(1.0, 0.0), &wavelet.adjoint(&q), &mut grad);
        }
        let prev = x.clone();
        axpy(C::new(-tau, 0.0), &grad, &mut x);
        for ((b, xn), xp) in xbar.iter_mut().zip(&x).zip(&prev) {
            *b = 2.0 * xn - xp;
        }
        objective.push(cs_objective(model, &wavelet, y, &x, lambda)?);
    }
    if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("pdhg iterate".into()));
    }
    Ok(CsResult { image: x, objective, lambda })
}
