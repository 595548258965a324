//! Non-uniform discrete Fourier transform.
//!
//! Type-2 (forward) and type-1 (adjoint) NUFFT with Kaiser-Bessel gridding on
//! an oversampled Cartesian grid, a Toeplitz-embedded normal operator, and an
//! exact summation oracle used for verification.
//!
//! Conventions: coordinates are radians/pixel, stored wrapped to `[-π, π)`.
//! Images are row-major with pixel offsets `r_d = i_d - N_d/2`, so DC sits at
//! index `N/2` along every axis. The forward model is
//! `y[j] = Σ_k x[k] exp(-i ω_j·r_k)`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::FftNd;

/// Default oversampling factor of the interpolation grid.
pub const DEFAULT_OVERSAMPLE: f64 = 2.0;
/// Default number of Kaiser-Bessel taps per dimension.
pub const DEFAULT_WIDTH: usize = 6;

/// Largest image (in pixels) the exact oracle evaluates without an override.
pub const ORACLE_MAX_PIXELS: usize = 64 * 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NufftOptions {
    pub oversample: f64,
    pub kernel_width: usize,
}

impl Default for NufftOptions {
    fn default() -> Self {
        Self { oversample: DEFAULT_OVERSAMPLE, kernel_width: DEFAULT_WIDTH }
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > 1e-18 * sum {
        term *= q / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

/// Shape parameter for a Kaiser-Bessel kernel of `width` taps on a grid
/// oversampled by `oversample` (Beatty et al. 2005).
pub fn kaiser_bessel_beta(width: usize, oversample: f64) -> f64 {
    let j = width as f64;
    let a = oversample;
    PI * ((j / a).powi(2) * (a - 0.5).powi(2) - 0.8).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct KaiserBessel {
    width: f64,
    beta: f64,
}

impl KaiserBessel {
    pub(crate) fn eval(&self, t: f64) -> f64 {
        let u = 2.0 * t / self.width;
        if u.abs() > 1.0 {
            0.0
        } else {
            bessel_i0(self.beta * (1.0 - u * u).sqrt())
        }
    }

    /// Continuous Fourier transform `∫ψ(t) exp(2πi f t) dt` (real, even).
    pub(crate) fn ft(&self, f: f64) -> f64 {
        let z2 = self.beta * self.beta - (PI * self.width * f).powi(2);
        if z2 > 1e-12 {
            let z = z2.sqrt();
            self.width * z.sinh() / z
        } else if z2 < -1e-12 {
            let z = (-z2).sqrt();
            self.width * z.sin() / z
        } else {
            self.width
        }
    }
}

/// Wrap an angle to `[-π, π)`.
#[inline]
pub fn wrap(w: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let r = (w + PI).rem_euclid(two_pi) - PI;
    if r >= PI {
        r - two_pi
    } else {
        r
    }
}

/// Integer pixel offset of each index along an axis of length `n`.
#[inline]
pub fn offset(i: usize, n: usize) -> f64 {
    i as f64 - (n / 2) as f64
}

/// Pixel-coordinate map `r_d` over a row-major image.
pub fn pixel_coordinate_map(grid: &[usize], dim: usize) -> Vec<f64> {
    let nv: usize = grid.iter().product();
    let mut out = Vec::with_capacity(nv);
    match grid.len() {
        1 => out.extend((0..grid[0]).map(|i| offset(i, grid[0]))),
        _ => {
            for i0 in 0..grid[0] {
                for i1 in 0..grid[1] {
                    out.push(if dim == 0 { offset(i0, grid[0]) } else { offset(i1, grid[1]) });
                }
            }
        }
    }
    out
}

fn oversampled_len(n: usize, oversample: f64) -> usize {
    let k = (oversample * n as f64).ceil() as usize;
    k + (k % 2)
}

/// Precomputed NUFFT plan. Immutable once built and shareable across threads.
#[derive(Debug, Clone)]
pub struct NufftPlan {
    nd: usize,
    grid: Vec<usize>,
    os_grid: Vec<usize>,
    opts: NufftOptions,
    kernel: KaiserBessel,
    coords: Vec<f64>,
    // per sample, per dim, `width` taps
    taps_idx: Vec<u32>,
    taps_w: Vec<f64>,
    // per dim deapodization for each image index
    scale: Vec<Vec<f64>>,
    fft: FftNd,
}

impl NufftPlan {
    /// Build a plan for `coords` (row-major `Ns x Nd`, radians/pixel).
    pub fn new(coords: &[f64], nd: usize, grid: &[usize], opts: NufftOptions) -> Result<Self> {
        if nd != 1 && nd != 2 {
            return Err(Error::InvalidArgument(format!("Nd must be 1 or 2, got {nd}")));
        }
        if grid.len() != nd {
            return Err(Error::Shape(format!("grid has {} dims, coords have {nd}", grid.len())));
        }
        if coords.is_empty() || coords.len() % nd != 0 {
            return Err(Error::Shape(format!("coords length {} not a positive multiple of {nd}", coords.len())));
        }
        if let Some(&n) = grid.iter().find(|&&n| n < 4) {
            return Err(Error::InvalidArgument(format!("grid size {n} < 4")));
        }
        if !(opts.oversample >= 1.0) || opts.kernel_width == 0 {
            return Err(Error::InvalidArgument("oversample must be >= 1 and width >= 1".into()));
        }
        if let Some(pos) = coords.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFiniteCoord { sample: pos / nd, dim: pos % nd });
        }
        let os_grid: Vec<usize> = grid.iter().map(|&n| oversampled_len(n, opts.oversample)).collect();
        if let Some(&k) = os_grid.iter().find(|&&k| opts.kernel_width > k) {
            return Err(Error::InvalidArgument(format!(
                "kernel width {} exceeds oversampled grid {k}",
                opts.kernel_width
            )));
        }
        let kernel = KaiserBessel {
            width: opts.kernel_width as f64,
            beta: kaiser_bessel_beta(opts.kernel_width, opts.oversample),
        };
        let coords: Vec<f64> = coords.iter().map(|&w| wrap(w)).collect();
        let ns = coords.len() / nd;
        let j = opts.kernel_width;
        let mut taps_idx = Vec::with_capacity(ns * nd * j);
        let mut taps_w = Vec::with_capacity(ns * nd * j);
        for s in 0..ns {
            for d in 0..nd {
                let k = os_grid[d] as i64;
                let u = coords[s * nd + d] * k as f64 / (2.0 * PI);
                let m0 = (u - j as f64 / 2.0).floor() as i64 + 1;
                for t in 0..j as i64 {
                    let m = m0 + t;
                    taps_idx.push(m.rem_euclid(k) as u32);
                    taps_w.push(kernel.eval(u - m as f64));
                }
            }
        }
        let scale = (0..nd)
            .map(|d| {
                (0..grid[d])
                    .map(|i| 1.0 / kernel.ft(offset(i, grid[d]) / os_grid[d] as f64))
                    .collect()
            })
            .collect();
        let fft = FftNd::new(&os_grid);
        Ok(Self {
            nd,
            grid: grid.to_vec(),
            os_grid,
            opts,
            kernel,
            coords,
            taps_idx,
            taps_w,
            scale,
            fft,
        })
    }

    pub fn nd(&self) -> usize {
        self.nd
    }

    pub fn num_samples(&self) -> usize {
        self.coords.len() / self.nd
    }

    pub fn num_pixels(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn grid(&self) -> &[usize] {
        &self.grid
    }

    pub fn oversampled_grid(&self) -> &[usize] {
        &self.os_grid
    }

    pub fn options(&self) -> NufftOptions {
        self.opts
    }

    pub fn kernel_beta(&self) -> f64 {
        self.kernel.beta
    }

    /// Wrapped coordinates, row-major `Ns x Nd`.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Interpolation weights of sample `s` along dim `d`.
    pub fn tap_weights(&self, s: usize, d: usize) -> &[f64] {
        let j = self.opts.kernel_width;
        let off = (s * self.nd + d) * j;
        &self.taps_w[off..off + j]
    }

    /// `∫ψ` per dimension; per-sample tap weights sum to its `Nd`-th power.
    pub fn kernel_integral(&self) -> f64 {
        self.kernel.ft(0.0).powi(self.nd as i32)
    }

    /// Sum of the (tensor-product) interpolation weights of sample `s`.
    pub fn weight_sum(&self, s: usize) -> f64 {
        (0..self.nd).map(|d| self.tap_weights(s, d).iter().sum::<f64>()).product()
    }

    fn place_scaled(&self, image: &[Complex64], buf: &mut [Complex64]) {
        match self.nd {
            1 => {
                let (n, k) = (self.grid[0], self.os_grid[0] as i64);
                for i in 0..n {
                    let r = offset(i, n) as i64;
                    buf[r.rem_euclid(k) as usize] = image[i] * self.scale[0][i];
                }
            }
            _ => {
                let (n0, n1) = (self.grid[0], self.grid[1]);
                let (k0, k1) = (self.os_grid[0] as i64, self.os_grid[1] as i64);
                for i0 in 0..n0 {
                    let g0 = (offset(i0, n0) as i64).rem_euclid(k0) as usize;
                    let s0 = self.scale[0][i0];
                    for i1 in 0..n1 {
                        let g1 = (offset(i1, n1) as i64).rem_euclid(k1) as usize;
                        buf[g0 * k1 as usize + g1] = image[i0 * n1 + i1] * (s0 * self.scale[1][i1]);
                    }
                }
            }
        }
    }

    fn extract_scaled(&self, buf: &[Complex64], image: &mut [Complex64]) {
        match self.nd {
            1 => {
                let (n, k) = (self.grid[0], self.os_grid[0] as i64);
                for i in 0..n {
                    let r = offset(i, n) as i64;
                    image[i] = buf[r.rem_euclid(k) as usize] * self.scale[0][i];
                }
            }
            _ => {
                let (n0, n1) = (self.grid[0], self.grid[1]);
                let (k0, k1) = (self.os_grid[0] as i64, self.os_grid[1] as i64);
                for i0 in 0..n0 {
                    let g0 = (offset(i0, n0) as i64).rem_euclid(k0) as usize;
                    let s0 = self.scale[0][i0];
                    for i1 in 0..n1 {
                        let g1 = (offset(i1, n1) as i64).rem_euclid(k1) as usize;
                        image[i0 * n1 + i1] = buf[g0 * k1 as usize + g1] * (s0 * self.scale[1][i1]);
                    }
                }
            }
        }
    }

    /// `y[j] ≈ Σ_k image[k] exp(-i ω_j·r_k)`.
    pub fn forward(&self, image: &[Complex64]) -> Result<Vec<Complex64>> {
        if image.len() != self.num_pixels() {
            return Err(Error::Shape(format!(
                "image has {} pixels, plan expects {}",
                image.len(),
                self.num_pixels()
            )));
        }
        let mut buf = vec![Complex64::default(); self.fft.len()];
        self.place_scaled(image, &mut buf);
        self.fft.forward(&mut buf);
        let ns = self.num_samples();
        let j = self.opts.kernel_width;
        let mut out = vec![Complex64::default(); ns];
        match self.nd {
            1 => {
                for (s, y) in out.iter_mut().enumerate() {
                    let idx = &self.taps_idx[s * j..(s + 1) * j];
                    let w = &self.taps_w[s * j..(s + 1) * j];
                    *y = idx.iter().zip(w).map(|(&i, &w)| buf[i as usize] * w).sum();
                }
            }
            _ => {
                let k1 = self.os_grid[1];
                for (s, y) in out.iter_mut().enumerate() {
                    let base = s * 2 * j;
                    let (i0, i1) = (&self.taps_idx[base..base + j], &self.taps_idx[base + j..base + 2 * j]);
                    let (w0, w1) = (&self.taps_w[base..base + j], &self.taps_w[base + j..base + 2 * j]);
                    let mut acc = Complex64::default();
                    for a in 0..j {
                        let row = i0[a] as usize * k1;
                        let mut inner = Complex64::default();
                        for b in 0..j {
                            inner += buf[row + i1[b] as usize] * w1[b];
                        }
                        acc += inner * w0[a];
                    }
                    *y = acc;
                }
            }
        }
        Ok(out)
    }

    /// Exact adjoint of [`forward`](Self::forward):
    /// `x[k] ≈ Σ_j data[j] exp(+i ω_j·r_k)`.
    pub fn adjoint(&self, data: &[Complex64]) -> Result<Vec<Complex64>> {
        let ns = self.num_samples();
        if data.len() != ns {
            return Err(Error::Shape(format!("data has {} samples, plan expects {ns}", data.len())));
        }
        let mut buf = vec![Complex64::default(); self.fft.len()];
        let j = self.opts.kernel_width;
        match self.nd {
            1 => {
                for (s, &v) in data.iter().enumerate() {
                    let idx = &self.taps_idx[s * j..(s + 1) * j];
                    let w = &self.taps_w[s * j..(s + 1) * j];
                    for (&i, &w) in idx.iter().zip(w) {
                        buf[i as usize] += v * w;
                    }
                }
            }
            _ => {
                let k1 = self.os_grid[1];
                for (s, &v) in data.iter().enumerate() {
                    let base = s * 2 * j;
                    let (i0, i1) = (&self.taps_idx[base..base + j], &self.taps_idx[base + j..base + 2 * j]);
                    let (w0, w1) = (&self.taps_w[base..base + j], &self.taps_w[base + j..base + 2 * j]);
                    for a in 0..j {
                        let row = i0[a] as usize * k1;
                        let va = v * w0[a];
                        for b in 0..j {
                            buf[row + i1[b] as usize] += va * w1[b];
                        }
                    }
                }
            }
        }
        self.fft.inverse(&mut buf);
        let mut out = vec![Complex64::default(); self.num_pixels()];
        self.extract_scaled(&buf, &mut out);
        Ok(out)
    }

    /// Toeplitz kernel realizing `adjoint ∘ forward` on the doubled grid.
    pub fn toeplitz_kernel(&self) -> Result<ToeplitzKernel> {
        ToeplitzKernel::new(self)
    }
}

/// Spectrum of the `2N`-periodic embedding of the Gram kernel
/// `h(Δ) = Σ_j exp(i ω_j·Δ)`.
#[derive(Debug, Clone)]
pub struct ToeplitzKernel {
    grid: Vec<usize>,
    big: Vec<usize>,
    spatial: Vec<Complex64>,
    spectrum: Vec<Complex64>,
    fft: FftNd,
}

impl ToeplitzKernel {
    pub fn new(plan: &NufftPlan) -> Result<Self> {
        let weights = vec![Complex64::new(1.0, 0.0); plan.num_samples()];
        Self::weighted(plan, &weights)
    }

    /// Kernel of `A' diag(weights) A`.
    pub fn weighted(plan: &NufftPlan, weights: &[Complex64]) -> Result<Self> {
        let grid = plan.grid().to_vec();
        let big: Vec<usize> = grid.iter().map(|&n| 2 * n).collect();
        let big_plan = NufftPlan::new(plan.coords(), plan.nd(), &big, plan.options())?;
        // h at offsets r = i - N for i in 0..2N
        let h = big_plan.adjoint(weights)?;
        let len: usize = big.iter().product();
        let mut spatial = vec![Complex64::default(); len];
        match grid.len() {
            1 => {
                let n = grid[0];
                for i in 1..2 * n {
                    let r = i as i64 - n as i64;
                    spatial[r.rem_euclid(2 * n as i64) as usize] = h[i];
                }
            }
            _ => {
                let (n0, n1) = (grid[0], grid[1]);
                let (b0, b1) = (2 * n0, 2 * n1);
                // offsets equal to -N are never used by the N-pixel convolution;
                // dropping them keeps the kernel exactly Hermitian
                for i0 in 1..b0 {
                    let r0 = (i0 as i64 - n0 as i64).rem_euclid(b0 as i64) as usize;
                    for i1 in 1..b1 {
                        let r1 = (i1 as i64 - n1 as i64).rem_euclid(b1 as i64) as usize;
                        spatial[r0 * b1 + r1] = h[i0 * b1 + i1];
                    }
                }
            }
        }
        let fft = FftNd::new(&big);
        let mut spectrum = spatial.clone();
        fft.forward(&mut spectrum);
        let norm = 1.0 / len as f64;
        spectrum.iter_mut().for_each(|v| *v *= norm);
        Ok(Self { grid, big, spatial, spectrum, fft })
    }

    /// Circular Gram kernel on the doubled grid (index `Δ mod 2N`).
    pub fn spatial(&self) -> &[Complex64] {
        &self.spatial
    }

    /// Spectrum, pre-divided by the doubled-grid size.
    pub fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    pub fn doubled_grid(&self) -> &[usize] {
        &self.big
    }

    /// `A'A x` via two FFTs on the doubled grid.
    pub fn apply(&self, image: &[Complex64]) -> Result<Vec<Complex64>> {
        let nv: usize = self.grid.iter().product();
        if image.len() != nv {
            return Err(Error::Shape(format!("image has {} pixels, kernel expects {nv}", image.len())));
        }
        let mut buf = vec![Complex64::default(); self.spectrum.len()];
        let (n0, n1, b1) = match self.grid.len() {
            1 => (1, self.grid[0], self.big[0]),
            _ => (self.grid[0], self.grid[1], self.big[1]),
        };
        for i0 in 0..n0 {
            buf[i0 * b1..i0 * b1 + n1].copy_from_slice(&image[i0 * n1..(i0 + 1) * n1]);
        }
        self.fft.forward(&mut buf);
        buf.iter_mut().zip(&self.spectrum).for_each(|(b, s)| *b *= s);
        self.fft.inverse(&mut buf);
        let mut out = vec![Complex64::default(); nv];
        for i0 in 0..n0 {
            out[i0 * n1..(i0 + 1) * n1].copy_from_slice(&buf[i0 * b1..i0 * b1 + n1]);
        }
        Ok(out)
    }
}

/// `normal_apply(kernel, image)`: shorthand for [`ToeplitzKernel::apply`].
pub fn normal_apply(kernel: &ToeplitzKernel, image: &[Complex64]) -> Result<Vec<Complex64>> {
    kernel.apply(image)
}

fn oracle_guard(grid: &[usize], allow_large: bool) -> Result<usize> {
    let nv: usize = grid.iter().product();
    if nv > ORACLE_MAX_PIXELS && !allow_large {
        return Err(Error::SizeGuard(format!(
            "{nv} pixels exceeds {ORACLE_MAX_PIXELS}; pass allow_large to override"
        )));
    }
    Ok(nv)
}

fn phase_rows(coords: &[f64], nd: usize, grid: &[usize], s: usize, sign: f64) -> Vec<Vec<Complex64>> {
    (0..nd)
        .map(|d| {
            let w = coords[s * nd + d];
            (0..grid[d])
                .map(|i| Complex64::from_polar(1.0, sign * w * offset(i, grid[d])))
                .collect()
        })
        .collect()
}

/// Exact `O(Ns·Nv)` evaluation of `y[j] = Σ_k image[k] exp(-i ω_j·r_k)`.
pub fn dft_oracle(
    coords: &[f64],
    nd: usize,
    grid: &[usize],
    image: &[Complex64],
    allow_large: bool,
) -> Result<Vec<Complex64>> {
    let nv = oracle_guard(grid, allow_large)?;
    if grid.len() != nd || image.len() != nv || coords.len() % nd != 0 {
        return Err(Error::Shape("dft_oracle: inconsistent shapes".into()));
    }
    let ns = coords.len() / nd;
    Ok((0..ns)
        .map(|s| {
            let e = phase_rows(coords, nd, grid, s, -1.0);
            match nd {
                1 => e[0].iter().zip(image).map(|(a, b)| a * b).sum(),
                _ => {
                    let n1 = grid[1];
                    (0..grid[0])
                        .map(|i0| {
                            let row: Complex64 =
                                e[1].iter().zip(&image[i0 * n1..(i0 + 1) * n1]).map(|(a, b)| a * b).sum();
                            row * e[0][i0]
                        })
                        .sum()
                }
            }
        })
        .collect())
}

/// Exact adjoint sum `x[k] = Σ_j data[j] exp(+i ω_j·r_k)`.
pub fn dft_adjoint_oracle(
    coords: &[f64],
    nd: usize,
    grid: &[usize],
    data: &[Complex64],
    allow_large: bool,
) -> Result<Vec<Complex64>> {
    let nv = oracle_guard(grid, allow_large)?;
    if grid.len() != nd || coords.len() != data.len() * nd {
        return Err(Error::Shape("dft_adjoint_oracle: inconsistent shapes".into()));
    }
    let mut out = vec![Complex64::default(); nv];
    for (s, &v) in data.iter().enumerate() {
        let e = phase_rows(coords, nd, grid, s, 1.0);
        match nd {
            1 => out.iter_mut().zip(&e[0]).for_each(|(o, p)| *o += v * p),
            _ => {
                let n1 = grid[1];
                for i0 in 0..grid[0] {
                    let a = v * e[0][i0];
                    for (o, p) in out[i0 * n1..(i0 + 1) * n1].iter_mut().zip(&e[1]) {
                        *o += a * p;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{inner, rand_coords, rand_image, rel_err};

    #[test]
    fn zero_coords_identical_weights() {
        let coords = vec![0.0; 10];
        let plan = NufftPlan::new(&coords, 2, &[8, 8], NufftOptions::default()).unwrap();
        for s in 1..5 {
            assert_eq!(plan.tap_weights(s, 0), plan.tap_weights(0, 0));
            assert_eq!(plan.tap_weights(s, 1), plan.tap_weights(0, 1));
        }
    }

    #[test]
    fn weights_sum_to_kernel_integral() {
        // 16 radial samples: one spoke through DC
        let coords: Vec<f64> = (0..16)
            .flat_map(|k| {
                let r = -PI + 2.0 * PI * k as f64 / 16.0;
                [r * 0.3f64.cos(), r * 0.3f64.sin()]
            })
            .collect();
        let plan = NufftPlan::new(&coords, 2, &[16, 16], NufftOptions::default()).unwrap();
        let target = plan.kernel_integral();
        for s in 0..16 {
            let err = (plan.weight_sum(s) - target).abs() / target;
            assert!(err < 1e-5, "sample {s}: rel err {err}");
        }
    }

    #[test]
    fn nan_coordinate_rejected() {
        let coords = vec![0.1, 0.2, f64::NAN, 0.0];
        match NufftPlan::new(&coords, 2, &[8, 8], NufftOptions::default()) {
            Err(Error::NonFiniteCoord { sample: 1, dim: 0 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let opts = NufftOptions { oversample: 1.0, kernel_width: 12 };
        assert!(NufftPlan::new(&[0.0, 0.0], 2, &[8, 8], opts).is_err());
    }

    #[test]
    fn wrap_range() {
        for w in [-7.0, -PI, -3.0, 0.0, 3.1, PI, 6.5, 100.0] {
            let r = wrap(w);
            assert!((-PI..PI).contains(&r), "{w} -> {r}");
            assert!(((w - r) / (2.0 * PI) - ((w - r) / (2.0 * PI)).round()).abs() < 1e-12);
        }
    }

    #[test]
    fn centered_delta_gives_ones() {
        let grid = [12, 12];
        let mut x = vec![Complex64::default(); 144];
        x[6 * 12 + 6] = Complex64::new(1.0, 0.0);
        let coords = rand_coords(40, 2, 3);
        let plan = NufftPlan::new(&coords, 2, &grid, NufftOptions::default()).unwrap();
        for v in plan.forward(&x).unwrap() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-5);
        }
        for v in dft_oracle(&coords, 2, &grid, &x, false).unwrap() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn dc_sample_of_constant_image() {
        let x = vec![Complex64::new(0.5, -0.25); 100];
        let plan = NufftPlan::new(&[0.0, 0.0, 0.0, 0.0], 2, &[10, 10], NufftOptions::default()).unwrap();
        for v in plan.forward(&x).unwrap() {
            assert!((v - Complex64::new(50.0, -25.0)).norm() / 55.9 < 1e-5);
        }
    }

    #[test]
    fn forward_matches_oracle() {
        let grid = [12, 12];
        let x = rand_image(144, 1);
        let coords = rand_coords(50, 2, 2);
        let plan = NufftPlan::new(&coords, 2, &grid, NufftOptions::default()).unwrap();
        let y = plan.forward(&x).unwrap();
        let y0 = dft_oracle(&coords, 2, &grid, &x, false).unwrap();
        assert!(rel_err(&y, &y0) < 1e-5, "{}", rel_err(&y, &y0));
    }

    #[test]
    fn one_dimensional_forward_and_adjoint() {
        let grid = [20];
        let x = rand_image(20, 4);
        let coords = rand_coords(30, 1, 5);
        let plan = NufftPlan::new(&coords, 1, &grid, NufftOptions::default()).unwrap();
        let y = plan.forward(&x).unwrap();
        assert!(rel_err(&y, &dft_oracle(&coords, 1, &grid, &x, false).unwrap()) < 1e-5);
        let d = rand_image(30, 6);
        let a = plan.adjoint(&d).unwrap();
        assert!(rel_err(&a, &dft_adjoint_oracle(&coords, 1, &grid, &d, false).unwrap()) < 1e-5);
    }

    #[test]
    fn one_hot_adjoint_is_plane_wave() {
        let grid = [10, 10];
        let coords = rand_coords(5, 2, 9);
        let plan = NufftPlan::new(&coords, 2, &grid, NufftOptions::default()).unwrap();
        let mut d = vec![Complex64::default(); 5];
        d[1] = Complex64::new(1.0, 0.0);
        let x = plan.adjoint(&d).unwrap();
        let exact = dft_adjoint_oracle(&coords, 2, &grid, &d, false).unwrap();
        for a in &x {
            assert!((a.norm() - 1.0).abs() < 1e-4);
        }
        assert!(rel_err(&x, &exact) < 1e-5);
    }

    #[test]
    fn zero_data_zero_image() {
        let coords = rand_coords(7, 2, 1);
        let plan = NufftPlan::new(&coords, 2, &[8, 8], NufftOptions::default()).unwrap();
        assert!(plan.adjoint(&[Complex64::default(); 7]).unwrap().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn adjoint_dot_product() {
        let grid = [16, 12];
        let coords = rand_coords(80, 2, 11);
        let plan = NufftPlan::new(&coords, 2, &grid, NufftOptions::default()).unwrap();
        let x = rand_image(192, 12);
        let y = rand_image(80, 13);
        let ax = plan.forward(&x).unwrap();
        let aty = plan.adjoint(&y).unwrap();
        let lhs = inner(&ax, &y);
        let rhs = inner(&x, &aty);
        let scale = crate::test_util::norm(&ax) * crate::test_util::norm(&y);
        assert!((lhs - rhs).norm() / scale < 1e-5);
    }

    #[test]
    fn toeplitz_single_dc_sample() {
        let plan = NufftPlan::new(&[0.0, 0.0], 2, &[6, 6], NufftOptions::default()).unwrap();
        let k = plan.toeplitz_kernel().unwrap();
        // every reachable offset of the Gram kernel equals 1
        let b = k.doubled_grid()[1];
        for i0 in 0..12 {
            for i1 in 0..12 {
                let v = k.spatial()[i0 * b + i1];
                if i0 != 6 && i1 != 6 {
                    assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-4);
                }
            }
        }
        let x = rand_image(36, 3);
        let total: Complex64 = x.iter().sum();
        for v in k.apply(&x).unwrap() {
            assert!((v - total).norm() / total.norm() < 1e-4);
        }
    }

    #[test]
    fn toeplitz_matches_composition() {
        let grid = [10, 10];
        let coords = rand_coords(60, 2, 21);
        let plan = NufftPlan::new(&coords, 2, &grid, NufftOptions::default()).unwrap();
        let x = rand_image(100, 22);
        let direct = plan.adjoint(&plan.forward(&x).unwrap()).unwrap();
        let fast = normal_apply(&plan.toeplitz_kernel().unwrap(), &x).unwrap();
        assert!(rel_err(&fast, &direct) < 1e-4, "{}", rel_err(&fast, &direct));
    }

    #[test]
    fn toeplitz_kernel_hermitian() {
        let coords = rand_coords(30, 2, 5);
        let plan = NufftPlan::new(&coords, 2, &[8, 8], NufftOptions::default()).unwrap();
        let k = plan.toeplitz_kernel().unwrap();
        let b = 16;
        let h = k.spatial();
        for i0 in 0..b {
            for i1 in 0..b {
                let j0 = (b - i0) % b;
                let j1 = (b - i1) % b;
                assert!((h[i0 * b + i1] - h[j0 * b + j1].conj()).norm() < 1e-9);
            }
        }
        // Hermitian kernel has a real spectrum
        assert!(k.spectrum().iter().all(|v| v.im.abs() < 1e-9 * (1.0 + v.re.abs())));
    }

    #[test]
    fn oracle_size_guard() {
        let grid = [80, 80];
        let x = vec![Complex64::default(); 6400];
        assert!(matches!(dft_oracle(&[0.0, 0.0], 2, &grid, &x, false), Err(Error::SizeGuard(_))));
        assert!(dft_oracle(&[0.0, 0.0], 2, &grid, &x, true).is_ok());
    }

    #[test]
    fn oracle_linearity() {
        let grid = [8, 8];
        let coords = rand_coords(20, 2, 4);
        let (a, b) = (Complex64::new(0.3, -1.2), Complex64::new(2.0, 0.5));
        let x = rand_image(64, 1);
        let z = rand_image(64, 2);
        let mix: Vec<Complex64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
        let lhs = dft_oracle(&coords, 2, &grid, &mix, false).unwrap();
        let ox = dft_oracle(&coords, 2, &grid, &x, false).unwrap();
        let oz = dft_oracle(&coords, 2, &grid, &z, false).unwrap();
        let rhs: Vec<Complex64> = ox.iter().zip(&oz).map(|(p, q)| a * p + b * q).collect();
        assert!(rel_err(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn shift_theorem() {
        // content kept off the border so the circular shift is exact for
        // arbitrary (off-grid) frequencies
        let n = 16;
        let mut x = vec![Complex64::default(); n * n];
        let inner_img = rand_image(100, 7);
        for a in 0..10 {
            for b in 0..10 {
                x[(a + 3) * n + b + 3] = inner_img[a * 10 + b];
            }
        }
        let (s0, s1) = (2i64, -3i64);
        let mut shifted = vec![Complex64::default(); n * n];
        for i0 in 0..n as i64 {
            for i1 in 0..n as i64 {
                let d0 = (i0 + s0).rem_euclid(n as i64) as usize;
                let d1 = (i1 + s1).rem_euclid(n as i64) as usize;
                shifted[d0 * n + d1] = x[i0 as usize * n + i1 as usize];
            }
        }
        let coords = rand_coords(200, 2, 31);
        let plan = NufftPlan::new(&coords, 2, &[n, n], NufftOptions::default()).unwrap();
        let y = plan.forward(&x).unwrap();
        let ys = plan.forward(&shifted).unwrap();
        let ramped: Vec<Complex64> = y
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v * Complex64::from_polar(1.0, -(coords[2 * j] * s0 as f64 + coords[2 * j + 1] * s1 as f64))
            })
            .collect();
        let e = rel_err(&ys, &ramped);
        assert!(e < 1e-5, "{e}");
    }
}
