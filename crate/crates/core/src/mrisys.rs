//! Multi-coil SENSE model, acquisition noise, synthetic coil maps and image
//! datasets.
//!
//! The encoding operator is scaled by `1/sqrt(Nv)` so that `A'A` has an
//! O(1) spectrum for near-Nyquist sampling (fully sampled Cartesian gives
//! `A'A = I`). Penalty weights such as `μ` are therefore resolution-free.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::median;
use crate::nufft::{NufftOptions, NufftPlan, ToeplitzKernel};
use crate::trajectory::Trajectory;

/// Pixels whose magnitude (or coil RSS) is below this fraction of the
/// maximum are outside the support.
pub const SUPPORT_FRACTION: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct SenseModel {
    smaps: Vec<Vec<Complex64>>,
    plan: NufftPlan,
    toeplitz: ToeplitzKernel,
    pub noise_std: f64,
    scale: f64,
}

impl SenseModel {
    pub fn new(plan: NufftPlan, smaps: Vec<Vec<Complex64>>, noise_std: f64) -> Result<Self> {
        if smaps.is_empty() {
            return Err(Error::InvalidArgument("at least one coil map is required".into()));
        }
        let nv = plan.num_pixels();
        if let Some(bad) = smaps.iter().position(|s| s.len() != nv) {
            return Err(Error::Shape(format!("coil map {bad} has {} pixels, expected {nv}", smaps[bad].len())));
        }
        if !(noise_std >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise_std {noise_std} must be >= 0")));
        }
        let toeplitz = plan.toeplitz_kernel()?;
        Ok(Self { smaps, plan, toeplitz, noise_std, scale: 1.0 / (nv as f64).sqrt() })
    }

    /// Build the NUFFT plan for `coords` on a square `grid_n` image.
    pub fn from_coords(
        coords: &[f64],
        nd: usize,
        grid_n: usize,
        smaps: Vec<Vec<Complex64>>,
        noise_std: f64,
        opts: NufftOptions,
    ) -> Result<Self> {
        let plan = NufftPlan::new(coords, nd, &vec![grid_n; nd], opts)?;
        Self::new(plan, smaps, noise_std)
    }

    pub fn from_trajectory(traj: &Trajectory, smaps: Vec<Vec<Complex64>>, noise_std: f64) -> Result<Self> {
        Self::from_coords(&traj.coords, traj.nd, traj.grid_n, smaps, noise_std, NufftOptions::default())
    }

    /// Same coil maps and noise level at new coordinates.
    pub fn with_coords(&self, coords: &[f64]) -> Result<Self> {
        let plan = NufftPlan::new(coords, self.plan.nd(), self.plan.grid(), self.plan.options())?;
        Self::new(plan, self.smaps.clone(), self.noise_std)
    }

    pub fn plan(&self) -> &NufftPlan {
        &self.plan
    }

    pub fn smaps(&self) -> &[Vec<Complex64>] {
        &self.smaps
    }

    pub fn num_coils(&self) -> usize {
        self.smaps.len()
    }

    pub fn num_pixels(&self) -> usize {
        self.plan.num_pixels()
    }

    pub fn num_samples(&self) -> usize {
        self.plan.num_samples()
    }

    /// Length of the stacked data vector, `Nc·Ns`.
    pub fn data_len(&self) -> usize {
        self.num_coils() * self.num_samples()
    }

    /// Operator scale `1/sqrt(Nv)`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn check_image(&self, x: &[Complex64]) -> Result<()> {
        if x.len() != self.num_pixels() {
            return Err(Error::Shape(format!("image has {} pixels, model expects {}", x.len(), self.num_pixels())));
        }
        Ok(())
    }

    fn check_data(&self, y: &[Complex64]) -> Result<()> {
        if y.len() != self.data_len() {
            return Err(Error::Shape(format!("data has {} samples, model expects {}", y.len(), self.data_len())));
        }
        Ok(())
    }

    /// `s_c ⊙ x`.
    pub fn coil_image(&self, c: usize, x: &[Complex64]) -> Vec<Complex64> {
        self.smaps[c].iter().zip(x).map(|(s, v)| s * v).collect()
    }

    /// Coil-major stacked `[NUFFT(s_c ⊙ x)]_c`.
    pub fn forward(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_image(x)?;
        let parts: Vec<Vec<Complex64>> = (0..self.num_coils())
            .into_par_iter()
            .map(|c| self.plan.forward(&self.coil_image(c, x)))
            .collect::<Result<_>>()?;
        let mut out = parts.concat();
        out.iter_mut().for_each(|v| *v *= self.scale);
        Ok(out)
    }

    /// `Σ_c conj(s_c) ⊙ NUFFT'(y_c)`.
    pub fn adjoint(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_data(y)?;
        let ns = self.num_samples();
        let parts: Vec<Vec<Complex64>> = (0..self.num_coils())
            .into_par_iter()
            .map(|c| self.plan.adjoint(&y[c * ns..(c + 1) * ns]))
            .collect::<Result<_>>()?;
        Ok(self.combine(parts))
    }

    fn combine(&self, parts: Vec<Vec<Complex64>>) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); self.num_pixels()];
        for (c, part) in parts.iter().enumerate() {
            for ((o, s), v) in out.iter_mut().zip(&self.smaps[c]).zip(part) {
                *o += s.conj() * v * self.scale;
            }
        }
        out
    }

    /// `A'A x` through the Toeplitz kernel.
    pub fn normal(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_image(x)?;
        let parts: Vec<Vec<Complex64>> = (0..self.num_coils())
            .into_par_iter()
            .map(|c| self.toeplitz.apply(&self.coil_image(c, x)))
            .collect::<Result<_>>()?;
        let mut out = self.combine(parts);
        out.iter_mut().for_each(|v| *v *= self.scale);
        Ok(out)
    }

    /// `A'A x` by explicit forward then adjoint.
    pub fn normal_direct(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        self.adjoint(&self.forward(x)?)
    }
}

/// `sense_forward(model, x)`.
pub fn sense_forward(model: &SenseModel, x: &[Complex64]) -> Result<Vec<Complex64>> {
    model.forward(x)
}

/// `sense_adjoint(model, y)`.
pub fn sense_adjoint(model: &SenseModel, y: &[Complex64]) -> Result<Vec<Complex64>> {
    model.adjoint(y)
}

/// Circular complex Gaussian noise `CN(0, std²)`, i.e. `N(0, std²/2)` per part.
pub fn complex_noise(len: usize, std: f64, seed: u64) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = std / 2f64.sqrt();
    (0..len)
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(s * re, s * im)
        })
        .collect()
}

/// `y = A x + ε`, `ε ~ CN(0, noise_std²)` drawn from `seed`.
pub fn simulate_acquisition(model: &SenseModel, x: &[Complex64], seed: u64) -> Result<Vec<Complex64>> {
    let mut y = model.forward(x)?;
    if model.noise_std > 0.0 {
        let e = complex_noise(y.len(), model.noise_std, seed);
        y.iter_mut().zip(e).for_each(|(a, b)| *a += b);
    }
    Ok(y)
}

/// `ratio · mean |y|`, the noise level relative to the clean data.
pub fn relative_noise_std(clean: &[Complex64], ratio: f64) -> f64 {
    if clean.is_empty() {
        return 0.0;
    }
    ratio * clean.iter().map(|v| v.norm()).sum::<f64>() / clean.len() as f64
}

/// Smooth coil sensitivities for `ncoils` receivers placed on a ring.
///
/// Each coil is a periodic Gaussian-like bump `exp(κ(cos θ₀ + cos θ₁ − 2))`
/// with a constant phase; dividing by the root-sum-of-squares makes the RSS
/// exactly one. A single coil is the constant map.
pub fn synth_coil_maps(grid_n: usize, ncoils: usize) -> Result<Vec<Vec<Complex64>>> {
    if ncoils == 0 || grid_n == 0 {
        return Err(Error::InvalidArgument("need at least one coil and one pixel".into()));
    }
    let nv = grid_n * grid_n;
    if ncoils == 1 {
        return Ok(vec![vec![Complex64::new(1.0, 0.0); nv]]);
    }
    const KAPPA: f64 = 0.4;
    let n = grid_n as f64;
    let mut maps: Vec<Vec<Complex64>> = (0..ncoils)
        .map(|c| {
            let a = 2.0 * PI * c as f64 / ncoils as f64;
            let (p0, p1) = (n / 2.0 + 0.45 * n * a.sin(), n / 2.0 + 0.45 * n * a.cos());
            let phase = Complex64::from_polar(1.0, a);
            (0..nv)
                .map(|k| {
                    let (i, j) = ((k / grid_n) as f64, (k % grid_n) as f64);
                    let t0 = 2.0 * PI * (i - p0) / n;
                    let t1 = 2.0 * PI * (j - p1) / n;
                    phase * (KAPPA * (t0.cos() + t1.cos() - 2.0)).exp()
                })
                .collect()
        })
        .collect();
    for k in 0..nv {
        let rss = maps.iter().map(|m| m[k].norm_sqr()).sum::<f64>().sqrt();
        maps.iter_mut().for_each(|m| m[k] /= rss);
    }
    Ok(maps)
}

/// Root-sum-of-squares of the coil maps per pixel.
pub fn coil_rss(smaps: &[Vec<Complex64>]) -> Vec<f64> {
    (0..smaps[0].len()).map(|k| smaps.iter().map(|m| m[k].norm_sqr()).sum::<f64>().sqrt()).collect()
}

/// Mask of pixels with `|x| > SUPPORT_FRACTION · max|x|`.
pub fn support_mask(x: &[Complex64]) -> Vec<bool> {
    let mx = x.iter().map(|v| v.norm()).fold(0.0, f64::max);
    x.iter().map(|v| v.norm() > SUPPORT_FRACTION * mx).collect()
}

/// Divide by the median magnitude over the support. Returns the divisor.
pub fn normalize_median(x: &mut [Complex64]) -> Result<f64> {
    let mask = support_mask(x);
    let mags: Vec<f64> = x.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v.norm()).collect();
    let med = median(&mags);
    if !(med > 0.0) || !med.is_finite() {
        return Err(Error::InvalidArgument("image has no support to normalize".into()));
    }
    x.iter_mut().for_each(|v| *v /= med);
    Ok(med)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Vec<Complex64>>,
    pub grid_n: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    /// Consecutive split: the first `n_train` images, then `n_val`, rest test.
    pub fn new(images: Vec<Vec<Complex64>>, grid_n: usize, n_train: usize, n_val: usize) -> Result<Self> {
        if let Some(bad) = images.iter().position(|x| x.len() != grid_n * grid_n) {
            return Err(Error::Shape(format!("image {bad} is not {grid_n}x{grid_n}")));
        }
        if n_train + n_val > images.len() {
            return Err(Error::InvalidArgument(format!(
                "split {n_train}+{n_val} exceeds {} images",
                images.len()
            )));
        }
        let n = images.len();
        Ok(Self {
            images,
            grid_n,
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        })
    }

    pub fn split(&self, which: Split) -> Vec<&[Complex64]> {
        let idx = match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        };
        idx.iter().map(|&i| self.images[i].as_slice()).collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    intensity: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_deg: f64,
}

// modified Shepp-Logan (Toft)
const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse { intensity: 1.0, a: 0.69, b: 0.92, x0: 0.0, y0: 0.0, phi_deg: 0.0 },
    Ellipse { intensity: -0.8, a: 0.6624, b: 0.874, x0: 0.0, y0: -0.0184, phi_deg: 0.0 },
    Ellipse { intensity: -0.2, a: 0.11, b: 0.31, x0: 0.22, y0: 0.0, phi_deg: -18.0 },
    Ellipse { intensity: -0.2, a: 0.16, b: 0.41, x0: -0.22, y0: 0.0, phi_deg: 18.0 },
    Ellipse { intensity: 0.1, a: 0.21, b: 0.25, x0: 0.0, y0: 0.35, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: 0.1, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.046, x0: 0.0, y0: -0.1, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.046, b: 0.023, x0: -0.08, y0: -0.605, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.023, b: 0.023, x0: 0.0, y0: -0.606, phi_deg: 0.0 },
    Ellipse { intensity: 0.1, a: 0.023, b: 0.046, x0: 0.06, y0: -0.605, phi_deg: 0.0 },
];

fn rasterize(ellipses: &[Ellipse], grid_n: usize) -> Vec<f64> {
    const SUB: usize = 2;
    let n = grid_n as f64;
    let mut img = vec![0.0; grid_n * grid_n];
    let prepared: Vec<(f64, f64, f64, f64, f64, f64, f64)> = ellipses
        .iter()
        .map(|e| {
            let (s, c) = e.phi_deg.to_radians().sin_cos();
            (e.intensity, e.a, e.b, e.x0, e.y0, s, c)
        })
        .collect();
    for i in 0..grid_n {
        for j in 0..grid_n {
            let mut acc = 0.0;
            for si in 0..SUB {
                for sj in 0..SUB {
                    // y points up the image, x to the right, both in [-1, 1)
                    let y = -((i as f64 + (si as f64 + 0.5) / SUB as f64) - n / 2.0) / (n / 2.0);
                    let x = ((j as f64 + (sj as f64 + 0.5) / SUB as f64) - n / 2.0) / (n / 2.0);
                    for &(v, a, b, x0, y0, s, c) in &prepared {
                        let (dx, dy) = (x - x0, y - y0);
                        let u = c * dx + s * dy;
                        let w = -s * dx + c * dy;
                        if (u / a).powi(2) + (w / b).powi(2) <= 1.0 {
                            acc += v;
                        }
                    }
                }
            }
            img[i * grid_n + j] = acc / (SUB * SUB) as f64;
        }
    }
    img
}

/// One randomized phantom: jittered Shepp-Logan ellipses plus a few random
/// inclusions, with a smooth random phase; median-normalized on support.
pub fn random_phantom(grid_n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Complex64>> {
    let zoom = rng.random_range(0.8..1.0);
    let rot: f64 = rng.random_range(-20.0..20.0);
    let (sr, cr) = rot.to_radians().sin_cos();
    let (tx, ty) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let mut ellipses: Vec<Ellipse> = SHEPP_LOGAN
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let jitter = if k < 2 { 1.0 } else { rng.random_range(0.7..1.3) };
            let intensity = if k < 2 { e.intensity } else { e.intensity * rng.random_range(0.5..1.5) };
            let (x0, y0) = (e.x0 * zoom, e.y0 * zoom);
            Ellipse {
                intensity,
                a: e.a * zoom * jitter,
                b: e.b * zoom * if k < 2 { 1.0 } else { rng.random_range(0.7..1.3) },
                x0: cr * x0 - sr * y0 + tx,
                y0: sr * x0 + cr * y0 + ty,
                phi_deg: e.phi_deg + rot,
            }
        })
        .collect();
    for _ in 0..rng.random_range(2..6) {
        let r = rng.random_range(0.0..0.5) * zoom;
        let t = rng.random_range(0.0..2.0 * PI);
        ellipses.push(Ellipse {
            intensity: rng.random_range(-0.15..0.25),
            a: rng.random_range(0.02..0.12) * zoom,
            b: rng.random_range(0.02..0.12) * zoom,
            x0: r * t.cos() + tx,
            y0: r * t.sin() + ty,
            phi_deg: rng.random_range(0.0..180.0),
        });
    }
    let mag = rasterize(&ellipses, grid_n);
    let coef: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = grid_n as f64;
    let mut img: Vec<Complex64> = mag
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let y = ((k / grid_n) as f64 - n / 2.0) / (n / 2.0);
            let x = ((k % grid_n) as f64 - n / 2.0) / (n / 2.0);
            let ph = coef[0] * PI + 0.5 * (coef[1] * x + coef[2] * y) + 0.3 * (coef[3] * x * y + coef[4] * (x * x - y * y));
            Complex64::from_polar(m.max(0.0), ph)
        })
        .collect();
    normalize_median(&mut img)?;
    Ok(img)
}

/// `n` random phantoms split 80/10/10 (at least one test image when n ≥ 3).
pub fn gen_phantoms(n: usize, grid_n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..n).map(|_| random_phantom(grid_n, &mut rng)).collect::<Result<Vec<_>>>()?;
    let (n_train, n_val) = default_split(n);
    Dataset::new(images, grid_n, n_train, n_val)
}

fn default_split(n: usize) -> (usize, usize) {
    if n < 3 {
        return (n, 0);
    }
    let n_val = (n / 10).max(1);
    let n_test = (n / 10).max(1);
    (n - n_val - n_test, n_val)
}

/// Center-crop or zero-pad a `rows x cols` image to `grid_n x grid_n`.
pub fn center_fit(img: &[Complex64], rows: usize, cols: usize, grid_n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); grid_n * grid_n];
    // source index = dest index + shift (negative when padding)
    let shift = |len: usize| len as i64 / 2 - grid_n as i64 / 2;
    let (s0, s1) = (shift(rows), shift(cols));
    for i in 0..grid_n {
        let si = i as i64 + s0;
        if si < 0 || si >= rows as i64 {
            continue;
        }
        for j in 0..grid_n {
            let sj = j as i64 + s1;
            if sj < 0 || sj >= cols as i64 {
                continue;
            }
            out[i * grid_n + j] = img[si as usize * cols + sj as usize];
        }
    }
    out
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSidecar {
    shape: [usize; 2],
    #[serde(default)]
    complex: bool,
}

/// Read one image: `*.png` (grayscale magnitude) or `*.f32` (raw
/// little-endian float32, with `<name>.json` giving `{"shape": [rows, cols],
/// "complex": bool}`; complex data are interleaved re/im).
pub fn read_image(path: &Path) -> Result<(Vec<Complex64>, usize, usize)> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => {
            let img = image::open(path)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
                .into_luma16();
            let (w, h) = img.dimensions();
            let data = img.pixels().map(|p| Complex64::new(p.0[0] as f64 / 65535.0, 0.0)).collect();
            Ok((data, h as usize, w as usize))
        }
        "f32" => {
            let side: RawSidecar = serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
            let bytes = std::fs::read(path)?;
            let [rows, cols] = side.shape;
            let per = if side.complex { 2 } else { 1 };
            if bytes.len() != rows * cols * per * 4 {
                return Err(Error::Format(format!(
                    "{}: {} bytes, sidecar expects {}",
                    path.display(),
                    bytes.len(),
                    rows * cols * per * 4
                )));
            }
            let vals: Vec<f64> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
            let data = if side.complex {
                vals.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
            } else {
                vals.into_iter().map(|v| Complex64::new(v, 0.0)).collect()
            };
            Ok((data, rows, cols))
        }
        _ => Err(Error::Format(format!("{}: unsupported image type", path.display()))),
    }
}

/// Write a complex image as interleaved little-endian f32 plus its JSON
/// sidecar, in the layout [`read_image`] accepts.
pub fn write_f32_image(path: &Path, img: &[Complex64], rows: usize, cols: usize) -> Result<()> {
    if img.len() != rows * cols {
        return Err(Error::Shape(format!("{} pixels for {rows}x{cols}", img.len())));
    }
    let mut bytes = Vec::with_capacity(img.len() * 8);
    for v in img {
        bytes.extend_from_slice(&(v.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(v.im as f32).to_le_bytes());
    }
    crate::io::write_atomic(path, &bytes)?;
    let side = serde_json::json!({ "shape": [rows, cols], "complex": true });
    crate::io::write_atomic(path.with_extension("json"), serde_json::to_string(&side)?.as_bytes())
}

/// 16-bit grayscale PNG of `|img|`, scaled so the maximum maps to white.
pub fn write_png_magnitude(path: &Path, img: &[Complex64], rows: usize, cols: usize) -> Result<()> {
    if img.len() != rows * cols {
        return Err(Error::Shape(format!("{} pixels for {rows}x{cols}", img.len())));
    }
    let peak = img.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let scale = if peak > 0.0 { 65535.0 / peak } else { 0.0 };
    let px: Vec<u16> = img.iter().map(|v| (v.norm() * scale).round().clamp(0.0, 65535.0) as u16).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(cols as u32, rows as u32, px)
        .ok_or_else(|| Error::Shape("png buffer".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Format(format!("png encoding: {e}")))?;
    crate::io::write_atomic(path, &out.into_inner())
}

/// Every `*.png` / `*.f32` in `dir` (sorted by name), fitted to `grid_n` and
/// median-normalized.
pub fn load_images(dir: impl AsRef<Path>, grid_n: usize) -> Result<Dataset> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(), Some("png" | "f32")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no images in {}", dir.as_ref().display())));
    }
    let images = paths
        .iter()
        .map(|p| {
            let (data, rows, cols) = read_image(p)?;
            let mut x = center_fit(&data, rows, cols, grid_n);
            normalize_median(&mut x)?;
            Ok(x)
        })
        .collect::<Result<Vec<_>>>()?;
    let (n_train, n_val) = default_split(images.len());
    Dataset::new(images, grid_n, n_train, n_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::FftNd;
    use crate::linalg::{norm, rel_err};
    use crate::test_util::{inner, rand_coords, rand_image};

    fn model(n: usize, nc: usize, ns: usize, seed: u64) -> SenseModel {
        let coords = rand_coords(ns, 2, seed);
        SenseModel::from_coords(&coords, 2, n, synth_coil_maps(n, nc).unwrap(), 0.0, NufftOptions::default()).unwrap()
    }

    #[test]
    fn single_unit_coil_is_scaled_nufft() {
        let m = model(12, 1, 60, 1);
        let x = rand_image(144, 2);
        let y = m.forward(&x).unwrap();
        let mut z = m.plan().forward(&x).unwrap();
        z.iter_mut().for_each(|v| *v /= 12.0);
        assert!(rel_err(&y, &z) < 1e-14);
    }

    #[test]
    fn sense_adjoint_dot_product() {
        let m = model(16, 4, 300, 3);
        let x = rand_image(256, 4);
        let y = rand_image(m.data_len(), 5);
        let lhs = inner(&m.forward(&x).unwrap(), &y);
        let rhs = inner(&x, &m.adjoint(&y).unwrap());
        let e = (lhs - rhs).norm() / (norm(&m.forward(&x).unwrap()) * norm(&y));
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn zero_image_zero_data() {
        let m = model(16, 4, 100, 3);
        assert!(m.forward(&vec![Complex64::default(); 256]).unwrap().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn linearity() {
        let m = model(16, 3, 100, 7);
        let (a, b) = (rand_image(256, 1), rand_image(256, 2));
        let (alpha, beta) = (Complex64::new(0.3, -1.2), Complex64::new(-2.0, 0.5));
        let mix: Vec<Complex64> = a.iter().zip(&b).map(|(p, q)| alpha * p + beta * q).collect();
        let fa = m.forward(&a).unwrap();
        let fb = m.forward(&b).unwrap();
        let expect: Vec<Complex64> = fa.iter().zip(&fb).map(|(p, q)| alpha * p + beta * q).collect();
        assert!(rel_err(&m.forward(&mix).unwrap(), &expect) < 1e-12);
    }

    #[test]
    fn toeplitz_normal_matches_direct() {
        let m = model(16, 4, 400, 8);
        let x = rand_image(256, 9);
        let e = rel_err(&m.normal(&x).unwrap(), &m.normal_direct(&x).unwrap());
        assert!(e < 1e-4, "{e}");
        // Hermitian: Re⟨x, A'A x⟩ ≥ 0 and imaginary part negligible
        let q = inner(&x, &m.normal(&x).unwrap());
        assert!(q.re > 0.0 && q.im.abs() < 1e-8 * q.re);
    }

    #[test]
    fn noiseless_and_deterministic() {
        let mut m = model(12, 2, 50, 1);
        let x = rand_image(144, 3);
        assert_eq!(simulate_acquisition(&m, &x, 5).unwrap(), m.forward(&x).unwrap());
        m.noise_std = 0.1;
        let a = simulate_acquisition(&m, &x, 5).unwrap();
        assert_eq!(a, simulate_acquisition(&m, &x, 5).unwrap());
        assert_ne!(a, simulate_acquisition(&m, &x, 6).unwrap());
    }

    #[test]
    fn noise_variance() {
        let std = 0.37;
        let e = complex_noise(100_000, std, 11);
        let var = e.iter().map(|v| v.norm_sqr()).sum::<f64>() / e.len() as f64;
        assert!((var / (std * std) - 1.0).abs() < 0.05, "{var}");
        let mean: Complex64 = e.iter().sum::<Complex64>() / e.len() as f64;
        assert!(mean.norm() < 5e-3);
        // real and imaginary parts carry equal power
        let re = e.iter().map(|v| v.re * v.re).sum::<f64>();
        let im = e.iter().map(|v| v.im * v.im).sum::<f64>();
        assert!((re / im - 1.0).abs() < 0.05);
    }

    #[test]
    fn relative_noise_level() {
        let y = vec![Complex64::new(3.0, 4.0); 10];
        assert!((relative_noise_std(&y, 1e-3) - 5e-3).abs() < 1e-15);
    }

    #[test]
    fn coil_maps_rss_and_single() {
        let maps = synth_coil_maps(32, 8).unwrap();
        assert!(coil_rss(&maps).iter().all(|r| (r - 1.0).abs() < 1e-9));
        let one = synth_coil_maps(32, 1).unwrap();
        assert!(one[0].iter().all(|v| *v == Complex64::new(1.0, 0.0)));
        // distinct coils actually differ
        assert!(rel_err(&maps[0], &maps[4]) > 0.3);
    }

    #[test]
    fn coil_maps_band_limited() {
        let n = 64;
        let cut = 0.1 * (n / 2) as f64;
        for m in synth_coil_maps(n, 4).unwrap() {
            let mut k = m.clone();
            FftNd::new(&[n, n]).forward(&mut k);
            let peak = k.iter().map(|v| v.norm()).fold(0.0, f64::max);
            let freq = |i: usize| if i <= n / 2 { i as f64 } else { n as f64 - i as f64 };
            let mut worst: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if freq(i).max(freq(j)) > cut {
                        worst = worst.max(k[i * n + j].norm());
                    }
                }
            }
            assert!(worst < 1e-3 * peak, "{}", worst / peak);
        }
    }

    #[test]
    fn phantoms_normalized_and_deterministic() {
        let a = gen_phantoms(5, 32, 42).unwrap();
        let b = gen_phantoms(5, 32, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images[0], gen_phantoms(5, 32, 43).unwrap().images[0]);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (3, 1, 1));
        for x in &a.images {
            let mask = support_mask(x);
            let mags: Vec<f64> = x.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| v.norm()).collect();
            assert!((median(&mags) - 1.0).abs() < 1e-6);
        }
        // phantoms are not purely real
        assert!(a.images[0].iter().any(|v| v.im.abs() > 0.1));
    }

    #[test]
    fn crop_and_pad() {
        let (r, c) = (40, 40);
        let img: Vec<Complex64> = (0..r * c).map(|k| Complex64::new(k as f64, 0.0)).collect();
        let cropped = center_fit(&img, r, c, 32);
        assert_eq!(cropped[0], img[4 * c + 4]);
        assert_eq!(cropped[31 * 32 + 31], img[35 * c + 35]);
        let small: Vec<Complex64> = vec![Complex64::new(1.0, 0.0); 24 * 24];
        let padded = center_fit(&small, 24, 24, 32);
        assert_eq!(padded[0], Complex64::default());
        assert_eq!(padded[3 * 32 + 3], Complex64::default());
        assert_eq!(padded[4 * 32 + 4], Complex64::new(1.0, 0.0));
        assert_eq!(padded.iter().filter(|v| v.re == 1.0).count(), 24 * 24);
    }

    #[test]
    fn load_raw_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let (rows, cols) = (20, 24);
        let vals: Vec<f32> = (0..rows * cols).flat_map(|k| [1.0 + (k % 7) as f32, 0.5]).collect();
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.path().join("a.f32"), bytes).unwrap();
        std::fs::write(dir.path().join("a.json"), r#"{"shape": [20, 24], "complex": true}"#).unwrap();
        let png = image::GrayImage::from_fn(16, 16, |x, y| image::Luma([((x + y) * 8 + 10) as u8]));
        png.save(dir.path().join("b.png")).unwrap();
        let ds = load_images(dir.path(), 16).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.images[0][0].im > 0.0);
        assert!(ds.images[1].iter().all(|v| v.im == 0.0 && v.re > 0.0));
    }

    #[test]
    fn written_images_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let img: Vec<Complex64> = (0..6 * 5).map(|k| Complex64::new(k as f64 * 0.25, -0.5)).collect();
        let p = dir.path().join("x.f32");
        write_f32_image(&p, &img, 6, 5).unwrap();
        let (back, r, c) = read_image(&p).unwrap();
        assert_eq!((r, c), (6, 5));
        assert_eq!(back, img);
        let q = dir.path().join("x.png");
        write_png_magnitude(&q, &img, 6, 5).unwrap();
        let (mag, r, c) = read_image(&q).unwrap();
        assert_eq!((r, c), (6, 5));
        let peak = img.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (a, b) in mag.iter().zip(&img) {
            assert!((a.re - b.norm() / peak).abs() < 1e-4);
        }
    }

    #[test]
    fn bad_sidecar_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.f32"), [0u8; 12]).unwrap();
        std::fs::write(dir.path().join("a.json"), r#"{"shape": [2, 2]}"#).unwrap();
        assert!(matches!(load_images(dir.path(), 4), Err(Error::Format(_))));
    }
}
