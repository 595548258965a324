//! Image-quality metrics, point spread functions and a conjugate-symmetry
//! overlap measure.

use std::collections::HashMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nufft::{offset, NufftOptions, NufftPlan};
use crate::trajectory::Trajectory;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_RADIUS: usize = 3;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let w1: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|k| {
            let d = k as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w1.iter().sum();
    let mut w = Vec::with_capacity(w1.len() * w1.len());
    for a in &w1 {
        for b in &w1 {
            w.push(a * b / (s * s));
        }
    }
    w
}

fn check_pair(x: &[Complex64], reference: &[Complex64], n: usize) -> Result<()> {
    if x.len() != reference.len() || x.len() != n * n {
        return Err(Error::Shape(format!("images of {} and {} pixels on a {n}x{n} grid", x.len(), reference.len())));
    }
    Ok(())
}

/// Mean SSIM of `|x|` against `|reference|` on square `n x n` images: 7×7
/// Gaussian window (σ = 1.5), valid positions only, dynamic range
/// `max|reference|`. The mean is clamped to `[0, 1]`.
pub fn ssim(x: &[Complex64], reference: &[Complex64], n: usize) -> Result<f64> {
    check_pair(x, reference, n)?;
    let a: Vec<f64> = x.iter().map(|v| v.norm()).collect();
    let b: Vec<f64> = reference.iter().map(|v| v.norm()).collect();
    Ok(ssim_real(&a, &b, n, n).clamp(0.0, 1.0))
}

/// Unclamped mean SSIM of real `rows x cols` images.
pub fn ssim_real(x: &[f64], reference: &[f64], rows: usize, cols: usize) -> f64 {
    let win = 2 * SSIM_RADIUS + 1;
    assert!(rows >= win && cols >= win, "image smaller than the SSIM window");
    let w = gaussian_window();
    let range = reference.iter().fold(0.0f64, |m, v| m.max(*v));
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=rows - win {
        for j in 0..=cols - win {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..win {
                for dj in 0..win {
                    let k = (i + di) * cols + j + dj;
                    let wk = w[di * win + dj];
                    let (p, q) = (x[k], reference[k]);
                    mx += wk * p;
                    my += wk * q;
                    sxx += wk * p * p;
                    syy += wk * q * q;
                    sxy += wk * p * q;
                }
            }
            sxx -= mx * mx;
            syy -= my * my;
            sxy -= mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// PSNR of `|x|` against `|reference|` in dB with peak `max|reference|`,
/// capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &[Complex64], reference: &[Complex64]) -> Result<f64> {
    if x.len() != reference.len() || x.is_empty() {
        return Err(Error::Shape(format!("images of {} and {} pixels", x.len(), reference.len())));
    }
    let peak = reference.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mse = x.iter().zip(reference).map(|(a, b)| (a.norm() - b.norm()).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean and (population) standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary { mean: f64::NAN, std: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsfReport {
    pub grid_n: usize,
    /// Row-major `grid_n x grid_n`, normalized to 1 at the image center.
    #[serde(skip)]
    pub psf: Vec<Complex64>,
    pub fwhm_pixels: f64,
    pub sidelobe_energy_ratio: f64,
    /// Radii (pixels) at which the profiles are sampled.
    pub radii: Vec<f64>,
    /// Profile angles, radians.
    pub angles: Vec<f64>,
    /// `|psf|` along each angle.
    pub profiles: Vec<Vec<f64>>,
    /// Mean of `profiles` over angles.
    pub mean_profile: Vec<f64>,
}

/// Number of profile angles; a multiple of four so quarter-turn rotations
/// permute the set.
pub const PSF_ANGLES: usize = 36;
/// Radial step of the profiles, pixels.
pub const PSF_RADIAL_STEP: f64 = 0.05;
/// Above this many `Ns·Nv` products the PSF uses the NUFFT adjoint.
const EXACT_PSF_LIMIT: usize = 400_000_000;

/// `Σ_j w_j exp(i ω_j·r)` on the image grid.
fn psf_image(traj: &Trajectory, weights: &[f64]) -> Result<Vec<Complex64>> {
    let n = traj.grid_n;
    let nd = traj.nd;
    if nd != 2 {
        return Err(Error::InvalidArgument("PSF analysis needs a 2-D trajectory".into()));
    }
    let ns = traj.num_samples();
    if ns * n * n > EXACT_PSF_LIMIT {
        let plan = NufftPlan::new(&traj.coords, 2, &[n, n], NufftOptions::default())?;
        let w: Vec<Complex64> = weights.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        return plan.adjoint(&w);
    }
    let mut out = vec![Complex64::default(); n * n];
    let mut row = vec![Complex64::default(); n];
    let mut col = vec![Complex64::default(); n];
    for j in 0..ns {
        let (w0, w1) = (traj.coords[2 * j], traj.coords[2 * j + 1]);
        for i in 0..n {
            row[i] = Complex64::from_polar(weights[j], w0 * offset(i, n));
            col[i] = Complex64::from_polar(1.0, w1 * offset(i, n));
        }
        for i0 in 0..n {
            let r = row[i0];
            for (o, c) in out[i0 * n..(i0 + 1) * n].iter_mut().zip(&col) {
                *o += r * c;
            }
        }
    }
    Ok(out)
}

fn bilinear(img: &[f64], n: usize, y: f64, x: f64) -> f64 {
    // (y, x) in pixel offsets from the center
    let c = (n / 2) as f64;
    let (fy, fx) = (y + c, x + c);
    let (i0, j0) = (fy.floor(), fx.floor());
    let (ty, tx) = (fy - i0, fx - j0);
    let at = |i: f64, j: f64| -> f64 {
        if i < 0.0 || j < 0.0 || i >= n as f64 || j >= n as f64 {
            0.0
        } else {
            img[i as usize * n + j as usize]
        }
    };
    (1.0 - ty) * ((1.0 - tx) * at(i0, j0) + tx * at(i0, j0 + 1.0)) + ty * ((1.0 - tx) * at(i0 + 1.0, j0) + tx * at(i0 + 1.0, j0 + 1.0))
}

/// First crossing of `level` by a decreasing profile, linearly interpolated.
fn half_width(radii: &[f64], profile: &[f64], level: f64) -> Option<f64> {
    for k in 1..profile.len() {
        if profile[k] < level {
            let (a, b) = (profile[k - 1], profile[k]);
            let t = (a - level) / (a - b);
            return Some(radii[k - 1] + t * (radii[k] - radii[k - 1]));
        }
    }
    None
}

/// Point spread function `A'1` (optionally with density weights `dcf`),
/// normalized to unit center value, with angle-averaged FWHM and sidelobe
/// energy outside three FWHM.
pub fn psf(traj: &Trajectory, dcf: Option<&[f64]>) -> Result<PsfReport> {
    let n = traj.grid_n;
    let ns = traj.num_samples();
    let weights: Vec<f64> = match dcf {
        Some(w) if w.len() != ns => {
            return Err(Error::Shape(format!("{} density weights for {ns} samples", w.len())));
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; ns],
    };
    let raw = psf_image(traj, &weights)?;
    let center = raw[(n / 2) * n + n / 2];
    if center.norm() == 0.0 {
        return Err(Error::NonFinite("PSF has zero value at the center".into()));
    }
    let psf: Vec<Complex64> = raw.iter().map(|v| v / center).collect();
    let mag: Vec<f64> = psf.iter().map(|v| v.norm()).collect();
    // stay one pixel clear of the unpaired -N/2 row and column
    let rmax = (n / 2) as f64 - 2.0;
    let nr = (rmax / PSF_RADIAL_STEP).floor() as usize + 1;
    let radii: Vec<f64> = (0..nr).map(|k| k as f64 * PSF_RADIAL_STEP).collect();
    let angles: Vec<f64> = (0..PSF_ANGLES).map(|k| 2.0 * PI * k as f64 / PSF_ANGLES as f64).collect();
    let profiles: Vec<Vec<f64>> = angles
        .iter()
        .map(|&a| {
            let (s, c) = a.sin_cos();
            radii.iter().map(|&r| bilinear(&mag, n, r * s, r * c)).collect()
        })
        .collect();
    let mean_profile: Vec<f64> = (0..nr).map(|k| profiles.iter().map(|p| p[k]).sum::<f64>() / PSF_ANGLES as f64).collect();
    let half = half_width(&radii, &mean_profile, 0.5 * mean_profile[0])
        .ok_or_else(|| Error::NonFinite("PSF profile never falls to half maximum".into()))?;
    let fwhm = 2.0 * half;
    let r_out = 3.0 * fwhm;
    let (mut total, mut outside) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let e = mag[i * n + j].powi(2);
            total += e;
            if offset(i, n).hypot(offset(j, n)) > r_out {
                outside += e;
            }
        }
    }
    Ok(PsfReport { grid_n: n, psf, fwhm_pixels: fwhm, sidelobe_energy_ratio: outside / total, radii, angles, profiles, mean_profile })
}

impl PsfReport {
    /// One row per angle: `angle,p(r_0),p(r_1),...`, preceded by a header
    /// row of radii.
    pub fn profiles_csv(&self) -> String {
        let mut s = String::from("angle");
        for r in &self.radii {
            s.push_str(&format!(",{r}"));
        }
        s.push('\n');
        for (a, p) in self.angles.iter().zip(&self.profiles) {
            s.push_str(&format!("{a}"));
            for v in p {
                s.push_str(&format!(",{v:e}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Fraction of samples whose point reflection `−ω` lies within `radius_eps`
/// of some sample (itself included).
pub fn hermitian_overlap(traj: &Trajectory, radius_eps: f64) -> Result<f64> {
    if !(radius_eps > 0.0) {
        return Err(Error::InvalidArgument("radius_eps must be positive".into()));
    }
    let nd = traj.nd;
    let ns = traj.num_samples();
    let cell = |p: &[f64]| -> Vec<i64> { p.iter().map(|v| (v / radius_eps).floor() as i64).collect() };
    let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for j in 0..ns {
        buckets.entry(cell(&traj.coords[j * nd..(j + 1) * nd])).or_default().push(j);
    }
    let eps2 = radius_eps * radius_eps;
    let mut hits = 0usize;
    for j in 0..ns {
        let q: Vec<f64> = traj.coords[j * nd..(j + 1) * nd].iter().map(|v| -v).collect();
        let base = cell(&q);
        let mut found = false;
        let neighbours = 3usize.pow(nd as u32);
        'outer: for code in 0..neighbours {
            let mut key = base.clone();
            let mut c = code;
            for k in key.iter_mut() {
                *k += (c % 3) as i64 - 1;
                c /= 3;
            }
            if let Some(list) = buckets.get(&key) {
                for &m in list {
                    let d2: f64 = (0..nd).map(|d| (traj.coords[m * nd + d] - q[d]).powi(2)).sum();
                    if d2 <= eps2 {
                        found = true;
                        break 'outer;
                    }
                }
            }
        }
        if found {
            hits += 1;
        }
    }
    Ok(hits as f64 / ns as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::gen_radial;
    use proptest::prelude::*;

    fn lcg_uniform(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }

    fn golden_pair() -> (Vec<f64>, Vec<f64>) {
        let n = 32;
        let reference: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = ((k / n) as f64, (k % n) as f64);
                0.8 + 0.4 * (2.0 * PI * i / 17.0).sin() * (2.0 * PI * j / 23.0).cos() + 0.1 * (i + j) / n as f64
            })
            .collect();
        let range = reference.iter().fold(0.0f64, |m, v| m.max(*v));
        let noise = lcg_uniform(n * n, 12345);
        let img = reference.iter().zip(&noise).map(|(r, u)| r + (u - 0.5) * 0.2 * range).collect();
        (img, reference)
    }

    fn cplx(v: &[f64]) -> Vec<Complex64> {
        v.iter().map(|&x| Complex64::new(x, 0.0)).collect()
    }

    #[test]
    fn ssim_golden_value() {
        let (img, reference) = golden_pair();
        let s = ssim(&cplx(&img), &cplx(&reference), 32).unwrap();
        assert!((s - 0.8127480801917171).abs() < 1e-12, "{s}");
    }

    #[test]
    fn psnr_golden_value() {
        let (img, reference) = golden_pair();
        let p = psnr(&cplx(&img), &cplx(&reference)).unwrap();
        assert!((p - 24.66342640497825).abs() < 1e-10, "{p}");
    }

    #[test]
    fn identical_images() {
        let (_, reference) = golden_pair();
        let r = cplx(&reference);
        assert!((ssim(&r, &r, 32).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(&r, &r).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_monotone_in_error() {
        let (_, reference) = golden_pair();
        let r = cplx(&reference);
        let mut prev = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1] {
            let x: Vec<Complex64> = r.iter().enumerate().map(|(k, v)| v + if k % 2 == 0 { amp } else { -amp }).collect();
            let p = psnr(&x, &r).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    proptest! {
        #[test]
        fn ssim_in_unit_interval(seed in 0u64..1000, amp in 0.0f64..2.0) {
            let (_, reference) = golden_pair();
            let noise = lcg_uniform(32 * 32, seed);
            let x: Vec<f64> = reference.iter().zip(&noise).map(|(r, u)| (r + amp * (u - 0.5)).abs()).collect();
            let s = ssim(&cplx(&x), &cplx(&reference), 32).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn overlap_rotation_invariant(k in 0usize..4, spokes in 3usize..9) {
            let t = gen_radial(spokes, 24, false, 32, 0.2, 4e-6).unwrap();
            let a = hermitian_overlap(&t, 0.05).unwrap();
            let b = hermitian_overlap(&t.rotated(k as f64 * PI / 2.0), 0.05).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    fn cartesian(n: usize) -> Trajectory {
        let coords: Vec<f64> = (0..n * n)
            .flat_map(|k| {
                let f = |i: usize| 2.0 * PI * (i as f64 - (n / 2) as f64) / n as f64;
                [f(k / n), f(k % n)]
            })
            .collect();
        Trajectory::new(coords, 2, n, n, 4e-6, 0.22, n).unwrap()
    }

    #[test]
    fn cartesian_psf_is_a_delta() {
        let r = psf(&cartesian(32), None).unwrap();
        assert!((r.fwhm_pixels - 1.0).abs() < 0.2, "{}", r.fwhm_pixels);
        assert!(r.sidelobe_energy_ratio < 1e-12);
        assert!((r.psf[16 * 32 + 16] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn radial_psf_rotation_invariant() {
        let t = gen_radial(24, 64, true, 32, 0.22, 4e-6).unwrap();
        let a = psf(&t, None).unwrap();
        let b = psf(&t.rotated(PI / 2.0), None).unwrap();
        assert!((a.fwhm_pixels - b.fwhm_pixels).abs() < 1e-6);
        assert!(a.fwhm_pixels > 1.0);
        let csv = a.profiles_csv();
        assert_eq!(csv.lines().count(), 1 + PSF_ANGLES);
    }

    #[test]
    fn density_weights_shape_checked() {
        let t = gen_radial(4, 16, true, 16, 0.22, 4e-6).unwrap();
        assert!(psf(&t, Some(&[1.0; 3])).is_err());
        let w: Vec<f64> = t.coords.chunks(2).map(|p| p[0].hypot(p[1]).max(0.05)).collect();
        let a = psf(&t, Some(&w)).unwrap();
        let b = psf(&t, None).unwrap();
        assert!(a.fwhm_pixels < b.fwhm_pixels);
    }

    #[test]
    fn overlap_radial_and_half_line() {
        let t = gen_radial(16, 64, true, 32, 0.22, 4e-6).unwrap();
        // in-out spokes sample -π but not +π, so the first sample of each
        // spoke has no mirror image
        let o = hermitian_overlap(&t, 1e-9).unwrap();
        assert!((o - 63.0 / 64.0).abs() < 1e-12, "{o}");
        let half: Vec<f64> = (0..50).flat_map(|k| [0.05 * k as f64, 0.0]).collect();
        let h = Trajectory::new(half, 2, 1, 50, 4e-6, 0.22, 32).unwrap();
        assert!((hermitian_overlap(&h, 1e-3).unwrap() - 1.0 / 50.0).abs() < 1e-12);
    }

    #[test]
    fn summary_stats() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
    }
}
