//! Sampling trajectories, quadratic B-spline parameterization, hardware
//! penalties, standard generators and waveform export.
//!
//! Coordinates are radians/pixel. Physical k-space (cycles/m) relates through
//! `k = ω·grid_n / (2π·fov)`, so a per-sample gradient limit `γ·dt·gmax`
//! (cycles/m) becomes `2π·γ·dt·gmax·fov/grid_n` rad/pixel.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Proton gyromagnetic ratio over 2π, Hz/T.
pub const GAMMA_HZ_PER_T: f64 = 42.577_478_5e6;

const TRAJ_MAGIC: &[u8; 5] = b"KTRJ1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Row-major `Ns x Nd`, radians/pixel.
    pub coords: Vec<f64>,
    pub nd: usize,
    pub nshots: usize,
    pub samples_per_shot: usize,
    /// Sample / raster time, seconds.
    pub dt: f64,
    /// Field of view, meters.
    pub fov: f64,
    pub grid_n: usize,
}

impl Trajectory {
    pub fn new(
        coords: Vec<f64>,
        nd: usize,
        nshots: usize,
        samples_per_shot: usize,
        dt: f64,
        fov: f64,
        grid_n: usize,
    ) -> Result<Self> {
        let t = Self { coords, nd, nshots, samples_per_shot, dt, fov, grid_n };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nd != 1 && self.nd != 2 {
            return Err(Error::InvalidArgument(format!("Nd must be 1 or 2, got {}", self.nd)));
        }
        if self.nshots == 0 || self.samples_per_shot == 0 {
            return Err(Error::InvalidArgument("empty trajectory".into()));
        }
        if self.coords.len() != self.nshots * self.samples_per_shot * self.nd {
            return Err(Error::Shape(format!(
                "{} coordinates for {} shots x {} samples x {} dims",
                self.coords.len(),
                self.nshots,
                self.samples_per_shot,
                self.nd
            )));
        }
        if !(self.dt > 0.0) || !(self.fov > 0.0) || self.grid_n == 0 {
            return Err(Error::InvalidArgument("dt, fov and grid_n must be positive".into()));
        }
        if let Some(pos) = self.coords.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFiniteCoord { sample: pos / self.nd, dim: pos % self.nd });
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.nshots * self.samples_per_shot
    }

    pub fn grid(&self) -> Vec<usize> {
        vec![self.grid_n; self.nd]
    }

    pub fn layout(&self) -> ShotLayout {
        ShotLayout { nd: self.nd, nshots: self.nshots, samples_per_shot: self.samples_per_shot }
    }

    pub fn with_coords(&self, coords: Vec<f64>) -> Result<Self> {
        Self::new(coords, self.nd, self.nshots, self.samples_per_shot, self.dt, self.fov, self.grid_n)
    }

    /// Rotate every sample by `angle` radians about DC (2-D only).
    pub fn rotated(&self, angle: f64) -> Self {
        assert_eq!(self.nd, 2);
        let (s, c) = angle.sin_cos();
        let coords = self
            .coords
            .chunks_exact(2)
            .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
            .collect();
        Self { coords, ..self.clone() }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(TRAJ_MAGIC)?;
        for v in [self.nd, self.nshots, self.samples_per_shot] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in [self.dt, self.fov, self.grid_n as f64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.coords {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != TRAJ_MAGIC {
            return Err(Error::Format("not a KTRJ1 trajectory file".into()));
        }
        let mut u = [0u8; 4];
        let mut hdr = [0usize; 3];
        for h in hdr.iter_mut() {
            r.read_exact(&mut u)?;
            *h = u32::from_le_bytes(u) as usize;
        }
        let mut f = [0u8; 8];
        let mut next_f64 = |r: &mut dyn Read| -> Result<f64> {
            r.read_exact(&mut f)?;
            Ok(f64::from_le_bytes(f))
        };
        let dt = next_f64(&mut r)?;
        let fov = next_f64(&mut r)?;
        let grid_n = next_f64(&mut r)?;
        if grid_n.fract() != 0.0 || grid_n < 1.0 {
            return Err(Error::Format(format!("grid_n {grid_n} is not a positive integer")));
        }
        let n = hdr[0] * hdr[1] * hdr[2];
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            coords.push(next_f64(&mut r)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Self::new(coords, hdr[0], hdr[1], hdr[2], dt, fov, grid_n as usize)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Shot structure of a coordinate array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotLayout {
    pub nd: usize,
    pub nshots: usize,
    pub samples_per_shot: usize,
}

impl ShotLayout {
    pub fn num_samples(&self) -> usize {
        self.nshots * self.samples_per_shot
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareLimits {
    /// Maximum gradient amplitude, T/m.
    pub gmax: f64,
    /// Maximum slew rate, T/m/s.
    pub smax: f64,
    /// Gyromagnetic ratio over 2π, Hz/T.
    pub gamma: f64,
    /// Gradient raster time, seconds.
    pub dt: f64,
}

impl Default for HardwareLimits {
    /// 50 mT/m, 149 T/m/s, 4 µs raster.
    fn default() -> Self {
        Self { gmax: 50e-3, smax: 149.0, gamma: GAMMA_HZ_PER_T, dt: 4e-6 }
    }
}

impl HardwareLimits {
    pub fn validate(&self) -> Result<()> {
        if [self.gmax, self.smax, self.gamma, self.dt].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("hardware limits must be positive".into()))
        }
    }

    /// Per-sample limits in rad/pixel for a grid of `grid_n` pixels over `fov`.
    pub fn thresholds(&self, fov: f64, grid_n: usize) -> Thresholds {
        let px = 2.0 * PI * fov / grid_n as f64;
        Thresholds {
            grad: px * self.gamma * self.dt * self.gmax,
            slew: px * self.gamma * self.dt * self.dt * self.smax,
        }
    }

    /// Rad/pixel per sample -> T/m conversion factor.
    fn gradient_scale(&self, fov: f64, grid_n: usize) -> f64 {
        grid_n as f64 / (2.0 * PI * self.gamma * self.dt * fov)
    }
}

/// Box limits on first and second differences, rad/pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub grad: f64,
    pub slew: f64,
}

impl Thresholds {
    pub fn scaled(&self, factor: f64) -> Self {
        Self { grad: self.grad * factor, slew: self.slew * factor }
    }
}

/// Per-shot first differences, `(Ns - nshots) x Nd`.
pub fn diff1(coords: &[f64], layout: ShotLayout) -> Vec<f64> {
    let (nd, sps) = (layout.nd, layout.samples_per_shot);
    let mut out = Vec::with_capacity(layout.nshots * sps.saturating_sub(1) * nd);
    for shot in coords.chunks_exact(sps * nd) {
        for n in 0..sps.saturating_sub(1) {
            for d in 0..nd {
                out.push(shot[(n + 1) * nd + d] - shot[n * nd + d]);
            }
        }
    }
    out
}

/// Per-shot second differences, `(Ns - 2·nshots) x Nd`.
pub fn diff2(coords: &[f64], layout: ShotLayout) -> Vec<f64> {
    let (nd, sps) = (layout.nd, layout.samples_per_shot);
    let mut out = Vec::with_capacity(layout.nshots * sps.saturating_sub(2) * nd);
    for shot in coords.chunks_exact(sps * nd) {
        for n in 0..sps.saturating_sub(2) {
            for d in 0..nd {
                out.push(shot[(n + 2) * nd + d] - 2.0 * shot[(n + 1) * nd + d] + shot[n * nd + d]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    /// `mu1·φ_g + mu2·φ_s`.
    pub value: f64,
    /// Unweighted hinge sum on first differences.
    pub grad_hinge: f64,
    /// Unweighted hinge sum on second differences.
    pub slew_hinge: f64,
    /// Subgradient w.r.t. the coordinates (zero inside the feasible box).
    pub gradient: Vec<f64>,
}

impl Penalty {
    pub fn is_feasible(&self) -> bool {
        self.grad_hinge == 0.0 && self.slew_hinge == 0.0
    }
}

/// Hinge penalty `mu1·Σ max(|D1ω| − λg, 0) + mu2·Σ max(|D2ω| − λs, 0)`.
pub fn penalty(coords: &[f64], layout: ShotLayout, limits: Thresholds, mu1: f64, mu2: f64) -> Penalty {
    let (nd, sps) = (layout.nd, layout.samples_per_shot);
    let mut gradient = vec![0.0; coords.len()];
    let (mut gh, mut sh) = (0.0, 0.0);
    for (s, shot) in coords.chunks_exact(sps * nd).enumerate() {
        let base = s * sps * nd;
        for n in 0..sps.saturating_sub(1) {
            for d in 0..nd {
                let e = shot[(n + 1) * nd + d] - shot[n * nd + d];
                let excess = e.abs() - limits.grad;
                if excess > 0.0 {
                    gh += excess;
                    let g = mu1 * e.signum();
                    gradient[base + (n + 1) * nd + d] += g;
                    gradient[base + n * nd + d] -= g;
                }
            }
        }
        for n in 0..sps.saturating_sub(2) {
            for d in 0..nd {
                let e = shot[(n + 2) * nd + d] - 2.0 * shot[(n + 1) * nd + d] + shot[n * nd + d];
                let excess = e.abs() - limits.slew;
                if excess > 0.0 {
                    sh += excess;
                    let g = mu2 * e.signum();
                    gradient[base + (n + 2) * nd + d] += g;
                    gradient[base + (n + 1) * nd + d] -= 2.0 * g;
                    gradient[base + n * nd + d] += g;
                }
            }
        }
    }
    Penalty { value: mu1 * gh + mu2 * sh, grad_hinge: gh, slew_hinge: sh, gradient }
}

/// Quadratic uniform B-spline `β₂(x)`, support `(-1.5, 1.5)`.
pub fn bspline2(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.5 {
        0.75 - a * a
    } else if a < 1.5 {
        0.5 * (1.5 - a) * (1.5 - a)
    } else {
        0.0
    }
}

/// Sparse `Ns x L` interpolation matrix with at most three entries per row,
/// block-diagonal over shots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub nshots: usize,
    pub samples_per_shot: usize,
    /// Coefficients per shot.
    pub per_shot: usize,
    /// `None` for the identity (nonparametric) basis.
    pub decim: Option<usize>,
    // one shot's block; every shot shares it
    rows: Vec<Vec<(usize, f64)>>,
}

impl SplineBasis {
    /// Quadratic B-spline basis. Sample `n` of a shot sits at knot-parameter
    /// `t = n/decim`; bumps are centered at `i − 1/2`, `i = 0..L`, with
    /// `L = ceil(S/decim) + 2` so every sample sees a full partition of unity.
    pub fn quadratic(nshots: usize, samples_per_shot: usize, decim: usize) -> Result<Self> {
        if decim == 0 || decim > samples_per_shot {
            return Err(Error::InvalidArgument(format!(
                "decimation {decim} must lie in 1..={samples_per_shot}"
            )));
        }
        let per_shot = samples_per_shot.div_ceil(decim) + 2;
        let rows = (0..samples_per_shot)
            .map(|n| {
                let t = n as f64 / decim as f64;
                let first = t.floor() as usize;
                (first..first + 3)
                    .filter(|&i| i < per_shot)
                    .map(|i| (i, bspline2(t - (i as f64 - 0.5))))
                    .filter(|&(_, w)| w > 0.0)
                    .collect()
            })
            .collect();
        Ok(Self { nshots, samples_per_shot, per_shot, decim: Some(decim), rows })
    }

    /// `B = I`: every sample is its own coefficient.
    pub fn identity(nshots: usize, samples_per_shot: usize) -> Self {
        Self {
            nshots,
            samples_per_shot,
            per_shot: samples_per_shot,
            decim: None,
            rows: (0..samples_per_shot).map(|n| vec![(n, 1.0)]).collect(),
        }
    }

    pub fn num_rows(&self) -> usize {
        self.nshots * self.samples_per_shot
    }

    pub fn num_coeffs(&self) -> usize {
        self.nshots * self.per_shot
    }

    /// Nonzeros of global row `r` as `(global column, weight)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let shot = r / self.samples_per_shot;
        let off = shot * self.per_shot;
        self.rows[r % self.samples_per_shot].iter().map(move |&(c, w)| (c + off, w))
    }

    /// `B c` for a coefficient matrix with `nd` columns (row-major).
    pub fn apply(&self, coeffs: &[f64], nd: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_rows() * nd];
        for r in 0..self.num_rows() {
            for (c, w) in self.row(r) {
                for d in 0..nd {
                    out[r * nd + d] += w * coeffs[c * nd + d];
                }
            }
        }
        out
    }

    /// `Bᵀ g`.
    pub fn apply_transpose(&self, g: &[f64], nd: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_coeffs() * nd];
        for r in 0..self.num_rows() {
            for (c, w) in self.row(r) {
                for d in 0..nd {
                    out[c * nd + d] += w * g[r * nd + d];
                }
            }
        }
        out
    }

    /// Least-squares coefficients for `coords` (`argmin ‖Bc − ω‖₂`) via the
    /// normal equations of one shot block, shared across shots.
    pub fn fit(&self, coords: &[f64], nd: usize) -> Result<Vec<f64>> {
        if coords.len() != self.num_rows() * nd {
            return Err(Error::Shape(format!("{} coords for {} rows", coords.len(), self.num_rows())));
        }
        if self.decim.is_none() {
            return Ok(coords.to_vec());
        }
        let l = self.per_shot;
        let mut gram = DMatrix::<f64>::zeros(l, l);
        for row in &self.rows {
            for &(a, wa) in row {
                for &(b, wb) in row {
                    gram[(a, b)] += wa * wb;
                }
            }
        }
        // columns only touched by the tail of a shortened last interval can be
        // nearly free; a tiny ridge pins them without moving the fit
        let ridge = 1e-12 * (0..l).map(|i| gram[(i, i)]).fold(0.0, f64::max);
        for i in 0..l {
            gram[(i, i)] += ridge;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("spline normal matrix is not positive definite".into()))?;
        let sps = self.samples_per_shot;
        let mut coeffs = vec![0.0; self.num_coeffs() * nd];
        for s in 0..self.nshots {
            for d in 0..nd {
                let mut rhs = DVector::<f64>::zeros(l);
                for (n, row) in self.rows.iter().enumerate() {
                    let v = coords[(s * sps + n) * nd + d];
                    for &(c, w) in row {
                        rhs[c] += w * v;
                    }
                }
                let sol = chol.solve(&rhs);
                for c in 0..l {
                    coeffs[(s * l + c) * nd + d] = sol[c];
                }
            }
        }
        Ok(coeffs)
    }

    /// `max_row Σ|(D₂B)_row|`: bound on `‖D₂Bc‖∞ / ‖c‖∞`.
    pub fn slew_gain(&self) -> f64 {
        let sps = self.samples_per_shot;
        let mut worst: f64 = 0.0;
        for n in 0..sps.saturating_sub(2) {
            let mut acc = std::collections::BTreeMap::<usize, f64>::new();
            for (k, coef) in [(n, 1.0), (n + 1, -2.0), (n + 2, 1.0)] {
                for &(c, w) in &self.rows[k] {
                    *acc.entry(c).or_default() += coef * w;
                }
            }
            worst = worst.max(acc.values().map(|v| v.abs()).sum());
        }
        worst
    }
}

/// `build_basis(nshots, samples_per_shot, decim)`.
pub fn build_basis(nshots: usize, samples_per_shot: usize, decim: usize) -> Result<SplineBasis> {
    SplineBasis::quadratic(nshots, samples_per_shot, decim)
}

/// Coefficients `c` (row-major `L x Nd`) together with their basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineParam {
    pub coeffs: Vec<f64>,
    pub basis: SplineBasis,
    pub nd: usize,
}

/// Residual of a least-squares refit, rad/pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResidual {
    pub rms: f64,
    pub max_abs: f64,
}

impl SplineParam {
    pub fn new(coeffs: Vec<f64>, basis: SplineBasis, nd: usize) -> Result<Self> {
        if coeffs.len() != basis.num_coeffs() * nd {
            return Err(Error::Shape(format!(
                "{} coefficients for a basis with {} columns x {nd} dims",
                coeffs.len(),
                basis.num_coeffs()
            )));
        }
        Ok(Self { coeffs, basis, nd })
    }

    pub fn decim(&self) -> Option<usize> {
        self.basis.decim
    }

    /// `ω = B c`.
    pub fn materialize(&self) -> Vec<f64> {
        self.basis.apply(&self.coeffs, self.nd)
    }

    /// Map a coordinate gradient to a coefficient gradient (`Bᵀ g`).
    pub fn pull_back(&self, grad_coords: &[f64]) -> Vec<f64> {
        self.basis.apply_transpose(grad_coords, self.nd)
    }

    pub fn layout(&self) -> ShotLayout {
        ShotLayout { nd: self.nd, nshots: self.basis.nshots, samples_per_shot: self.basis.samples_per_shot }
    }
}

fn residual(a: &[f64], b: &[f64]) -> FitResidual {
    let mut sq = 0.0;
    let mut mx: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let e = (x - y).abs();
        sq += e * e;
        mx = mx.max(e);
    }
    FitResidual { rms: (sq / a.len().max(1) as f64).sqrt(), max_abs: mx }
}

/// Least-squares spline fit of `traj` at decimation `decim`.
pub fn refit(traj: &Trajectory, decim: usize) -> Result<(SplineParam, FitResidual)> {
    let basis = SplineBasis::quadratic(traj.nshots, traj.samples_per_shot, decim)?;
    fit_with_basis(traj, basis)
}

/// Fit `traj` with a given basis (quadratic or identity).
pub fn fit_with_basis(traj: &Trajectory, basis: SplineBasis) -> Result<(SplineParam, FitResidual)> {
    if basis.nshots != traj.nshots || basis.samples_per_shot != traj.samples_per_shot {
        return Err(Error::Shape("basis and trajectory shot layouts differ".into()));
    }
    let coeffs = basis.fit(&traj.coords, traj.nd)?;
    let param = SplineParam::new(coeffs, basis, traj.nd)?;
    let res = residual(&param.materialize(), &traj.coords);
    Ok((param, res))
}

/// Nonparametric parameterization (`B = I`).
pub fn nonparametric(traj: &Trajectory) -> SplineParam {
    let basis = SplineBasis::identity(traj.nshots, traj.samples_per_shot);
    SplineParam { coeffs: traj.coords.clone(), basis, nd: traj.nd }
}

/// Radial trajectory with `nspokes` equidistant angles in `[−π/2, π/2)`.
///
/// In-out spokes run from `−π` towards `+π` through DC (`nread` samples,
/// the last one short of `+π`); center-out spokes run from DC to `π` with
/// angles spread over the full circle.
pub fn gen_radial(nspokes: usize, nread: usize, inout: bool, grid_n: usize, fov: f64, dt: f64) -> Result<Trajectory> {
    if nspokes == 0 || nread < 2 {
        return Err(Error::InvalidArgument("radial needs >= 1 spoke and >= 2 samples".into()));
    }
    let mut coords = Vec::with_capacity(nspokes * nread * 2);
    for s in 0..nspokes {
        let angle = if inout {
            -PI / 2.0 + PI * s as f64 / nspokes as f64
        } else {
            -PI + 2.0 * PI * s as f64 / nspokes as f64
        };
        let (sa, ca) = angle.sin_cos();
        for n in 0..nread {
            let r = if inout {
                -PI + 2.0 * PI * n as f64 / nread as f64
            } else {
                PI * n as f64 / nread as f64
            };
            coords.push(r * ca);
            coords.push(r * sa);
        }
    }
    Trajectory::new(coords, 2, nspokes, nread, dt, fov, grid_n)
}

/// Center-out variable-density spiral: radius `π·s^density`, angle
/// `2π·turns·s + 2π·shot/nshots`, with `s = n/(nread−1)`.
pub fn spiral_coords(nshots: usize, nread: usize, density: f64, turns: f64) -> Vec<f64> {
    let mut coords = Vec::with_capacity(nshots * nread * 2);
    for shot in 0..nshots {
        let rot = 2.0 * PI * shot as f64 / nshots as f64;
        for n in 0..nread {
            let s = n as f64 / (nread - 1) as f64;
            let r = PI * s.powf(density);
            let a = 2.0 * PI * turns * s + rot;
            coords.push(r * a.cos());
            coords.push(r * a.sin());
        }
    }
    coords
}

/// Turns needed for radial Nyquist spacing at the k-space edge.
pub fn nyquist_turns(nshots: usize, grid_n: usize) -> f64 {
    grid_n as f64 / (2.0 * nshots as f64)
}

/// Largest number of turns (≤ `max_turns`) whose spiral satisfies `limits`,
/// found by bisection on the hinge penalty.
pub fn feasible_turns(nshots: usize, nread: usize, density: f64, max_turns: f64, grid_n: usize, fov: f64, limits: &HardwareLimits) -> f64 {
    let thr = limits.thresholds(fov, grid_n);
    let layout = ShotLayout { nd: 2, nshots, samples_per_shot: nread };
    let ok = |t: f64| penalty(&spiral_coords(nshots, nread, density, t), layout, thr, 1.0, 1.0).is_feasible();
    if ok(max_turns) {
        return max_turns;
    }
    let (mut lo, mut hi) = (0.0, max_turns);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Spiral generator. With `turns = None` the number of turns is the Nyquist
/// value capped to what `limits` allow at `limits.dt`, so the result is
/// feasible by construction; explicit turns are used as given.
pub fn gen_spiral(
    nshots: usize,
    nread: usize,
    density: f64,
    turns: Option<f64>,
    grid_n: usize,
    fov: f64,
    limits: &HardwareLimits,
) -> Result<Trajectory> {
    if nshots == 0 || nread < 3 {
        return Err(Error::InvalidArgument("spiral needs >= 1 shot and >= 3 samples".into()));
    }
    if !(density >= 1.0) {
        return Err(Error::InvalidArgument(format!("density exponent {density} must be >= 1")));
    }
    limits.validate()?;
    let turns = match turns {
        Some(t) => t,
        None => feasible_turns(nshots, nread, density, nyquist_turns(nshots, grid_n), grid_n, fov, limits),
    };
    Trajectory::new(spiral_coords(nshots, nread, density, turns), 2, nshots, nread, limits.dt, fov, grid_n)
}

/// Gradient and slew waveforms of a trajectory.
///
/// `gradient[shot][n]` is the gradient (T/m) over interval `n → n+1`;
/// `slew[shot][n] = (g[n] − g[n−1]) / dt` with `slew[shot][0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub nd: usize,
    pub dt: f64,
    pub start: Vec<Vec<f64>>,
    pub gradient: Vec<Vec<Vec<f64>>>,
    pub slew: Vec<Vec<Vec<f64>>>,
    scale: f64,
}

pub fn export_waveform(traj: &Trajectory, limits: &HardwareLimits) -> Waveform {
    let scale = limits.gradient_scale(traj.fov, traj.grid_n);
    let (nd, sps) = (traj.nd, traj.samples_per_shot);
    let mut start = Vec::new();
    let mut gradient = Vec::new();
    let mut slew = Vec::new();
    for shot in traj.coords.chunks_exact(sps * nd) {
        start.push(shot[..nd].to_vec());
        let g: Vec<Vec<f64>> = (0..sps - 1)
            .map(|n| (0..nd).map(|d| (shot[(n + 1) * nd + d] - shot[n * nd + d]) * scale).collect())
            .collect();
        let s = (0..g.len())
            .map(|n| {
                (0..nd)
                    .map(|d| if n == 0 { 0.0 } else { (g[n][d] - g[n - 1][d]) / limits.dt })
                    .collect()
            })
            .collect();
        gradient.push(g);
        slew.push(s);
    }
    Waveform { nd, dt: limits.dt, start, gradient, slew, scale }
}

impl Waveform {
    /// Integrate the gradients back to rad/pixel coordinates.
    pub fn integrate(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (start, g) in self.start.iter().zip(&self.gradient) {
            let mut pos = start.clone();
            out.extend_from_slice(&pos);
            for gn in g {
                for d in 0..self.nd {
                    pos[d] += gn[d] / self.scale;
                }
                out.extend_from_slice(&pos);
            }
        }
        out
    }

    pub fn max_gradient(&self) -> f64 {
        self.gradient.iter().flatten().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_slew(&self) -> f64 {
        self.slew.iter().flatten().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// CSV with columns `shot,n,g_x,g_y,s_x,s_y`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("shot,n,g_x,g_y,s_x,s_y\n");
        for (shot, (g, sl)) in self.gradient.iter().zip(&self.slew).enumerate() {
            for (n, (gn, sn)) in g.iter().zip(sl).enumerate() {
                let gy = gn.get(1).copied().unwrap_or(0.0);
                let sy = sn.get(1).copied().unwrap_or(0.0);
                s.push_str(&format!("{shot},{n},{:e},{:e},{:e},{:e}\n", gn[0], gy, sn[0], sy));
            }
        }
        s
    }
}
