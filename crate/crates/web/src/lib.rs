use kjoint::eval::{psf, psnr, ssim};
use kjoint::grad::Acquisition;
use kjoint::mrisys::{gen_phantoms, synth_coil_maps};
use kjoint::recon::{UnrolledConfig, WaveletShrink};
use kjoint::train::{reconstruct, CsSettings, ReconMethod};
use kjoint::trajectory::{gen_radial, gen_spiral, penalty, HardwareLimits, Trajectory};
use wasm_bindgen::prelude::*;

const FOV: f64 = 0.22;

/// One trajectory plus the results of the last PSF / reconstruction run.
#[wasm_bindgen]
pub struct Demo {
    traj: Trajectory,
    limits: HardwareLimits,
    fwhm: f64,
    ssim: f64,
    psnr: f64,
}

fn magnitudes(v: &[num_complex::Complex64]) -> Vec<f32> {
    let peak = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let s = if peak > 0.0 { 1.0 / peak } else { 0.0 };
    v.iter().map(|z| (z.norm() * s) as f32).collect()
}

#[wasm_bindgen]
impl Demo {
    /// In-out radial spokes.
    pub fn radial(spokes: usize, samples: usize, grid_n: usize) -> Result<Demo, JsError> {
        let limits = HardwareLimits::default();
        let traj = gen_radial(spokes, samples, true, grid_n, FOV, limits.dt)?;
        Ok(Self::wrap(traj, limits))
    }

    /// Archimedean spiral; `turns <= 0` picks the largest feasible count.
    pub fn spiral(shots: usize, samples: usize, grid_n: usize, turns: f64) -> Result<Demo, JsError> {
        let limits = HardwareLimits::default();
        let traj = gen_spiral(shots, samples, 1.0, (turns > 0.0).then_some(turns), grid_n, FOV, &limits)?;
        Ok(Self::wrap(traj, limits))
    }

    fn wrap(traj: Trajectory, limits: HardwareLimits) -> Demo {
        Demo { traj, limits, fwhm: f64::NAN, ssim: f64::NAN, psnr: f64::NAN }
    }

    #[wasm_bindgen(getter)]
    pub fn grid_n(&self) -> usize {
        self.traj.grid_n
    }

    /// Interleaved (kx, ky) in rad/pixel, shot-major.
    pub fn coords(&self) -> Vec<f64> {
        self.traj.coords.clone()
    }

    /// Gradient plus slew hinge; 0 means the hardware limits hold.
    pub fn penalty(&self) -> f64 {
        let thr = self.limits.thresholds(self.traj.fov, self.traj.grid_n);
        penalty(&self.traj.coords, self.traj.layout(), thr, 1.0, 1.0).value
    }

    /// Centered |PSF| image normalized to 1; also updates `fwhm`.
    pub fn psf(&mut self) -> Result<Vec<f32>, JsError> {
        let rep = psf(&self.traj, None)?;
        self.fwhm = rep.fwhm_pixels;
        Ok(magnitudes(&rep.psf))
    }

    #[wasm_bindgen(getter)]
    pub fn fwhm(&self) -> f64 {
        self.fwhm
    }

    /// Simulate a 4-coil scan of a random phantom and reconstruct it with
    /// `"unn"`, `"cs"` or `"init"`. Returns |x̂| normalized to 1.
    pub fn reconstruct(&mut self, method: &str, phantom_seed: u32, noise_ratio: f64) -> Result<Vec<f32>, JsError> {
        let n = self.traj.grid_n;
        let method: ReconMethod = method.parse()?;
        let x = gen_phantoms(1, n, phantom_seed.into())?.images.remove(0);
        let acq = Acquisition::new(synth_coil_maps(n, 4)?, n, noise_ratio);
        let model = acq.model(&self.traj.coords)?;
        let y = acq.acquire(&model, &x, phantom_seed.into())?.y;
        let unrolled = UnrolledConfig { denoiser_theta: WaveletShrink::new(n, n).default_theta(0.02), ..Default::default() };
        let xhat = reconstruct(method, &model, &y, &unrolled, CsSettings::default())?;
        self.ssim = ssim(&xhat, &x, n)?;
        self.psnr = psnr(&xhat, &x)?;
        Ok(magnitudes(&xhat))
    }

    #[wasm_bindgen(getter)]
    pub fn ssim(&self) -> f64 {
        self.ssim
    }

    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.psnr
    }
}
