//! Thin 1-D/2-D FFT wrapper around `rustfft` for row-major buffers.
//!
//! Forward uses `exp(-2πi kn/N)`, inverse uses `exp(+2πi kn/N)`; neither is
//! normalized.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

#[derive(Clone)]
pub struct FftNd {
    shape: Vec<usize>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for FftNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftNd").field("shape", &self.shape).finish()
    }
}

impl FftNd {
    pub fn new(shape: &[usize]) -> Self {
        assert!(shape.len() == 1 || shape.len() == 2, "only 1-D and 2-D FFTs");
        Self {
            shape: shape.to_vec(),
            fwd: shape.iter().map(|&n| plan(n, false)).collect(),
            inv: shape.iter().map(|&n| plan(n, true)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.fwd);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.inv);
    }

    fn run(&self, buf: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        debug_assert_eq!(buf.len(), self.len());
        match self.shape.len() {
            1 => plans[0].process(buf),
            _ => {
                let (n0, n1) = (self.shape[0], self.shape[1]);
                // rows are contiguous
                plans[1].process(buf);
                let mut t = vec![Complex64::default(); buf.len()];
                transpose(buf, &mut t, n0, n1);
                plans[0].process(&mut t);
                transpose(&t, buf, n1, n0);
            }
        }
    }
}

/// `src` is `rows x cols`, `dst` becomes `cols x rows`.
fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_2d_dft() {
        let (n0, n1) = (6, 10);
        let x: Vec<Complex64> = (0..n0 * n1)
            .map(|k| Complex64::new((k as f64 * 0.37).sin(), (k as f64 * 0.11).cos()))
            .collect();
        let mut y = x.clone();
        FftNd::new(&[n0, n1]).forward(&mut y);
        for k0 in 0..n0 {
            for k1 in 0..n1 {
                let mut acc = Complex64::default();
                for a in 0..n0 {
                    for b in 0..n1 {
                        let ph = -2.0 * std::f64::consts::PI
                            * ((k0 * a) as f64 / n0 as f64 + (k1 * b) as f64 / n1 as f64);
                        acc += x[a * n1 + b] * Complex64::from_polar(1.0, ph);
                    }
                }
                assert!((acc - y[k0 * n1 + k1]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        let shape = [8, 12];
        let f = FftNd::new(&shape);
        let x: Vec<Complex64> = (0..96).map(|k| Complex64::new(k as f64, -(k as f64))).collect();
        let mut y = x.clone();
        f.forward(&mut y);
        f.inverse(&mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b / 96.0).norm() < 1e-10);
        }
    }
}
