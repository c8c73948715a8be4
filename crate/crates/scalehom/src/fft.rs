//! Multi-dimensional complex FFT on a cubic periodic grid.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct FftNd {
    pub n: usize,
    pub len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    lines: Vec<Complex64>,
}

impl FftNd {
    pub fn new(n: usize, len: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        let s = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        FftNd {
            n,
            len,
            fwd,
            inv,
            scratch: vec![Complex64::default(); s],
            lines: Vec::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.len.pow(self.n as u32)
    }

    /// Unnormalized transform in place: `Σ_x f(x) e^{∓2πi m·x/len}`.
    pub fn process(&mut self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.total());
        let plan = if inverse { self.inv.clone() } else { self.fwd.clone() };
        let len = self.len;
        plan.process_with_scratch(data, &mut self.scratch);
        for axis in (0..self.n - 1).rev() {
            let stride = len.pow((self.n - 1 - axis) as u32);
            let block = stride * len;
            self.lines.resize(block, Complex64::default());
            for chunk in data.chunks_mut(block) {
                for t in 0..len {
                    let row = &chunk[t * stride..(t + 1) * stride];
                    for (inner, v) in row.iter().enumerate() {
                        self.lines[inner * len + t] = *v;
                    }
                }
                plan.process_with_scratch(&mut self.lines, &mut self.scratch);
                for t in 0..len {
                    let row = &mut chunk[t * stride..(t + 1) * stride];
                    for (inner, v) in row.iter_mut().enumerate() {
                        *v = self.lines[inner * len + t];
                    }
                }
            }
        }
    }
}

/// Flat index of the integer wavevector `m` (components reduced mod `len`).
#[inline]
pub fn wrap_index(m: &[i32], len: usize) -> usize {
    let l = len as i64;
    let mut idx = 0usize;
    for &c in m {
        let w = (c as i64).rem_euclid(l) as usize;
        idx = idx * len + w;
    }
    idx
}

/// Signed frequency of grid index `i` in `[-len/2, len/2)`.
#[inline]
pub fn signed_freq(i: usize, len: usize) -> i64 {
    if i < len.div_ceil(2) {
        i as i64
    } else {
        i as i64 - len as i64
    }
}
