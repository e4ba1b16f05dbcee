//! Per-channel 2-D DFT and radial low-pass projection.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

/// Normalized radial frequency of DFT bin `(ky, kx)` on an `h × w` grid.
///
/// Each axis frequency is scaled so Nyquist is 1, and the radius is divided
/// by √2 so the corner bin sits at exactly 1.
pub fn radial_frequency(ky: usize, kx: usize, h: usize, w: usize) -> f64 {
    let axis = |k: usize, n: usize| {
        let signed = if 2 * k <= n { k as f64 } else { k as f64 - n as f64 };
        // Twice the frequency in cycles/sample puts Nyquist at 1.
        2.0 * signed.abs() / n as f64
    };
    let fy = axis(ky, h);
    let fx = axis(kx, w);
    ((fy * fy + fx * fx) / 2.0).sqrt()
}

fn fft2_in_place(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Orthonormal 2-D DFT of each channel.
pub fn dft2(grid: &LatentGrid) -> Vec<Vec<Complex64>> {
    let (h, w) = (grid.height(), grid.width());
    let norm = 1.0 / ((h * w) as f64).sqrt();
    (0..grid.channels())
        .map(|c| {
            let mut buf: Vec<Complex64> = grid.plane(c).iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft2_in_place(&mut buf, h, w, false);
            buf.iter_mut().for_each(|v| *v *= norm);
            buf
        })
        .collect()
}

/// Zeroes every DFT coefficient whose radial frequency exceeds `cutoff` and
/// transforms back. The mask is symmetric under `k → −k`, so the result is
/// real and the map is an orthogonal projection.
pub fn lowpass(grid: &LatentGrid, cutoff: f64) -> Result<LatentGrid> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::invalid(format!("cutoff must lie in (0, 1], got {cutoff}")));
    }
    let (h, w) = (grid.height(), grid.width());
    let norm = 1.0 / (h * w) as f64;
    let mut out = grid.clone();
    for c in 0..grid.channels() {
        let mut buf: Vec<Complex64> = grid.plane(c).iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2_in_place(&mut buf, h, w, false);
        for ky in 0..h {
            for kx in 0..w {
                if radial_frequency(ky, kx, h, w) > cutoff {
                    buf[ky * w + kx] = Complex64::default();
                }
            }
        }
        fft2_in_place(&mut buf, h, w, true);
        for (o, v) in out.plane_mut(c).iter_mut().zip(&buf) {
            *o = v.re * norm;
        }
    }
    Ok(out)
}

/// Fraction of the grid's energy carried by frequencies above `cutoff`.
pub fn highband_energy_fraction(grid: &LatentGrid, cutoff: f64) -> f64 {
    let spec = dft2(grid);
    let (h, w) = (grid.height(), grid.width());
    let (mut high, mut total) = (0.0, 0.0);
    for plane in &spec {
        for ky in 0..h {
            for kx in 0..w {
                let e = plane[ky * w + kx].norm_sqr();
                total += e;
                if radial_frequency(ky, kx, h, w) > cutoff {
                    high += e;
                }
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        high / total
    }
}
