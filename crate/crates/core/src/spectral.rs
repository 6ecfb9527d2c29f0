//! Frequency-domain style augmentation.
//!
//! Images are `[C,H,W]` tensors. Spectra are stored DC-centered: bin `(0,0)`
//! of the raw transform lives at `(H/2, W/2)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BETA_MAX: f64 = 0.15;
/// Shuffles tried before a permutation with fixed points is accepted.
const DERANGEMENT_ATTEMPTS: usize = 8;

/// Unnormalized forward / `1/(HW)`-normalized inverse 2-D FFT of a row-major plane.
pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_inv, &self.col_inv);
        let norm = 1.0 / (self.h * self.w) as f64;
        buf.iter_mut().for_each(|z| *z *= norm);
    }

    fn run(&self, buf: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        debug_assert_eq!(buf.len(), self.h * self.w);
        rows.process(buf);
        let mut col = vec![Complex64::new(0.0, 0.0); self.h];
        for j in 0..self.w {
            for i in 0..self.h {
                col[i] = buf[i * self.w + j];
            }
            cols.process(&mut col);
            for i in 0..self.h {
                buf[i * self.w + j] = col[i];
            }
        }
    }
}

/// Position of raw FFT bin `k` in the DC-centered layout.
pub fn centered_index(k: usize, h: usize, w: usize) -> usize {
    let (r, c) = (k / w, k % w);
    ((r + h / 2) % h) * w + (c + w / 2) % w
}

/// Amplitude and phase of one channel, both DC-centered.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub amplitude: Vec<f64>,
    /// Radians in `(-pi, pi]`.
    pub phase: Vec<f64>,
}

fn check_plane(field: &[f64], h: usize, w: usize) -> Result<()> {
    ensure!(h >= 2 && w >= 2, "fft2 needs sides of at least 2, got {h}x{w}");
    ensure!(
        field.len() == h * w,
        "fft2 field has {} values, expected {h}x{w}",
        field.len()
    );
    ensure!(
        field.iter().all(|v| v.is_finite()),
        "fft2 input contains non-finite values"
    );
    Ok(())
}

fn raw_forward(fft: &Fft2, field: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.forward(&mut buf);
    buf
}

fn wrap_phase(p: f64) -> f64 {
    if p <= -PI {
        p + 2.0 * PI
    } else {
        p
    }
}

/// Forward transform of a real `h x w` field into a centered spectrum.
pub fn fft2_forward(field: &[f64], h: usize, w: usize) -> Result<Spectrum> {
    check_plane(field, h, w)?;
    let raw = raw_forward(&Fft2::new(h, w), field);
    let mut amplitude = vec![0.0; h * w];
    let mut phase = vec![0.0; h * w];
    for (k, z) in raw.iter().enumerate() {
        let c = centered_index(k, h, w);
        amplitude[c] = z.norm();
        phase[c] = wrap_phase(z.arg());
    }
    Ok(Spectrum {
        height: h,
        width: w,
        amplitude,
        phase,
    })
}

/// Inverse transform back to a real field; the imaginary residue is dropped.
pub fn fft2_inverse(spectrum: &Spectrum) -> Result<Vec<f64>> {
    let (h, w) = (spectrum.height, spectrum.width);
    check_plane(&spectrum.amplitude, h, w)?;
    check_plane(&spectrum.phase, h, w)?;
    let mut buf: Vec<Complex64> = (0..h * w)
        .map(|k| {
            let c = centered_index(k, h, w);
            Complex64::from_polar(spectrum.amplitude[c], spectrum.phase[c])
        })
        .collect();
    Fft2::new(h, w).inverse(&mut buf);
    Ok(buf.into_iter().map(|z| z.re).collect())
}

fn check_beta(beta: f64) -> Result<()> {
    ensure!(
        beta > 0.0 && beta <= 0.5,
        "cut-off ratio beta must lie in (0, 0.5], got {beta}"
    );
    Ok(())
}

/// Half-extent of the low-frequency rectangle along a side of length `n`.
fn half_extent(n: usize, beta: f64) -> usize {
    (beta * n as f64 / 2.0).floor() as usize
}

/// DC-centered rectangle of `(2*floor(beta*H/2)+1) x (2*floor(beta*W/2)+1)` bins.
pub fn low_freq_mask(h: usize, w: usize, beta: f64) -> Result<Vec<bool>> {
    check_beta(beta)?;
    let (rh, rw) = (half_extent(h, beta), half_extent(w, beta));
    let (ch, cw) = (h / 2, w / 2);
    Ok((0..h * w)
        .map(|k| {
            let (r, c) = (k / w, k % w);
            r.abs_diff(ch) <= rh && c.abs_diff(cw) <= rw
        })
        .collect())
}

/// Replace the low-frequency amplitude of `x` with that of `x_ref`, keeping
/// the phase of `x`, channel by channel.
pub fn amplitude_swap(x: &Tensor, x_ref: &Tensor, beta: f64) -> Result<Tensor> {
    ensure!(
        x.shape() == x_ref.shape(),
        "amplitude_swap shape mismatch: {:?} vs {:?}",
        x.shape(),
        x_ref.shape()
    );
    ensure!(x.rank() == 3, "amplitude_swap expects [C,H,W], got {:?}", x.shape());
    ensure!(x.is_finite() && x_ref.is_finite(), "amplitude_swap input not finite");
    let (h, w) = (x.shape()[1], x.shape()[2]);
    ensure!(h >= 2 && w >= 2, "amplitude_swap needs sides of at least 2");
    let mask = low_freq_mask(h, w, beta)?;
    let fft = Fft2::new(h, w);
    let mut out = Vec::with_capacity(x.len());
    for (plane, ref_plane) in x.data().chunks(h * w).zip(x_ref.data().chunks(h * w)) {
        let mut src = raw_forward(&fft, plane);
        let reference = raw_forward(&fft, ref_plane);
        for (k, z) in src.iter_mut().enumerate() {
            if mask[centered_index(k, h, w)] {
                let amp = reference[k].norm();
                let norm = z.norm();
                *z = if norm > 0.0 {
                    *z * (amp / norm)
                } else {
                    Complex64::new(amp, 0.0)
                };
            }
        }
        fft.inverse(&mut src);
        out.extend(src.iter().map(|z| z.re));
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub beta_max: f64,
    pub seed: u64,
}

impl AugConfig {
    pub fn new(beta_max: f64, seed: u64) -> Result<Self> {
        ensure!(
            beta_max > 0.0 && beta_max <= 0.5,
            "beta_max must lie in (0, 0.5], got {beta_max}"
        );
        Ok(AugConfig { beta_max, seed })
    }
}

/// Pairing used by [`batch_style_permute`]: sample `n` takes its style from
/// sample `partner[n]` with cut-off `beta[n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StylePlan {
    pub partner: Vec<usize>,
    pub beta: Vec<f64>,
}

/// Draw the permutation and per-sample cut-offs for a batch of `n` images.
pub fn style_plan(n: usize, config: &AugConfig) -> Result<StylePlan> {
    ensure!(n > 0, "style permutation needs a non-empty batch");
    ensure!(
        config.beta_max > 0.0 && config.beta_max <= 0.5,
        "beta_max must lie in (0, 0.5], got {}",
        config.beta_max
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut partner: Vec<usize> = (0..n).collect();
    if n > 1 {
        for _ in 0..DERANGEMENT_ATTEMPTS {
            partner.shuffle(&mut rng);
            if partner.iter().enumerate().all(|(i, &p)| i != p) {
                break;
            }
        }
    }
    // 1 - u maps [0, 1) onto (0, 1], so beta lands in (0, beta_max].
    let beta = (0..n)
        .map(|_| config.beta_max * (1.0 - rng.random::<f64>()))
        .collect();
    Ok(StylePlan { partner, beta })
}

/// Restyle every image with the low-frequency amplitude of a batch peer.
pub fn batch_style_permute(batch: &[Tensor], config: &AugConfig) -> Result<Vec<Tensor>> {
    let plan = style_plan(batch.len(), config)?;
    batch
        .iter()
        .zip(plan.partner.iter().zip(&plan.beta))
        .map(|(x, (&p, &beta))| amplitude_swap(x, &batch[p], beta))
        .collect()
}
