//! Short-time Fourier analysis/synthesis with a zero-padded Hann window and
//! least-squares overlap-add, plus the adjoints of both transforms.
//!
//! Frame `l` covers samples `[l·hop − win/2, l·hop − win/2 + win)`; samples
//! outside the signal read as zero. Synthesis divides by the summed squared
//! window, so analysis followed by synthesis is the identity.

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub window_length: usize,
    pub hop_length: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            window_length: 400,
            hop_length: 160,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.fft_size >= 2 && self.fft_size.is_multiple_of(2),
            InvalidConfig,
            "fft_size must be even, got {}",
            self.fft_size
        );
        ensure!(
            self.window_length >= 2 && self.window_length <= self.fft_size,
            InvalidConfig,
            "window_length must be in [2, fft_size]"
        );
        ensure!(
            self.hop_length >= 1 && self.hop_length <= self.window_length / 2,
            InvalidConfig,
            "hop_length must be in [1, window_length / 2] for full overlap"
        );
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    fn pad(&self) -> usize {
        self.window_length / 2
    }

    /// Frames needed to cover `len` samples with a half-window margin.
    pub fn n_frames(&self, len: usize) -> usize {
        let span = len + 2 * self.pad() - self.window_length;
        span.div_ceil(self.hop_length) + 1
    }

    fn frame_start(&self, l: usize) -> isize {
        (l * self.hop_length) as isize - self.pad() as isize
    }
}

/// Periodic Hann window.
pub fn hann<T: Scalar>(len: usize) -> Array1<T> {
    Array1::from_shape_fn(len, |n| {
        let phase = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
        T::c(0.5 - 0.5 * phase.cos())
    })
}

/// Planned transforms for one configuration.
#[derive(Clone)]
pub struct Stft<T: Scalar> {
    cfg: StftConfig,
    window: Array1<T>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
}

impl<T: Scalar> std::fmt::Debug for Stft<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl<T: Scalar> Stft<T> {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: hann(cfg.window_length),
            forward: planner.plan_fft_forward(cfg.fft_size),
            inverse: planner.plan_fft_inverse(cfg.fft_size),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    fn check_len(&self, len: usize) -> Result<()> {
        ensure!(
            len >= self.cfg.window_length,
            InvalidArgument,
            "signal of {len} samples is shorter than the {}-sample window",
            self.cfg.window_length
        );
        Ok(())
    }

    /// Complex spectrogram `[F, L]` of one waveform.
    pub fn analyze(&self, wave: ArrayView1<'_, T>) -> Result<Array2<Complex<T>>> {
        let len = wave.len();
        self.check_len(len)?;
        let n_fft = self.cfg.fft_size;
        let frames = self.cfg.n_frames(len);
        let bins = self.cfg.n_bins();
        let mut out = Array2::zeros((bins, frames));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        for l in 0..frames {
            let start = self.cfg.frame_start(l);
            for (n, slot) in buf.iter_mut().enumerate() {
                let idx = start + n as isize;
                let v = if n < self.cfg.window_length && idx >= 0 && (idx as usize) < len {
                    wave[idx as usize] * self.window[n]
                } else {
                    T::zero()
                };
                *slot = Complex::new(v, T::zero());
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                out[[k, l]] = buf[k];
            }
        }
        Ok(out)
    }

    /// Summed squared window at each output sample.
    fn window_energy(&self, len: usize, frames: usize) -> Array1<T> {
        let mut norm = Array1::zeros(len);
        for l in 0..frames {
            let start = self.cfg.frame_start(l);
            for n in 0..self.cfg.window_length {
                let idx = start + n as isize;
                if idx >= 0 && (idx as usize) < len {
                    norm[idx as usize] += self.window[n] * self.window[n];
                }
            }
        }
        norm
    }

    /// Least-squares inverse of [`Stft::analyze`], producing `len` samples.
    pub fn synthesize(&self, spec: ArrayView2<'_, Complex<T>>, len: usize) -> Result<Array1<T>> {
        self.check_len(len)?;
        let n_fft = self.cfg.fft_size;
        let bins = self.cfg.n_bins();
        let frames = self.cfg.n_frames(len);
        ensure!(
            spec.dim() == (bins, frames),
            InvalidArgument,
            "spectrogram shape {:?} != expected ({bins}, {frames})",
            spec.dim()
        );
        let mut out = Array1::zeros(len);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        let scale = T::one() / T::c(n_fft as f64);
        for l in 0..frames {
            fill_hermitian(&mut buf, spec.column(l));
            self.inverse.process(&mut buf);
            let start = self.cfg.frame_start(l);
            for n in 0..self.cfg.window_length {
                let idx = start + n as isize;
                if idx >= 0 && (idx as usize) < len {
                    out[idx as usize] += self.window[n] * buf[n].re * scale;
                }
            }
        }
        let norm = self.window_energy(len, frames);
        out.zip_mut_with(&norm, |o, &d| *o /= d);
        Ok(out)
    }

    /// Gradient with respect to the spectrogram of a loss whose gradient with
    /// respect to the synthesized waveform is `grad_wave`. Complex entries
    /// hold `(∂/∂Re, ∂/∂Im)`.
    pub fn synthesize_adjoint(&self, grad_wave: ArrayView1<'_, T>) -> Result<Array2<Complex<T>>> {
        let len = grad_wave.len();
        self.check_len(len)?;
        let n_fft = self.cfg.fft_size;
        let bins = self.cfg.n_bins();
        let frames = self.cfg.n_frames(len);
        let norm = self.window_energy(len, frames);
        let mut out = Array2::zeros((bins, frames));
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        let edge = T::one() / T::c(n_fft as f64);
        let inner = T::c(2.0) * edge;
        for l in 0..frames {
            let start = self.cfg.frame_start(l);
            for (n, slot) in buf.iter_mut().enumerate() {
                let idx = start + n as isize;
                let v = if n < self.cfg.window_length && idx >= 0 && (idx as usize) < len {
                    let i = idx as usize;
                    self.window[n] * grad_wave[i] / norm[i]
                } else {
                    T::zero()
                };
                *slot = Complex::new(v, T::zero());
            }
            self.forward.process(&mut buf);
            for k in 0..bins {
                out[[k, l]] = if k == 0 || k == bins - 1 {
                    Complex::new(buf[k].re * edge, T::zero())
                } else {
                    buf[k] * inner
                };
            }
        }
        Ok(out)
    }

    /// Gradient with respect to the input waveform given the gradient with
    /// respect to its spectrogram.
    pub fn analyze_adjoint(
        &self,
        grad_spec: ArrayView2<'_, Complex<T>>,
        len: usize,
    ) -> Result<Array1<T>> {
        self.check_len(len)?;
        let n_fft = self.cfg.fft_size;
        let bins = self.cfg.n_bins();
        let frames = self.cfg.n_frames(len);
        ensure!(
            grad_spec.dim() == (bins, frames),
            InvalidArgument,
            "gradient shape {:?} != expected ({bins}, {frames})",
            grad_spec.dim()
        );
        let mut out = Array1::zeros(len);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
        for l in 0..frames {
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = if k < bins {
                    grad_spec[[k, l]]
                } else {
                    Complex::new(T::zero(), T::zero())
                };
            }
            self.inverse.process(&mut buf);
            let start = self.cfg.frame_start(l);
            for n in 0..self.cfg.window_length {
                let idx = start + n as isize;
                if idx >= 0 && (idx as usize) < len {
                    out[idx as usize] += self.window[n] * buf[n].re;
                }
            }
        }
        Ok(out)
    }
}

/// Hermitian extension of a one-sided spectrum into `buf`.
fn fill_hermitian<T: Scalar>(buf: &mut [Complex<T>], half: ArrayView1<'_, Complex<T>>) {
    let n = buf.len();
    let bins = half.len();
    for k in 0..bins {
        buf[k] = half[k];
    }
    buf[0].im = T::zero();
    buf[bins - 1].im = T::zero();
    for k in 1..bins - 1 {
        buf[n - k] = half[k].conj();
    }
}

/// Batch analysis, `[B, T] -> [B, F, L]`.
pub fn stft_analyze<T: Scalar>(
    wave: ArrayView2<'_, T>,
    cfg: StftConfig,
) -> Result<Array3<Complex<T>>> {
    let stft = Stft::new(cfg)?;
    let (b, len) = wave.dim();
    stft.check_len(len)?;
    let mut out = Array3::zeros((b, cfg.n_bins(), cfg.n_frames(len)));
    for (i, row) in wave.outer_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&stft.analyze(row)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array1::from_shape_fn(len, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shape_and_validation() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_bins(), 257);
        assert_eq!(cfg.n_frames(16000), 101);
        assert!(StftConfig { hop_length: 300, ..cfg }.validate().is_err());
        assert!(StftConfig { window_length: 600, ..cfg }.validate().is_err());
        let stft = Stft::<f64>::new(cfg).unwrap();
        assert!(stft.analyze(Array1::zeros(399).view()).is_err());
    }

    #[test]
    fn zero_in_zero_out() {
        let spec = stft_analyze(Array2::<f32>::zeros((2, 800)).view(), StftConfig::default()).unwrap();
        assert!(spec.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn round_trip_reconstructs() {
        let stft = Stft::<f64>::new(StftConfig::default()).unwrap();
        for (len, seed) in [(400, 1), (1234, 2), (16000, 3)] {
            let x = noise(len, seed);
            let y = stft.synthesize(stft.analyze(x.view()).unwrap().view(), len).unwrap();
            let err = (&x - &y).mapv(|v| v * v).sum().sqrt() / x.mapv(|v| v * v).sum().sqrt();
            assert!(err < 1e-10, "relative error {err}");
        }
        let stft32 = Stft::<f32>::new(StftConfig::default()).unwrap();
        let x = noise(8000, 4).mapv(|v| v as f32);
        let y = stft32.synthesize(stft32.analyze(x.view()).unwrap().view(), 8000).unwrap();
        let err = (&x - &y).mapv(|v| v * v).sum().sqrt() / x.mapv(|v| v * v).sum().sqrt();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn bin_centred_tone_concentrates_energy() {
        let cfg = StftConfig::default();
        let stft = Stft::<f64>::new(cfg).unwrap();
        let bin = 40;
        let x = Array1::from_shape_fn(8000, |t| {
            (2.0 * std::f64::consts::PI * bin as f64 * t as f64 / cfg.fft_size as f64).sin()
        });
        let spec = stft.analyze(x.view()).unwrap();
        // interior frame; the Hann main lobe spans the centre bin and its neighbours
        let col = spec.column(20);
        let total: f64 = col.iter().map(|c| c.norm_sqr()).sum();
        let lobe: f64 = (bin - 1..=bin + 1).map(|k| col[k].norm_sqr()).sum();
        assert!(lobe / total >= 0.9, "main-lobe fraction {}", lobe / total);
        let peak = (0..cfg.n_bins())
            .max_by(|&a, &b| col[a].norm_sqr().total_cmp(&col[b].norm_sqr()))
            .unwrap();
        assert_eq!(peak, bin);
    }

    #[test]
    fn adjoints_satisfy_dot_product_identity() {
        let stft = Stft::<f64>::new(StftConfig::default()).unwrap();
        let len = 1000;
        let x = noise(len, 5);
        let frames = stft.config().n_frames(len);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Array2::from_shape_fn((257, frames), |_| {
            Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        // <A x, G> with the real inner product on (Re, Im) pairs
        let ax = stft.analyze(x.view()).unwrap();
        let lhs: f64 = ax.iter().zip(g.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        let rhs = x.dot(&stft.analyze_adjoint(g.view(), len).unwrap());
        assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0), "{lhs} vs {rhs}");

        // synthesis ignores imaginary parts at DC and Nyquist
        for l in 0..frames {
            g[[0, l]].im = 0.0;
            g[[256, l]].im = 0.0;
        }
        let w = noise(len, 7);
        let sg = stft.synthesize(g.view(), len).unwrap();
        let lhs = sg.dot(&w);
        let adj = stft.synthesize_adjoint(w.view()).unwrap();
        let rhs: f64 = g.iter().zip(adj.iter()).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
        assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
