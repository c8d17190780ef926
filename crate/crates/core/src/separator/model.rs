//! Frame-wise mask network.
//!
//! Per STFT frame: centred log-magnitude features (optionally stacked with
//! `context` neighbouring frames) → tanh hidden layer → sigmoid masks, one
//! set of `F` bins per output. Each mask scales the mixture spectrum (mixture
//! phase is kept) and is resynthesized to a waveform.
//!
//! Forward passes can record a [`Tape`]; [`SeparatorModel::backward`] turns
//! waveform-domain output gradients into parameter gradients and, when asked,
//! the gradient with respect to the input waveform.

use ndarray::linalg::general_mat_mul;
use ndarray::{
    s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip,
};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stft::{Stft, StftConfig};
use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::signals::{Origin, SourceEstimates, WaveformBatch};

const POWER_FLOOR: f64 = 1e-8;

/// How output logits become masks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskActivation {
    /// Independent masks in `(0, 1)`.
    #[default]
    Sigmoid,
    /// Masks that sum to one over the outputs in every bin.
    Softmax,
}

/// Layer sizes; parameters are laid out flat as `W1, b1, W2, b2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub n_outputs: usize,
    pub hidden: usize,
    /// Neighbouring frames on each side fed to the first layer.
    #[serde(default)]
    pub context: usize,
    #[serde(default)]
    pub mask: MaskActivation,
    #[serde(default)]
    pub stft: StftConfig,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            n_outputs: 6,
            hidden: 64,
            context: 0,
            mask: MaskActivation::Sigmoid,
            stft: StftConfig::default(),
        }
    }
}

impl Architecture {
    pub fn with_outputs(n_outputs: usize) -> Self {
        Self {
            n_outputs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        ensure!(self.n_outputs >= 1, InvalidConfig, "model needs at least one output");
        ensure!(self.hidden >= 1, InvalidConfig, "hidden layer must be non-empty");
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.stft.n_bins()
    }

    pub fn input_dim(&self) -> usize {
        (2 * self.context + 1) * self.n_bins()
    }

    pub fn mask_dim(&self) -> usize {
        self.n_outputs * self.n_bins()
    }

    fn offsets(&self) -> [usize; 5] {
        let w1 = self.hidden * self.input_dim();
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.mask_dim() * self.hidden;
        let b2 = w2 + self.mask_dim();
        [0, w1, b1, w2, b2]
    }

    pub fn n_params(&self) -> usize {
        self.offsets()[4]
    }
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar> {
    len: usize,
    spec: Array2<Complex<T>>,
    power: Array2<T>,
    features: Array2<T>,
    hidden: Array2<T>,
    masks: Array2<T>,
}

impl<T: Scalar> Tape<T> {
    /// Scalars held by the tape.
    pub fn retained_floats(&self) -> usize {
        2 * self.spec.len()
            + self.power.len()
            + self.features.len()
            + self.hidden.len()
            + self.masks.len()
    }

    /// Masks `[N, F, L]` computed in the forward pass.
    pub fn masks(&self, n_outputs: usize) -> Array3<T> {
        let (nf, l) = self.masks.dim();
        self.masks
            .clone()
            .into_shape_with_order((n_outputs, nf / n_outputs, l))
            .expect("mask layout")
    }

    pub fn spectrum(&self) -> ArrayView2<'_, Complex<T>> {
        self.spec.view()
    }
}

#[derive(Debug, Clone)]
pub struct SeparatorModel<T: Scalar> {
    arch: Architecture,
    params: Vec<T>,
    stft: Stft<T>,
}

impl<T: Scalar> SeparatorModel<T> {
    pub fn from_params(arch: Architecture, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        ensure!(
            params.len() == arch.n_params(),
            InvalidArgument,
            "architecture needs {} parameters, got {}",
            arch.n_params(),
            params.len()
        );
        ensure!(
            params.iter().all(|p| p.is_finite()),
            InvalidArgument,
            "non-finite parameters"
        );
        let stft = Stft::new(arch.stft)?;
        Ok(Self { arch, params, stft })
    }

    /// Glorot-uniform weights; output biases start at `logit(1/N)` so the
    /// masks initially sum to roughly one.
    pub fn random(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![T::zero(); arch.n_params()];
        let [w1, b1, w2, b2, end] = arch.offsets();
        let limit1 = (6.0 / (arch.input_dim() + arch.hidden) as f64).sqrt();
        for p in &mut params[w1..b1] {
            *p = T::c(rng.random_range(-limit1..limit1));
        }
        let limit2 = (6.0 / (arch.hidden + arch.mask_dim()) as f64).sqrt();
        for p in &mut params[w2..b2] {
            *p = T::c(rng.random_range(-limit2..limit2));
        }
        let bias = uniform_logit(arch.n_outputs);
        for p in &mut params[b2..end] {
            *p = T::c(bias);
        }
        Self::from_params(arch, params)
    }

    /// A model whose masks are exactly `1/N` everywhere.
    pub fn uniform(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![T::zero(); arch.n_params()];
        let [_, _, _, b2, end] = arch.offsets();
        let bias = T::c(uniform_logit(arch.n_outputs));
        for p in &mut params[b2..end] {
            *p = bias;
        }
        Self::from_params(arch, params)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn n_outputs(&self) -> usize {
        self.arch.n_outputs
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        ensure!(
            params.len() == self.params.len(),
            InvalidArgument,
            "parameter count mismatch: {} vs {}",
            params.len(),
            self.params.len()
        );
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn stft(&self) -> &Stft<T> {
        &self.stft
    }

    fn weights(&self) -> (ArrayView2<'_, T>, ArrayView1<'_, T>, ArrayView2<'_, T>, ArrayView1<'_, T>) {
        let [w1, b1, w2, b2, end] = self.arch.offsets();
        let a = &self.arch;
        (
            ArrayView2::from_shape((a.hidden, a.input_dim()), &self.params[w1..b1]).unwrap(),
            ArrayView1::from(&self.params[b1..w2]),
            ArrayView2::from_shape((a.mask_dim(), a.hidden), &self.params[w2..b2]).unwrap(),
            ArrayView1::from(&self.params[b2..end]),
        )
    }

    /// Separates one waveform into `[N, T]` sources and records a tape.
    pub fn forward_tape(&self, wave: ArrayView1<'_, T>) -> Result<(Array2<T>, Tape<T>)> {
        let len = wave.len();
        let spec = self.stft.analyze(wave)?;
        let (bins, frames) = spec.dim();
        let power = spec.mapv(|c| c.norm_sqr() + T::c(POWER_FLOOR));
        let mut logmag = power.mapv(|p| T::c(0.5) * p.ln());
        let frame_mean = logmag.mean_axis(Axis(0)).expect("bins > 0");
        logmag -= &frame_mean.insert_axis(Axis(0));

        let ctx = self.arch.context;
        let n_blocks = 2 * ctx + 1;
        let features = if ctx == 0 {
            logmag
        } else {
            let mut stacked = Array2::zeros((self.arch.input_dim(), frames));
            for j in 0..n_blocks {
                let block = s![j * bins..(j + 1) * bins, ..];
                let mut dst = stacked.slice_mut(block);
                for l in 0..frames {
                    let src = l as isize + j as isize - ctx as isize;
                    if src >= 0 && (src as usize) < frames {
                        dst.column_mut(l).assign(&logmag.column(src as usize));
                    }
                }
            }
            stacked
        };

        let (w1, b1, w2, b2) = self.weights();
        let mut hidden = w1.dot(&features);
        hidden += &b1.insert_axis(Axis(1));
        hidden.mapv_inplace(|v| v.tanh());
        let mut masks = w2.dot(&hidden);
        masks += &b2.insert_axis(Axis(1));
        match self.arch.mask {
            MaskActivation::Sigmoid => masks.mapv_inplace(sigmoid),
            MaskActivation::Softmax => softmax_over_outputs(&mut masks, self.arch.n_outputs, bins),
        }

        let n = self.arch.n_outputs;
        let mut sources = Array2::zeros((n, len));
        let mut masked = Array2::zeros((bins, frames));
        for k in 0..n {
            let m = masks.slice(s![k * bins..(k + 1) * bins, ..]);
            Zip::from(&mut masked)
                .and(&m)
                .and(&spec)
                .for_each(|y, &mv, &x| *y = x * mv);
            sources.row_mut(k).assign(&self.stft.synthesize(masked.view(), len)?);
        }
        let tape = Tape {
            len,
            spec,
            power,
            features,
            hidden,
            masks,
        };
        Ok((sources, tape))
    }

    /// Separates one waveform into `[N, T]` sources.
    pub fn forward(&self, wave: ArrayView1<'_, T>) -> Result<Array2<T>> {
        Ok(self.forward_tape(wave)?.0)
    }

    /// Backpropagates `grad_sources` (`[N, T]`, the loss gradient with respect
    /// to the separated waveforms) through the pass recorded in `tape`.
    /// Parameter gradients are added into `param_grad`; the gradient with
    /// respect to the input waveform is returned when `want_input` is set.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        grad_sources: ArrayView2<'_, T>,
        param_grad: &mut [T],
        want_input: bool,
    ) -> Result<Option<Array1<T>>> {
        let a = &self.arch;
        ensure!(
            grad_sources.dim() == (a.n_outputs, tape.len),
            InvalidArgument,
            "gradient shape {:?} != ({}, {})",
            grad_sources.dim(),
            a.n_outputs,
            tape.len
        );
        ensure!(
            param_grad.len() == a.n_params(),
            InvalidArgument,
            "gradient buffer holds {} values, model has {}",
            param_grad.len(),
            a.n_params()
        );
        let (bins, frames) = tape.spec.dim();
        let mut grad_masks = Array2::zeros((a.mask_dim(), frames));
        let mut grad_spec = if want_input {
            Some(Array2::<Complex<T>>::zeros((bins, frames)))
        } else {
            None
        };
        for k in 0..a.n_outputs {
            let g = grad_sources.row(k);
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            let gy = self.stft.synthesize_adjoint(g)?;
            let rows = s![k * bins..(k + 1) * bins, ..];
            Zip::from(grad_masks.slice_mut(rows))
                .and(&gy)
                .and(&tape.spec)
                .for_each(|dm, &gyv, &x| *dm = gyv.re * x.re + gyv.im * x.im);
            if let Some(gs) = grad_spec.as_mut() {
                Zip::from(gs)
                    .and(&gy)
                    .and(tape.masks.slice(rows))
                    .for_each(|d, &gyv, &m| *d += gyv * m);
            }
        }
        match a.mask {
            MaskActivation::Sigmoid => Zip::from(&mut grad_masks)
                .and(&tape.masks)
                .for_each(|d, &m| *d = *d * m * (T::one() - m)),
            MaskActivation::Softmax => {
                let mut dot = Array2::<T>::zeros((bins, frames));
                for k in 0..a.n_outputs {
                    let rows = s![k * bins..(k + 1) * bins, ..];
                    Zip::from(&mut dot)
                        .and(grad_masks.slice(rows))
                        .and(tape.masks.slice(rows))
                        .for_each(|acc, &d, &m| *acc += d * m);
                }
                for k in 0..a.n_outputs {
                    let rows = s![k * bins..(k + 1) * bins, ..];
                    Zip::from(grad_masks.slice_mut(rows))
                        .and(tape.masks.slice(rows))
                        .and(&dot)
                        .for_each(|d, &m, &acc| *d = m * (*d - acc));
                }
            }
        }

        let [w1o, b1o, w2o, b2o, end] = a.offsets();
        let (w1, _, w2, _) = self.weights();
        {
            let (head, tail) = param_grad.split_at_mut(w2o);
            let mut gw2 = ArrayViewMut2::from_shape((a.mask_dim(), a.hidden), &mut tail[..b2o - w2o])
                .expect("layout");
            general_mat_mul(T::one(), &grad_masks, &tape.hidden.t(), T::one(), &mut gw2);
            let mut gb2 = ArrayViewMut1::from(&mut tail[b2o - w2o..end - w2o]);
            gb2 += &grad_masks.sum_axis(Axis(1));

            let mut grad_hidden = w2.t().dot(&grad_masks);
            Zip::from(&mut grad_hidden)
                .and(&tape.hidden)
                .for_each(|d, &h| *d *= T::one() - h * h);

            let mut gw1 = ArrayViewMut2::from_shape((a.hidden, a.input_dim()), &mut head[w1o..b1o])
                .expect("layout");
            general_mat_mul(T::one(), &grad_hidden, &tape.features.t(), T::one(), &mut gw1);
            let mut gb1 = ArrayViewMut1::from(&mut head[b1o..w2o]);
            gb1 += &grad_hidden.sum_axis(Axis(1));

            let Some(mut grad_spec) = grad_spec else {
                return Ok(None);
            };
            let grad_features = w1.t().dot(&grad_hidden);
            let ctx = a.context;
            let mut grad_logmag = Array2::<T>::zeros((bins, frames));
            let n_blocks = 2 * ctx + 1;
            for j in 0..n_blocks {
                let block = grad_features.slice(s![j * bins..(j + 1) * bins, ..]);
                for l in 0..frames {
                    let src = l as isize + j as isize - ctx as isize;
                    if src >= 0 && (src as usize) < frames {
                        let mut col = grad_logmag.column_mut(src as usize);
                        col += &block.column(l);
                    }
                }
            }
            let mean = grad_logmag.mean_axis(Axis(0)).expect("bins > 0");
            grad_logmag -= &mean.insert_axis(Axis(0));
            Zip::from(&mut grad_spec)
                .and(&grad_logmag)
                .and(&tape.spec)
                .and(&tape.power)
                .for_each(|d, &gl, &x, &p| *d += x * (gl / p));
            Ok(Some(self.stft.analyze_adjoint(grad_spec.view(), tape.len)?))
        }
    }

    /// Inference over a batch.
    pub fn separate(&self, wave: &WaveformBatch<T>, origin: Origin) -> Result<SourceEstimates<T>> {
        let (b, len) = (wave.batch_size(), wave.len());
        let mut out = Array3::zeros((b, self.arch.n_outputs, len));
        for i in 0..b {
            out.index_axis_mut(Axis(0), i)
                .assign(&self.forward(wave.mixture(i))?);
        }
        SourceEstimates::detached(out, origin)
    }

    /// Masks `[N, F, L]` for one waveform.
    pub fn masks(&self, wave: ArrayView1<'_, T>) -> Result<Array3<T>> {
        let (_, tape) = self.forward_tape(wave)?;
        Ok(tape.masks(self.arch.n_outputs))
    }
}

fn uniform_logit(n: usize) -> f64 {
    let p = 1.0 / n as f64;
    (p / (1.0 - p)).ln()
}

fn softmax_over_outputs<T: Scalar>(logits: &mut Array2<T>, n: usize, bins: usize) {
    let frames = logits.ncols();
    for f in 0..bins {
        for l in 0..frames {
            let mut max = T::neg_infinity();
            for k in 0..n {
                max = max.max(logits[[k * bins + f, l]]);
            }
            let mut total = T::zero();
            for k in 0..n {
                let e = (logits[[k * bins + f, l]] - max).exp();
                logits[[k * bins + f, l]] = e;
                total += e;
            }
            for k in 0..n {
                logits[[k * bins + f, l]] /= total;
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// `separate` as a free function over a batch.
pub fn separate<T: Scalar>(
    model: &SeparatorModel<T>,
    wave: &WaveformBatch<T>,
) -> Result<SourceEstimates<T>> {
    model.separate(wave, Origin::Solver)
}
