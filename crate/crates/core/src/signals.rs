//! Time-domain signal containers, power ranking and the mixture-consistency
//! projection shared by every training method.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

/// A batch of single-channel mixtures, shape `[B, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformBatch<T> {
    samples: Array2<T>,
    sample_rate_hz: u32,
}

impl<T: Scalar> WaveformBatch<T> {
    pub fn new(samples: Array2<T>, sample_rate_hz: u32) -> Result<Self> {
        let (b, t) = samples.dim();
        ensure!(b >= 1 && t >= 1, InvalidArgument, "empty waveform batch [{b}, {t}]");
        ensure!(sample_rate_hz > 0, InvalidArgument, "sample rate must be positive");
        ensure!(
            samples.iter().all(|v| v.is_finite()),
            InvalidArgument,
            "waveform batch contains non-finite samples"
        );
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> ArrayView2<'_, T> {
        self.samples.view()
    }

    pub fn into_samples(self) -> Array2<T> {
        self.samples
    }

    pub fn batch_size(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn mixture(&self, b: usize) -> ArrayView1<'_, T> {
        self.samples.row(b)
    }
}

/// Which separator produced a set of estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Shuffler,
    Solver,
}

/// Separated sources per mixture, shape `[B, N, T]`.
///
/// Shuffler outputs are always constants to the optimizer, so
/// `origin == Shuffler` implies `grad_attached == false`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEstimates<T> {
    sources: Array3<T>,
    origin: Origin,
    grad_attached: bool,
}

impl<T: Scalar> SourceEstimates<T> {
    pub fn new(sources: Array3<T>, origin: Origin, grad_attached: bool) -> Result<Self> {
        let (b, n, t) = sources.dim();
        ensure!(
            b >= 1 && n >= 1 && t >= 1,
            InvalidArgument,
            "empty source estimates [{b}, {n}, {t}]"
        );
        ensure!(
            sources.iter().all(|v| v.is_finite()),
            InvalidArgument,
            "source estimates contain non-finite samples"
        );
        ensure!(
            !(origin == Origin::Shuffler && grad_attached),
            InvalidArgument,
            "shuffler outputs cannot carry gradients"
        );
        Ok(Self {
            sources,
            origin,
            grad_attached,
        })
    }

    /// Estimates with no gradient path, as produced by inference.
    pub fn detached(sources: Array3<T>, origin: Origin) -> Result<Self> {
        Self::new(sources, origin, false)
    }

    pub fn sources(&self) -> ArrayView3<'_, T> {
        self.sources.view()
    }

    pub fn into_sources(self) -> Array3<T> {
        self.sources
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn grad_attached(&self) -> bool {
        self.grad_attached
    }

    pub fn batch_size(&self) -> usize {
        self.sources.dim().0
    }

    pub fn n_sources(&self) -> usize {
        self.sources.dim().1
    }

    pub fn len(&self) -> usize {
        self.sources.dim().2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Per-item indices of the `n_r` highest-power sources, shape `[B, N_R]`,
/// ordered by descending power.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionIndex {
    indices: Array2<usize>,
}

impl SelectionIndex {
    pub fn new(indices: Array2<usize>) -> Self {
        Self { indices }
    }

    pub fn indices(&self) -> ArrayView2<'_, usize> {
        self.indices.view()
    }

    pub fn row(&self, b: usize) -> ArrayView1<'_, usize> {
        self.indices.row(b)
    }

    pub fn n_r(&self) -> usize {
        self.indices.ncols()
    }
}

/// Mean squared amplitude of a single waveform.
pub fn signal_power<T: Scalar>(x: ArrayView1<'_, T>) -> T {
    if x.is_empty() {
        return T::zero();
    }
    x.iter().map(|&v| v * v).sum::<T>() / T::c(x.len() as f64)
}

/// Mean squared amplitude per source, shape `[B, N]`.
pub fn source_power<T: Scalar>(estimates: &SourceEstimates<T>) -> Array2<T> {
    powers_of(estimates.sources())
}

pub(crate) fn powers_of<T: Scalar>(sources: ArrayView3<'_, T>) -> Array2<T> {
    let (b, n, _) = sources.dim();
    Array2::from_shape_fn((b, n), |(i, j)| {
        signal_power(sources.index_axis(Axis(0), i).row(j))
    })
}

/// Indices of the `n_r` largest entries of `powers`, descending; ties go to
/// the lower index.
pub fn rank_by_power<T: Scalar>(powers: &[T], n_r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..powers.len()).collect();
    // stable sort keeps lower indices first among equal powers
    order.sort_by(|&a, &b| {
        powers[b]
            .partial_cmp(&powers[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.truncate(n_r);
    order
}

pub fn select_top_sources<T: Scalar>(
    estimates: &SourceEstimates<T>,
    n_r: usize,
) -> Result<SelectionIndex> {
    select_top_of(estimates.sources(), n_r)
}

pub(crate) fn select_top_of<T: Scalar>(
    sources: ArrayView3<'_, T>,
    n_r: usize,
) -> Result<SelectionIndex> {
    let (b, n, _) = sources.dim();
    ensure!(
        n_r >= 1 && n_r <= n,
        InvalidArgument,
        "cannot select {n_r} of {n} sources"
    );
    let powers = powers_of(sources);
    let mut indices = Array2::zeros((b, n_r));
    for (i, row) in powers.outer_iter().enumerate() {
        let ranked = rank_by_power(row.as_slice().expect("contiguous"), n_r);
        for (j, idx) in ranked.into_iter().enumerate() {
            indices[[i, j]] = idx;
        }
    }
    Ok(SelectionIndex { indices })
}

/// Gathers the selected channels into a `[B, N_R, T]` set of estimates.
pub fn gather_selected<T: Scalar>(
    estimates: &SourceEstimates<T>,
    selection: &SelectionIndex,
) -> Result<SourceEstimates<T>> {
    ensure!(
        selection.indices.nrows() == estimates.batch_size(),
        InvalidArgument,
        "selection covers {} items, estimates have {}",
        selection.indices.nrows(),
        estimates.batch_size()
    );
    let (b, n, t) = estimates.sources.dim();
    let n_r = selection.n_r();
    let mut out = Array3::zeros((b, n_r, t));
    for i in 0..b {
        for (j, &idx) in selection.row(i).iter().enumerate() {
            ensure!(idx < n, InvalidArgument, "selection index {idx} out of range {n}");
            out.index_axis_mut(Axis(0), i)
                .row_mut(j)
                .assign(&estimates.sources.index_axis(Axis(0), i).row(idx));
        }
    }
    SourceEstimates::new(out, estimates.origin, estimates.grad_attached)
}

/// Uniform-residual projection of one item's sources `[N_R, T]` onto the set
/// summing to `mixture`.
pub fn project_consistent<T: Scalar>(
    sources: ArrayView2<'_, T>,
    mixture: ArrayView1<'_, T>,
) -> Result<Array2<T>> {
    let (n_r, t) = sources.dim();
    ensure!(n_r >= 1, InvalidArgument, "mixture consistency needs at least one source");
    ensure!(
        t == mixture.len(),
        InvalidArgument,
        "source length {t} != mixture length {}",
        mixture.len()
    );
    let scale = T::one() / T::c(n_r as f64);
    let residual = (&mixture - &sources.sum_axis(Axis(0))) * scale;
    Ok(&sources + &residual.insert_axis(Axis(0)))
}

/// Adjoint of [`project_consistent`] with respect to the sources: removes
/// the per-sample channel mean from the incoming gradient.
pub fn project_consistent_adjoint<T: Scalar>(grad_out: ArrayView2<'_, T>) -> Array2<T> {
    let n_r = grad_out.nrows();
    let mean = grad_out.sum_axis(Axis(0)) / T::c(n_r as f64);
    &grad_out - &mean.insert_axis(Axis(0))
}

/// Enforces `Σ_n out[b, n, :] = mixture[b, :]` with the uniform-residual rule
/// `out[b,n] = in[b,n] + (x_b − Σ_m in[b,m]) / N_R`.
pub fn mixture_consistency<T: Scalar>(
    selected: &SourceEstimates<T>,
    mixture: &WaveformBatch<T>,
) -> Result<SourceEstimates<T>> {
    ensure!(
        selected.batch_size() == mixture.batch_size(),
        InvalidArgument,
        "batch mismatch: {} sources vs {} mixtures",
        selected.batch_size(),
        mixture.batch_size()
    );
    let (b, n_r, t) = selected.sources.dim();
    let mut out = Array3::zeros((b, n_r, t));
    for i in 0..b {
        let projected =
            project_consistent(selected.sources.index_axis(Axis(0), i), mixture.mixture(i))?;
        out.index_axis_mut(Axis(0), i).assign(&projected);
    }
    SourceEstimates::new(out, selected.origin, selected.grad_attached)
}

/// Sum over channels for each batch item, `[B, N, T] -> [B, T]`.
pub fn channel_sum<T: Scalar>(sources: ArrayView3<'_, T>) -> Array2<T> {
    sources.sum_axis(Axis(1))
}
