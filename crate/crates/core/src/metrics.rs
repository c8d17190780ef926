//! Signal-level training losses and evaluation metrics.

use ndarray::{ArrayView1, ArrayViewMut1, Axis};
use serde::{Deserialize, Serialize};

use crate::assignments::for_each_injection;
use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::signals::{select_top_of, SourceEstimates};

/// Reported in place of ±∞ so metric logs stay finite.
pub const SI_SDR_SENTINEL_DB: f64 = 300.0;

/// Loss hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Soft threshold; `1e-3` clamps the SNR at 30 dB.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Pair losses below this value (dB) are multiplied by zero.
    #[serde(default)]
    pub l_thres: Option<f64>,
}

fn default_tau() -> f64 {
    1e-3
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            l_thres: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.tau > 0.0 && self.tau.is_finite(),
            InvalidConfig,
            "tau must be positive, got {}",
            self.tau
        );
        if let Some(l) = self.l_thres {
            ensure!(l.is_finite(), InvalidConfig, "l_thres must be finite");
        }
        Ok(())
    }
}

/// A loss between a reference and an estimate waveform, in dB.
pub trait SignalLoss<T> {
    fn loss(&self, reference: ArrayView1<'_, T>, estimate: ArrayView1<'_, T>) -> Result<T>;
}

impl<T, F> SignalLoss<T> for F
where
    F: Fn(ArrayView1<'_, T>, ArrayView1<'_, T>) -> Result<T>,
{
    fn loss(&self, reference: ArrayView1<'_, T>, estimate: ArrayView1<'_, T>) -> Result<T> {
        self(reference, estimate)
    }
}

/// A [`SignalLoss`] with an analytic gradient in the estimate.
pub trait DifferentiableLoss<T>: SignalLoss<T> {
    /// Adds `scale * d loss / d estimate` into `grad`.
    fn accumulate_grad(
        &self,
        reference: ArrayView1<'_, T>,
        estimate: ArrayView1<'_, T>,
        scale: T,
        grad: ArrayViewMut1<'_, T>,
    ) -> Result<()>;
}

/// Negative SNR with a soft threshold:
/// `10 log10(‖y − ŷ‖² + τ‖y‖²) − 10 log10 ‖y‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdedSnr<T> {
    pub tau: T,
}

impl<T: Scalar> ThresholdedSnr<T> {
    pub fn new(tau: T) -> Self {
        Self { tau }
    }

    /// The value reached by a perfect estimate, `10 log10 τ`.
    pub fn floor_db(&self) -> T {
        T::c(10.0) * self.tau.log10()
    }
}

impl<T: Scalar> Default for ThresholdedSnr<T> {
    fn default() -> Self {
        Self::new(T::c(default_tau()))
    }
}

fn energies<T: Scalar>(y: ArrayView1<'_, T>, y_hat: ArrayView1<'_, T>) -> Result<(T, T)> {
    ensure!(
        y.len() == y_hat.len(),
        InvalidArgument,
        "reference length {} != estimate length {}",
        y.len(),
        y_hat.len()
    );
    let mut ref_energy = T::zero();
    let mut err_energy = T::zero();
    for (&a, &b) in y.iter().zip(y_hat.iter()) {
        ref_energy += a * a;
        let d = a - b;
        err_energy += d * d;
    }
    ensure!(
        ref_energy > T::zero(),
        InvalidArgument,
        "thresholded SNR is undefined for an all-zero reference"
    );
    Ok((ref_energy, err_energy))
}

impl<T: Scalar> SignalLoss<T> for ThresholdedSnr<T> {
    fn loss(&self, reference: ArrayView1<'_, T>, estimate: ArrayView1<'_, T>) -> Result<T> {
        let (ref_energy, err_energy) = energies(reference, estimate)?;
        // log10(r/P + τ) equals the two-log form and hits 10 log10 τ exactly at r = 0
        Ok(T::c(10.0) * (err_energy / ref_energy + self.tau).log10())
    }
}

impl<T: Scalar> DifferentiableLoss<T> for ThresholdedSnr<T> {
    fn accumulate_grad(
        &self,
        reference: ArrayView1<'_, T>,
        estimate: ArrayView1<'_, T>,
        scale: T,
        mut grad: ArrayViewMut1<'_, T>,
    ) -> Result<()> {
        let (ref_energy, err_energy) = energies(reference, estimate)?;
        ensure!(
            grad.len() == estimate.len(),
            InvalidArgument,
            "gradient buffer length mismatch"
        );
        let denom = err_energy + self.tau * ref_energy;
        let k = scale * T::c(-20.0 / std::f64::consts::LN_10) / denom;
        for ((g, &y), &yh) in grad.iter_mut().zip(reference.iter()).zip(estimate.iter()) {
            *g += k * (y - yh);
        }
        Ok(())
    }
}

/// Thresholded SNR loss in dB.
pub fn thresholded_snr_loss<T: Scalar>(
    reference: ArrayView1<'_, T>,
    estimate: ArrayView1<'_, T>,
    tau: T,
) -> Result<T> {
    ensure!(tau > T::zero(), InvalidArgument, "tau must be positive");
    ThresholdedSnr::new(tau).loss(reference, estimate)
}

/// Scale-invariant signal-to-distortion ratio in dB, clamped to
/// `±SI_SDR_SENTINEL_DB`.
pub fn si_sdr<T: Scalar>(reference: ArrayView1<'_, T>, estimate: ArrayView1<'_, T>) -> Result<T> {
    ensure!(
        reference.len() == estimate.len(),
        InvalidArgument,
        "reference length {} != estimate length {}",
        reference.len(),
        estimate.len()
    );
    let ref_energy: T = reference.dot(&reference);
    let est_energy: T = estimate.dot(&estimate);
    if ref_energy <= T::zero() {
        return Err(Error::UndefinedMetric("SI-SDR of an all-zero reference".into()));
    }
    if est_energy <= T::zero() {
        return Err(Error::UndefinedMetric("SI-SDR of an all-zero estimate".into()));
    }
    let alpha = estimate.dot(&reference) / ref_energy;
    let mut target = T::zero();
    let mut distortion = T::zero();
    for (&y, &yh) in reference.iter().zip(estimate.iter()) {
        let t = alpha * y;
        target += t * t;
        let d = t - yh;
        distortion += d * d;
    }
    let cap = T::c(SI_SDR_SENTINEL_DB);
    if distortion <= T::zero() {
        return Ok(cap);
    }
    if target <= T::zero() {
        return Ok(-cap);
    }
    Ok((T::c(10.0) * (target / distortion).log10()).max(-cap).min(cap))
}

/// Best-permutation mean SI-SDR for each mixture.
///
/// The `K` highest-power estimates are scored against the `K` references,
/// so low-power extra outputs (noise, silence) are ignored.
pub fn evaluate_separation<T: Scalar>(
    estimates: &SourceEstimates<T>,
    references: &SourceEstimates<T>,
) -> Result<Vec<T>> {
    let est = estimates.sources();
    let refs = references.sources();
    let (b, n, t) = est.dim();
    let (rb, k, rt) = refs.dim();
    ensure!(b == rb && t == rt, InvalidArgument, "estimate/reference shape mismatch");
    ensure!(
        k <= n,
        InvalidArgument,
        "{k} references but only {n} estimates"
    );
    let selection = select_top_of(est, k)?;
    let mut scores = Vec::with_capacity(b);
    for i in 0..b {
        let e = est.index_axis(Axis(0), i);
        let r = refs.index_axis(Axis(0), i);
        let chosen = selection.row(i);
        let mut table = vec![T::zero(); k * k];
        for a in 0..k {
            for c in 0..k {
                table[a * k + c] = si_sdr(r.row(a), e.row(chosen[c]))?;
            }
        }
        let mut best = T::neg_infinity();
        for_each_injection(k, k, |perm| {
            let total: T = perm.iter().enumerate().map(|(a, &c)| table[a * k + c]).sum();
            if total > best {
                best = total;
            }
        });
        scores.push(best / T::c(k as f64));
    }
    Ok(scores)
}
