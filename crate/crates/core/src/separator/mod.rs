//! STFT mask-based separator, its gradients and checkpoints.

pub mod checkpoint;
pub mod model;
pub mod stft;

pub use checkpoint::{Checkpoint, CheckpointHeader, Role};
pub use model::{separate, Architecture, MaskActivation, SeparatorModel, Tape};
pub use stft::{Stft, StftConfig};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::Result;
use crate::scalar::Scalar;

/// A differentiable single-mixture separator as seen by the training steps.
pub trait Separator<T: Scalar> {
    type Tape;

    fn n_outputs(&self) -> usize;

    fn n_params(&self) -> usize;

    /// `[N, T]` sources for one mixture.
    fn separate_one(&self, wave: ArrayView1<'_, T>) -> Result<Array2<T>>;

    fn forward_tape(&self, wave: ArrayView1<'_, T>) -> Result<(Array2<T>, Self::Tape)>;

    /// Adds parameter gradients into `param_grad`; returns the input
    /// gradient when `want_input` is set.
    fn backward(
        &self,
        tape: &Self::Tape,
        grad_sources: ArrayView2<'_, T>,
        param_grad: &mut [T],
        want_input: bool,
    ) -> Result<Option<Array1<T>>>;

    /// Scalars kept alive by a tape, for memory accounting.
    fn tape_floats(tape: &Self::Tape) -> usize;
}

impl<T: Scalar> Separator<T> for SeparatorModel<T> {
    type Tape = Tape<T>;

    fn n_outputs(&self) -> usize {
        SeparatorModel::n_outputs(self)
    }

    fn n_params(&self) -> usize {
        self.params().len()
    }

    fn separate_one(&self, wave: ArrayView1<'_, T>) -> Result<Array2<T>> {
        self.forward(wave)
    }

    fn forward_tape(&self, wave: ArrayView1<'_, T>) -> Result<(Array2<T>, Tape<T>)> {
        SeparatorModel::forward_tape(self, wave)
    }

    fn backward(
        &self,
        tape: &Tape<T>,
        grad_sources: ArrayView2<'_, T>,
        param_grad: &mut [T],
        want_input: bool,
    ) -> Result<Option<Array1<T>>> {
        SeparatorModel::backward(self, tape, grad_sources, param_grad, want_input)
    }

    fn tape_floats(tape: &Tape<T>) -> usize {
        tape.retained_floats()
    }
}
