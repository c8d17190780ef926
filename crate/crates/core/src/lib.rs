//! Self-remixing unsupervised source separation.
//!
//! A teacher ("shuffler") separates mixtures and remixes its estimates into
//! pseudo-mixtures; a student ("solver") separates those and is trained to
//! reconstruct the observed mixtures. Mixture-invariant training, permutation
//! invariant training, RemixIT and RCCL are available as baselines.

pub mod assignments;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod remixer;
pub mod scalar;
pub mod separator;
pub mod signals;
pub mod teacher_student;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type SeparatorModelF32 = separator::SeparatorModel<f32>;
pub type SeparatorModelF64 = separator::SeparatorModel<f64>;

pub type DatasetF32 = datagen::Dataset<f32>;
pub type DatasetF64 = datagen::Dataset<f64>;
pub type TeacherStudentStateF32 = teacher_student::TeacherStudentState<f32>;
pub type TeacherStudentStateF64 = teacher_student::TeacherStudentState<f64>;
