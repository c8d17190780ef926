//! Teacher (shuffler) and student (solver) weights.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

pub const RING_CAPACITY: usize = 5;
pub const ALPHA_UNSUPERVISED: f64 = 0.8;
pub const ALPHA_SEMI_SUPERVISED: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateProtocol {
    /// `θ_T ← α θ_T + (1 − α) θ_S` after every epoch.
    #[default]
    EmaEpochEnd,
    /// The teacher never changes.
    Frozen,
}

/// Top-scoring parameter snapshots, best first.
#[derive(Debug, Clone, Default)]
pub struct CheckpointRing<T> {
    capacity: usize,
    entries: Vec<(f64, Vec<T>)>,
}

impl<T: Scalar> CheckpointRing<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: Vec::new(),
        }
    }

    /// Keeps `params` if it ranks among the best `capacity` scores. Ties keep
    /// the earlier snapshot.
    pub fn record(&mut self, score: f64, params: &[T]) -> Result<()> {
        ensure!(!score.is_nan(), InvalidArgument, "checkpoint score is NaN");
        if let Some((_, first)) = self.entries.first() {
            ensure!(
                first.len() == params.len(),
                InvalidArgument,
                "checkpoint has {} parameters, ring holds {}",
                params.len(),
                first.len()
            );
        }
        let pos = self.entries.partition_point(|(s, _)| *s >= score);
        if pos >= self.capacity {
            return Ok(());
        }
        self.entries.insert(pos, (score, params.to_vec()));
        self.entries.truncate(self.capacity);
        Ok(())
    }

    /// Elementwise mean of the retained snapshots.
    pub fn average(&self) -> Result<Vec<T>> {
        let Some((_, first)) = self.entries.first() else {
            return Err(Error::InvalidState("no checkpoint recorded".into()));
        };
        let mut sum = vec![0.0f64; first.len()];
        for (_, p) in &self.entries {
            for (s, v) in sum.iter_mut().zip(p) {
                *s += v.f64();
            }
        }
        let n = self.entries.len() as f64;
        Ok(sum.into_iter().map(|s| T::c(s / n)).collect())
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|(s, _)| *s).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

#[derive(Debug, Clone)]
pub struct TeacherStudentState<T> {
    teacher: Vec<T>,
    student: Vec<T>,
    alpha: f64,
    protocol: UpdateProtocol,
    epoch: u64,
    ring: CheckpointRing<T>,
}

impl<T: Scalar> TeacherStudentState<T> {
    /// Under `EmaEpochEnd` the student starts as a copy of the teacher and
    /// `student_init` must be `None` or of equal length. Under `Frozen` the
    /// student comes from `student_init` (it may have a different size).
    pub fn init_from_pretrained(
        pretrained: Vec<T>,
        student_init: Option<Vec<T>>,
        protocol: UpdateProtocol,
        alpha: f64,
    ) -> Result<Self> {
        ensure!(
            (0.0..=1.0).contains(&alpha),
            InvalidArgument,
            "alpha must lie in [0, 1], got {alpha}"
        );
        let student = match (protocol, student_init) {
            (UpdateProtocol::EmaEpochEnd, None) => pretrained.clone(),
            (UpdateProtocol::EmaEpochEnd, Some(s)) => {
                ensure!(
                    s.len() == pretrained.len(),
                    InvalidArgument,
                    "EMA teacher and student need equal architectures ({} vs {} parameters)",
                    pretrained.len(),
                    s.len()
                );
                pretrained.clone()
            }
            (UpdateProtocol::Frozen, Some(s)) => s,
            (UpdateProtocol::Frozen, None) => pretrained.clone(),
        };
        Ok(Self {
            teacher: pretrained,
            student,
            alpha,
            protocol,
            epoch: 0,
            ring: CheckpointRing::new(RING_CAPACITY),
        })
    }

    pub fn epoch_end_update(&mut self) {
        if self.protocol == UpdateProtocol::EmaEpochEnd {
            let a = T::c(self.alpha);
            let b = T::c(1.0 - self.alpha);
            for (t, s) in self.teacher.iter_mut().zip(&self.student) {
                *t = a * *t + b * *s;
            }
        }
        self.epoch += 1;
    }

    pub fn record_checkpoint(&mut self, score: f64) -> Result<()> {
        self.ring.record(score, &self.student)
    }

    pub fn average_best(&self) -> Result<Vec<T>> {
        self.ring.average()
    }

    pub fn teacher(&self) -> &[T] {
        &self.teacher
    }

    pub fn student(&self) -> &[T] {
        &self.student
    }

    pub fn student_mut(&mut self) -> &mut [T] {
        &mut self.student
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn protocol(&self) -> UpdateProtocol {
        self.protocol
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn ring(&self) -> &CheckpointRing<T> {
        &self.ring
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    #[test]
    fn ema_starts_equal() {
        let st = TeacherStudentState::init_from_pretrained(vec![1.0f64, -2.0], None, UpdateProtocol::EmaEpochEnd, 0.8)
            .unwrap();
        assert_eq!(st.teacher(), st.student());
    }

    #[test]
    fn ema_rejects_mismatched_student() {
        let r = TeacherStudentState::init_from_pretrained(
            vec![1.0f64; 4],
            Some(vec![0.0; 3]),
            UpdateProtocol::EmaEpochEnd,
            0.8,
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn frozen_allows_smaller_student() {
        let st = TeacherStudentState::init_from_pretrained(
            vec![1.0f64; 6],
            Some(vec![0.0; 3]),
            UpdateProtocol::Frozen,
            0.8,
        )
        .unwrap();
        assert_eq!(st.student().len(), 3);
    }

    #[test]
    fn ema_arithmetic() {
        for (alpha, expect) in [(0.8, 0.8), (1.0, 1.0), (0.0, 0.0)] {
            let mut st =
                TeacherStudentState::init_from_pretrained(vec![1.0f64], None, UpdateProtocol::EmaEpochEnd, alpha)
                    .unwrap();
            st.student_mut()[0] = 0.0;
            st.epoch_end_update();
            assert_eq!(st.teacher()[0], expect);
            assert_eq!(st.epoch(), 1);
        }
    }

    #[test]
    fn ring_averages() {
        let mut ring = CheckpointRing::<f64>::new(5);
        assert!(matches!(ring.average(), Err(Error::InvalidState(_))));
        ring.record(1.0, &[3.0]).unwrap();
        assert_eq!(ring.average().unwrap(), vec![3.0]);
        let mut ring = CheckpointRing::<f64>::new(5);
        for _ in 0..5 {
            ring.record(2.0, &[1.5, -1.0]).unwrap();
        }
        assert_eq!(ring.average().unwrap(), vec![1.5, -1.0]);
        let mut ring = CheckpointRing::<f64>::new(5);
        for (i, v) in [0.0, 2.0, 4.0, 6.0, 8.0].iter().enumerate() {
            ring.record(i as f64, &[*v]).unwrap();
        }
        assert_eq!(ring.average().unwrap(), vec![4.0]);
    }

    proptest! {
        #[test]
        fn ema_contracts_distance(
            t in prop::collection::vec(-10.0f64..10.0, 1..8),
            alpha in 0.0f64..=1.0,
        ) {
            let mut st = TeacherStudentState::init_from_pretrained(t.clone(), None, UpdateProtocol::EmaEpochEnd, alpha).unwrap();
            for (i, s) in st.student_mut().iter_mut().enumerate() {
                *s = (i as f64) - 3.0;
            }
            let dist = |st: &TeacherStudentState<f64>| {
                st.teacher().iter().zip(st.student()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            };
            let before = dist(&st);
            st.epoch_end_update();
            prop_assert!((dist(&st) - alpha * before).abs() <= 1e-9 * (1.0 + before));
        }

        #[test]
        fn frozen_teacher_is_constant(
            t in prop::collection::vec(-10.0f64..10.0, 1..8),
            epochs in 1usize..20,
        ) {
            let hash = |v: &[f64]| {
                let mut h = DefaultHasher::new();
                for x in v { x.to_bits().hash(&mut h); }
                h.finish()
            };
            let mut st = TeacherStudentState::init_from_pretrained(t.clone(), Some(vec![0.5; 3]), UpdateProtocol::Frozen, 0.8).unwrap();
            let h0 = hash(st.teacher());
            for e in 0..epochs {
                st.student_mut()[0] = e as f64;
                st.epoch_end_update();
                prop_assert_eq!(hash(st.teacher()), h0);
            }
        }

        #[test]
        fn ring_keeps_top_scores(scores in prop::collection::vec(-50.0f64..50.0, 1..30)) {
            let mut ring = CheckpointRing::<f64>::new(RING_CAPACITY);
            for (i, s) in scores.iter().enumerate() {
                ring.record(*s, &[i as f64]).unwrap();
                prop_assert!(ring.len() <= RING_CAPACITY);
            }
            let mut sorted = scores.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            sorted.truncate(RING_CAPACITY);
            prop_assert_eq!(ring.scores(), sorted);
        }
    }
}
