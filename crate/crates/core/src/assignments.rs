//! Exhaustive assignment searches: permutation-invariant training,
//! mixture-invariant training, the between-two-mixtures remix objective and
//! the in-batch alignment to shuffled shuffler outputs.
//!
//! Every search enumerates its candidate set completely and reports how many
//! candidates it scored. Ties resolve to the first candidate in enumeration
//! order.

use ndarray::{Array1, Array2, ArrayView2, ArrayView3, Axis};

use crate::error::{ensure, Error, Result};
use crate::metrics::SignalLoss;
use crate::scalar::Scalar;

pub const MAX_PIT_ESTIMATES: usize = 8;
pub const MAX_MIXIT_ESTIMATES: usize = 12;
pub const MAX_REMIX_PAIR_SOURCES: usize = 6;
pub const MAX_ALIGN_SOURCES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assignment {
    /// `perm[n]` is the estimate matched to reference `n`.
    Permutation(Vec<usize>),
    /// `rows[n] ∈ {0, 1}` is the mixture estimate `n` is summed into; the
    /// columns of the equivalent `2 × N` binary matrix each sum to one.
    Mixing(Vec<usize>),
    /// Remix split vectors; `p1[n]` sends the `n`-th output of the first
    /// pseudo-mixture to `x1`, `p2[n]` the `n`-th output of the second to `x2`.
    PairSplit { p1: Vec<bool>, p2: Vec<bool> },
}

impl Assignment {
    /// The `2 × N` binary mixing matrix for [`Assignment::Mixing`].
    pub fn mixing_matrix(&self) -> Option<Array2<u8>> {
        match self {
            Assignment::Mixing(rows) => {
                let mut m = Array2::zeros((2, rows.len()));
                for (n, &r) in rows.iter().enumerate() {
                    m[[r, n]] = 1;
                }
                Some(m)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult<T> {
    pub assignment: Assignment,
    pub loss: T,
    pub candidates_evaluated: u64,
}

/// Calls `visit` with every injective map `{0..k} -> {0..n}` in
/// lexicographic order.
pub fn for_each_injection(k: usize, n: usize, mut visit: impl FnMut(&[usize])) {
    fn rec(
        depth: usize,
        k: usize,
        n: usize,
        used: &mut [bool],
        cur: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if depth == k {
            visit(cur);
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(depth + 1, k, n, used, cur, visit);
                cur.pop();
                used[j] = false;
            }
        }
    }
    if k > n {
        return;
    }
    let mut used = vec![false; n];
    let mut cur = Vec::with_capacity(k);
    rec(0, k, n, &mut used, &mut cur, &mut visit);
}

/// `n! / (n - k)!`
pub fn falling_factorial(n: u64, k: u64) -> u64 {
    (n - k + 1..=n).product()
}

pub fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// All subsets of `{0..n}` with exactly `k` members, as bitmasks in
/// increasing order.
pub fn balanced_masks(n: usize, k: usize) -> Vec<u32> {
    (0u32..1 << n).filter(|m| m.count_ones() as usize == k).collect()
}

fn cost_table<T: Scalar, L: SignalLoss<T> + ?Sized>(
    references: ArrayView2<'_, T>,
    estimates: ArrayView2<'_, T>,
    loss_fn: &L,
) -> Result<Array2<T>> {
    let mut table = Array2::zeros((references.nrows(), estimates.nrows()));
    for (i, r) in references.outer_iter().enumerate() {
        for (j, e) in estimates.outer_iter().enumerate() {
            table[[i, j]] = loss_fn.loss(r, e)?;
        }
    }
    Ok(table)
}

fn min_over_injections<T: Scalar>(table: &Array2<T>) -> (Vec<usize>, T, u64) {
    let (k, n) = table.dim();
    let mut best = (Vec::new(), T::infinity());
    let mut count = 0u64;
    for_each_injection(k, n, |perm| {
        count += 1;
        let total: T = perm.iter().enumerate().map(|(i, &j)| table[[i, j]]).sum();
        if total < best.1 {
            best = (perm.to_vec(), total);
        }
    });
    (best.0, best.1, count)
}

/// `min_π Σ_n L(s_n, ŝ_{π(n)})` over injective `π`, with
/// `N_ref ≤ N_est ≤ MAX_PIT_ESTIMATES`.
pub fn pit_loss<T: Scalar, L: SignalLoss<T> + ?Sized>(
    references: ArrayView2<'_, T>,
    estimates: ArrayView2<'_, T>,
    loss_fn: &L,
) -> Result<AssignmentResult<T>> {
    let (n_ref, n_est) = (references.nrows(), estimates.nrows());
    ensure!(n_ref >= 1, InvalidArgument, "no references");
    ensure!(
        n_ref <= n_est,
        InvalidArgument,
        "{n_ref} references but only {n_est} estimates"
    );
    if n_est > MAX_PIT_ESTIMATES {
        return Err(Error::Capability(format!(
            "PIT over {n_est} estimates exceeds the exhaustive bound {MAX_PIT_ESTIMATES}"
        )));
    }
    ensure!(
        references.ncols() == estimates.ncols(),
        InvalidArgument,
        "length mismatch"
    );
    let table = cost_table(references, estimates, loss_fn)?;
    let (perm, loss, count) = min_over_injections(&table);
    Ok(AssignmentResult {
        assignment: Assignment::Permutation(perm),
        loss,
        candidates_evaluated: count,
    })
}

fn masked_sum<T: Scalar>(sources: ArrayView2<'_, T>, mask: u32, out: &mut Array1<T>) {
    out.fill(T::zero());
    for (n, row) in sources.outer_iter().enumerate() {
        if mask >> n & 1 == 1 {
            *out += &row;
        }
    }
}

/// `min_A Σ_i L(x_i, [Aŝ]_i)` over all `2 × N` binary matrices with unit
/// column sums; `2 ≤ N ≤ MAX_MIXIT_ESTIMATES`.
pub fn mixit_loss<T: Scalar, L: SignalLoss<T> + ?Sized>(
    mixtures: ArrayView2<'_, T>,
    estimates: ArrayView2<'_, T>,
    loss_fn: &L,
) -> Result<AssignmentResult<T>> {
    ensure!(mixtures.nrows() == 2, InvalidArgument, "MixIT needs exactly two mixtures");
    let n = estimates.nrows();
    ensure!(n >= 2, InvalidArgument, "MixIT needs at least two estimates, got {n}");
    if n > MAX_MIXIT_ESTIMATES {
        return Err(Error::Capability(format!(
            "MixIT over {n} estimates exceeds the exhaustive bound {MAX_MIXIT_ESTIMATES}"
        )));
    }
    let t = mixtures.ncols();
    ensure!(estimates.ncols() == t, InvalidArgument, "length mismatch");
    let mut first = Array1::zeros(t);
    let mut second = Array1::zeros(t);
    let full = (1u32 << n) - 1;
    let mut best = (0u32, T::infinity());
    let mut count = 0u64;
    // bit n set: estimate n goes to the second mixture
    for mask in 0..=full {
        count += 1;
        masked_sum(estimates, full & !mask, &mut first);
        masked_sum(estimates, mask, &mut second);
        let total = loss_fn.loss(mixtures.row(0), first.view())?
            + loss_fn.loss(mixtures.row(1), second.view())?;
        if total < best.1 {
            best = (mask, total);
        }
    }
    let rows = (0..n).map(|i| (best.0 >> i & 1) as usize).collect();
    Ok(AssignmentResult {
        assignment: Assignment::Mixing(rows),
        loss: best.1,
        candidates_evaluated: count,
    })
}

fn mask_to_bools(mask: u32, n: usize) -> Vec<bool> {
    (0..n).map(|i| mask >> i & 1 == 1).collect()
}

/// Between-two-mixtures remix objective:
/// `min_{p1,p2} L(x1, p1 ŝ1 + (1−p2) ŝ2) + L(x2, (1−p1) ŝ1 + p2 ŝ2)`
/// with `N_R/2` ones in each split vector, `C(N_R, N_R/2)²` candidates.
pub fn remix_pair_loss<T: Scalar, L: SignalLoss<T> + ?Sized>(
    x1: ndarray::ArrayView1<'_, T>,
    x2: ndarray::ArrayView1<'_, T>,
    solver_out1: ArrayView2<'_, T>,
    solver_out2: ArrayView2<'_, T>,
    loss_fn: &L,
) -> Result<AssignmentResult<T>> {
    let n_r = solver_out1.nrows();
    ensure!(
        solver_out2.nrows() == n_r,
        InvalidArgument,
        "both pseudo-mixtures need the same number of outputs"
    );
    ensure!(
        n_r >= 2 && n_r.is_multiple_of(2),
        InvalidArgument,
        "remix pair search needs an even N_R >= 2, got {n_r}"
    );
    if n_r > MAX_REMIX_PAIR_SOURCES {
        return Err(Error::Capability(format!(
            "remix pair search over N_R = {n_r} exceeds the exhaustive bound {MAX_REMIX_PAIR_SOURCES}"
        )));
    }
    let t = x1.len();
    ensure!(
        x2.len() == t && solver_out1.ncols() == t && solver_out2.ncols() == t,
        InvalidArgument,
        "length mismatch"
    );
    let full = (1u32 << n_r) - 1;
    let masks = balanced_masks(n_r, n_r / 2);
    let sums = |sources: ArrayView2<'_, T>| -> Vec<(Array1<T>, Array1<T>)> {
        masks
            .iter()
            .map(|&m| {
                let mut on = Array1::zeros(t);
                let mut off = Array1::zeros(t);
                masked_sum(sources, m, &mut on);
                masked_sum(sources, full & !m, &mut off);
                (on, off)
            })
            .collect()
    };
    let sums1 = sums(solver_out1);
    let sums2 = sums(solver_out2);
    let mut best = (0usize, 0usize, T::infinity());
    let mut count = 0u64;
    let mut est = Array1::zeros(t);
    for (i, (on1, off1)) in sums1.iter().enumerate() {
        for (j, (on2, off2)) in sums2.iter().enumerate() {
            count += 1;
            est.assign(on1);
            est += off2;
            let mut total = loss_fn.loss(x1, est.view())?;
            est.assign(off1);
            est += on2;
            total += loss_fn.loss(x2, est.view())?;
            if total < best.2 {
                best = (i, j, total);
            }
        }
    }
    Ok(AssignmentResult {
        assignment: Assignment::PairSplit {
            p1: mask_to_bools(masks[best.0], n_r),
            p2: mask_to_bools(masks[best.1], n_r),
        },
        loss: best.2,
        candidates_evaluated: count,
    })
}

/// Result of aligning solver outputs to shuffled shuffler outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAlignment<T> {
    /// `perms[[b, n]]` is the solver output matched to target `n` of item `b`.
    pub perms: Array2<usize>,
    /// Minimal per-item objective `Σ_n L(target_{b,n}, ŝ_{b,P(n)})`.
    pub item_losses: Vec<T>,
    /// Batch mean of `item_losses`.
    pub loss: T,
    pub candidates_per_item: u64,
}

/// Per-item permutation search aligning solver outputs with the shuffled
/// targets; the minimal objective is the RemixIT loss.
pub fn align_to_shuffler<T: Scalar, L: SignalLoss<T> + ?Sized>(
    shuffled_targets: ArrayView3<'_, T>,
    solver_out: ArrayView3<'_, T>,
    loss_fn: &L,
) -> Result<BatchAlignment<T>> {
    let (b, n_r, t) = shuffled_targets.dim();
    ensure!(
        solver_out.dim() == (b, n_r, t),
        InvalidArgument,
        "target shape {:?} != solver output shape {:?}",
        shuffled_targets.dim(),
        solver_out.dim()
    );
    ensure!(b >= 1 && n_r >= 1, InvalidArgument, "empty alignment problem");
    if n_r > MAX_ALIGN_SOURCES {
        return Err(Error::Capability(format!(
            "alignment over N_R = {n_r} exceeds the exhaustive bound {MAX_ALIGN_SOURCES}"
        )));
    }
    let mut perms = Array2::zeros((b, n_r));
    let mut item_losses = Vec::with_capacity(b);
    let mut candidates = 0;
    for i in 0..b {
        let table = cost_table(
            shuffled_targets.index_axis(Axis(0), i),
            solver_out.index_axis(Axis(0), i),
            loss_fn,
        )?;
        let (perm, loss, count) = min_over_injections(&table);
        perms.row_mut(i).assign(&Array1::from_vec(perm));
        item_losses.push(loss);
        candidates = count;
    }
    let loss = item_losses.iter().copied().sum::<T>() / T::c(b as f64);
    Ok(BatchAlignment {
        perms,
        item_losses,
        loss,
        candidates_per_item: candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ThresholdedSnr;
    use ndarray::{s, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn counting_helpers() {
        assert_eq!(falling_factorial(3, 3), 6);
        assert_eq!(falling_factorial(5, 2), 20);
        assert_eq!(binomial(6, 3), 20);
        assert_eq!(balanced_masks(4, 2).len(), 6);
        let mut n = 0;
        for_each_injection(2, 4, |_| n += 1);
        assert_eq!(n, 12);
    }

    #[test]
    fn pit_recovers_inverse_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let refs = random(&mut rng, (3, 32));
        // estimates[j] = refs[sigma[j]]
        let sigma = [2usize, 0, 1];
        let est = Array2::from_shape_fn((3, 32), |(j, t)| refs[[sigma[j], t]]);
        let loss = ThresholdedSnr::new(1e-3);
        let res = pit_loss(refs.view(), est.view(), &loss).unwrap();
        assert_eq!(res.assignment, Assignment::Permutation(vec![1, 2, 0]));
        assert_eq!(res.loss, 3.0 * loss.floor_db());
        assert_eq!(res.candidates_evaluated, 6);
    }

    #[test]
    fn pit_single_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let loss = ThresholdedSnr::new(1e-3);
        let r = random(&mut rng, (1, 8));
        let e = random(&mut rng, (1, 8));
        let res = pit_loss(r.view(), e.view(), &loss).unwrap();
        assert_eq!(res.candidates_evaluated, 1);
        assert_eq!(res.loss, loss.loss(r.row(0), e.row(0)).unwrap());

        let big = random(&mut rng, (9, 8));
        assert!(matches!(
            pit_loss(r.view(), big.view(), &loss),
            Err(Error::Capability(_))
        ));
        let e3 = random(&mut rng, (3, 8));
        let r2 = random(&mut rng, (2, 8));
        assert_eq!(pit_loss(r2.view(), e3.view(), &loss).unwrap().candidates_evaluated, 6);
    }

    #[test]
    fn mixit_perfect_and_zero_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, (2, 64));
        let loss = ThresholdedSnr::new(1e-3);
        let res = mixit_loss(x.view(), x.view(), &loss).unwrap();
        assert_eq!(res.loss, 2.0 * loss.floor_db());
        assert_eq!(res.assignment, Assignment::Mixing(vec![0, 1]));
        assert_eq!(res.candidates_evaluated, 4);
        let m = res.assignment.mixing_matrix().unwrap();
        assert_eq!(m.sum_axis(Axis(0)).to_vec(), vec![1, 1]);

        let mut three = Array2::zeros((3, 64));
        three.slice_mut(s![..2, ..]).assign(&x);
        let res3 = mixit_loss(x.view(), three.view(), &loss).unwrap();
        assert_eq!(res3.loss, res.loss);
        assert_eq!(res3.candidates_evaluated, 8);
    }

    #[test]
    fn mixit_rejects_out_of_range() {
        let loss = ThresholdedSnr::new(1e-3);
        let x = Array2::<f64>::ones((2, 4));
        assert!(matches!(
            mixit_loss(x.view(), Array2::ones((1, 4)).view(), &loss),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            mixit_loss(x.view(), Array2::ones((13, 4)).view(), &loss),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn remix_pair_counts_and_perfect_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let loss = ThresholdedSnr::new(1e-3);
        let s1 = random(&mut rng, (6, 32));
        let s2 = random(&mut rng, (6, 32));
        let x1 = random(&mut rng, (1, 32));
        let x2 = random(&mut rng, (1, 32));
        let res = remix_pair_loss(x1.row(0), x2.row(0), s1.view(), s2.view(), &loss).unwrap();
        assert_eq!(res.candidates_evaluated, 400);

        // x1 = s1[0] + s2[1], x2 = s1[1] + s2[0]
        let a = random(&mut rng, (2, 32));
        let b = random(&mut rng, (2, 32));
        let x1 = &a.row(0) + &b.row(1);
        let x2 = &a.row(1) + &b.row(0);
        let res = remix_pair_loss(x1.view(), x2.view(), a.view(), b.view(), &loss).unwrap();
        assert_eq!(res.loss, 2.0 * loss.floor_db());
        assert_eq!(
            res.assignment,
            Assignment::PairSplit {
                p1: vec![true, false],
                p2: vec![true, false]
            }
        );
        assert_eq!(res.candidates_evaluated, 4);

        let odd = random(&mut rng, (3, 32));
        assert!(matches!(
            remix_pair_loss(x1.view(), x2.view(), odd.view(), odd.view(), &loss),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn alignment_identity_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let loss = ThresholdedSnr::new(1e-3f64);
        let t = Array3::from_shape_fn((4, 3, 16), |_| rng.random_range(-1.0f64..1.0));
        let res = align_to_shuffler(t.view(), t.view(), &loss).unwrap();
        assert_eq!(res.candidates_per_item, 6);
        for row in res.perms.outer_iter() {
            assert_eq!(row.to_vec(), vec![0, 1, 2]);
        }
        assert!((res.loss - 3.0 * loss.floor_db()).abs() < 1e-12);

        let six = Array3::<f64>::zeros((1, 6, 16));
        assert!(matches!(
            align_to_shuffler(six.view(), six.view(), &loss),
            Err(Error::Capability(_))
        ));
    }
}
