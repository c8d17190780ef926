//! Pseudo-mixture construction: between-two-mixtures remixing and in-batch
//! channel shuffling, plus the inverse used to rebuild observed mixtures.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::signals::rank_by_power;

/// Rejection-sampling attempts before a shuffle is declared infeasible.
pub const SHUFFLE_RETRY_CAP: usize = 10_000;

/// Where the two dominant sources of each mixture are placed in a
/// between-two-mixtures remix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairPlacement {
    /// The strongest source of both mixtures goes to `x̃1`, the second
    /// strongest of both to `x̃2`.
    #[default]
    DominantTogether,
    /// The strongest source of each mixture stays in its own pseudo-mixture.
    DominantStays,
}

/// Split vectors for remixing two mixtures' sources; `true` entries of `pi1`
/// go to `x̃1`, `true` entries of `pi2` go to `x̃2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRemixPlan {
    pub pi1: Vec<bool>,
    pub pi2: Vec<bool>,
}

impl PairRemixPlan {
    pub fn n_r(&self) -> usize {
        self.pi1.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n_r = self.pi1.len();
        ensure!(
            self.pi2.len() == n_r && n_r.is_multiple_of(2) && n_r >= 2,
            InvalidArgument,
            "pair plan needs two split vectors of equal even length"
        );
        let half = n_r / 2;
        let ones = |v: &[bool]| v.iter().filter(|&&b| b).count();
        ensure!(
            ones(&self.pi1) == half && ones(&self.pi2) == half,
            InvalidArgument,
            "each split vector must contain exactly {half} ones"
        );
        Ok(())
    }
}

/// Builds a pair plan from per-source powers. The two strongest sources of
/// each mixture are placed per `placement`; the other `N_R − 2` entries of
/// each vector are drawn uniformly subject to `N_R/2` ones.
pub fn make_pair_plan<T: Scalar, R: Rng + ?Sized>(
    powers1: &[T],
    powers2: &[T],
    placement: PairPlacement,
    rng: &mut R,
) -> Result<PairRemixPlan> {
    let n_r = powers1.len();
    ensure!(
        powers2.len() == n_r,
        InvalidArgument,
        "power vectors differ in length"
    );
    ensure!(
        n_r >= 2 && n_r.is_multiple_of(2),
        InvalidArgument,
        "pair remixing needs an even N_R >= 2, got {n_r}"
    );
    let split = |powers: &[T], top_value: bool, rng: &mut R| -> Vec<bool> {
        let order = rank_by_power(powers, n_r);
        let mut v = vec![false; n_r];
        v[order[0]] = top_value;
        v[order[1]] = !top_value;
        let mut rest = order[2..].to_vec();
        rest.shuffle(rng);
        for &i in rest.iter().take(n_r / 2 - 1) {
            v[i] = true;
        }
        v
    };
    let pi1 = split(powers1, true, rng);
    let pi2 = match placement {
        // (1 − π2) selects x̃1, so the dominant source of mixture 2 gets a zero
        PairPlacement::DominantTogether => split(powers2, false, rng),
        PairPlacement::DominantStays => split(powers2, true, rng),
    };
    Ok(PairRemixPlan { pi1, pi2 })
}

/// `x̃1 = π1 s̃1 + (1−π2) s̃2`, `x̃2 = (1−π1) s̃1 + π2 s̃2`.
pub fn remix_pair<T: Scalar>(
    sources1: ArrayView2<'_, T>,
    sources2: ArrayView2<'_, T>,
    plan: &PairRemixPlan,
) -> Result<(Array1<T>, Array1<T>)> {
    plan.validate()?;
    let n_r = plan.n_r();
    ensure!(
        sources1.nrows() == n_r && sources2.nrows() == n_r,
        InvalidArgument,
        "plan covers {n_r} sources, got {} and {}",
        sources1.nrows(),
        sources2.nrows()
    );
    let t = sources1.ncols();
    ensure!(sources2.ncols() == t, InvalidArgument, "length mismatch");
    let mut x1 = Array1::zeros(t);
    let mut x2 = Array1::zeros(t);
    for n in 0..n_r {
        if plan.pi1[n] {
            x1 += &sources1.row(n);
        } else {
            x2 += &sources1.row(n);
        }
        if plan.pi2[n] {
            x2 += &sources2.row(n);
        } else {
            x1 += &sources2.row(n);
        }
    }
    Ok((x1, x2))
}

/// Adjoint of [`remix_pair`]: routes pseudo-mixture gradients back to the
/// sources that built them.
pub fn remix_pair_adjoint<T: Scalar>(
    grad1: ArrayView1<'_, T>,
    grad2: ArrayView1<'_, T>,
    plan: &PairRemixPlan,
) -> (Array2<T>, Array2<T>) {
    let n_r = plan.n_r();
    let t = grad1.len();
    let mut g1 = Array2::zeros((n_r, t));
    let mut g2 = Array2::zeros((n_r, t));
    for n in 0..n_r {
        g1.row_mut(n)
            .assign(if plan.pi1[n] { &grad1 } else { &grad2 });
        g2.row_mut(n)
            .assign(if plan.pi2[n] { &grad2 } else { &grad1 });
    }
    (g1, g2)
}

/// Per-channel batch permutations. `perms[n][origin]` is the pseudo-mixture
/// that receives channel `n` of mixture `origin`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchShuffleSpec {
    perms: Vec<Vec<usize>>,
    inverse: Vec<Vec<usize>>,
    seed: u64,
}

impl BatchShuffleSpec {
    /// Builds a spec from explicit permutations, checking bijectivity and
    /// the no-recollision condition.
    pub fn from_perms(perms: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        let spec = Self::unchecked(perms, seed)?;
        ensure!(
            spec.no_recollision(),
            Infeasible,
            "sources from one mixture would be remixed together"
        );
        Ok(spec)
    }

    /// Like [`BatchShuffleSpec::from_perms`] but skips the no-recollision
    /// check; for fixtures that need e.g. the identity shuffle.
    pub fn unchecked(perms: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        ensure!(!perms.is_empty(), InvalidArgument, "shuffle needs at least one channel");
        let b = perms[0].len();
        let mut inverse = Vec::with_capacity(perms.len());
        for p in &perms {
            ensure!(p.len() == b, InvalidArgument, "permutations differ in length");
            let mut inv = vec![usize::MAX; b];
            for (origin, &dest) in p.iter().enumerate() {
                ensure!(
                    dest < b && inv[dest] == usize::MAX,
                    InvalidArgument,
                    "channel permutation is not a bijection"
                );
                inv[dest] = origin;
            }
            inverse.push(inv);
        }
        Ok(Self {
            perms,
            inverse,
            seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.perms[0].len()
    }

    pub fn n_r(&self) -> usize {
        self.perms.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    /// `origin(n, b)`: the mixture whose channel `n` lands in pseudo-mixture `b`.
    pub fn origin(&self, n: usize, b: usize) -> usize {
        self.inverse[n][b]
    }

    /// `destination(n, b)`: the pseudo-mixture receiving channel `n` of mixture `b`.
    pub fn destination(&self, n: usize, b: usize) -> usize {
        self.perms[n][b]
    }

    /// Every pseudo-mixture draws its channels from pairwise distinct mixtures.
    pub fn no_recollision(&self) -> bool {
        let b = self.batch_size();
        let mut seen = vec![usize::MAX; b];
        for dest in 0..b {
            for n in 0..self.n_r() {
                let o = self.inverse[n][dest];
                if seen[o] == dest {
                    return false;
                }
                seen[o] = dest;
            }
        }
        true
    }
}

/// Draws a shuffle with the first channel fixed to the identity and the
/// rest rejection-sampled until no pseudo-mixture contains two sources of the
/// same mixture.
pub fn make_batch_shuffle(b: usize, n_r: usize, seed: u64) -> Result<BatchShuffleSpec> {
    ensure!(n_r >= 1, InvalidArgument, "N_R must be positive");
    if b < n_r {
        return Err(Error::Infeasible(format!(
            "cannot remix {n_r} channels across a batch of {b} without recollision"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<usize> = (0..b).collect();
    for _ in 0..SHUFFLE_RETRY_CAP {
        let mut perms = vec![identity.clone()];
        for _ in 1..n_r {
            let mut p = identity.clone();
            p.shuffle(&mut rng);
            perms.push(p);
        }
        let spec = BatchShuffleSpec::unchecked(perms, seed)?;
        if spec.no_recollision() {
            return Ok(spec);
        }
    }
    Err(Error::Infeasible(format!(
        "no valid shuffle for B = {b}, N_R = {n_r} after {SHUFFLE_RETRY_CAP} draws"
    )))
}

fn check_shape<T>(sources: &ArrayView3<'_, T>, spec: &BatchShuffleSpec) -> Result<()> {
    let (b, n, _) = sources.dim();
    ensure!(
        b == spec.batch_size() && n == spec.n_r(),
        InvalidArgument,
        "sources [{b}, {n}, _] do not match shuffle spec [{}, {}]",
        spec.batch_size(),
        spec.n_r()
    );
    Ok(())
}

/// Channel-wise shuffled sources: `out[b, n] = sources[origin(n, b), n]`.
pub fn shuffle_sources<T: Scalar>(
    sources: ArrayView3<'_, T>,
    spec: &BatchShuffleSpec,
) -> Result<Array3<T>> {
    check_shape(&sources, spec)?;
    let mut out = Array3::zeros(sources.dim());
    for b in 0..spec.batch_size() {
        for n in 0..spec.n_r() {
            out.index_axis_mut(Axis(0), b)
                .row_mut(n)
                .assign(&sources.index_axis(Axis(0), spec.origin(n, b)).row(n));
        }
    }
    Ok(out)
}

/// Pseudo-mixtures `x̃_b = Σ_n sources[origin(n, b), n]`.
pub fn remix_batch<T: Scalar>(
    sources: ArrayView3<'_, T>,
    spec: &BatchShuffleSpec,
) -> Result<Array2<T>> {
    Ok(shuffle_sources(sources, spec)?.sum_axis(Axis(1)))
}

/// Restores the original placement of aligned solver outputs and sums the
/// channels: `reconstructed_b = Σ_n aligned[destination(n, b), n]`.
pub fn unshuffle_and_remix<T: Scalar>(
    solver_out_aligned: ArrayView3<'_, T>,
    spec: &BatchShuffleSpec,
) -> Result<Array2<T>> {
    check_shape(&solver_out_aligned, spec)?;
    let (b, n_r, t) = solver_out_aligned.dim();
    let mut out = Array2::zeros((b, t));
    for i in 0..b {
        let mut row = out.row_mut(i);
        for n in 0..n_r {
            row += &solver_out_aligned
                .index_axis(Axis(0), spec.destination(n, i))
                .row(n);
        }
    }
    Ok(out)
}

/// Adjoint of [`unshuffle_and_remix`]: `grad_aligned[b', n] = grad[origin(n, b')]`.
pub fn unshuffle_and_remix_adjoint<T: Scalar>(
    grad: ArrayView2<'_, T>,
    spec: &BatchShuffleSpec,
) -> Array3<T> {
    let (b, t) = grad.dim();
    let n_r = spec.n_r();
    let mut out = Array3::zeros((b, n_r, t));
    for i in 0..b {
        for n in 0..n_r {
            out.index_axis_mut(Axis(0), i)
                .row_mut(n)
                .assign(&grad.row(spec.origin(n, i)));
        }
    }
    out
}

/// Adjoint of [`remix_batch`]: `grad_sources[o, n] = grad[destination(n, o)]`.
pub fn remix_batch_adjoint<T: Scalar>(
    grad: ArrayView2<'_, T>,
    spec: &BatchShuffleSpec,
) -> Array3<T> {
    let (b, t) = grad.dim();
    let n_r = spec.n_r();
    let mut out = Array3::zeros((b, n_r, t));
    for o in 0..b {
        for n in 0..n_r {
            out.index_axis_mut(Axis(0), o)
                .row_mut(n)
                .assign(&grad.row(spec.destination(n, o)));
        }
    }
    out
}
