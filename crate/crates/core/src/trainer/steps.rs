//! One optimization step per method: forward passes, assignment search,
//! loss and gradients with respect to the parameters of each role.
//!
//! Steps never touch parameters; they return the loss and gradient buffers
//! and leave the update to the caller.

use log::warn;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Method, RemixMode, TrainConfig};
use crate::assignments::{align_to_shuffler, mixit_loss, pit_loss, remix_pair_loss, Assignment};
use crate::error::{ensure, Error, Result};
use crate::metrics::{DifferentiableLoss, SignalLoss, ThresholdedSnr};
use crate::remixer::{
    make_batch_shuffle, make_pair_plan, remix_batch, remix_batch_adjoint, remix_pair,
    remix_pair_adjoint, shuffle_sources, unshuffle_and_remix, unshuffle_and_remix_adjoint,
    PairPlacement, PairRemixPlan,
};
use crate::scalar::Scalar;
use crate::separator::Separator;
use crate::signals::{project_consistent, project_consistent_adjoint, rank_by_power, signal_power};

/// Per-step settings resolved from a [`TrainConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepSettings {
    pub tau: f64,
    pub l_thres: Option<f64>,
    pub n_sources: usize,
    pub n_remix: usize,
    pub shuffler_mc: bool,
    pub solver_mc: bool,
    pub placement: PairPlacement,
    pub remix_mode: Option<RemixMode>,
    pub rccl_detach: bool,
}

impl StepSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            tau: cfg.loss.tau,
            l_thres: cfg.loss.l_thres,
            n_sources: cfg.n_sources,
            n_remix: cfg.n_remix,
            shuffler_mc: cfg.mc.shuffler,
            solver_mc: cfg.solver_mc(),
            placement: cfg.placement,
            remix_mode: cfg.remix_mode(),
            rccl_detach: cfg.debug.rccl_detach_first_pass,
        }
    }
}

impl Default for StepSettings {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default())
    }
}

/// Gradient buffers kept apart per role. For RCCL both refer to the same
/// model and `shuffler` holds the contribution of the first separation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleGrads<T> {
    pub shuffler: Vec<T>,
    pub solver: Vec<T>,
}

impl<T: Scalar> RoleGrads<T> {
    pub fn zeros(n_shuffler: usize, n_solver: usize) -> Self {
        Self {
            shuffler: vec![T::zero(); n_shuffler],
            solver: vec![T::zero(); n_solver],
        }
    }

    /// `self += w · other`.
    pub fn add_scaled(&mut self, other: &RoleGrads<T>, w: T) -> Result<()> {
        ensure!(
            self.shuffler.len() == other.shuffler.len() && self.solver.len() == other.solver.len(),
            InvalidArgument,
            "gradient buffers of different models"
        );
        for (a, b) in self.shuffler.iter_mut().zip(&other.shuffler) {
            *a += w * *b;
        }
        for (a, b) in self.solver.iter_mut().zip(&other.solver) {
            *a += w * *b;
        }
        Ok(())
    }

    /// Sum of both buffers, for a model that plays both roles.
    pub fn combined(&self) -> Result<Vec<T>> {
        ensure!(
            self.shuffler.len() == self.solver.len(),
            InvalidArgument,
            "roles have different parameter counts"
        );
        Ok(self
            .shuffler
            .iter()
            .zip(&self.solver)
            .map(|(a, b)| *a + *b)
            .collect())
    }

    pub fn scale(&mut self, w: T) {
        for g in self.shuffler.iter_mut().chain(self.solver.iter_mut()) {
            *g *= w;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    /// Raw per-mixture (or per-pair) losses before thresholding, dB.
    pub item_losses: Vec<f64>,
    /// Pairs whose contribution was zeroed by the threshold.
    pub zeroed: usize,
    /// Mixtures left out because they had no partner.
    pub dropped: usize,
    pub remixit_loss: Option<f64>,
    pub self_remixing_loss: Option<f64>,
    pub supervised_loss: Option<f64>,
    pub candidates_per_item: u64,
    /// Solver output matched to each shuffled target, `[B, N_R]`.
    pub alignment: Option<Array2<usize>>,
    /// Largest number of tape scalars alive at once.
    pub peak_tape_floats: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: T,
    pub grads: RoleGrads<T>,
    pub stats: StepStats,
}

fn loss_fn<T: Scalar>(s: &StepSettings) -> ThresholdedSnr<T> {
    ThresholdedSnr::new(T::c(s.tau))
}

fn grad_of<T: Scalar>(
    l: &ThresholdedSnr<T>,
    reference: ArrayView1<'_, T>,
    estimate: ArrayView1<'_, T>,
    scale: T,
) -> Result<Array1<T>> {
    let mut g = Array1::zeros(estimate.len());
    l.accumulate_grad(reference, estimate, scale, g.view_mut())?;
    Ok(g)
}

/// Adjacent pairs `(0,1), (2,3), …`; an odd last item is dropped.
pub fn mixture_pairs(batch: usize) -> (Vec<(usize, usize)>, usize) {
    let pairs: Vec<_> = (0..batch / 2).map(|p| (2 * p, 2 * p + 1)).collect();
    let dropped = batch % 2;
    if dropped == 1 {
        warn!("odd batch of {batch}: dropping the last mixture from pairing");
    }
    (pairs, dropped)
}

/// Top-`n_r` rows by power, optionally projected onto `Σ = mixture`.
fn select_project<T: Scalar>(
    out: ArrayView2<'_, T>,
    n_r: usize,
    mixture: Option<ArrayView1<'_, T>>,
) -> Result<(Vec<usize>, Array2<T>)> {
    ensure!(
        n_r >= 1 && n_r <= out.nrows(),
        InvalidArgument,
        "cannot select {n_r} of {} outputs",
        out.nrows()
    );
    let powers: Vec<T> = out.outer_iter().map(signal_power).collect();
    let sel = rank_by_power(&powers, n_r);
    let mut est = Array2::zeros((n_r, out.ncols()));
    for (j, &i) in sel.iter().enumerate() {
        est.row_mut(j).assign(&out.row(i));
    }
    if let Some(x) = mixture {
        est = project_consistent(est.view(), x)?;
    }
    Ok((sel, est))
}

/// Adjoint of [`select_project`]: gradient on all outputs, plus the
/// gradient on the mixture when the projection was applied.
fn select_project_adjoint<T: Scalar>(
    grad: ArrayView2<'_, T>,
    sel: &[usize],
    n_out: usize,
    mc: bool,
) -> (Array2<T>, Option<Array1<T>>) {
    let (g, g_mix) = if mc {
        let n_r = T::c(grad.nrows() as f64);
        (
            project_consistent_adjoint(grad),
            Some(grad.sum_axis(Axis(0)) / n_r),
        )
    } else {
        (grad.to_owned(), None)
    };
    let mut full = Array2::zeros((n_out, grad.ncols()));
    for (j, &i) in sel.iter().enumerate() {
        full.row_mut(i).assign(&g.row(j));
    }
    (full, g_mix)
}

/// Supervised permutation-invariant training on mixtures with references
/// (`refs[b]` is `[K_b, T]`).
pub fn step_supervised_pit<T: Scalar, S: Separator<T>>(
    model: &S,
    mixtures: ArrayView2<'_, T>,
    refs: &[Array2<T>],
    settings: &StepSettings,
) -> Result<StepOutput<T>> {
    let b = mixtures.nrows();
    ensure!(b >= 1, InvalidArgument, "empty batch");
    if refs.len() != b {
        return Err(Error::InvalidData(format!(
            "PIT needs references for all {b} mixtures, got {}",
            refs.len()
        )));
    }
    let l = loss_fn::<T>(settings);
    let scale = T::c(1.0 / b as f64);
    let mut grads = RoleGrads::zeros(0, model.n_params());
    let mut stats = StepStats::default();
    let mut total = T::zero();
    for (i, r) in refs.iter().enumerate() {
        let (out, tape) = model.forward_tape(mixtures.row(i))?;
        stats.peak_tape_floats = stats.peak_tape_floats.max(S::tape_floats(&tape));
        let res = pit_loss(r.view(), out.view(), &l)?;
        let Assignment::Permutation(perm) = res.assignment else {
            unreachable!("PIT yields a permutation")
        };
        let mut g = Array2::zeros(out.dim());
        for (n, &j) in perm.iter().enumerate() {
            l.accumulate_grad(r.row(n), out.row(j), scale, g.row_mut(j))?;
        }
        model.backward(&tape, g.view(), &mut grads.solver, false)?;
        total += res.loss;
        stats.item_losses.push(res.loss.f64());
        stats.candidates_per_item = res.candidates_evaluated;
    }
    let loss = total * scale;
    stats.supervised_loss = Some(loss.f64());
    Ok(StepOutput { loss, grads, stats })
}

/// Mixture-invariant training on mixtures of adjacent pairs.
pub fn step_mixit<T: Scalar, S: Separator<T>>(
    model: &S,
    mixtures: ArrayView2<'_, T>,
    settings: &StepSettings,
) -> Result<StepOutput<T>> {
    ensure!(
        model.n_outputs() >= 2 * settings.n_sources,
        InvalidConfig,
        "MixIT needs at least 2K = {} outputs, model has {}",
        2 * settings.n_sources,
        model.n_outputs()
    );
    let (pairs, dropped) = mixture_pairs(mixtures.nrows());
    ensure!(!pairs.is_empty(), InvalidArgument, "MixIT needs at least two mixtures");
    let l = loss_fn::<T>(settings);
    let scale = T::c(1.0 / pairs.len() as f64);
    let mut grads = RoleGrads::zeros(0, model.n_params());
    let mut stats = StepStats {
        dropped,
        ..Default::default()
    };
    let mut total = T::zero();
    for &(i, j) in &pairs {
        let mom = &mixtures.row(i) + &mixtures.row(j);
        let (out, tape) = model.forward_tape(mom.view())?;
        stats.peak_tape_floats = stats.peak_tape_floats.max(S::tape_floats(&tape));
        let refs = ndarray::stack![Axis(0), mixtures.row(i), mixtures.row(j)];
        let res = mixit_loss(refs.view(), out.view(), &l)?;
        let Assignment::Mixing(rows) = &res.assignment else {
            unreachable!("MixIT yields a mixing assignment")
        };
        let mut est = Array2::zeros((2, out.ncols()));
        for (n, &r) in rows.iter().enumerate() {
            let mut dst = est.row_mut(r);
            dst += &out.row(n);
        }
        let g_est = [
            grad_of(&l, refs.row(0), est.row(0), scale)?,
            grad_of(&l, refs.row(1), est.row(1), scale)?,
        ];
        let mut g = Array2::zeros(out.dim());
        for (n, &r) in rows.iter().enumerate() {
            g.row_mut(n).assign(&g_est[r]);
        }
        model.backward(&tape, g.view(), &mut grads.solver, false)?;
        total += res.loss;
        stats.item_losses.push(res.loss.f64());
        stats.candidates_per_item = res.candidates_evaluated;
    }
    Ok(StepOutput {
        loss: total * scale,
        grads,
        stats,
    })
}

/// Objective of the in-batch remixing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InBatchObjective {
    /// Observed mixtures as supervision.
    SelfRemixing,
    /// Shuffled teacher outputs as supervision.
    RemixIt,
    /// Sum of both.
    Both,
}

/// In-batch remixing: the shuffler separates and its top sources are
/// shuffled across the batch into pseudo-mixtures; the solver separates
/// those, is aligned to the shuffled sources, and its outputs are put back
/// and summed to reconstruct the observed mixtures.
///
/// With `through_shuffler` the shuffler pass is differentiated too (the RCCL
/// failure mode); otherwise `grads.shuffler` stays zero.
pub fn step_in_batch<T: Scalar, S: Separator<T>>(
    shuffler: &S,
    solver: &S,
    mixtures: ArrayView2<'_, T>,
    settings: &StepSettings,
    objective: InBatchObjective,
    shuffle_seed: u64,
    through_shuffler: bool,
) -> Result<StepOutput<T>> {
    let (b, t) = mixtures.dim();
    let n_r = settings.n_remix;
    ensure!(b >= n_r, InvalidArgument, "in-batch remixing needs batch >= N_R ({b} < {n_r})");
    ensure!(
        !through_shuffler || objective == InBatchObjective::SelfRemixing,
        InvalidArgument,
        "differentiating the shuffler is only supported for the mixture-supervised objective"
    );
    let l = loss_fn::<T>(settings);
    let scale = T::c(1.0 / b as f64);
    let mut grads = RoleGrads::zeros(shuffler.n_params(), solver.n_params());
    let mut stats = StepStats::default();
    let mut live = 0usize;

    let mut shuf_sel = Vec::with_capacity(b);
    let mut shuf_tapes = Vec::new();
    let mut teacher = Array3::zeros((b, n_r, t));
    for i in 0..b {
        let x = mixtures.row(i);
        let out = if through_shuffler {
            let (out, tape) = shuffler.forward_tape(x)?;
            live += S::tape_floats(&tape);
            shuf_tapes.push(tape);
            out
        } else {
            shuffler.separate_one(x)?
        };
        let (sel, est) = select_project(out.view(), n_r, settings.shuffler_mc.then_some(x))?;
        teacher.index_axis_mut(Axis(0), i).assign(&est);
        shuf_sel.push(sel);
    }
    let spec = make_batch_shuffle(b, n_r, shuffle_seed)?;
    let pseudo = remix_batch(teacher.view(), &spec)?;
    let targets = shuffle_sources(teacher.view(), &spec)?;

    let n_s = solver.n_outputs();
    let mut sol_sel = Vec::with_capacity(b);
    let mut sol_tapes = Vec::with_capacity(b);
    let mut est = Array3::zeros((b, n_r, t));
    for i in 0..b {
        let xt = pseudo.row(i);
        let (out, tape) = solver.forward_tape(xt)?;
        live += S::tape_floats(&tape);
        sol_tapes.push(tape);
        let (sel, e) = select_project(out.view(), n_r, settings.solver_mc.then_some(xt))?;
        est.index_axis_mut(Axis(0), i).assign(&e);
        sol_sel.push(sel);
    }
    stats.peak_tape_floats = live;

    let align = align_to_shuffler(targets.view(), est.view(), &l)?;
    stats.candidates_per_item = align.candidates_per_item;
    let mut aligned = Array3::zeros((b, n_r, t));
    for i in 0..b {
        for n in 0..n_r {
            aligned
                .slice_mut(s![i, n, ..])
                .assign(&est.slice(s![i, align.perms[[i, n]], ..]));
        }
    }
    let recon = unshuffle_and_remix(aligned.view(), &spec)?;
    let mut sr_total = T::zero();
    let mut sr_items = Vec::with_capacity(b);
    for i in 0..b {
        let v = l.loss(mixtures.row(i), recon.row(i))?;
        sr_total += v;
        sr_items.push(v.f64());
    }
    let sr_loss = sr_total * scale;
    let remixit_loss = align.loss;
    stats.self_remixing_loss = Some(sr_loss.f64());
    stats.remixit_loss = Some(remixit_loss.f64());
    let loss = match objective {
        InBatchObjective::SelfRemixing => {
            stats.item_losses = sr_items;
            sr_loss
        }
        InBatchObjective::RemixIt => {
            stats.item_losses = align.item_losses.iter().map(|v| v.f64()).collect();
            remixit_loss
        }
        InBatchObjective::Both => {
            stats.item_losses = sr_items
                .iter()
                .zip(&align.item_losses)
                .map(|(a, r)| a + r.f64())
                .collect();
            sr_loss + remixit_loss
        }
    };

    let mut g_est = Array3::zeros((b, n_r, t));
    if objective != InBatchObjective::RemixIt {
        let mut g_recon = Array2::zeros((b, t));
        for i in 0..b {
            l.accumulate_grad(mixtures.row(i), recon.row(i), scale, g_recon.row_mut(i))?;
        }
        let g_aligned = unshuffle_and_remix_adjoint(g_recon.view(), &spec);
        for i in 0..b {
            for n in 0..n_r {
                let mut dst = g_est.slice_mut(s![i, align.perms[[i, n]], ..]);
                dst += &g_aligned.slice(s![i, n, ..]);
            }
        }
    }
    if objective != InBatchObjective::SelfRemixing {
        for i in 0..b {
            for n in 0..n_r {
                let j = align.perms[[i, n]];
                l.accumulate_grad(
                    targets.slice(s![i, n, ..]),
                    est.slice(s![i, j, ..]),
                    scale,
                    g_est.slice_mut(s![i, j, ..]),
                )?;
            }
        }
    }
    stats.alignment = Some(align.perms);

    let mut g_pseudo = Array2::zeros((b, t));
    for i in 0..b {
        let (g_out, g_mix) = select_project_adjoint(
            g_est.index_axis(Axis(0), i),
            &sol_sel[i],
            n_s,
            settings.solver_mc,
        );
        let g_in = solver.backward(&sol_tapes[i], g_out.view(), &mut grads.solver, through_shuffler)?;
        if through_shuffler {
            let mut row = g_pseudo.row_mut(i);
            if let Some(g) = g_in {
                row += &g;
            }
            if let Some(g) = g_mix {
                row += &g;
            }
        }
    }
    if through_shuffler {
        let g_teacher = remix_batch_adjoint(g_pseudo.view(), &spec);
        for i in 0..b {
            let (g_out, _) = select_project_adjoint(
                g_teacher.index_axis(Axis(0), i),
                &shuf_sel[i],
                shuffler.n_outputs(),
                settings.shuffler_mc,
            );
            shuffler.backward(&shuf_tapes[i], g_out.view(), &mut grads.shuffler, false)?;
        }
    }
    Ok(StepOutput { loss, grads, stats })
}

/// Between-two-mixtures remixing on adjacent pairs, with the remix loss
/// searched over balanced split vectors. Pairs whose loss falls below
/// `l_thres` contribute neither loss nor gradient.
///
/// With `through_shuffler` (RCCL) the first separation pass is
/// differentiated as well.
pub fn step_pair<T: Scalar, S: Separator<T>>(
    shuffler: &S,
    solver: &S,
    mixtures: ArrayView2<'_, T>,
    settings: &StepSettings,
    plan_seed: u64,
    through_shuffler: bool,
) -> Result<StepOutput<T>> {
    let n_r = settings.n_remix;
    ensure!(
        n_r >= 2 && n_r.is_multiple_of(2),
        InvalidConfig,
        "pair remixing needs an even N_R, got {n_r}"
    );
    let (pairs, dropped) = mixture_pairs(mixtures.nrows());
    ensure!(!pairs.is_empty(), InvalidArgument, "pair remixing needs at least two mixtures");
    let l = loss_fn::<T>(settings);
    let scale = T::c(1.0 / pairs.len() as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(plan_seed);
    let mut grads = RoleGrads::zeros(shuffler.n_params(), solver.n_params());
    let mut stats = StepStats {
        dropped,
        ..Default::default()
    };
    let mut total = T::zero();
    let n_s = solver.n_outputs();
    for &(i, j) in &pairs {
        let xs = [mixtures.row(i), mixtures.row(j)];
        let mut live = 0usize;
        let mut shuf_tapes = Vec::new();
        let mut shuf_sel = Vec::with_capacity(2);
        let mut teacher = Vec::with_capacity(2);
        for x in xs {
            let out = if through_shuffler {
                let (out, tape) = shuffler.forward_tape(x)?;
                live += S::tape_floats(&tape);
                shuf_tapes.push(tape);
                out
            } else {
                shuffler.separate_one(x)?
            };
            let (sel, est) = select_project(out.view(), n_r, settings.shuffler_mc.then_some(x))?;
            shuf_sel.push(sel);
            teacher.push(est);
        }
        let powers = |m: &Array2<T>| m.outer_iter().map(signal_power).collect::<Vec<T>>();
        let plan = make_pair_plan(
            &powers(&teacher[0]),
            &powers(&teacher[1]),
            settings.placement,
            &mut rng,
        )?;
        let (p1, p2) = remix_pair(teacher[0].view(), teacher[1].view(), &plan)?;
        let pseudo = [p1, p2];

        let mut sol_tapes = Vec::with_capacity(2);
        let mut sol_sel = Vec::with_capacity(2);
        let mut est = Vec::with_capacity(2);
        for xt in &pseudo {
            let (out, tape) = solver.forward_tape(xt.view())?;
            live += S::tape_floats(&tape);
            sol_tapes.push(tape);
            let (sel, e) = select_project(out.view(), n_r, settings.solver_mc.then_some(xt.view()))?;
            sol_sel.push(sel);
            est.push(e);
        }
        stats.peak_tape_floats = stats.peak_tape_floats.max(live);

        let res = remix_pair_loss(xs[0], xs[1], est[0].view(), est[1].view(), &l)?;
        stats.candidates_per_item = res.candidates_evaluated;
        stats.item_losses.push(res.loss.f64());
        if let Some(th) = settings.l_thres {
            if res.loss.f64() < th {
                stats.zeroed += 1;
                continue;
            }
        }
        total += res.loss;
        let Assignment::PairSplit { p1, p2 } = res.assignment else {
            unreachable!("remix pair search yields split vectors")
        };
        let split = PairRemixPlan { pi1: p1, pi2: p2 };
        let (e1, e2) = remix_pair(est[0].view(), est[1].view(), &split)?;
        let g1 = grad_of(&l, xs[0], e1.view(), scale)?;
        let g2 = grad_of(&l, xs[1], e2.view(), scale)?;
        let (g_est1, g_est2) = remix_pair_adjoint(g1.view(), g2.view(), &split);

        let mut g_pseudo = Vec::with_capacity(2);
        for (k, g_est) in [g_est1, g_est2].iter().enumerate() {
            let (g_out, g_mix) = select_project_adjoint(g_est.view(), &sol_sel[k], n_s, settings.solver_mc);
            let g_in = solver.backward(&sol_tapes[k], g_out.view(), &mut grads.solver, through_shuffler)?;
            if through_shuffler {
                let mut g = g_in.unwrap_or_else(|| Array1::zeros(g_out.ncols()));
                if let Some(gm) = g_mix {
                    g += &gm;
                }
                g_pseudo.push(g);
            }
        }
        if through_shuffler {
            let (gt1, gt2) = remix_pair_adjoint(g_pseudo[0].view(), g_pseudo[1].view(), &plan);
            for (k, gt) in [gt1, gt2].iter().enumerate() {
                let (g_out, _) = select_project_adjoint(
                    gt.view(),
                    &shuf_sel[k],
                    shuffler.n_outputs(),
                    settings.shuffler_mc,
                );
                shuffler.backward(&shuf_tapes[k], g_out.view(), &mut grads.shuffler, false)?;
            }
        }
    }
    Ok(StepOutput {
        loss: total * scale,
        grads,
        stats,
    })
}

/// Runs the unsupervised step of `method`. For RCCL pass the same model as
/// `shuffler` and `solver`.
pub fn step_unsupervised<T: Scalar, S: Separator<T>>(
    method: Method,
    shuffler: &S,
    solver: &S,
    mixtures: ArrayView2<'_, T>,
    settings: &StepSettings,
    seed: u64,
) -> Result<StepOutput<T>> {
    match method {
        Method::Mixit => step_mixit(solver, mixtures, settings),
        Method::Pit => Err(Error::InvalidConfig(
            "PIT is supervised; use step_supervised_pit".into(),
        )),
        Method::Remixit => step_in_batch(shuffler, solver, mixtures, settings, InBatchObjective::RemixIt, seed, false),
        Method::SelfRemixingBatch => {
            step_in_batch(shuffler, solver, mixtures, settings, InBatchObjective::SelfRemixing, seed, false)
        }
        Method::RemixitPlusSelfRemixing => {
            step_in_batch(shuffler, solver, mixtures, settings, InBatchObjective::Both, seed, false)
        }
        Method::SelfRemixingPair => step_pair(shuffler, solver, mixtures, settings, seed, false),
        Method::Rccl => match settings.remix_mode {
            Some(RemixMode::InBatch) => step_in_batch(
                shuffler,
                solver,
                mixtures,
                settings,
                InBatchObjective::SelfRemixing,
                seed,
                !settings.rccl_detach,
            ),
            _ => step_pair(shuffler, solver, mixtures, settings, seed, !settings.rccl_detach),
        },
    }
}

/// Supervised PIT on out-of-domain data plus `unsup_weight` times the
/// unsupervised loss on in-domain data.
#[allow(clippy::too_many_arguments)]
pub fn step_semi_supervised<T: Scalar, S: Separator<T>>(
    method: Method,
    shuffler: &S,
    solver: &S,
    ood_mixtures: ArrayView2<'_, T>,
    ood_refs: &[Array2<T>],
    in_domain: ArrayView2<'_, T>,
    settings: &StepSettings,
    unsup_weight: f64,
    seed: u64,
) -> Result<StepOutput<T>> {
    ensure!(
        ood_mixtures.nrows() > 0 && in_domain.nrows() > 0,
        InvalidArgument,
        "semi-supervised steps need both sub-batches"
    );
    let sup = step_supervised_pit(solver, ood_mixtures, ood_refs, settings)?;
    let mut grads = RoleGrads::zeros(shuffler.n_params(), solver.n_params());
    grads.solver.copy_from_slice(&sup.grads.solver);
    let mut stats = sup.stats;
    let mut loss = sup.loss;
    if unsup_weight != 0.0 {
        let un = step_unsupervised(method, shuffler, solver, in_domain, settings, seed)?;
        let w = T::c(unsup_weight);
        loss += w * un.loss;
        grads.add_scaled(&un.grads, w)?;
        stats.remixit_loss = un.stats.remixit_loss;
        stats.self_remixing_loss = un.stats.self_remixing_loss;
        stats.zeroed = un.stats.zeroed;
        stats.alignment = un.stats.alignment;
        stats.peak_tape_floats = stats.peak_tape_floats.max(un.stats.peak_tape_floats);
    }
    Ok(StepOutput { loss, grads, stats })
}
