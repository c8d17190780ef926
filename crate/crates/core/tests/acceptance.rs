//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_SKIP_TOY=1` skips the end-to-end training runs (10 and 11).

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfremix::assignments::{align_to_shuffler, mixit_loss, pit_loss, remix_pair_loss};
use selfremix::datagen::{Dataset, DatasetConfig, Split};
use selfremix::metrics::{thresholded_snr_loss, ThresholdedSnr};
use selfremix::remixer::{
    make_batch_shuffle, make_pair_plan, remix_batch, remix_pair, shuffle_sources, unshuffle_and_remix,
    PairPlacement,
};
use selfremix::separator::{Architecture, MaskActivation, Separator, SeparatorModel, StftConfig};
use selfremix::signals::signal_power;
use selfremix::teacher_student::{CheckpointRing, TeacherStudentState, UpdateProtocol};
use selfremix::trainer::{
    evaluate_model, evaluate_unprocessed, run_training, step_in_batch, step_pair, step_unsupervised,
    ExperimentConfig, InBatchObjective, Method, StepSettings, TrainData, TrainOutcome, METRICS_FILE,
};
use selfremix::{Error, Result};

const TAU: f64 = 1e-3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Fixed outputs per known input plus a trainable additive offset, so the
/// step gradients with respect to the outputs are observable.
struct Table {
    inputs: Vec<Array1<f64>>,
    outputs: Vec<Array2<f64>>,
    offsets: Vec<f64>,
    n_out: usize,
}

impl Table {
    fn new(entries: Vec<(Array1<f64>, Array2<f64>)>, n_out: usize) -> Self {
        let size: usize = entries.iter().map(|(_, o)| o.len()).sum();
        let (inputs, outputs) = entries.into_iter().unzip();
        Self {
            inputs,
            outputs,
            offsets: vec![0.0; size],
            n_out,
        }
    }

    fn find(&self, wave: ArrayView1<'_, f64>) -> Result<usize> {
        self.inputs
            .iter()
            .position(|k| k.iter().zip(wave.iter()).all(|(a, b)| (a - b).abs() < 1e-12))
            .ok_or_else(|| Error::InvalidArgument("input not in table".into()))
    }

    fn segment(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.outputs[..k].iter().map(|o| o.len()).sum();
        start..start + self.outputs[k].len()
    }
}

impl Separator<f64> for Table {
    type Tape = usize;

    fn n_outputs(&self) -> usize {
        self.n_out
    }

    fn n_params(&self) -> usize {
        self.offsets.len()
    }

    fn separate_one(&self, wave: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.forward_tape(wave)?.0)
    }

    fn forward_tape(&self, wave: ArrayView1<'_, f64>) -> Result<(Array2<f64>, usize)> {
        let k = self.find(wave)?;
        let base = &self.outputs[k];
        let off = Array2::from_shape_vec(base.dim(), self.offsets[self.segment(k)].to_vec()).unwrap();
        Ok((base + &off, k))
    }

    fn backward(
        &self,
        tape: &usize,
        grad_sources: ArrayView2<'_, f64>,
        param_grad: &mut [f64],
        want_input: bool,
    ) -> Result<Option<Array1<f64>>> {
        for (p, g) in param_grad[self.segment(*tape)].iter_mut().zip(grad_sources.iter()) {
            *p += g;
        }
        Ok(want_input.then(|| Array1::zeros(grad_sources.ncols())))
    }

    fn tape_floats(_: &usize) -> usize {
        0
    }
}

fn snr_oracle(y: ArrayView1<'_, f64>, y_hat: ArrayView1<'_, f64>) -> f64 {
    let p: f64 = y.iter().map(|v| v * v).sum();
    let r: f64 = y.iter().zip(y_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (r / p + TAU).log10()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn injections(k: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(k: usize, n: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for j in 0..n {
            if !cur.contains(&j) {
                cur.push(j);
                rec(k, n, cur, out);
                cur.pop();
            }
        }
    }
    rec(k, n, &mut cur, &mut out);
    out
}

fn noise(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Sources with distinct powers per channel.
fn graded_sources(rng: &mut ChaCha8Rng, b: usize, n: usize, t: usize) -> Array3<f64> {
    Array3::from_shape_fn((b, n, t), |(_, k, _)| (n - k) as f64 * rng.random_range(-1.0..1.0))
}

fn micro(n_outputs: usize, seed: u64) -> SeparatorModel<f64> {
    let arch = Architecture {
        n_outputs,
        hidden: 4,
        context: 0,
        mask: MaskActivation::Sigmoid,
        stft: StftConfig {
            fft_size: 16,
            window_length: 12,
            hop_length: 4,
        },
    };
    SeparatorModel::random(arch, seed).unwrap()
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let l = ThresholdedSnr::new(TAU);
    let (x1, x2) = (noise(&mut rng, (1, 64)), noise(&mut rng, (1, 64)));
    let pair = remix_pair_loss(
        x1.row(0),
        x2.row(0),
        noise(&mut rng, (6, 64)).view(),
        noise(&mut rng, (6, 64)).view(),
        &l,
    )
    .unwrap();
    let targets = Array3::from_shape_fn((8, 3, 64), |_| rng.random_range(-1.0..1.0));
    let outs = Array3::from_shape_fn((8, 3, 64), |_| rng.random_range(-1.0..1.0));
    let align = align_to_shuffler(targets.view(), outs.view(), &l).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        pair.candidates_evaluated == 400 && align.candidates_per_item == 6 && secs < 1.0,
        format!(
            "pair N_R=6: {} candidates, in-batch N_R=3: {} per item, {secs:.3}s",
            pair.candidates_evaluated, align.candidates_per_item
        ),
    )
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let l = ThresholdedSnr::new(TAU);
    let mut worst = [0.0f64; 4];
    for _ in 0..200 {
        let t = rng.random_range(16..64);

        let n_ref = rng.random_range(1..=4);
        let n_est = rng.random_range(n_ref..=4);
        let refs = noise(&mut rng, (n_ref, t));
        let est = noise(&mut rng, (n_est, t));
        let got = pit_loss(refs.view(), est.view(), &l).unwrap().loss;
        let want = injections(n_ref, n_est)
            .iter()
            .map(|p| (0..n_ref).map(|i| snr_oracle(refs.row(i), est.row(p[i]))).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        worst[0] = worst[0].max((got - want).abs());

        let n = rng.random_range(2..=4);
        let mix = noise(&mut rng, (2, t));
        let est = noise(&mut rng, (n, t));
        let got = mixit_loss(mix.view(), est.view(), &l).unwrap().loss;
        let want = (0..1u32 << n)
            .map(|mask| {
                let mut e = Array2::<f64>::zeros((2, t));
                for k in 0..n {
                    let mut row = e.row_mut((mask >> k & 1) as usize);
                    row += &est.row(k);
                }
                snr_oracle(mix.row(0), e.row(0)) + snr_oracle(mix.row(1), e.row(1))
            })
            .fold(f64::INFINITY, f64::min);
        worst[1] = worst[1].max((got - want).abs());

        let n_r = 2 * rng.random_range(1..=2);
        let x = noise(&mut rng, (2, t));
        let (o1, o2) = (noise(&mut rng, (n_r, t)), noise(&mut rng, (n_r, t)));
        let got = remix_pair_loss(x.row(0), x.row(1), o1.view(), o2.view(), &l).unwrap().loss;
        let halves: Vec<u32> = (0..1u32 << n_r).filter(|m| m.count_ones() as usize == n_r / 2).collect();
        let mut want = f64::INFINITY;
        for &p1 in &halves {
            for &p2 in &halves {
                let (mut e1, mut e2) = (Array1::<f64>::zeros(t), Array1::<f64>::zeros(t));
                for k in 0..n_r {
                    if p1 >> k & 1 == 1 {
                        e1 += &o1.row(k);
                    } else {
                        e2 += &o1.row(k);
                    }
                    if p2 >> k & 1 == 1 {
                        e2 += &o2.row(k);
                    } else {
                        e1 += &o2.row(k);
                    }
                }
                want = want.min(snr_oracle(x.row(0), e1.view()) + snr_oracle(x.row(1), e2.view()));
            }
        }
        worst[2] = worst[2].max((got - want).abs());

        let (b, n_r) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let targets = Array3::from_shape_fn((b, n_r, t), |_| rng.random_range(-1.0..1.0));
        let outs = Array3::from_shape_fn((b, n_r, t), |_| rng.random_range(-1.0..1.0));
        let got = align_to_shuffler(targets.view(), outs.view(), &l).unwrap().loss;
        let perms = permutations(n_r);
        let want = (0..b)
            .map(|i| {
                perms
                    .iter()
                    .map(|p| {
                        (0..n_r)
                            .map(|k| snr_oracle(targets.slice(s![i, k, ..]), outs.slice(s![i, p[k], ..])))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / b as f64;
        worst[3] = worst[3].max((got - want).abs());
    }
    let secs = t0.elapsed().as_secs_f64();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        max <= 1e-9 && secs < 30.0,
        format!(
            "max |diff| pit {:.1e}, mixit {:.1e}, pair {:.1e}, align {:.1e}; {secs:.2}s",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y = noise(&mut rng, (1, 256)).row(0).to_owned();
    let same = thresholded_snr_loss(y.view(), y.view(), TAU).unwrap();
    let zero = thresholded_snr_loss(y.view(), Array1::zeros(256).view(), TAU).unwrap();
    let expect = 10.0 * (1.0 + TAU).log10();
    outcome(
        same == -30.0 && (zero - expect).abs() <= 1e-9,
        format!("L(y, y) = {same}, L(y, 0) = {zero:.12} (expected {expect:.12})"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let l = ThresholdedSnr::new(TAU);
    let (b, n_r, t) = (8, 3, 64);
    let settings = StepSettings {
        n_remix: n_r,
        ..StepSettings::default()
    };
    let (mut recon_err, mut loss_err) = (0.0f64, 0.0f64);
    for fixture in 0..100u64 {
        let teacher = graded_sources(&mut rng, b, n_r, t);
        let mixtures = teacher.sum_axis(Axis(1));
        let spec = make_batch_shuffle(b, n_r, fixture).unwrap();
        let shuffled = shuffle_sources(teacher.view(), &spec).unwrap();
        let pseudo = remix_batch(teacher.view(), &spec).unwrap();
        // oracle solver: the shuffled sources in reversed channel order
        let solver_out = shuffled.slice(s![.., ..;-1, ..]).to_owned();
        let align = align_to_shuffler(shuffled.view(), solver_out.view(), &l).unwrap();
        let mut aligned = Array3::zeros((b, n_r, t));
        for i in 0..b {
            for n in 0..n_r {
                aligned
                    .slice_mut(s![i, n, ..])
                    .assign(&solver_out.slice(s![i, align.perms[[i, n]], ..]));
            }
        }
        let recon = unshuffle_and_remix(aligned.view(), &spec).unwrap();
        recon_err = recon_err.max((&recon - &mixtures).iter().fold(0.0, |m, v| m.max(v.abs())));

        let shuffler = Table::new(
            (0..b)
                .map(|i| (mixtures.row(i).to_owned(), teacher.index_axis(Axis(0), i).to_owned()))
                .collect(),
            n_r,
        );
        let solver = Table::new(
            (0..b)
                .map(|i| (pseudo.row(i).to_owned(), solver_out.index_axis(Axis(0), i).to_owned()))
                .collect(),
            n_r,
        );
        let step = step_in_batch(
            &shuffler,
            &solver,
            mixtures.view(),
            &settings,
            InBatchObjective::SelfRemixing,
            fixture,
            false,
        )
        .unwrap();
        for v in &step.stats.item_losses {
            loss_err = loss_err.max((v + 30.0).abs());
        }
    }
    outcome(
        recon_err <= 1e-5 && loss_err <= 1e-9,
        format!("max reconstruction error {recon_err:.1e}, max |loss + 30| {loss_err:.1e} over 100 fixtures"),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = noise(&mut rng, (4, 48));
    let (shuffler, solver) = (micro(4, 1), micro(4, 2));
    let settings = StepSettings {
        n_remix: 2,
        ..StepSettings::default()
    };
    let mut isolated = true;
    for method in [
        Method::Remixit,
        Method::SelfRemixingBatch,
        Method::SelfRemixingPair,
        Method::RemixitPlusSelfRemixing,
    ] {
        let r = step_unsupervised(method, &shuffler, &solver, x.view(), &settings, 3).unwrap();
        isolated &= r.grads.shuffler.iter().all(|&g| g == 0.0) && r.grads.solver.iter().any(|&g| g != 0.0);
    }
    let rccl = |detach: bool| {
        let s = StepSettings {
            rccl_detach: detach,
            ..settings.clone()
        };
        step_unsupervised(Method::Rccl, &solver, &solver, x.view(), &s, 3)
            .unwrap()
            .grads
            .combined()
            .unwrap()
    };
    let (full, detached) = (rccl(false), rccl(true));
    let diff = full.iter().zip(&detached).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(
        isolated && diff > 1e-8,
        format!("shuffler gradients all zero: {isolated}; RCCL vs detached max diff {diff:.2e}"),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = noise(&mut rng, (4, 48));
    let shuffler = micro(3, 21);
    let solver = micro(3, 22);
    let settings = StepSettings {
        n_remix: 3,
        ..StepSettings::default()
    };
    let seed = 8;
    let run = |m: &SeparatorModel<f64>| {
        step_unsupervised(Method::SelfRemixingBatch, &shuffler, m, x.view(), &settings, seed).unwrap()
    };
    let grad = run(&solver).grads.solver;
    let n = solver.params().len();
    let mut idx: Vec<usize> = Vec::new();
    while idx.len() < 20 {
        let k = rng.random_range(0..n);
        if !idx.contains(&k) {
            idx.push(k);
        }
    }
    let h = 1e-6;
    let mut worst = 0.0f64;
    for &k in &idx {
        let at = |d: f64| {
            let mut m = solver.clone();
            m.params_mut()[k] += d;
            run(&m).loss
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let scale = fd.abs().max(grad[k].abs());
        let rel = if scale < 1e-9 { 0.0 } else { (fd - grad[k]).abs() / scale };
        worst = worst.max(rel);
    }
    outcome(
        worst <= 1e-3,
        format!("max relative error {worst:.2e} over 20 solver parameters"),
    )
}

fn criterion_7() -> Outcome {
    let teacher = vec![1.5f64, -2.0, 0.25];
    let student = vec![0.5f64, 4.0, -1.0];
    let mut exact = true;
    let mut cases = Vec::new();
    for alpha in [0.0, 0.8, 1.0] {
        let mut st =
            TeacherStudentState::init_from_pretrained(teacher.clone(), None, UpdateProtocol::EmaEpochEnd, alpha).unwrap();
        st.student_mut().copy_from_slice(&student);
        st.epoch_end_update();
        let want: Vec<f64> = teacher
            .iter()
            .zip(&student)
            .map(|(t, s)| alpha * t + (1.0 - alpha) * s)
            .collect();
        exact &= st.teacher() == want.as_slice();
        cases.push(format!("α={alpha}: {:?}", st.teacher()));
    }
    let mut ring = CheckpointRing::<f64>::new(5);
    let snaps: Vec<Vec<f64>> = (0..5).map(|k| vec![k as f64, 2.0 * k as f64 - 3.0, 0.5 * k as f64]).collect();
    for (k, p) in snaps.iter().enumerate() {
        ring.record(k as f64, p).unwrap();
    }
    let mean = ring.average().unwrap();
    let mean_ok = mean == vec![2.0, 1.0, 1.0];
    outcome(
        exact && mean_ok,
        format!("{}; 5-checkpoint mean {mean:?}", cases.join(", ")),
    )
}

fn criterion_8() -> Outcome {
    let valid = (0..1000u64).all(|seed| make_batch_shuffle(8, 3, seed).map(|s| s.no_recollision()).unwrap_or(false));
    let infeasible = matches!(make_batch_shuffle(1, 2, 0), Err(Error::Infeasible(_)));
    outcome(
        valid && infeasible,
        format!("1000 shuffles without recollision: {valid}; B=1, N_R=2 infeasible: {infeasible}"),
    )
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n_r, t) = (4, 64);
    let s1 = graded_sources(&mut rng, 1, n_r, t).index_axis(Axis(0), 0).to_owned();
    let s2 = graded_sources(&mut rng, 1, n_r, t).index_axis(Axis(0), 0).to_owned();
    let (x1, x2) = (s1.sum_axis(Axis(0)), s2.sum_axis(Axis(0)));
    let plan_seed = 21;
    let powers = |m: &Array2<f64>| m.outer_iter().map(signal_power).collect::<Vec<_>>();
    let plan = make_pair_plan(
        &powers(&s1),
        &powers(&s2),
        PairPlacement::default(),
        &mut ChaCha8Rng::seed_from_u64(plan_seed),
    )
    .unwrap();
    let (xt1, xt2) = remix_pair(s1.view(), s2.view(), &plan).unwrap();
    let pick = |a: &Array2<f64>, pa: &[bool], ka: bool, b: &Array2<f64>, pb: &[bool], kb: bool| {
        let rows: Vec<_> = (0..n_r)
            .filter(|&n| pa[n] == ka)
            .map(|n| a.row(n))
            .chain((0..n_r).filter(|&n| pb[n] == kb).map(|n| b.row(n)))
            .collect();
        ndarray::stack(Axis(0), &rows).unwrap()
    };
    // near-perfect solver: constituents of each pseudo-mixture plus a tiny error
    let mut solver = Table::new(
        vec![
            (xt1, pick(&s1, &plan.pi1, true, &s2, &plan.pi2, false)),
            (xt2, pick(&s1, &plan.pi1, false, &s2, &plan.pi2, true)),
        ],
        n_r,
    );
    for v in solver.offsets.iter_mut() {
        *v = 1e-6 * rng.random_range(-1.0..1.0);
    }
    let shuffler = Table::new(vec![(x1.clone(), s1), (x2.clone(), s2)], n_r);
    let x = ndarray::stack![Axis(0), x1, x2];
    let mut settings = StepSettings {
        n_remix: n_r,
        l_thres: Some(-15.0),
        ..StepSettings::default()
    };
    let held = step_pair(&shuffler, &solver, x.view(), &settings, plan_seed, false).unwrap();
    settings.l_thres = None;
    let free = step_pair(&shuffler, &solver, x.view(), &settings, plan_seed, false).unwrap();
    let raw = held.stats.item_losses[0];
    let zero = held.grads.solver.iter().all(|&g| g == 0.0) && held.loss == 0.0;
    let norm = free.grads.solver.iter().map(|g| g * g).sum::<f64>().sqrt();
    outcome(
        (raw + 60.0).abs() < 0.01 && zero && norm > 0.0,
        format!("raw pair loss {raw:.4} dB; l_thres=-15 gradient all zero: {zero}; unthresholded gradient norm {norm:.3e}"),
    )
}

fn load_config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn toy_config() -> ExperimentConfig {
    load_config("toy_mixit.toml")
}

fn refine_config() -> ExperimentConfig {
    load_config("toy_self_remixing.toml")
}

fn metrics_without_wall_time(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap_or_default()
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_s");
            v.to_string()
        })
        .collect()
}

struct Toy {
    train: Dataset<f32>,
    valid: Dataset<f32>,
    root: tempfile::TempDir,
}

impl Toy {
    fn run(&self, cfg: &ExperimentConfig, init: Option<&SeparatorModel<f32>>, name: &str) -> TrainOutcome<f32> {
        let data = TrainData {
            train: &self.train,
            valid: &self.valid,
            ood: None,
        };
        run_training(cfg, data, init, &self.root.path().join(name)).unwrap()
    }
}

fn criterion_10_11(report: &mut Vec<(String, Outcome)>) {
    let t0 = Instant::now();
    let data = DatasetConfig::default();
    let toy = Toy {
        train: Dataset::generate(&data, Split::Train).unwrap(),
        valid: Dataset::generate(&data, Split::Valid).unwrap(),
        root: tempfile::tempdir().unwrap(),
    };
    let unprocessed = evaluate_unprocessed(&toy.valid).unwrap().mean_sisdr_db;

    let pre = toy.run(&toy_config(), None, "mixit");
    let pre_db = pre.report.final_valid_sisdr_db;
    let gain_a = pre_db - unprocessed;
    report.push((
        "10a".into(),
        outcome(
            gain_a >= 5.0 && pre.report.updates <= 2000,
            format!(
                "MixIT {} steps: validation SI-SDR {pre_db:.3} dB vs unprocessed {unprocessed:.3} dB (gain {gain_a:.3}, need >= 5)",
                pre.report.updates
            ),
        ),
    ));

    let frozen = evaluate_model(&pre.model, &toy.valid, false).unwrap().mean_sisdr_db;
    let refined = toy.run(&refine_config(), Some(&pre.model), "self_remixing");
    let ref_db = refined.report.final_valid_sisdr_db;
    let gain_b = ref_db - frozen;
    report.push((
        "10b".into(),
        outcome(
            gain_b >= 0.3 && refined.report.updates <= 1000,
            format!(
                "Self-Remixing {} steps: {ref_db:.3} dB vs frozen pretrained {frozen:.3} dB (gain {gain_b:.3}, need >= 0.3)",
                refined.report.updates
            ),
        ),
    ));

    let collapse = refined
        .report
        .epochs
        .iter()
        .map(|m| m.collapse_metric)
        .fold(f64::NEG_INFINITY, f64::max);
    report.push((
        "10c".into(),
        outcome(
            collapse < 0.95,
            format!("max collapse metric over {} epochs {collapse:.3} (need < 0.95)", refined.report.epochs.len()),
        ),
    ));
    let toy_secs = t0.elapsed().as_secs_f64();
    report.push((
        "10-runtime".into(),
        outcome(toy_secs < 1200.0, format!("criterion 10 wall time {toy_secs:.0}s (budget 1200s)")),
    ));

    let reference = serde_json::json!({
        "unprocessed_valid_sisdr_db": unprocessed,
        "mixit": &pre.report,
        "frozen_pretrained_valid_sisdr_db": frozen,
        "self_remixing": &refined.report,
        "wall_time_s": toy_secs,
    });
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("toy_reference.json");
    std::fs::write(&out, serde_json::to_string_pretty(&reference).unwrap()).unwrap();

    let again = toy.run(&toy_config(), None, "mixit_again");
    let (a, b) = (
        metrics_without_wall_time(&toy.root.path().join("mixit")),
        metrics_without_wall_time(&toy.root.path().join("mixit_again")),
    );
    report.push((
        "11".into(),
        outcome(
            !a.is_empty() && a == b && again.report.final_valid_sisdr_db == pre_db,
            format!("{} metric records, identical excluding wall time: {}", a.len(), a == b),
        ),
    ));
}

type Check = (&'static str, fn() -> Outcome);

fn main() {
    let _ = env_logger::builder().is_test(true).try_init();
    let checks: [Check; 9] = [
        ("1", criterion_1),
        ("2", criterion_2),
        ("3", criterion_3),
        ("4", criterion_4),
        ("5", criterion_5),
        ("6", criterion_6),
        ("7", criterion_7),
        ("8", criterion_8),
        ("9", criterion_9),
    ];
    let mut report: Vec<(String, Outcome)> = Vec::new();
    for (name, check) in checks {
        let o = check();
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        report.push((name.into(), o));
    }
    if std::env::var("ACCEPTANCE_SKIP_TOY").is_ok_and(|v| v == "1") {
        println!("SKIP criterion 10: ACCEPTANCE_SKIP_TOY=1");
        println!("SKIP criterion 11: ACCEPTANCE_SKIP_TOY=1");
    } else {
        let start = report.len();
        criterion_10_11(&mut report);
        for (name, o) in &report[start..] {
            println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        }
    }
    let failed: Vec<&str> = report.iter().filter(|(_, o)| !o.pass).map(|(n, _)| n.as_str()).collect();
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        std::process::exit(1);
    }
}
