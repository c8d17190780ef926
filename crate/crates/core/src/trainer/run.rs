//! The epoch loop: batching, accumulation, optimizer updates, teacher
//! updates, validation, checkpoints and metric logs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::optim::{clip_grad_norm, AdamW, LrSchedule};
use super::steps::{step_semi_supervised, step_supervised_pit, step_unsupervised, StepOutput, StepSettings};
use crate::datagen::Dataset;
use crate::error::{ensure, io_err, Error, Result};
use crate::metrics::{evaluate_separation, si_sdr};
use crate::scalar::Scalar;
use crate::separator::{Checkpoint, Role, SeparatorModel};
use crate::signals::{project_consistent, signal_power, Origin, SourceEstimates};
use crate::teacher_student::{CheckpointRing, TeacherStudentState, RING_CAPACITY};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const FINAL_CHECKPOINT: &str = "final_averaged.ckpt";
pub const DUMP_DIR: &str = "nonfinite_dump";

/// One line of the metrics log, written after each validation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss_db: f64,
    pub valid_sisdr_db: f64,
    pub lr: f64,
    pub collapse_metric: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub epochs: Vec<MetricsRecord>,
    pub updates: usize,
    /// Validation SI-SDR of the model training started from, if any.
    pub initial_valid_sisdr_db: Option<f64>,
    pub final_valid_sisdr_db: f64,
    pub final_collapse_metric: f64,
    /// Scores of the checkpoints averaged into the final model.
    pub averaged_scores: Vec<f64>,
    pub final_checkpoint: PathBuf,
    /// Pairs whose contribution was zeroed by loss thresholding.
    pub zeroed_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub report: TrainReport,
    /// Mean of the best recorded checkpoints.
    pub model: SeparatorModel<T>,
    /// Shuffler at the end of training, for teacher-student methods.
    pub teacher: Option<SeparatorModel<T>>,
}

/// Data for a run. `ood` holds labeled out-of-domain mixtures and is used
/// only in semi-supervised mode.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a, T> {
    pub train: &'a Dataset<T>,
    pub valid: &'a Dataset<T>,
    pub ood: Option<&'a Dataset<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_sisdr_db: f64,
    pub per_item_sisdr_db_min: f64,
    pub collapse_metric: f64,
    pub n_items: usize,
}

/// Best-permutation SI-SDR of the top outputs against the speech references
/// (every reference row but the last, which is the noise), plus the mean
/// ratio of top-1 output power to mixture power. With `mc` all outputs are
/// first projected to sum to the mixture.
pub fn evaluate_model<T: Scalar>(model: &SeparatorModel<T>, data: &Dataset<T>, mc: bool) -> Result<EvalSummary> {
    ensure!(!data.is_empty(), InvalidData, "empty evaluation set");
    let mut scores = Vec::with_capacity(data.len());
    let mut collapse = 0.0;
    for i in 0..data.len() {
        let x = data.mixture(i);
        let mut out = model.forward(x)?;
        if mc {
            out = project_consistent(out.view(), x)?;
        }
        let top = out.outer_iter().map(|r| signal_power(r).f64()).fold(0.0, f64::max);
        collapse += top / signal_power(x).f64().max(f64::MIN_POSITIVE);
        let refs = data
            .references(i)
            .ok_or_else(|| Error::InvalidData("evaluation needs references".into()))?;
        let speech = speech_rows(refs)?;
        let est = SourceEstimates::detached(out.insert_axis(Axis(0)), Origin::Solver)?;
        let r = SourceEstimates::detached(speech.insert_axis(Axis(0)), Origin::Solver)?;
        scores.push(evaluate_separation(&est, &r)?[0].f64());
    }
    Ok(summarize(scores, collapse / data.len() as f64))
}

/// Scores the unprocessed mixture against each speech reference.
pub fn evaluate_unprocessed<T: Scalar>(data: &Dataset<T>) -> Result<EvalSummary> {
    ensure!(!data.is_empty(), InvalidData, "empty evaluation set");
    let mut scores = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let refs = data
            .references(i)
            .ok_or_else(|| Error::InvalidData("evaluation needs references".into()))?;
        let speech = speech_rows(refs)?;
        let mut total = 0.0;
        for r in speech.outer_iter() {
            total += si_sdr(r, data.mixture(i))?.f64();
        }
        scores.push(total / speech.nrows() as f64);
    }
    Ok(summarize(scores, 1.0))
}

fn speech_rows<T: Scalar>(refs: &Array2<T>) -> Result<Array2<T>> {
    let k = refs.nrows();
    ensure!(k >= 2, InvalidData, "references need at least one speech row and the noise row");
    Ok(refs.slice(ndarray::s![..k - 1, ..]).to_owned())
}

fn summarize(scores: Vec<f64>, collapse: f64) -> EvalSummary {
    let n = scores.len();
    EvalSummary {
        mean_sisdr_db: scores.iter().sum::<f64>() / n as f64,
        per_item_sisdr_db_min: scores.iter().copied().fold(f64::INFINITY, f64::min),
        collapse_metric: collapse,
        n_items: n,
    }
}

#[derive(Serialize)]
struct DumpState<'a> {
    epoch: usize,
    step: usize,
    loss: f64,
    lr: f64,
    batch: &'a [usize],
}

fn dump_nonfinite<T: Scalar>(
    out_dir: &Path,
    model: &SeparatorModel<T>,
    epoch: usize,
    step: usize,
    loss: f64,
    lr: f64,
    batch: &[usize],
) -> Error {
    let dir = out_dir.join(DUMP_DIR);
    let written = (|| -> Result<()> {
        fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
        Checkpoint::from_model(model, Role::Solver, step as u64, epoch as u64).save(&dir.join("model.ckpt"))?;
        let state = DumpState { epoch, step, loss, lr, batch };
        let path = dir.join("state.json");
        fs::write(&path, serde_json::to_vec_pretty(&state)?).map_err(io_err(format!("writing {}", path.display())))
    })();
    if let Err(e) = written {
        warn!("could not write the non-finite state dump: {e}");
    }
    Error::NonFiniteLoss { epoch, step, dump: dir }
}

fn all_finite<T: Scalar>(v: &[T]) -> bool {
    v.iter().all(|g| g.is_finite())
}

/// Trains per `cfg` and writes the metrics log, per-epoch checkpoints, the
/// averaged final checkpoint and a JSON report into `out_dir`.
///
/// Teacher-student methods and RCCL start from `init` (required for the
/// former); pretraining starts from `init` if given, else from a seeded
/// random model.
pub fn run_training<T: Scalar>(
    cfg: &ExperimentConfig,
    data: TrainData<'_, T>,
    init: Option<&SeparatorModel<T>>,
    out_dir: &Path,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let tc = &cfg.train;
    let method = tc.method;
    ensure!(
        data.train.len() >= tc.batch_size,
        InvalidData,
        "{} training mixtures cannot fill a batch of {}",
        data.train.len(),
        tc.batch_size
    );
    if method == Method::Pit {
        ensure!(data.train.has_references(), InvalidData, "PIT needs references");
    }
    let ood = if tc.semi_supervised {
        let ood = data
            .ood
            .ok_or_else(|| Error::InvalidData("semi-supervised training needs a labeled set".into()))?;
        ensure!(
            ood.has_references() && !ood.is_empty(),
            InvalidData,
            "the labeled set needs references"
        );
        Some(ood)
    } else {
        None
    };

    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(format!("creating {}", ckpt_dir.display())))?;
    let cfg_path = out_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml_string()).map_err(io_err(format!("writing {}", cfg_path.display())))?;

    let student_arch = cfg.model.architecture(tc.n_student);
    let mut teacher_state: Option<TeacherStudentState<T>> = None;
    let mut teacher: Option<SeparatorModel<T>> = None;
    let mut student = if method.uses_teacher() {
        let pre = init.ok_or_else(|| Error::InvalidConfig(format!("{method} needs a pretrained model")))?;
        ensure!(
            pre.n_outputs() == tc.n_teacher,
            InvalidConfig,
            "pretrained model has {} outputs, n_teacher is {}",
            pre.n_outputs(),
            tc.n_teacher
        );
        let same = *pre.architecture() == student_arch;
        let student_init = if same {
            None
        } else {
            Some(SeparatorModel::<T>::random(student_arch, tc.seed)?.params().to_vec())
        };
        let state = TeacherStudentState::init_from_pretrained(pre.params().to_vec(), student_init, tc.protocol, tc.alpha())?;
        let s_arch = if same { *pre.architecture() } else { student_arch };
        let s = SeparatorModel::from_params(s_arch, state.student().to_vec())?;
        teacher = Some(pre.clone());
        teacher_state = Some(state);
        s
    } else {
        match init {
            Some(m) => m.clone(),
            None => SeparatorModel::random(student_arch, tc.seed)?,
        }
    };
    let mut ring: CheckpointRing<T> = CheckpointRing::new(RING_CAPACITY);

    let settings = StepSettings::from_config(tc);
    let mut opt = AdamW::new(student.params().len(), tc.weight_decay);
    let schedule = LrSchedule {
        peak: tc.peak_lr,
        warmup_steps: tc.warmup_steps,
        factor: tc.lr_decay.factor,
        every_n_epochs: tc.lr_decay.every_n_epochs,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut ood_order: Vec<usize> = ood.map(|d| (0..d.len()).collect()).unwrap_or_default();
    let mut ood_cursor = usize::MAX;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(
        File::create(&metrics_path).map_err(io_err(format!("creating {}", metrics_path.display())))?,
    );
    let start = Instant::now();
    let initial_valid_sisdr_db = match init {
        Some(m) => Some(evaluate_model(m, data.valid, tc.eval_mc)?.mean_sisdr_db),
        None => None,
    };

    let n_batches = data.train.len() / tc.batch_size;
    let mut updates = 0usize;
    let mut micro = 0usize;
    let mut post_warmup_epochs = 0usize;
    let mut zeroed_pairs = 0usize;
    let mut records = Vec::new();
    let mut lr = schedule.lr(1, 0);
    let mut acc = vec![T::zero(); student.params().len()];
    let accum_scale = T::c(1.0 / tc.grad_accum_steps as f64);
    let mut done = false;

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for bi in 0..n_batches {
            let idx = &order[bi * tc.batch_size..(bi + 1) * tc.batch_size];
            let batch = data.train.batch(idx)?.into_samples();
            let step_seed: u64 = rng.random();
            let shuffler = teacher.as_ref().unwrap_or(&student);
            let out: StepOutput<T> = if let Some(ood) = ood {
                let mut pick = Vec::with_capacity(tc.batch_size);
                while pick.len() < tc.batch_size.min(ood.len()) {
                    if ood_cursor >= ood_order.len() {
                        ood_order.shuffle(&mut rng);
                        ood_cursor = 0;
                    }
                    pick.push(ood_order[ood_cursor]);
                    ood_cursor += 1;
                }
                let ood_batch = ood.batch(&pick)?.into_samples();
                let refs: Vec<Array2<T>> = pick.iter().map(|&i| ood.references(i).cloned().unwrap()).collect();
                step_semi_supervised(
                    method,
                    shuffler,
                    &student,
                    ood_batch.view(),
                    &refs,
                    batch.view(),
                    &settings,
                    tc.unsup_weight,
                    step_seed,
                )?
            } else if method == Method::Pit {
                let refs: Vec<Array2<T>> = idx.iter().map(|&i| data.train.references(i).cloned().unwrap()).collect();
                step_supervised_pit(&student, batch.view(), &refs, &settings)?
            } else {
                step_unsupervised(method, shuffler, &student, batch.view(), &settings, step_seed)?
            };
            let grads = if method == Method::Rccl {
                out.grads.combined()?
            } else {
                out.grads.solver
            };
            let loss = out.loss.f64();
            if !loss.is_finite() || !all_finite(&grads) {
                return Err(dump_nonfinite(out_dir, &student, epoch, updates, loss, lr, idx));
            }
            zeroed_pairs += out.stats.zeroed;
            loss_sum += loss;
            loss_count += 1;
            for (a, g) in acc.iter_mut().zip(&grads) {
                *a += *g * accum_scale;
            }
            micro += 1;
            if micro.is_multiple_of(tc.grad_accum_steps) {
                if let Some(max) = tc.grad_clip {
                    clip_grad_norm(&mut acc, max);
                }
                lr = schedule.lr(updates + 1, post_warmup_epochs);
                opt.update(student.params_mut(), &acc, lr);
                acc.iter_mut().for_each(|a| *a = T::zero());
                updates += 1;
                if !all_finite(student.params()) {
                    return Err(dump_nonfinite(out_dir, &student, epoch, updates, loss, lr, idx));
                }
                if tc.max_steps.is_some_and(|m| updates >= m) {
                    done = true;
                    break;
                }
            }
        }

        if let (Some(state), Some(t)) = (teacher_state.as_mut(), teacher.as_mut()) {
            state.student_mut().copy_from_slice(student.params());
            state.epoch_end_update();
            t.set_params(state.teacher())?;
        }
        if updates >= tc.warmup_steps {
            post_warmup_epochs += 1;
        }

        let eval = evaluate_model(&student, data.valid, tc.eval_mc)?;
        let score = eval.mean_sisdr_db;
        match teacher_state.as_mut() {
            Some(state) => state.record_checkpoint(score)?,
            None => ring.record(score, student.params())?,
        }
        Checkpoint::from_model(&student, Role::Solver, updates as u64, epoch as u64)
            .save(&ckpt_dir.join(format!("epoch_{epoch:03}_solver.ckpt")))?;
        if let Some(t) = &teacher {
            Checkpoint::from_model(t, Role::Shuffler, updates as u64, epoch as u64)
                .save(&ckpt_dir.join(format!("epoch_{epoch:03}_shuffler.ckpt")))?;
        }
        let rec = MetricsRecord {
            epoch,
            step: updates,
            train_loss_db: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
            valid_sisdr_db: score,
            lr,
            collapse_metric: eval.collapse_metric,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        serde_json::to_writer(&mut metrics, &rec)?;
        metrics
            .write_all(b"\n")
            .and_then(|_| metrics.flush())
            .map_err(io_err(format!("writing {}", metrics_path.display())))?;
        info!(
            "{method} epoch {epoch} step {updates}: train {:.3} dB, valid SI-SDR {score:.3} dB, collapse {:.3}",
            rec.train_loss_db, rec.collapse_metric
        );
        records.push(rec);
        if done {
            break;
        }
    }
    ensure!(!records.is_empty(), InvalidConfig, "training ran no epochs");

    let (averaged, scores) = match &teacher_state {
        Some(state) => (state.average_best()?, state.ring().scores()),
        None => (ring.average()?, ring.scores()),
    };
    let model = SeparatorModel::from_params(*student.architecture(), averaged)?;
    let final_eval = evaluate_model(&model, data.valid, tc.eval_mc)?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    Checkpoint::from_model(&model, Role::Averaged, updates as u64, records.len() as u64).save(&final_checkpoint)?;

    let report = TrainReport {
        method,
        epochs: records,
        updates,
        initial_valid_sisdr_db,
        final_valid_sisdr_db: final_eval.mean_sisdr_db,
        final_collapse_metric: final_eval.collapse_metric,
        averaged_scores: scores,
        final_checkpoint,
        zeroed_pairs,
    };
    let report_path = out_dir.join(REPORT_FILE);
    fs::write(&report_path, serde_json::to_vec_pretty(&report)?)
        .map_err(io_err(format!("writing {}", report_path.display())))?;
    Ok(TrainOutcome { report, model, teacher })
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Outputs of `model` for every mixture in `data`, `[N_items, N, T]`.
pub fn separate_dataset<T: Scalar>(model: &SeparatorModel<T>, data: &Dataset<T>, mc: bool) -> Result<Array3<T>> {
    let mut out = Array3::zeros((data.len(), model.n_outputs(), data.n_samples()));
    for i in 0..data.len() {
        let mut s = model.forward(data.mixture(i))?;
        if mc {
            s = project_consistent(s.view(), data.mixture(i))?;
        }
        out.index_axis_mut(Axis(0), i).assign(&s);
    }
    Ok(out)
}
