//! Synthetic mixtures of speech-like tone complexes and coloured noise.
//!
//! Each speech-like source is a harmonic complex with a slowly gliding
//! fundamental, a random formant envelope and a syllable-rate amplitude
//! envelope. Two-talker mixtures draw one low-register and one high-register
//! talker so the fundamentals never coincide. Noise is low-passed Gaussian
//! noise scaled to an exact SNR against the summed speech.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, io_err, Error, Result};
use crate::scalar::Scalar;
use crate::signals::{signal_power, WaveformBatch};

pub const MIN_SNR_DB: f64 = 10.0;
pub const MAX_SNR_DB: f64 = 20.0;
pub const MIN_SOURCE_POWER: f64 = 1e-8;
/// Width of each split's seed range.
pub const SPLIT_SEED_SPAN: u64 = 1_000_000;

/// Fundamental-frequency ranges (Hz) of the two talker registers.
const REGISTERS: [(f64, f64); 2] = [(95.0, 135.0), (190.0, 270.0)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub n_speech: usize,
    pub snr_noise_db: f64,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (1..=2).contains(&self.n_speech),
            InvalidArgument,
            "n_speech must be 1 or 2, got {}",
            self.n_speech
        );
        ensure!(
            (MIN_SNR_DB..=MAX_SNR_DB).contains(&self.snr_noise_db),
            InvalidArgument,
            "noise SNR {} dB outside [{MIN_SNR_DB}, {MAX_SNR_DB}]",
            self.snr_noise_db
        );
        ensure!(
            self.sample_rate_hz >= 4000,
            InvalidArgument,
            "sample rate {} Hz too low for the talker model",
            self.sample_rate_hz
        );
        ensure!(
            self.duration_s.is_finite() && self.n_samples() >= 64,
            InvalidArgument,
            "duration {} s too short",
            self.duration_s
        );
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz as f64).round().max(0.0) as usize
    }

    /// Sources in the mixture, noise included.
    pub fn n_components(&self) -> usize {
        self.n_speech + 1
    }
}

/// A mixture and its references (`[K, T]`, speech first, noise last).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedMixture<T> {
    pub mixture: Array1<T>,
    pub references: Array2<T>,
}

impl<T: Scalar> GeneratedMixture<T> {
    pub fn speech(&self) -> ndarray::ArrayView2<'_, T> {
        let k = self.references.nrows();
        self.references.slice(ndarray::s![..k - 1, ..])
    }
}

pub fn generate_mixture<T: Scalar>(spec: &MixtureSpec) -> Result<GeneratedMixture<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_samples();
    let fs = spec.sample_rate_hz as f64;
    let registers: Vec<usize> = if spec.n_speech == 2 {
        vec![0, 1]
    } else {
        vec![rng.random_range(0..2)]
    };
    let mut refs = Array2::<f64>::zeros((spec.n_components(), n));
    for (i, &reg) in registers.iter().enumerate() {
        let mut s = talker(&mut rng, reg, n, fs);
        let gain_db: f64 = rng.random_range(-2.5..2.5);
        let scale = 10f64.powf(gain_db / 20.0) / signal_power(s.view()).sqrt();
        s *= scale;
        refs.row_mut(i).assign(&s);
    }
    let speech_sum = refs.slice(ndarray::s![..spec.n_speech, ..]).sum_axis(Axis(0));
    let mut noise = coloured_noise(&mut rng, n);
    let target = signal_power(speech_sum.view()) / 10f64.powf(spec.snr_noise_db / 10.0);
    noise *= (target / signal_power(noise.view())).sqrt();
    refs.row_mut(spec.n_speech).assign(&noise);

    let references = refs.mapv(T::c);
    let mixture = references.sum_axis(Axis(0));
    Ok(GeneratedMixture { mixture, references })
}

fn talker(rng: &mut ChaCha8Rng, register: usize, n: usize, fs: f64) -> Array1<f64> {
    let (lo, hi) = REGISTERS[register];
    let f0 = rng.random_range(lo..hi);
    let glide_rate = rng.random_range(0.3..1.0);
    let glide_depth = rng.random_range(0.02..0.06);
    let glide_phase = rng.random_range(0.0..2.0 * PI);
    let formants: Vec<(f64, f64)> = [(300.0, 800.0), (900.0, 2200.0), (2300.0, 3200.0)]
        .iter()
        .map(|&(a, b)| (rng.random_range(a..b), rng.random_range(80.0..200.0)))
        .collect();
    let tilt = rng.random_range(0.6..1.2);
    let syllable_rate = rng.random_range(2.5..5.0);
    let syllable_phase = rng.random_range(0.0..2.0 * PI);
    let floor = rng.random_range(0.02..0.1);

    let nyquist_guard = 0.45 * fs;
    let n_harm = ((nyquist_guard / (f0 * (1.0 + glide_depth))).floor() as usize).max(1);
    let amps: Vec<f64> = (1..=n_harm)
        .map(|h| {
            let f = h as f64 * f0;
            let env: f64 = formants
                .iter()
                .map(|&(c, bw)| (-0.5 * ((f - c) / bw).powi(2)).exp())
                .sum();
            (0.15 + env) / (h as f64).powf(tilt)
        })
        .collect();
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let mut out = Array1::zeros(n);
    let mut theta = 0.0f64;
    for t in 0..n {
        let time = t as f64 / fs;
        let f_inst = f0 * (1.0 + glide_depth * (2.0 * PI * glide_rate * time + glide_phase).sin());
        theta += 2.0 * PI * f_inst / fs;
        let mut v = 0.0;
        for (h, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
            v += a * ((h + 1) as f64 * theta + p).sin();
        }
        let syl = 0.5 * (1.0 - (2.0 * PI * syllable_rate * time + syllable_phase).cos());
        out[t] = v * (floor + (1.0 - floor) * syl.powf(1.5));
    }
    out
}

fn coloured_noise(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let pole = rng.random_range(0.3..0.9);
    let mut state = 0.0f64;
    Array1::from_shape_fn(n, |_| {
        let w: f64 = rng.sample(StandardNormal);
        state = pole * state + (1.0 - pole) * w;
        state
    })
}

/// Mixture of mixtures `x1 + x2`.
pub fn make_mom<T: Scalar>(x1: ArrayView1<'_, T>, x2: ArrayView1<'_, T>) -> Result<Array1<T>> {
    ensure!(
        x1.len() == x2.len(),
        InvalidArgument,
        "mixture lengths differ: {} vs {}",
        x1.len(),
        x2.len()
    );
    Ok(&x1 + &x2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn seed_base(self) -> u64 {
        match self {
            Split::Train => SPLIT_SEED_SPAN,
            Split::Valid => 2 * SPLIT_SEED_SPAN,
            Split::Test => 3 * SPLIT_SEED_SPAN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Probability that a mixture holds two talkers rather than one.
    pub two_talker_prob: f64,
    /// Shifts every split's seed range; `seed_offset + count` must stay
    /// inside the split's span.
    pub seed_offset: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_valid: 50,
            n_test: 50,
            duration_s: 2.0,
            sample_rate_hz: 8000,
            snr_min_db: MIN_SNR_DB,
            snr_max_db: MAX_SNR_DB,
            two_talker_prob: 1.0,
            seed_offset: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            MIN_SNR_DB <= self.snr_min_db && self.snr_min_db <= self.snr_max_db && self.snr_max_db <= MAX_SNR_DB,
            InvalidConfig,
            "SNR range [{}, {}] must lie inside [{MIN_SNR_DB}, {MAX_SNR_DB}]",
            self.snr_min_db,
            self.snr_max_db
        );
        ensure!(
            (0.0..=1.0).contains(&self.two_talker_prob),
            InvalidConfig,
            "two_talker_prob must lie in [0, 1]"
        );
        for count in [self.n_train, self.n_valid, self.n_test] {
            ensure!(
                self.seed_offset + count as u64 <= SPLIT_SEED_SPAN,
                InvalidConfig,
                "seed_offset {} + {count} mixtures overflows a split's seed range",
                self.seed_offset
            );
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Valid => self.n_valid,
            Split::Test => self.n_test,
        }
    }

    /// Generation parameters of mixture `index` of `split`.
    pub fn spec(&self, split: Split, index: usize) -> MixtureSpec {
        let seed = split.seed_base() + self.seed_offset + index as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let two: bool = rng.random_bool(self.two_talker_prob);
        let snr = if self.snr_max_db > self.snr_min_db {
            rng.random_range(self.snr_min_db..self.snr_max_db)
        } else {
            self.snr_min_db
        };
        MixtureSpec {
            n_speech: if two { 2 } else { 1 },
            snr_noise_db: snr,
            seed,
            duration_s: self.duration_s,
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Equal-length mixtures with optional per-mixture references.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    ids: Vec<String>,
    mixtures: Array2<T>,
    references: Option<Vec<Array2<T>>>,
    sample_rate_hz: u32,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        ids: Vec<String>,
        mixtures: Array2<T>,
        references: Option<Vec<Array2<T>>>,
        sample_rate_hz: u32,
    ) -> Result<Self> {
        ensure!(
            ids.len() == mixtures.nrows(),
            InvalidData,
            "{} ids for {} mixtures",
            ids.len(),
            mixtures.nrows()
        );
        if let Some(refs) = &references {
            ensure!(
                refs.len() == mixtures.nrows(),
                InvalidData,
                "{} reference sets for {} mixtures",
                refs.len(),
                mixtures.nrows()
            );
            for r in refs {
                ensure!(
                    r.ncols() == mixtures.ncols(),
                    InvalidData,
                    "reference length {} differs from mixture length {}",
                    r.ncols(),
                    mixtures.ncols()
                );
            }
        }
        Ok(Self {
            ids,
            mixtures,
            references,
            sample_rate_hz,
        })
    }

    pub fn generate(cfg: &DatasetConfig, split: Split) -> Result<Self> {
        cfg.validate()?;
        let count = cfg.count(split);
        let mut ids = Vec::with_capacity(count);
        let mut rows = Vec::with_capacity(count);
        let mut refs = Vec::with_capacity(count);
        for i in 0..count {
            let spec = cfg.spec(split, i);
            let g = generate_mixture::<T>(&spec)?;
            ids.push(format!("{}_{i:06}", split.name()));
            rows.push(g.mixture);
            refs.push(g.references);
        }
        let len = cfg.spec(split, 0).n_samples();
        let mut mixtures = Array2::zeros((count, len));
        for (mut dst, src) in mixtures.outer_iter_mut().zip(&rows) {
            dst.assign(src);
        }
        Self::new(ids, mixtures, Some(refs), cfg.sample_rate_hz)
    }

    pub fn len(&self) -> usize {
        self.mixtures.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_samples(&self) -> usize {
        self.mixtures.ncols()
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn mixtures(&self) -> &Array2<T> {
        &self.mixtures
    }

    pub fn mixture(&self, i: usize) -> ArrayView1<'_, T> {
        self.mixtures.row(i)
    }

    pub fn references(&self, i: usize) -> Option<&Array2<T>> {
        self.references.as_ref().map(|r| &r[i])
    }

    pub fn has_references(&self) -> bool {
        self.references.is_some()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<WaveformBatch<T>> {
        let mut out = Array2::zeros((indices.len(), self.n_samples()));
        for (mut row, &i) in out.outer_iter_mut().zip(indices) {
            ensure!(i < self.len(), InvalidArgument, "index {i} out of range");
            row.assign(&self.mixtures.row(i));
        }
        WaveformBatch::new(out, self.sample_rate_hz)
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub seed: Option<u64>,
    pub mixture_path: PathBuf,
    #[serde(default)]
    pub reference_paths: Vec<PathBuf>,
    pub n_sources: usize,
    pub snr_db: Option<f64>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes `split` as 32-bit float WAV files plus a JSONL manifest under
/// `dir/<split>/`.
pub fn write_split(cfg: &DatasetConfig, split: Split, dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let root = dir.join(split.name());
    fs::create_dir_all(&root).map_err(io_err(format!("creating {}", root.display())))?;
    let manifest_path = root.join(MANIFEST_NAME);
    let file = fs::File::create(&manifest_path)
        .map_err(io_err(format!("creating {}", manifest_path.display())))?;
    let mut manifest = BufWriter::new(file);
    for i in 0..cfg.count(split) {
        let spec = cfg.spec(split, i);
        let g = generate_mixture::<f32>(&spec)?;
        let id = format!("{}_{i:06}", split.name());
        let mixture_path = PathBuf::from(format!("{id}_mix.wav"));
        write_wav(&root.join(&mixture_path), g.mixture.view(), spec.sample_rate_hz)?;
        let mut reference_paths = Vec::new();
        for (k, r) in g.references.outer_iter().enumerate() {
            let p = PathBuf::from(format!("{id}_s{k}.wav"));
            write_wav(&root.join(&p), r, spec.sample_rate_hz)?;
            reference_paths.push(p);
        }
        let rec = ManifestRecord {
            id,
            seed: Some(spec.seed),
            mixture_path,
            reference_paths,
            n_sources: spec.n_components(),
            snr_db: Some(spec.snr_noise_db),
        };
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest
            .write_all(b"\n")
            .map_err(io_err(format!("writing {}", manifest_path.display())))?;
    }
    manifest
        .flush()
        .map_err(io_err(format!("writing {}", manifest_path.display())))?;
    Ok(manifest_path)
}

/// Loads a manifest written by [`write_split`] or by hand. Paths are taken
/// relative to the manifest's directory. References are loaded only if every
/// record lists them.
pub fn load_manifest<T: Scalar>(manifest_path: &Path) -> Result<Dataset<T>> {
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(manifest_path)
        .map_err(io_err(format!("opening {}", manifest_path.display())))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(format!("reading {}", manifest_path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<ManifestRecord>(&line)?);
    }
    ensure!(!records.is_empty(), InvalidData, "{} is empty", manifest_path.display());
    let with_refs = records.iter().all(|r| !r.reference_paths.is_empty());
    let mut rate = None;
    let mut mixtures: Vec<Array1<T>> = Vec::new();
    let mut refs = Vec::new();
    for rec in &records {
        let (m, sr) = read_wav::<T>(&root.join(&rec.mixture_path))?;
        if let Some(prev) = rate {
            ensure!(prev == sr, InvalidData, "mixed sample rates {prev} and {sr}");
        }
        rate = Some(sr);
        if let Some(first) = mixtures.first() {
            ensure!(
                first.len() == m.len(),
                InvalidData,
                "{} has {} samples, expected {}",
                rec.mixture_path.display(),
                m.len(),
                first.len()
            );
        }
        if with_refs {
            let mut r = Array2::zeros((rec.reference_paths.len(), m.len()));
            for (mut row, p) in r.outer_iter_mut().zip(&rec.reference_paths) {
                let (s, _) = read_wav::<T>(&root.join(p))?;
                ensure!(s.len() == m.len(), InvalidData, "{} length mismatch", p.display());
                row.assign(&s);
            }
            refs.push(r);
        }
        mixtures.push(m);
    }
    let mut data = Array2::zeros((mixtures.len(), mixtures[0].len()));
    for (mut row, m) in data.outer_iter_mut().zip(&mixtures) {
        row.assign(m);
    }
    Dataset::new(
        records.into_iter().map(|r| r.id).collect(),
        data,
        with_refs.then_some(refs),
        rate.unwrap_or(8000),
    )
}

pub fn write_wav<T: Scalar>(path: &Path, samples: ArrayView1<'_, T>, sample_rate_hz: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s.f64() as f32)?;
    }
    w.finalize()?;
    Ok(())
}

/// Reads mono float or integer PCM.
pub fn read_wav<T: Scalar>(path: &Path) -> Result<(Array1<T>, u32)> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidData(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<T> = match spec.sample_format {
        hound::SampleFormat::Float => r
            .samples::<f32>()
            .map(|s| s.map(|v| T::c(v as f64)))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1i64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| T::c(v as f64 * scale)))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    Ok((Array1::from(samples), spec.sample_rate))
}
