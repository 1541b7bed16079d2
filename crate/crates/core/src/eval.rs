//! Evaluation protocol: regenerate a test split synthetically and score it
//! with FID, character error rate and recognition loss.
//!
//! The feature embedder behind FID is pluggable; the default desk-scale
//! choices are the recognizer backbone (pooled latent columns) or plain
//! pooled pixels. Reported tables carry mean and population standard
//! deviation over evaluation runs.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tape;
use crate::corpus::{mix_seed, sample_style_indices, Alphabet, CorpusSplit};
use crate::losses::TrainError;
use crate::nets::{image_batch, Models, Recognizer};
use crate::nn::AdamConfig;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 images per side for FID, got {real} real / {fake} fake")]
    TooFewImages { real: usize, fake: usize },
    #[error("sample set is empty")]
    EmptySet,
    #[error("feature matrix has non-finite entries")]
    NonFiniteFeatures,
    #[error("net: {0}")]
    Net(#[from] crate::nets::NetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One regenerated sample: what was generated, for whom, from what.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub image: Array2<f64>,
    pub transcription: String,
    pub writer_id: String,
    pub source_id: String,
}

/// Provenance record of one generated sample.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub source_id: String,
    pub writer_id: String,
    pub word: String,
    pub style_ids: Vec<String>,
}

/// Generation manifest: checkpoint identity, seed and per-sample provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub checkpoint_hash: String,
    pub seed: u64,
    pub skipped_writers: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub samples: Vec<SynthSample>,
    pub manifest: Manifest,
}

/// Regenerate every test word of `split` with the generator: one image per
/// (writer, word) occurrence, style sets redrawn from a fresh shuffle for
/// each word so repeated content gets different priming.
pub fn regenerate_split(
    models: &Models,
    split: &CorpusSplit,
    seed: u64,
    style_k: usize,
    checkpoint_hash: &str,
) -> Result<SyntheticSplit, EvalError> {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, 0x5EED));
    let mut samples = Vec::new();
    let mut entries = Vec::new();
    let mut skipped = 0usize;
    for group in &split.test {
        if group.samples.is_empty() {
            skipped += 1;
            continue;
        }
        for sample in &group.samples {
            let style_idx = sample_style_indices(group.samples.len(), style_k, &mut rng)
                .expect("non-empty group");
            let style_images: Vec<Array2<f64>> = style_idx
                .iter()
                .map(|&i| group.samples[i].image.clone())
                .collect();
            let style = models.encode_style(&style_images)?;
            let content = models.encode_content(&sample.transcription)?;
            let image = models.generate_word(&style, &content, &mut rng);
            entries.push(ManifestEntry {
                source_id: sample.id.clone(),
                writer_id: group.writer_id.clone(),
                word: sample.transcription.clone(),
                style_ids: style_idx
                    .iter()
                    .map(|&i| group.samples[i].id.clone())
                    .collect(),
            });
            samples.push(SynthSample {
                image,
                transcription: sample.transcription.clone(),
                writer_id: group.writer_id.clone(),
                source_id: sample.id.clone(),
            });
        }
    }
    Ok(SyntheticSplit {
        samples,
        manifest: Manifest {
            checkpoint_hash: checkpoint_hash.to_string(),
            seed,
            skipped_writers: skipped,
            entries,
        },
    })
}

// ---- FID ----

/// Maps images to feature vectors for the Fréchet distance.
pub trait Embedder {
    fn embed(&self, images: &[Array2<f64>]) -> Array2<f64>;
}

/// Average-pools each image onto a fixed grid and flattens it.
pub struct PixelEmbedder {
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Embedder for PixelEmbedder {
    fn embed(&self, images: &[Array2<f64>]) -> Array2<f64> {
        let dim = self.grid_h * self.grid_w;
        let mut out = Array2::<f64>::zeros((images.len(), dim));
        for (r, img) in images.iter().enumerate() {
            let (h, w) = img.dim();
            for gi in 0..self.grid_h {
                for gj in 0..self.grid_w {
                    let y0 = gi * h / self.grid_h;
                    let y1 = ((gi + 1) * h / self.grid_h).max(y0 + 1).min(h);
                    let x0 = gj * w / self.grid_w;
                    let x1 = ((gj + 1) * w / self.grid_w).max(x0 + 1).min(w);
                    let block = img.slice(ndarray::s![y0..y1, x0..x1]);
                    out[[r, gi * self.grid_w + gj]] = block.sum() / block.len() as f64;
                }
            }
        }
        out
    }
}

/// Identity over rows: treats each 1-row image as a raw feature vector.
/// Used to drive the distance computation on synthetic embeddings.
pub struct FlattenEmbedder;

impl Embedder for FlattenEmbedder {
    fn embed(&self, images: &[Array2<f64>]) -> Array2<f64> {
        let dim = images[0].len();
        let mut out = Array2::<f64>::zeros((images.len(), dim));
        for (r, img) in images.iter().enumerate() {
            for (c, &v) in img.iter().enumerate() {
                out[[r, c]] = v;
            }
        }
        out
    }
}

/// Pooled latent columns of the recognizer backbone.
pub struct RecognizerEmbedder<'a> {
    pub rec: &'a Recognizer,
}

impl Embedder for RecognizerEmbedder<'_> {
    fn embed(&self, images: &[Array2<f64>]) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros((images.len(), self.rec.feature_dim()));
        for (r, img) in images.iter().enumerate() {
            let mut t = Tape::inference();
            let p = self.rec.store.bind(&mut t);
            let x = t.leaf(image_batch(&[img]));
            let cols = t_value_columns(&mut t, &p, self.rec, x);
            out.row_mut(r).assign(&cols);
        }
        out
    }
}

fn t_value_columns(
    t: &mut Tape,
    p: &crate::nn::Bound,
    rec: &Recognizer,
    x: crate::autograd::Var,
) -> Array1<f64> {
    let cols = rec.latent_columns(t, p, x);
    let shape = t.shape(cols).to_vec();
    let v = t.value(cols);
    let tw = shape[1];
    let f = shape[2];
    let mut pooled = Array1::<f64>::zeros(f);
    for j in 0..tw {
        for k in 0..f {
            pooled[k] += v[[0, j, k]];
        }
    }
    pooled.mapv_inplace(|v| v / tw as f64);
    pooled
}

const FID_EPS: f64 = 1e-6;

fn mean_and_cov(features: &Array2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let (n, d) = features.dim();
    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for row in features.rows() {
        let centered: Vec<f64> = row.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1).max(1) as f64;
    cov /= denom;
    for i in 0..d {
        cov[(i, i)] += FID_EPS;
    }
    (mean, cov)
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut d = DMatrix::<f64>::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature-row matrices:
/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, covariances regularized
/// with `1e-6 I`.
pub fn frechet_distance(f1: &Array2<f64>, f2: &Array2<f64>) -> Result<f64, EvalError> {
    if f1.iter().chain(f2.iter()).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFiniteFeatures);
    }
    let d = f1.ncols();
    if f1.nrows() <= d || f2.nrows() <= d {
        eprintln!(
            "warning: covariance fit from {}/{} samples in {d} dims is rank deficient; \
             relying on the {FID_EPS} ridge",
            f1.nrows(),
            f2.nrows()
        );
    }
    let (m1, s1) = mean_and_cov(f1);
    let (m2, s2) = mean_and_cov(f2);
    let mean_term: f64 = m1
        .iter()
        .zip(&m2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    // tr((S1 S2)^1/2) via the symmetric product A S2 A with A = S1^1/2
    let a = sqrtm_psd(&s1);
    let inner = &a * &s2 * &a;
    let s = sqrtm_psd(&inner);
    let tr_term = s1.trace() + s2.trace() - 2.0 * s.trace();
    Ok(mean_term + tr_term)
}

/// FID between two image sets under a pluggable embedder.
pub fn compute_fid(
    real: &[Array2<f64>],
    fake: &[Array2<f64>],
    embedder: &dyn Embedder,
) -> Result<f64, EvalError> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(EvalError::TooFewImages {
            real: real.len(),
            fake: fake.len(),
        });
    }
    let f1 = embedder.embed(real);
    let f2 = embedder.embed(fake);
    frechet_distance(&f1, &f2)
}

// ---- CER / HTR loss ----

/// Levenshtein edit distance between two index sequences.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate in percent: summed edit distance over summed
/// reference length, times 100. Samples with empty references are excluded;
/// the second return value counts them.
pub fn compute_cer(
    rec: &Recognizer,
    samples: &[SynthSample],
    alphabet: &Alphabet,
) -> Result<(f64, usize), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut total_dist = 0usize;
    let mut total_ref = 0usize;
    let mut excluded = 0usize;
    for s in samples {
        let reference = alphabet.encode(&s.transcription).unwrap_or_default();
        if reference.is_empty() {
            excluded += 1;
            continue;
        }
        let out = rec.recognize_image(&s.image);
        total_dist += levenshtein(&out.decoded, &reference);
        total_ref += reference.len();
    }
    if total_ref == 0 {
        return Err(EvalError::EmptySet);
    }
    Ok((100.0 * total_dist as f64 / total_ref as f64, excluded))
}

/// Mean per-sample supervised recognition loss (cross entropy summed over
/// decoding steps, end token included).
pub fn compute_htr_loss(
    rec: &Recognizer,
    samples: &[SynthSample],
    alphabet: &Alphabet,
) -> Result<(f64, usize), EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for s in samples {
        let Some(target) = alphabet.encode(&s.transcription) else {
            excluded += 1;
            continue;
        };
        if target.is_empty() {
            excluded += 1;
            continue;
        }
        let mut t = Tape::inference();
        let p = rec.store.bind(&mut t);
        let x = t.leaf(image_batch(&[&s.image]));
        let (loss, _) = rec.teacher_forced(&mut t, &p, x, &[target]);
        total += t.scalar(loss);
        counted += 1;
    }
    if counted == 0 {
        return Err(EvalError::EmptySet);
    }
    Ok((total / counted as f64, excluded))
}

// ---- report ----

/// Metrics of a single evaluation run of one variant.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RunMetrics {
    pub fid: f64,
    pub cer: f64,
    pub htr_loss: f64,
}

/// Aggregated metrics of one variant. `*_std` is the population standard
/// deviation over evaluation runs (divisor `n`, not `n - 1`).
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct VariantReport {
    pub fid: f64,
    pub cer_mean: f64,
    pub cer_std: f64,
    pub htr_loss_mean: f64,
    pub htr_loss_std: f64,
    pub n_runs: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(transparent)]
pub struct MetricReport {
    pub variants: BTreeMap<String, VariantReport>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate per-run metrics into the report table.
pub fn report(runs_by_variant: &BTreeMap<String, Vec<RunMetrics>>) -> MetricReport {
    let mut variants = BTreeMap::new();
    for (name, runs) in runs_by_variant {
        if runs.is_empty() {
            continue;
        }
        let fids: Vec<f64> = runs.iter().map(|r| r.fid).collect();
        let cers: Vec<f64> = runs.iter().map(|r| r.cer).collect();
        let losses: Vec<f64> = runs.iter().map(|r| r.htr_loss).collect();
        let (fid_mean, _) = mean_std(&fids);
        let (cer_mean, cer_std) = mean_std(&cers);
        let (htr_mean, htr_std) = mean_std(&losses);
        variants.insert(
            name.clone(),
            VariantReport {
                fid: fid_mean,
                cer_mean,
                cer_std,
                htr_loss_mean: htr_mean,
                htr_loss_std: htr_std,
                n_runs: runs.len(),
            },
        );
    }
    MetricReport { variants }
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Human-readable aligned table, one row per variant.
    pub fn to_table(&self) -> String {
        let name_w = self
            .variants
            .keys()
            .map(|k| k.len())
            .max()
            .unwrap_or(7)
            .max(7);
        let mut out = format!(
            "{:<name_w$}  {:>10}  {:>16}  {:>16}  {:>6}\n",
            "variant", "FID", "CER", "HTR loss", "runs"
        );
        for (name, v) in &self.variants {
            out.push_str(&format!(
                "{:<name_w$}  {:>10.4}  {:>8.4} ± {:>5.4}  {:>8.4} ± {:>5.4}  {:>6}\n",
                name, v.fid, v.cer_mean, v.cer_std, v.htr_loss_mean, v.htr_loss_std, v.n_runs
            ));
        }
        out
    }
}

/// Train a standalone recognizer on the train partition, for use as the
/// independent scoring system. Widths and seed should differ from the
/// adversarially trained recognizer; see [`htr_model_config`].
pub fn train_htr_recognizer(
    split: &CorpusSplit,
    cfg: &crate::nets::ModelConfig,
    seed: u64,
    steps: u64,
    batch_size: usize,
) -> Result<Recognizer, TrainError> {
    let models = Models::new(cfg.clone(), mix_seed(seed, 0x47D));
    let mut rec = models.rec;
    let alphabet = Alphabet::latin();
    let mut stream = crate::corpus::make_batches(split, batch_size, 1, mix_seed(seed, 0xDA7A))?;
    let adam = AdamConfig::default();
    for _ in 0..steps {
        let batch = stream.next_batch();
        let refs: Vec<&Array2<f64>> = batch.items.iter().map(|it| &it.real).collect();
        let targets: Vec<Vec<usize>> = batch
            .items
            .iter()
            .map(|it| alphabet.encode(&it.transcription).expect("filtered"))
            .collect();
        let mut t = Tape::new();
        let p = rec.store.bind(&mut t);
        let x = t.leaf(image_batch(&refs));
        let (loss, _) = rec.teacher_forced(&mut t, &p, x, &targets);
        if t.scalar(loss).is_finite() {
            let grads = t.backward(loss);
            rec.store.adam_step(&p, &grads, &adam);
        }
    }
    Ok(rec)
}

/// A second recognizer architecture for independent scoring: wider backbone
/// and hidden state than the training-time recognizer.
pub fn htr_model_config(base: &crate::nets::ModelConfig) -> crate::nets::ModelConfig {
    let mut cfg = base.clone();
    cfg.rec_channels = [
        base.rec_channels[0] + base.rec_channels[0] / 2 + 1,
        base.rec_channels[1] + base.rec_channels[1] / 2 + 1,
        base.rec_channels[2] + base.rec_channels[2] / 2 + 1,
    ];
    cfg.rec_hidden = base.rec_hidden + base.rec_hidden / 2;
    cfg
}
