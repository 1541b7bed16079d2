//! Loss composition and the adversarial training step.
//!
//! The generator minimizes the sum of a global adversarial term, a writer
//! classification term and a recognition term; the patch modes add a local
//! adversarial term scored on extracted patches. Critics maximize the
//! saturating objective `E[log D(real)] + E[log(1 - D(fake))]`, with scores
//! squashed to `(0,1)` and clamped at `1e-7` before the logarithm.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::corpus::{mix_seed, Batch, CorpusError};
use crate::nets::{image_batch, sample_noise, Models, NetError};
use crate::nn::AdamConfig;
use crate::patchcrit::{
    label_for_fake, naive_patch_offsets, patch_to_batch, window_for_center, Patch, PatchError,
    PatchSource,
};

const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss component {name} is not finite ({value})")]
    NotFinite { name: &'static str, value: f64 },
    #[error("patch batch is empty")]
    EmptyPatchBatch,
    #[error("patch is missing a character label")]
    MissingLabel,
    #[error("patch: {0}")]
    Patch(#[from] PatchError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("aborting after {0} consecutive anomalous steps")]
    RepeatedAnomalies(u32),
    #[error("mode {0} requires a model built with a local critic")]
    MissingCritic(TrainMode),
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("net: {0}")]
    Net(#[from] NetError),
    #[error("patch: {0}")]
    Patch(#[from] PatchError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which training objective and patch source a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Baseline,
    Naive,
    Centered,
    Smart,
}

impl TrainMode {
    pub fn uses_patches(&self) -> bool {
        !matches!(self, TrainMode::Baseline)
    }

    pub fn conditional(&self) -> bool {
        matches!(self, TrainMode::Smart)
    }

    pub fn all() -> [TrainMode; 4] {
        [
            TrainMode::Baseline,
            TrainMode::Naive,
            TrainMode::Centered,
            TrainMode::Smart,
        ]
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Naive => "naive",
            TrainMode::Centered => "centered",
            TrainMode::Smart => "smart",
        };
        f.write_str(s)
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "naive" => Ok(TrainMode::Naive),
            "centered" => Ok(TrainMode::Centered),
            "smart" => Ok(TrainMode::Smart),
            other => Err(format!(
                "unknown mode {other:?}; expected baseline|naive|centered|smart"
            )),
        }
    }
}

/// Named scalar loss components of one step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossTerms {
    pub d_global: f64,
    pub writer: f64,
    pub recognizer: f64,
    pub d_local: Option<f64>,
    pub total_generator: f64,
    pub total_discriminators: f64,
}

fn ensure_finite(name: &'static str, value: f64) -> Result<f64, LossError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LossError::NotFinite { name, value })
    }
}

/// Compose the three-term generator objective (no local critic).
pub fn loss_composite(
    d_global: f64,
    writer: f64,
    recognizer: f64,
    total_discriminators: f64,
) -> Result<LossTerms, LossError> {
    ensure_finite("d_global", d_global)?;
    ensure_finite("writer", writer)?;
    ensure_finite("recognizer", recognizer)?;
    ensure_finite("total_discriminators", total_discriminators)?;
    Ok(LossTerms {
        d_global,
        writer,
        recognizer,
        d_local: None,
        total_generator: d_global + writer + recognizer,
        total_discriminators,
    })
}

/// Compose the four-term objective with the local patch term added.
pub fn loss_composite_local(
    d_global: f64,
    writer: f64,
    recognizer: f64,
    d_local: f64,
    total_discriminators: f64,
) -> Result<LossTerms, LossError> {
    let base = loss_composite(d_global, writer, recognizer, total_discriminators)?;
    ensure_finite("d_local", d_local)?;
    Ok(LossTerms {
        d_local: Some(d_local),
        total_generator: base.total_generator + d_local,
        ..base
    })
}

/// Fake and real patch sets scored by the local critic on one batch.
#[derive(Clone, Debug)]
pub struct PatchBatch {
    pub fake: Vec<Patch>,
    pub real: Vec<Patch>,
}

fn squashed(score: f64) -> f64 {
    let s = 1.0 / (1.0 + (-score).exp());
    s.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

/// Saturating local critic objective on raw scores:
/// `mean(log s_real) + mean(log(1 - s_fake))`.
fn local_objective(real_scores: &[f64], fake_scores: &[f64]) -> f64 {
    let real: f64 = real_scores.iter().map(|&s| squashed(s).ln()).sum::<f64>()
        / real_scores.len() as f64;
    let fake: f64 = fake_scores
        .iter()
        .map(|&s| (1.0 - squashed(s)).ln())
        .sum::<f64>()
        / fake_scores.len() as f64;
    real + fake
}

/// Unconditional local critic loss over a patch batch.
pub fn loss_local(
    critic: &crate::patchcrit::PatchCritic,
    patches: &PatchBatch,
) -> Result<f64, LossError> {
    if patches.fake.is_empty() || patches.real.is_empty() {
        return Err(LossError::EmptyPatchBatch);
    }
    let score = |p: &Patch| critic.discriminate_patch(&p.pixels).map_err(LossError::from);
    let real: Vec<f64> = patches.real.iter().map(score).collect::<Result<_, _>>()?;
    let fake: Vec<f64> = patches.fake.iter().map(score).collect::<Result<_, _>>()?;
    Ok(local_objective(&real, &fake))
}

/// Conditional local critic loss; every patch must carry a label.
pub fn loss_local_conditional(
    critic: &crate::patchcrit::PatchCritic,
    patches: &PatchBatch,
) -> Result<f64, LossError> {
    if patches.fake.is_empty() || patches.real.is_empty() {
        return Err(LossError::EmptyPatchBatch);
    }
    let score = |p: &Patch| -> Result<f64, LossError> {
        let label = p.label.ok_or(LossError::MissingLabel)?;
        let emb = critic.embed_character(label)?;
        critic
            .discriminate_patch_conditional(&p.pixels, &emb)
            .map_err(LossError::from)
    };
    let real: Vec<f64> = patches.real.iter().map(score).collect::<Result<_, _>>()?;
    let fake: Vec<f64> = patches.fake.iter().map(score).collect::<Result<_, _>>()?;
    Ok(local_objective(&real, &fake))
}

/// One patch to cut: batch item, window left edge, optional label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlannedPatch {
    pub item: usize,
    pub x0: usize,
    pub label: Option<usize>,
}

/// All patch windows of one step, fixed before any parameter update.
#[derive(Clone, Debug, Default)]
pub struct PatchPlan {
    pub real: Vec<PlannedPatch>,
    pub fake: Vec<PlannedPatch>,
}

impl PatchPlan {
    pub fn is_empty(&self) -> bool {
        self.real.is_empty() && self.fake.is_empty()
    }
}

/// Per-term weights of the generator objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub d_global: f64,
    pub writer: f64,
    pub recognizer: f64,
    pub d_local: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // the objective is an unweighted sum
        LossWeights {
            d_global: 1.0,
            writer: 1.0,
            recognizer: 1.0,
            d_local: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainerConfig {
    pub mode: TrainMode,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl TrainerConfig {
    pub fn new(mode: TrainMode, seed: u64) -> Self {
        TrainerConfig {
            mode,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed,
        }
    }
}

/// Result of one training step.
#[derive(Clone, Copy, Debug)]
pub enum StepOutcome {
    Ok(LossTerms),
    /// A loss went non-finite; the affected updates were skipped.
    Anomalous,
}

impl StepOutcome {
    pub fn terms(&self) -> Option<&LossTerms> {
        match self {
            StepOutcome::Ok(t) => Some(t),
            StepOutcome::Anomalous => None,
        }
    }
}

/// Drives the alternating update schedule: critics, then supervised writer
/// and recognizer passes on real data, then the generator and encoders with
/// everything else frozen.
pub struct Trainer {
    pub models: Models,
    pub cfg: TrainerConfig,
    consecutive_anomalies: u32,
    pub last_patch_count: usize,
}

impl Trainer {
    pub fn new(models: Models, cfg: TrainerConfig) -> Result<Self, TrainError> {
        if cfg.mode.uses_patches() && models.critic.is_none() {
            return Err(TrainError::MissingCritic(cfg.mode));
        }
        Ok(Trainer {
            models,
            cfg,
            consecutive_anomalies: 0,
            last_patch_count: 0,
        })
    }

    fn noise_for_step(&self, step: u64, batch: usize) -> ArrayD<f64> {
        let mut rng =
            ChaCha12Rng::seed_from_u64(mix_seed(mix_seed(self.cfg.seed, 0xA11CE), step));
        sample_noise(&mut rng, batch, self.models.cfg.noise_dim)
    }

    fn padded_targets(&self, batch: &Batch) -> (Vec<Vec<usize>>, Vec<usize>) {
        let pad = self.models.alphabet.special_index();
        let mut targets = Vec::with_capacity(batch.items.len());
        let mut padded_flat = Vec::new();
        for item in &batch.items {
            let idx = self
                .models
                .alphabet
                .encode(&item.transcription)
                .expect("corpus filter guarantees alphabet membership");
            padded_flat.extend(self.models.content.pad_indices(&idx, pad));
            targets.push(idx);
        }
        (targets, padded_flat)
    }

    /// Forward the generator on a fresh tape. Returns the fake image var.
    #[allow(clippy::too_many_arguments)]
    fn generator_forward(
        &self,
        t: &mut Tape,
        style_bound: &crate::nn::Bound,
        content_bound: &crate::nn::Bound,
        gen_bound: &crate::nn::Bound,
        batch: &Batch,
        padded_flat: &[usize],
        noise: &ArrayD<f64>,
    ) -> Var {
        let b = batch.items.len();
        let k = batch.items[0].style.len();
        let style_refs: Vec<&Array2<f64>> = batch
            .items
            .iter()
            .flat_map(|it| it.style.iter())
            .collect();
        let style_images = t.leaf(image_batch(&style_refs));
        let style = self.models.style.encode(t, style_bound, style_images, k);
        let g1 = self.models.content.g1(t, content_bound, padded_flat);
        let g2 = self.models.content.g2(t, content_bound, g1, b);
        let z = t.leaf(noise.clone());
        self.models
            .gen
            .generate(t, gen_bound, &self.models.cfg, g1, style, z, &g2)
    }

    /// Detached fake images for the critic phases.
    pub fn generate_detached(&self, batch: &Batch, step: u64) -> Vec<Array2<f64>> {
        let (_, padded_flat) = self.padded_targets(batch);
        let noise = self.noise_for_step(step, batch.items.len());
        let mut t = Tape::inference();
        let sb = self.models.style.store.bind(&mut t);
        let cb = self.models.content.store.bind(&mut t);
        let gb = self.models.gen.store.bind(&mut t);
        let fake = self.generator_forward(&mut t, &sb, &cb, &gb, batch, &padded_flat, &noise);
        let v = t.value(fake);
        let (h, w) = (self.models.cfg.height, self.models.cfg.width);
        (0..batch.items.len())
            .map(|i| {
                v.index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape_with_order((h, w))
                    .unwrap()
            })
            .collect()
    }

    /// Patch windows and labels for this step, computed with the models as
    /// they stand before any update.
    pub fn plan_patches(
        &self,
        batch: &Batch,
        fakes: &[Array2<f64>],
    ) -> Result<PatchPlan, TrainError> {
        let mode = self.cfg.mode;
        if !mode.uses_patches() {
            return Ok(PatchPlan::default());
        }
        let (h, w) = (self.models.cfg.height, self.models.cfg.width);
        let mut plan = PatchPlan::default();
        match mode {
            TrainMode::Baseline => unreachable!(),
            TrainMode::Naive => {
                let offsets = naive_patch_offsets(h, w)?;
                for (i, _) in batch.items.iter().enumerate() {
                    for &x0 in &offsets {
                        plan.real.push(PlannedPatch {
                            item: i,
                            x0,
                            label: None,
                        });
                        plan.fake.push(PlannedPatch {
                            item: i,
                            x0,
                            label: None,
                        });
                    }
                }
            }
            TrainMode::Centered | TrainMode::Smart => {
                let conditional = mode.conditional();
                for (i, item) in batch.items.iter().enumerate() {
                    let target = self
                        .models
                        .alphabet
                        .encode(&item.transcription)
                        .expect("filtered corpus");
                    let n_chars = target.len();
                    // symmetric protocol: recognizer attention on the real
                    // image for real patches, on the fake for fake patches
                    let real_trace = self.models.rec.attention_for(&item.real, &target);
                    let fake_trace = self.models.rec.attention_for(&fakes[i], &target);
                    let real_windows =
                        crate::patchcrit::centered_windows(&real_trace, n_chars, h, w)?;
                    let fake_windows =
                        crate::patchcrit::centered_windows(&fake_trace, n_chars, h, w)?;
                    for (ci, (x0, _)) in real_windows.iter().enumerate() {
                        let label = conditional
                            .then(|| self.models.alphabet.index_of(
                                item.transcription.chars().nth(ci).unwrap(),
                            ))
                            .flatten();
                        plan.real.push(PlannedPatch {
                            item: i,
                            x0: *x0,
                            label,
                        });
                    }
                    for (ci, (x0, _)) in fake_windows.iter().enumerate() {
                        let label = if conditional {
                            Some(label_for_fake(
                                &item.transcription,
                                ci,
                                &self.models.alphabet,
                            )?)
                        } else {
                            None
                        };
                        plan.fake.push(PlannedPatch {
                            item: i,
                            x0: *x0,
                            label,
                        });
                    }
                }
            }
        }
        Ok(plan)
    }

    fn cut_patches(images: &[Array2<f64>], planned: &[PlannedPatch], h: usize) -> Vec<Array2<f64>> {
        planned
            .iter()
            .map(|p| {
                images[p.item]
                    .slice(ndarray::s![.., p.x0..p.x0 + h])
                    .to_owned()
            })
            .collect()
    }

    /// Update the global discriminator; returns its (maximized) objective.
    pub fn step_global_discriminator(&mut self, batch: &Batch, fakes: &[Array2<f64>]) -> f64 {
        let mut t = Tape::new();
        let db = self.models.disc.store.bind(&mut t);
        let real_refs: Vec<&Array2<f64>> = batch.items.iter().map(|it| &it.real).collect();
        let fake_refs: Vec<&Array2<f64>> = fakes.iter().collect();
        let real = t.leaf(image_batch(&real_refs));
        let fake = t.leaf(image_batch(&fake_refs));
        let s_real = self.models.disc.score(&mut t, &db, real);
        let s_fake = self.models.disc.score(&mut t, &db, fake);
        let obj = saturating_objective(&mut t, s_real, s_fake);
        let value = t.scalar(obj);
        if !value.is_finite() {
            return value;
        }
        // gradient ascent: minimize the negated objective
        let neg = t.scalar_affine(obj, -1.0, 0.0);
        let grads = t.backward(neg);
        self.models.disc.store.adam_step(&db, &grads, &self.cfg.adam);
        value
    }

    /// Update the local critic on planned patches; returns its objective.
    pub fn step_local_critic(
        &mut self,
        batch: &Batch,
        fakes: &[Array2<f64>],
        plan: &PatchPlan,
    ) -> Option<f64> {
        if plan.real.is_empty() || plan.fake.is_empty() {
            return None;
        }
        let h = self.models.cfg.height;
        let real_imgs: Vec<Array2<f64>> = batch.items.iter().map(|it| it.real.clone()).collect();
        let real_patches = Self::cut_patches(&real_imgs, &plan.real, h);
        let fake_patches = Self::cut_patches(fakes, &plan.fake, h);
        let critic = self.models.critic.as_ref().expect("checked at build");
        let conditional = critic.is_conditional();

        let mut t = Tape::new();
        let cb = critic.store.bind(&mut t);
        let real_refs: Vec<&Array2<f64>> = real_patches.iter().collect();
        let fake_refs: Vec<&Array2<f64>> = fake_patches.iter().collect();
        let real_var = t.leaf(patch_to_batch(&real_refs));
        let fake_var = t.leaf(patch_to_batch(&fake_refs));
        let (s_real, s_fake) = if conditional {
            let real_labels: Vec<usize> = plan.real.iter().map(|p| p.label.unwrap()).collect();
            let fake_labels: Vec<usize> = plan.fake.iter().map(|p| p.label.unwrap()).collect();
            (
                critic.score_conditional(&mut t, &cb, real_var, &real_labels),
                critic.score_conditional(&mut t, &cb, fake_var, &fake_labels),
            )
        } else {
            (
                critic.score(&mut t, &cb, real_var),
                critic.score(&mut t, &cb, fake_var),
            )
        };
        let obj = saturating_objective(&mut t, s_real, s_fake);
        let value = t.scalar(obj);
        if !value.is_finite() {
            return Some(value);
        }
        let neg = t.scalar_affine(obj, -1.0, 0.0);
        let grads = t.backward(neg);
        let critic = self.models.critic.as_mut().unwrap();
        critic.store.adam_step(&cb, &grads, &self.cfg.adam);
        Some(value)
    }

    /// Supervised writer-classifier and recognizer updates on real data.
    pub fn step_supervised(&mut self, batch: &Batch) -> (f64, f64) {
        let real_refs: Vec<&Array2<f64>> = batch.items.iter().map(|it| &it.real).collect();
        let labels: Vec<usize> = batch.items.iter().map(|it| it.writer_index).collect();
        let (targets, _) = self.padded_targets(batch);

        let writer_loss = {
            let mut t = Tape::new();
            let wb = self.models.writer_cls.store.bind(&mut t);
            let x = t.leaf(image_batch(&real_refs));
            let logits = self.models.writer_cls.logits(&mut t, &wb, x);
            let ce = t.cross_entropy_rows(logits, &labels);
            let loss = t.mean_all(ce);
            let value = t.scalar(loss);
            if value.is_finite() {
                let grads = t.backward(loss);
                self.models
                    .writer_cls
                    .store
                    .adam_step(&wb, &grads, &self.cfg.adam);
            }
            value
        };

        let rec_loss = {
            let mut t = Tape::new();
            let rb = self.models.rec.store.bind(&mut t);
            let x = t.leaf(image_batch(&real_refs));
            let (loss, _) = self.models.rec.teacher_forced(&mut t, &rb, x, &targets);
            let value = t.scalar(loss);
            if value.is_finite() {
                let grads = t.backward(loss);
                self.models.rec.store.adam_step(&rb, &grads, &self.cfg.adam);
            }
            value
        };
        (writer_loss, rec_loss)
    }

    /// Generator and encoder update against the composite objective, with
    /// critics, writer classifier and recognizer frozen. Returns the weighted
    /// generator-side components `(d_global, writer, recognizer, d_local)`.
    pub fn step_generator(
        &mut self,
        batch: &Batch,
        step: u64,
        plan: &PatchPlan,
    ) -> (f64, f64, f64, Option<f64>) {
        let b = batch.items.len();
        let (targets, padded_flat) = self.padded_targets(batch);
        let noise = self.noise_for_step(step, b);
        let w = &self.cfg.weights;

        let mut t = Tape::new();
        let sb = self.models.style.store.bind(&mut t);
        let cb = self.models.content.store.bind(&mut t);
        let gb = self.models.gen.store.bind(&mut t);
        let db = self.models.disc.store.bind(&mut t);
        let wb = self.models.writer_cls.store.bind(&mut t);
        let rb = self.models.rec.store.bind(&mut t);

        let fake = self.generator_forward(&mut t, &sb, &cb, &gb, batch, &padded_flat, &noise);

        // adversarial term the generator minimizes: E[log(1 - D(fake))]
        let s_fake = self.models.disc.score(&mut t, &db, fake);
        let one_minus = fake_side_log(&mut t, s_fake);
        let d_term_raw = t.mean_all(one_minus);
        let d_term = t.scalar_affine(d_term_raw, w.d_global, 0.0);

        let writer_labels: Vec<usize> = batch.items.iter().map(|it| it.writer_index).collect();
        let logits = self.models.writer_cls.logits(&mut t, &wb, fake);
        let ce = t.cross_entropy_rows(logits, &writer_labels);
        let w_term_raw = t.mean_all(ce);
        let w_term = t.scalar_affine(w_term_raw, w.writer, 0.0);

        let (rec_loss, _) = self.models.rec.teacher_forced(&mut t, &rb, fake, &targets);
        let r_term = t.scalar_affine(rec_loss, w.recognizer, 0.0);

        let mut total = t.add(d_term, w_term);
        total = t.add(total, r_term);

        let mut local_value = None;
        if self.cfg.mode.uses_patches() && !plan.fake.is_empty() {
            let critic = self.models.critic.as_ref().expect("checked at build");
            let crb = critic.store.bind(&mut t);
            let h = self.models.cfg.height;
            let crops: Vec<Var> = plan
                .fake
                .iter()
                .map(|p| t.crop(fake, p.item, 0, p.x0, h, h))
                .collect();
            let patch_stack = t.concat(0, &crops);
            let scores = if critic.is_conditional() {
                let labels: Vec<usize> = plan.fake.iter().map(|p| p.label.unwrap()).collect();
                critic.score_conditional(&mut t, &crb, patch_stack, &labels)
            } else {
                critic.score(&mut t, &crb, patch_stack)
            };
            let logs = fake_side_log(&mut t, scores);
            let l_raw = t.mean_all(logs);
            let l_term = t.scalar_affine(l_raw, w.d_local, 0.0);
            total = t.add(total, l_term);
            local_value = Some(t.scalar(l_term));
        }
        self.last_patch_count = plan.fake.len();

        let d_v = t.scalar(d_term);
        let w_v = t.scalar(w_term);
        let r_v = t.scalar(r_term);
        let total_v = t.scalar(total);
        if total_v.is_finite() {
            let grads = t.backward(total);
            self.models.style.store.adam_step(&sb, &grads, &self.cfg.adam);
            self.models
                .content
                .store
                .adam_step(&cb, &grads, &self.cfg.adam);
            self.models.gen.store.adam_step(&gb, &grads, &self.cfg.adam);
        }
        (d_v, w_v, r_v, local_value)
    }

    /// One full alternating step: critics, supervised nets, generator.
    pub fn train_step(&mut self, batch: &Batch, step: u64) -> Result<StepOutcome, TrainError> {
        let fakes = self.generate_detached(batch, step);
        let plan = self.plan_patches(batch, &fakes)?;
        if self.cfg.mode.uses_patches() && self.models.critic.is_none() {
            return Err(TrainError::MissingCritic(self.cfg.mode));
        }

        let d_glob_obj = self.step_global_discriminator(batch, &fakes);
        let d_loc_obj = if self.cfg.mode.uses_patches() {
            self.step_local_critic(batch, &fakes, &plan)
        } else {
            None
        };
        let (w_sup, r_sup) = self.step_supervised(batch);
        let (d_g, w_g, r_g, d_l) = self.step_generator(batch, step, &plan);

        let disc_total = d_glob_obj + d_loc_obj.unwrap_or(0.0);
        let terms = match d_l {
            Some(dl) => loss_composite_local(d_g, w_g, r_g, dl, disc_total),
            None => loss_composite(d_g, w_g, r_g, disc_total),
        };
        let all_finite = [d_glob_obj, w_sup, r_sup]
            .iter()
            .all(|v| v.is_finite())
            && d_loc_obj.map_or(true, |v| v.is_finite());
        match terms {
            Ok(t) if all_finite => {
                self.consecutive_anomalies = 0;
                Ok(StepOutcome::Ok(t))
            }
            _ => {
                self.consecutive_anomalies += 1;
                if self.consecutive_anomalies >= 3 {
                    Err(TrainError::RepeatedAnomalies(self.consecutive_anomalies))
                } else {
                    Ok(StepOutcome::Anomalous)
                }
            }
        }
    }
}

/// `mean(log s(real)) + mean(log(1 - s(fake)))` from raw critic scores.
fn saturating_objective(t: &mut Tape, real_scores: Var, fake_scores: Var) -> Var {
    let real = real_side_log(t, real_scores);
    let fake = fake_side_log(t, fake_scores);
    let mr = t.mean_all(real);
    let mf = t.mean_all(fake);
    t.add(mr, mf)
}

fn real_side_log(t: &mut Tape, scores: Var) -> Var {
    let s = t.sigmoid(scores);
    let s = t.clamp(s, LOG_EPS, 1.0 - LOG_EPS);
    t.ln(s)
}

fn fake_side_log(t: &mut Tape, scores: Var) -> Var {
    let s = t.sigmoid(scores);
    let s = t.clamp(s, LOG_EPS, 1.0 - LOG_EPS);
    let om = t.scalar_affine(s, -1.0, 1.0);
    t.ln(om)
}

/// One JSON log line per training step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub mode: TrainMode,
    pub anomaly: bool,
    #[serde(flatten)]
    pub terms: Option<LossTerms>,
    pub wall_ms: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchcrit::PatchCritic;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn composite_sums_components() {
        let t = loss_composite(1.0, 2.0, 3.0, 0.5).unwrap();
        assert_eq!(t.total_generator, 6.0);
        assert_eq!(t.d_local, None);
        assert_eq!(t.total_discriminators, 0.5);

        // zero writer and recognizer losses: total reduces to the global term
        let t = loss_composite(1.25, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(t.total_generator, 1.25);
    }

    #[test]
    fn composite_local_adds_the_patch_term_exactly() {
        let base = loss_composite(0.3, 0.7, 1.1, 0.0).unwrap();
        let local = loss_composite_local(0.3, 0.7, 1.1, 0.9, 0.0).unwrap();
        assert_eq!(local.total_generator, base.total_generator + 0.9);
        assert_eq!(local.d_local, Some(0.9));

        let t = loss_composite_local(1.0, 1.0, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(t.total_generator, 4.0);

        // additive identity
        let z = loss_composite_local(0.3, 0.7, 1.1, 0.0, 0.0).unwrap();
        assert_eq!(z.total_generator, base.total_generator);
    }

    #[test]
    fn composite_recomputation_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..100 {
            let parts: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let t = loss_composite_local(parts[0], parts[1], parts[2], parts[3], 0.0).unwrap();
            let manual = parts.iter().sum::<f64>();
            assert!((t.total_generator - manual).abs() < 1e-6);
            let sum_of_reported = t.d_global + t.writer + t.recognizer + t.d_local.unwrap();
            assert!((t.total_generator - sum_of_reported).abs() < 1e-6);
        }
    }

    #[test]
    fn composite_rejects_nan() {
        assert!(matches!(
            loss_composite(f64::NAN, 0.0, 0.0, 0.0),
            Err(LossError::NotFinite { name: "d_global", .. })
        ));
        assert!(matches!(
            loss_composite_local(0.0, 0.0, 0.0, f64::INFINITY, 0.0),
            Err(LossError::NotFinite { name: "d_local", .. })
        ));
    }

    fn constant_patch(v: f64) -> Patch {
        Patch {
            pixels: Array2::from_elem((32, 32), v),
            center_x: 16,
            label: Some(0),
            source: PatchSource::Real,
        }
    }

    /// Critic stub whose squashed output is exactly 0.5 (zero weights).
    fn zeroed_critic(conditional: bool) -> PatchCritic {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let mut critic = if conditional {
            PatchCritic::conditional(&mut rng, 32, [2, 3, 4, 4], 52)
        } else {
            PatchCritic::unconditional(&mut rng, 32, [2, 3, 4, 4])
        };
        for id in critic.store.ids() {
            let shape = critic.store.value(id).raw_dim();
            critic.store.set_value(id, ndarray::ArrayD::zeros(shape));
        }
        critic
    }

    #[test]
    fn constant_half_critic_gives_minus_1_3863() {
        let critic = zeroed_critic(false);
        let patches = PatchBatch {
            fake: vec![constant_patch(0.2), constant_patch(0.8)],
            real: vec![constant_patch(0.5), constant_patch(0.1)],
        };
        let v = loss_local(&critic, &patches).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-4, "got {v}");
        assert!((v + 1.3863).abs() < 1e-4);

        let critic = zeroed_critic(true);
        let v = loss_local_conditional(&critic, &patches).unwrap();
        assert!((v + 1.3863).abs() < 1e-4);
    }

    #[test]
    fn perfect_critic_approaches_zero_from_below() {
        // direct check of the objective on raw scores
        let eps = 1e-6f64;
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let v = local_objective(&[logit(1.0 - eps)], &[logit(eps)]);
        assert!(v < 0.0);
        assert!(v > -1e-4, "perfect critic should approach 0: {v}");
    }

    #[test]
    fn local_loss_matches_hand_computed_mean() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let critic = PatchCritic::unconditional(&mut rng, 32, [2, 3, 4, 4]);
        let mut mk = |seed: u64| {
            let mut r = ChaCha12Rng::seed_from_u64(seed);
            Patch {
                pixels: Array2::from_shape_fn((32, 32), |_| r.gen_range(0.0..1.0)),
                center_x: 8,
                label: Some(3),
                source: PatchSource::Fake,
            }
        };
        let patches = PatchBatch {
            fake: vec![mk(1), mk(2), mk(3)],
            real: vec![mk(4), mk(5)],
        };
        let v = loss_local(&critic, &patches).unwrap();
        // independent recomputation over the patch list
        let squash = |s: f64| (1.0 / (1.0 + (-s).exp())).clamp(1e-7, 1.0 - 1e-7);
        let mut real_sum = 0.0;
        for p in &patches.real {
            real_sum += squash(critic.discriminate_patch(&p.pixels).unwrap()).ln();
        }
        let mut fake_sum = 0.0;
        for p in &patches.fake {
            fake_sum += (1.0 - squash(critic.discriminate_patch(&p.pixels).unwrap())).ln();
        }
        let manual = real_sum / 2.0 + fake_sum / 3.0;
        assert!((v - manual).abs() < 1e-9);
    }

    #[test]
    fn local_loss_rejects_empty_and_unlabeled() {
        let critic = zeroed_critic(true);
        let empty = PatchBatch {
            fake: vec![],
            real: vec![constant_patch(0.5)],
        };
        assert!(matches!(
            loss_local_conditional(&critic, &empty),
            Err(LossError::EmptyPatchBatch)
        ));
        let mut unlabeled = constant_patch(0.5);
        unlabeled.label = None;
        let batch = PatchBatch {
            fake: vec![unlabeled],
            real: vec![constant_patch(0.5)],
        };
        assert!(matches!(
            loss_local_conditional(&critic, &batch),
            Err(LossError::MissingLabel)
        ));
    }

    #[test]
    fn conditional_reduces_to_unconditional_when_labels_are_ignored() {
        // zero the label pathway: embedding table and the final-conv channels
        // that read it; scores then cannot depend on the label
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let mut critic = PatchCritic::conditional(&mut rng, 32, [2, 3, 4, 4], 52);
        critic.zero_label_pathway();
        let mut mk = |seed: u64, label: usize| {
            let mut r = ChaCha12Rng::seed_from_u64(seed);
            Patch {
                pixels: Array2::from_shape_fn((32, 32), |_| r.gen_range(0.0..1.0)),
                center_x: 8,
                label: Some(label),
                source: PatchSource::Fake,
            }
        };
        let patches = PatchBatch {
            fake: vec![mk(1, 0), mk(2, 17)],
            real: vec![mk(3, 5), mk(4, 44)],
        };
        let v_cond = loss_local_conditional(&critic, &patches).unwrap();
        // Eq. 3 on the same scores, labels discarded
        let squash = |s: f64| (1.0 / (1.0 + (-s).exp())).clamp(1e-7, 1.0 - 1e-7);
        let zero_emb = vec![0.0; crate::patchcrit::CHAR_EMBED_DIM];
        let score = |p: &Patch| {
            critic
                .discriminate_patch_conditional(&p.pixels, &zero_emb)
                .unwrap()
        };
        let manual = patches
            .real
            .iter()
            .map(|p| squash(score(p)).ln())
            .sum::<f64>()
            / 2.0
            + patches
                .fake
                .iter()
                .map(|p| (1.0 - squash(score(p))).ln())
                .sum::<f64>()
                / 2.0;
        assert!((v_cond - manual).abs() < 1e-9);
    }
}
