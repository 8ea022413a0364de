//! Masked-pixel objective, AdamW with warmup plus cosine schedule, the
//! training loop and checkpoint persistence.
//!
//! A step is deterministic for a given seed: masks and augmentations draw from
//! per-sample seeds derived from `(seed, step, index)`, and per-sample
//! gradients are reduced in a fixed grouping regardless of thread count.

mod checkpoint;
mod data;
mod loss;
mod optim;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION};
pub use data::{random_resized_crop, rand_augment, shape_corpus, shape_scene, Augmentation, RandAugment, Sample};
pub use loss::{masked_mse, masked_mse_with_grad, LossMode};
pub use optim::{decays, AdamW, AdamWConfig};
pub use schedule::LrSchedule;

use crate::canvas::Image;
use crate::gaussian::{activate_backward, activate_parameters, GaussianError, GaussianSet, RawGaussians};
use crate::render::{project, render_backward_activated, render_tiled, CameraConfig, RenderError};
use crate::vit::{gather_visible, patchify, sample_mask, GmaeModel, MaskSpec, ModelError, ParameterStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss needs at least one masked patch")]
    EmptyMask,
    #[error("non-finite loss at step {step}, batch {batch}; step aborted")]
    NonFiniteLoss { step: u64, batch: u64 },
    #[error("non-finite gradient in '{tensor}' at step {step}, batch {batch}; step aborted")]
    NonFiniteGradient { step: u64, batch: u64, tensor: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
}

/// Optimisation recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub warmup_epochs: u64,
    pub epochs: u64,
    pub mask_ratio: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            batch_size: 64,
            warmup_epochs: 2,
            epochs: 50,
            mask_ratio: 0.75,
            loss_mode: LossMode::Masked,
            seed: 0,
            augmentation: Augmentation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return bad(format!("base_lr must be finite and >= 0, got {}", self.base_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be finite and >= 0, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        if let Some((lo, hi)) = self.augmentation.crop_scale {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("crop scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"));
            }
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Mixes a run seed with stream coordinates (splitmix64 finaliser).
pub fn derive_seed(seed: u64, a: u64, b: u64, stream: u64) -> u64 {
    let mut z = seed;
    for v in [a, b, stream] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const MASK_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

/// Samples per gradient partial. Fixed so the reduction order does not depend
/// on the thread count.
const GRAD_GROUP: usize = 8;

/// Mask for sample `index` of the step `step`. Ratio 0 means every patch is
/// visible.
pub fn step_mask(n_tokens: usize, ratio: f64, seed: u64, step: u64, index: u64) -> Result<MaskSpec, ModelError> {
    if ratio == 0.0 {
        return Ok(MaskSpec::full_visibility(n_tokens));
    }
    sample_mask(n_tokens, ratio, derive_seed(seed, step, index, MASK_STREAM))
}

/// Everything the model predicts for one image.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub raw: RawGaussians,
    pub gaussians: GaussianSet,
    pub image: Image,
}

/// Encodes the visible patches of `image` and renders the decoded Gaussians.
pub fn reconstruct(
    model: &GmaeModel,
    cam: &CameraConfig,
    image: &Image,
    mask: &MaskSpec,
) -> Result<Reconstruction, TrainError> {
    let grid = model.grid();
    let tokens = patchify(image, &grid)?;
    let visible = gather_visible(&tokens, mask);
    let latents = model.encode(visible.view(), &mask.visible)?;
    let raw = model.decode(latents.view())?;
    let gaussians = activate_parameters(&raw, model.clamp())?;
    let screen = project(&gaussians, cam)?;
    let rendered = render_tiled(&screen, &gaussians, cam).image;
    Ok(Reconstruction {
        raw,
        gaussians,
        image: rendered,
    })
}

/// Loss of one image and its parameter gradient, accumulated into `grads`.
pub fn sample_loss_and_grad(
    model: &GmaeModel,
    cam: &CameraConfig,
    image: &Image,
    mask: &MaskSpec,
    mode: LossMode,
    grads: &mut ParameterStore,
) -> Result<f64, TrainError> {
    let grid = model.grid();
    let tokens = patchify(image, &grid)?;
    let visible = gather_visible(&tokens, mask);
    let (raw, cache) = model.forward(visible.view(), &mask.visible)?;
    if raw.rows().iter().flatten().any(|v| !v.is_finite()) {
        return Ok(f64::NAN);
    }
    let clamp = model.clamp();
    let gaussians = activate_parameters(&raw, clamp)?;
    let screen = project(&gaussians, cam)?;
    let rendered = render_tiled(&screen, &gaussians, cam).image;
    let mode = if mask.masked.is_empty() { LossMode::All } else { mode };
    let (loss, d_image) = masked_mse_with_grad(&rendered, image, mask, &grid, mode)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let d_act = render_backward_activated(&screen, &gaussians, cam, &d_image)?;
    let d_raw = activate_backward(&raw, clamp, &d_act);
    model.backward(&cache, &d_raw, grads);
    Ok(loss)
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// 1-based.
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,epoch,lr,loss";

impl StepRecord {
    /// Shortest round-trip decimal formatting, so equal runs give equal bytes.
    pub fn csv_line(&self) -> String {
        format!("{},{},{:e},{:e}", self.step, self.epoch, self.lr, self.loss)
    }
}

/// Steps per epoch: full batches only, but at least one.
pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> u64 {
    (dataset_len / batch_size.max(1)).max(1) as u64
}

/// Model, optimizer and schedule state of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: GmaeModel,
    pub optimizer: AdamW,
    pub camera: CameraConfig,
    pub config: TrainConfig,
    pub schedule: LrSchedule,
    pub global_step: u64,
}

impl Trainer {
    pub fn new(
        model: GmaeModel,
        config: TrainConfig,
        camera: CameraConfig,
        steps_per_epoch: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        camera.validate()?;
        let grid = model.grid();
        if (camera.height, camera.width) != (grid.height, grid.width) {
            return Err(TrainError::Config(format!(
                "camera {}x{} does not match model input {}x{}",
                camera.height, camera.width, grid.height, grid.width
            )));
        }
        let optimizer = AdamW::new(config.adamw(), model.params());
        let schedule = LrSchedule::from_epochs(config.base_lr, config.warmup_epochs, config.epochs, steps_per_epoch);
        Ok(Self {
            model,
            optimizer,
            camera,
            config,
            schedule,
            global_step: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            global_step: self.global_step,
            params: self.model.params().clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Resumes from `ckpt`; the schedule is rebuilt from its train config.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        camera: CameraConfig,
        steps_per_epoch: u64,
    ) -> Result<Self, TrainError> {
        let model = ckpt.model().map_err(|e| TrainError::Config(e.to_string()))?;
        let mut t = Self::new(model, ckpt.train_config.clone(), camera, steps_per_epoch)?;
        t.optimizer = ckpt.optimizer.clone();
        t.global_step = ckpt.global_step;
        Ok(t)
    }

    /// Loss and mean gradient of a batch without touching any state.
    pub fn batch_gradient(&self, batch: &[Image], batch_index: u64) -> Result<(f64, ParameterStore), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Shape("empty batch".into()));
        }
        let step = self.global_step;
        let n_tokens = self.model.grid().num_tokens();
        let cfg = &self.config;
        let partials: Vec<Result<(f64, ParameterStore), TrainError>> = batch
            .par_chunks(GRAD_GROUP)
            .enumerate()
            .map(|(g, chunk)| {
                let mut grads = self.model.params().zeros_like();
                let mut loss = 0.0;
                for (j, image) in chunk.iter().enumerate() {
                    let index = (g * GRAD_GROUP + j) as u64;
                    let mask = step_mask(n_tokens, cfg.mask_ratio, cfg.seed, step, index)?;
                    loss += sample_loss_and_grad(&self.model, &self.camera, image, &mask, cfg.loss_mode, &mut grads)?;
                }
                Ok((loss, grads))
            })
            .collect();
        let mut total = 0.0;
        let mut grads: Option<ParameterStore> = None;
        for p in partials {
            let (l, g) = p?;
            total += l;
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        let loss = total * inv;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, batch: batch_index });
        }
        if let Some(e) = grads.entries().iter().find(|e| e.tensor.data.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFiniteGradient {
                step,
                batch: batch_index,
                tensor: e.name.clone(),
            });
        }
        Ok((loss, grads))
    }

    /// Forward, backward and one optimizer update on already-augmented images.
    /// On error nothing is modified.
    pub fn train_step(&mut self, batch: &[Image], epoch: u64, batch_index: u64) -> Result<StepRecord, TrainError> {
        let (loss, grads) = self.batch_gradient(batch, batch_index)?;
        let lr = self.schedule.lr_at(self.global_step);
        self.optimizer.step(self.model.params_mut(), &grads, lr);
        let record = StepRecord {
            step: self.global_step,
            epoch,
            lr,
            loss,
        };
        self.global_step += 1;
        Ok(record)
    }

    /// One pass over `data` in a seed-determined order. `epoch` is 1-based.
    pub fn train_epoch(
        &mut self,
        data: &[Image],
        epoch: u64,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<Vec<StepRecord>, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Shape("empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, epoch, 0, SHUFFLE_STREAM)));
        let steps = steps_per_epoch(data.len(), self.config.batch_size);
        let batch_size = self.config.batch_size.min(data.len());
        let mut records = Vec::with_capacity(steps as usize);
        for b in 0..steps {
            let step = self.global_step;
            let aug = self.config.augmentation;
            let seed = self.config.seed;
            let idx = &order[b as usize * batch_size..(b as usize + 1) * batch_size];
            let batch: Vec<Image> = idx
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step, j as u64, AUGMENT_STREAM));
                    aug.apply(&data[i], &mut rng)
                })
                .collect();
            let rec = self.train_step(&batch, epoch, b)?;
            on_step(&rec);
            records.push(rec);
        }
        Ok(records)
    }
}

/// Mean loss per epoch, in epoch order.
pub fn epoch_means(records: &[StepRecord]) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64, usize)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.loss;
                *n += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ModelConfig;

    fn micro() -> ModelConfig {
        ModelConfig {
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            enc_dim: 8,
            enc_depth: 1,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            mlp_ratio: 2,
            num_queries: 6,
            scale_clamp: 1.0,
        }
    }

    fn trainer(lr: f64) -> Trainer {
        let cfg = TrainConfig {
            base_lr: lr,
            warmup_epochs: 0,
            epochs: 10,
            batch_size: 2,
            mask_ratio: 0.5,
            augmentation: Augmentation::none(),
            ..TrainConfig::default()
        };
        let model = GmaeModel::new(micro(), 3).unwrap();
        Trainer::new(model, cfg, CameraConfig::new(8, 8), 1).unwrap()
    }

    fn images() -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        shape_corpus(&mut rng, 2, 8, 8).into_iter().map(|s| s.image).collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut t = trainer(0.0);
        let before = t.model.params().clone();
        t.train_step(&images(), 1, 0).unwrap();
        assert_eq!(t.model.params(), &before);
        assert_eq!(t.global_step, 1);
    }

    #[test]
    fn non_finite_input_aborts_without_update() {
        let mut t = trainer(1e-3);
        let before = t.model.params().clone();
        let mut batch = images();
        batch[1].data_mut()[5] = f64::NAN;
        let err = t.train_step(&batch, 1, 7).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { batch: 7, .. } | TrainError::NonFiniteGradient { batch: 7, .. }), "{err}");
        assert_eq!(t.model.params(), &before);
        assert_eq!(t.global_step, 0);
        assert_eq!(t.optimizer.t, 0);
    }

    #[test]
    fn masks_depend_on_step_and_index() {
        let a = step_mask(64, 0.75, 1, 0, 0).unwrap();
        assert_eq!(a, step_mask(64, 0.75, 1, 0, 0).unwrap());
        assert_ne!(a.visible, step_mask(64, 0.75, 1, 1, 0).unwrap().visible);
        assert_ne!(a.visible, step_mask(64, 0.75, 1, 0, 1).unwrap().visible);
        assert_eq!(step_mask(64, 0.0, 1, 0, 0).unwrap().masked.len(), 0);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = TrainConfig::default();
        c.warmup_epochs = 60;
        assert!(c.validate().unwrap_err().to_string().contains("warmup_epochs"));
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().unwrap_err().to_string().contains("batch_size"));
    }

    #[test]
    fn epoch_means_group_consecutive_records() {
        let r = |epoch, loss| StepRecord { step: 0, epoch, lr: 0.0, loss };
        assert_eq!(epoch_means(&[r(1, 1.0), r(1, 3.0), r(2, 5.0)]), vec![(1, 2.0), (2, 5.0)]);
    }
}
