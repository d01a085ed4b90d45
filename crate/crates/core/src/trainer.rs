//! The optimization loop: cosine learning-rate and teacher-temperature
//! schedules, per-epoch neighbor-index refresh, warmup with the baseline
//! loss only, then fine-tuning with the full contextual objective.
//!
//! Randomness is organized as documented split streams of the run seed, so
//! a `(dataset, config, seed)` triple always reproduces the same run:
//!
//! - `root.split(0)` - parameter initialization
//! - `root.split(1 + epoch)` - per-epoch stream; within it, `split(2 * step)`
//!   plans the batch and `split(2 * step + 1)` draws the augmentations.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::batching::build_batch;
use crate::dataset::{augment_pair, AugmentConfig, GcdDataset};
use crate::error::{GcdError, Result};
use crate::losses::{loss_total, LossBreakdown, LossConfig, StepInputs};
use crate::mining::{contextual_pairs, k_reciprocal, knn, prototypes, PairLabels};
use crate::model::{
    backward, classify_backward, classify_with_cache, forward, forward_single, ModelConfig,
    ModelParams, UpstreamGrads,
};
use crate::numeric::Mat64;
use crate::rng::Rng;

/// Optimization-loop settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs trained with only the baseline loss.
    pub warmup_epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warm_epochs: usize,
    /// Neighborhood size for contextual mining.
    pub k_nn: usize,
    /// Batch plan: q queries, each with (group_size - 1) neighbors, plus
    /// fillers random extras.
    pub queries: usize,
    pub group_size: usize,
    pub fillers: usize,
    /// Mine pair labels on the un-augmented input's embedding instead of
    /// view A.
    pub mine_on_raw_input: bool,
    /// Epoch cadence for intermediate checkpoint files; 0 keeps only the
    /// final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            warmup_epochs: 50,
            lr0: 0.1,
            momentum: 0.9,
            teacher_temp_start: 0.07,
            teacher_temp_end: 0.04,
            teacher_temp_warm_epochs: 30,
            k_nn: 10,
            queries: 12,
            group_size: 8,
            // 12 queries x 8 + 32 fillers = batch 128
            fillers: 32,
            mine_on_raw_input: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.queries * self.group_size + self.fillers
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(GcdError::Config("epochs must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(GcdError::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.teacher_temp_warm_epochs > self.epochs {
            return Err(GcdError::Config(format!(
                "teacher_temp_warm_epochs {} exceeds epochs {}",
                self.teacher_temp_warm_epochs, self.epochs
            )));
        }
        if self.lr0 <= 0.0 {
            return Err(GcdError::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GcdError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.teacher_temp_start <= 0.0 || self.teacher_temp_end <= 0.0 {
            return Err(GcdError::Config("teacher temperatures must be positive".into()));
        }
        if self.queries == 0 || self.group_size == 0 {
            return Err(GcdError::Config("queries and group_size must be positive".into()));
        }
        if self.k_nn == 0 {
            return Err(GcdError::Config("k_nn must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step's log entry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub lr: f64,
    pub tau_t: f64,
    pub wall_time_s: f64,
}

/// Bundle of everything a run needs besides the dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogRecord>,
}

/// Cosine-decayed learning rate: `lr0 * 0.5 * (1 + cos(pi * epoch / epochs))`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64) -> f64 {
    debug_assert!(epoch < epochs);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

/// Teacher temperature: cosine interpolation from `start` to `end` over the
/// first `warm_epochs`, constant `end` afterwards.
pub fn teacher_temp(epoch: usize, start: f64, end: f64, warm_epochs: usize) -> f64 {
    if warm_epochs == 0 || epoch >= warm_epochs {
        return end;
    }
    let phase = std::f64::consts::PI * epoch as f64 / warm_epochs as f64;
    end + (start - end) * 0.5 * (1.0 + phase.cos())
}

/// Mines pair labels in the chosen embedding space. Batches too small for a
/// neighborhood produce an empty pair matrix.
fn mine_pairs(embeddings: &Mat64, pseudo: &[usize], k_nn: usize) -> Result<PairLabels> {
    let batch = embeddings.rows();
    if batch < 2 {
        return Ok(PairLabels::new(batch));
    }
    let k = k_nn.min(batch - 1);
    let reciprocal = k_reciprocal(&knn(embeddings, k)?);
    contextual_pairs(&reciprocal, pseudo)
}

/// Runs the warmup-then-fine-tune training loop. Deterministic per
/// `(dataset, settings)`; any non-finite loss aborts with context.
pub fn train(dataset: &GcdDataset, settings: &TrainSettings) -> Result<TrainOutcome> {
    train_with_callback(dataset, settings, &mut |_, _| {})
}

/// Like [`train`], invoking `on_epoch(epoch, params)` after each epoch's
/// updates (checkpoint cadence hooks).
pub fn train_with_callback(
    dataset: &GcdDataset,
    settings: &TrainSettings,
    on_epoch: &mut dyn FnMut(usize, &ModelParams),
) -> Result<TrainOutcome> {
    dataset.validate()?;
    settings.validate()?;
    let cfg = &settings.train;
    let n = dataset.len();
    let batch_size = cfg.batch_size();
    if batch_size > n {
        return Err(GcdError::DatasetTooSmall { needed: batch_size, have: n });
    }

    let root = Rng::new(settings.seed);
    let mut params = ModelParams::init(dataset.dim(), dataset.k_total, &settings.model, &root.split(0))?;
    let mut velocity = vec![0.0; params.num_parameters()];
    let steps_per_epoch = n.div_ceil(batch_size);
    let mut log = Vec::with_capacity(settings.train.epochs * steps_per_epoch);
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
        let mut loss_cfg = settings.loss.clone();
        loss_cfg.tau_t = teacher_temp(
            epoch,
            cfg.teacher_temp_start,
            cfg.teacher_temp_end,
            cfg.teacher_temp_warm_epochs,
        );
        let apply_context = epoch >= cfg.warmup_epochs;

        // Per-epoch neighbor index over un-augmented embeddings, full depth
        // so batch construction can always substitute next-nearest unused
        // neighbors.
        let epoch_cache = forward_single(&params, &dataset.points)?;
        let epoch_index = knn(&epoch_cache.z, n - 1)?;

        let epoch_rng = root.split(1 + epoch as u64);
        for step in 0..steps_per_epoch {
            let mut plan_rng = epoch_rng.split(2 * step as u64);
            let plan = build_batch(&epoch_index, cfg.queries, cfg.group_size, cfg.fillers, &mut plan_rng)?;
            let aug_rng = epoch_rng.split(2 * step as u64 + 1);

            let (breakdown, flat_grads) =
                training_step(&params, dataset, &plan.flattened, &aug_rng, settings, &loss_cfg, apply_context)?;
            if !breakdown.is_finite() {
                return Err(GcdError::DivergenceDetected {
                    epoch,
                    step,
                    term: format!("{breakdown:?}"),
                });
            }

            // Momentum update.
            let mut flat = params.flatten();
            for ((p, v), g) in flat.iter_mut().zip(&mut velocity).zip(&flat_grads) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
            if flat.iter().any(|p| !p.is_finite()) {
                return Err(GcdError::DivergenceDetected { epoch, step, term: "parameters".into() });
            }
            params.assign_from_flat(&flat)?;

            log.push(TrainLogRecord {
                epoch,
                step,
                losses: breakdown,
                lr,
                tau_t: loss_cfg.tau_t,
                wall_time_s: started.elapsed().as_secs_f64(),
            });
        }
        on_epoch(epoch, &params);
    }
    Ok(TrainOutcome { params, log })
}

/// Assembles one batch's tensors, evaluates the composite objective, and
/// returns the flattened parameter gradient of the optimized scalar
/// (baseline during warmup, the full objective afterwards).
pub(crate) fn training_step(
    params: &ModelParams,
    dataset: &GcdDataset,
    batch_indices: &[usize],
    aug_rng: &Rng,
    settings: &TrainSettings,
    loss_cfg: &LossConfig,
    apply_context: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let rows = dataset.points.select_rows(batch_indices);
    let views = augment_pair(&rows, batch_indices, &settings.augment, aug_rng);
    let cache = forward(params, &views)?;

    let (student_a, cls_cache_a) = classify_with_cache(params, &cache.a.h, loss_cfg.tau_s)?;
    let (student_b, cls_cache_b) = classify_with_cache(params, &cache.b.h, loss_cfg.tau_s)?;
    let (teacher_a, teacher_cache_a) = classify_with_cache(params, &cache.a.h, loss_cfg.tau_t)?;
    let (teacher_b, teacher_cache_b) = classify_with_cache(params, &cache.b.h, loss_cfg.tau_t)?;

    let pseudo = crate::mining::pseudo_labels(&student_a, &student_b)?;
    let pairs = if settings.train.mine_on_raw_input {
        let raw = forward_single(params, &rows)?;
        mine_pairs(&raw.z, &pseudo, settings.train.k_nn)?
    } else {
        mine_pairs(&cache.a.z, &pseudo, settings.train.k_nn)?
    };
    let protos_a = prototypes(&cache.a.z, &pseudo, dataset.k_total)?;
    let protos_b = prototypes(&cache.b.z, &pseudo, dataset.k_total)?;

    let labels: Vec<i32> = batch_indices.iter().map(|&i| dataset.true_labels[i]).collect();
    let mask: Vec<bool> = batch_indices.iter().map(|&i| dataset.labeled_mask[i]).collect();

    let inputs = StepInputs {
        z_a: &cache.a.z,
        z_b: &cache.b.z,
        student_a: &student_a,
        student_b: &student_b,
        teacher_a: &teacher_a,
        teacher_b: &teacher_b,
        labels: &labels,
        labeled_mask: &mask,
        pairs: &pairs,
        protos_a: &protos_a,
        protos_b: &protos_b,
    };
    let (breakdown, grads) = loss_total(&inputs, loss_cfg, apply_context)?;

    // Classifier logit gradients map onto hidden features and prototypes.
    let (d_h_a, d_t_a) = classify_backward(&cls_cache_a, &grads.d_student_logits_a)?;
    let (d_h_b, d_t_b) = classify_backward(&cls_cache_b, &grads.d_student_logits_b)?;
    let mut upstream = UpstreamGrads {
        d_h_a,
        d_h_b,
        d_z_a: grads.d_z_a,
        d_z_b: grads.d_z_b,
        d_prototypes: d_t_a,
    };
    upstream.d_prototypes.add_assign(&d_t_b);
    if let (Some(dta), Some(dtb)) = (&grads.d_teacher_logits_a, &grads.d_teacher_logits_b) {
        let (d_h_ta, d_t_ta) = classify_backward(&teacher_cache_a, dta)?;
        let (d_h_tb, d_t_tb) = classify_backward(&teacher_cache_b, dtb)?;
        upstream.d_h_a.add_assign(&d_h_ta);
        upstream.d_h_b.add_assign(&d_h_tb);
        upstream.d_prototypes.add_assign(&d_t_ta);
        upstream.d_prototypes.add_assign(&d_t_tb);
    }
    let model_grads = backward(params, &cache, &upstream)?;
    Ok((breakdown, model_grads.flatten()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_gaussian_gcd, GenConfig};

    fn tiny_settings(seed: u64) -> TrainSettings {
        TrainSettings {
            model: ModelConfig { hidden_dim: 8, proj_dim: 6, encoder_layers: 2 },
            augment: AugmentConfig { noise_sigma: 0.05, dropout_prob: 0.0 },
            loss: LossConfig::default(),
            train: TrainConfig {
                epochs: 3,
                warmup_epochs: 1,
                lr0: 0.05,
                teacher_temp_warm_epochs: 2,
                k_nn: 3,
                queries: 2,
                group_size: 3,
                fillers: 2,
                ..TrainConfig::default()
            },
            seed,
        }
    }

    fn tiny_dataset(seed: u64) -> GcdDataset {
        let cfg = GenConfig {
            k_total: 3,
            k_old: 2,
            dim: 6,
            n_per_class: 8,
            class_sep: 6.0,
            sigma: 0.5,
            labeled_ratio: 0.5,
        };
        gen_gaussian_gcd(&cfg, &Rng::new(seed)).unwrap()
    }

    #[test]
    fn cosine_lr_boundary_values() {
        assert_eq!(cosine_lr(0, 200, 0.1), 0.1);
        assert!((cosine_lr(100, 200, 0.1) - 0.05).abs() < 1e-15);
        // epoch 50 of 200: 0.05 (1 + cos(pi/4))
        let expected = 0.05 * (1.0 + std::f64::consts::FRAC_PI_4.cos());
        assert!((cosine_lr(50, 200, 0.1) - expected).abs() < 1e-15);
        assert!((cosine_lr(50, 200, 0.1) - 0.0853553).abs() < 1e-7);
    }

    #[test]
    fn teacher_temp_schedule() {
        assert_eq!(teacher_temp(0, 0.07, 0.04, 30), 0.07);
        assert_eq!(teacher_temp(30, 0.07, 0.04, 30), 0.04);
        assert_eq!(teacher_temp(100, 0.07, 0.04, 30), 0.04);
        assert!((teacher_temp(15, 0.07, 0.04, 30) - 0.055).abs() < 1e-15);
        assert_eq!(teacher_temp(5, 0.07, 0.04, 0), 0.04);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ds = tiny_dataset(1);
        let out1 = train(&ds, &tiny_settings(42)).unwrap();
        let out2 = train(&ds, &tiny_settings(42)).unwrap();
        let bits = |p: &ModelParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out1.params), bits(&out2.params));
        // Log records match except for wall time.
        let strip = |log: &[TrainLogRecord]| {
            log.iter().map(|r| (r.epoch, r.step, r.losses, r.lr.to_bits(), r.tau_t.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(strip(&out1.log), strip(&out2.log));
        let out3 = train(&ds, &tiny_settings(43)).unwrap();
        assert_ne!(bits(&out1.params), bits(&out3.params));
    }

    #[test]
    fn log_is_monotone_and_finite() {
        let ds = tiny_dataset(2);
        let out = train(&ds, &tiny_settings(5)).unwrap();
        let mut last = (0usize, 0usize);
        let mut first = true;
        for record in &out.log {
            assert!(record.losses.is_finite());
            let key = (record.epoch, record.step);
            if !first {
                assert!(key > last, "log keys must increase: {last:?} then {key:?}");
            }
            last = key;
            first = false;
        }
        let steps_per_epoch = ds.len().div_ceil(tiny_settings(5).train.batch_size());
        assert_eq!(out.log.len(), 3 * steps_per_epoch);
    }

    #[test]
    fn warmup_gradient_equals_baseline_only_gradient() {
        // On a probe step, the applied gradient during warmup must match a
        // run whose contextual weights are zero.
        let ds = tiny_dataset(3);
        let settings = tiny_settings(11);
        let root = Rng::new(settings.seed);
        let params = ModelParams::init(ds.dim(), ds.k_total, &settings.model, &root.split(0)).unwrap();
        let cache = forward_single(&params, &ds.points).unwrap();
        let index = knn(&cache.z, ds.len() - 1).unwrap();
        let mut plan_rng = root.split(1).split(0);
        let plan = build_batch(&index, 2, 3, 2, &mut plan_rng).unwrap();
        let aug_rng = root.split(1).split(1);

        let loss_cfg = settings.loss.clone();
        let (b1, g1) = training_step(&params, &ds, &plan.flattened, &aug_rng, &settings, &loss_cfg, false).unwrap();

        let mut zeroed = settings.clone();
        zeroed.loss.lambda_n = 0.0;
        zeroed.loss.lambda_c = 0.0;
        let (b2, g2) =
            training_step(&params, &ds, &plan.flattened, &aug_rng, &zeroed, &zeroed.loss, true).unwrap();

        assert_eq!(b1.baseline, b2.baseline);
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a, b, "warmup gradient must be the baseline-only gradient");
        }
        // The full-objective gradient differs once context applies.
        let (_, g3) = training_step(&params, &ds, &plan.flattened, &aug_rng, &settings, &loss_cfg, true).unwrap();
        assert_ne!(g1, g3);
        assert!(b1.l_n != 0.0 || b1.l_c != 0.0, "contextual losses are still reported in warmup");
    }

    #[test]
    fn baseline_configuration_matches_warmup_only_run() {
        // lambda_n = lambda_c = 0 with warmup covering every epoch must
        // produce the identical trajectory to default weights with the same
        // full-length warmup.
        let ds = tiny_dataset(4);
        let mut a = tiny_settings(21);
        a.train.warmup_epochs = a.train.epochs;
        let mut b = a.clone();
        b.loss.lambda_n = 0.0;
        b.loss.lambda_c = 0.0;
        let out_a = train(&ds, &a).unwrap();
        let out_b = train(&ds, &b).unwrap();
        let bits = |p: &ModelParams| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out_a.params), bits(&out_b.params));
    }

    #[test]
    fn single_step_matches_external_recomputation() {
        // One epoch, one step, zero-noise views: the updated parameters must
        // equal params - lr * gradient computed through the public pieces.
        let ds = tiny_dataset(5);
        let n = ds.len(); // 24
        let mut settings = tiny_settings(31);
        settings.augment = AugmentConfig { noise_sigma: 0.0, dropout_prob: 0.0 };
        settings.train.epochs = 1;
        settings.train.warmup_epochs = 0;
        settings.train.teacher_temp_warm_epochs = 0;
        settings.train.queries = 2;
        settings.train.group_size = 4;
        settings.train.fillers = n - 8; // one full-dataset step
        let out = train(&ds, &settings).unwrap();
        assert_eq!(out.log.len(), 1);

        // External recomputation of the same step.
        let root = Rng::new(settings.seed);
        let params0 = ModelParams::init(ds.dim(), ds.k_total, &settings.model, &root.split(0)).unwrap();
        let cache = forward_single(&params0, &ds.points).unwrap();
        let index = knn(&cache.z, n - 1).unwrap();
        let epoch_rng = root.split(1);
        let mut plan_rng = epoch_rng.split(0);
        let plan = build_batch(&index, 2, 4, n - 8, &mut plan_rng).unwrap();
        let aug_rng = epoch_rng.split(1);
        let mut loss_cfg = settings.loss.clone();
        loss_cfg.tau_t = teacher_temp(0, 0.07, 0.04, settings.train.teacher_temp_warm_epochs);
        let (_, grads) =
            training_step(&params0, &ds, &plan.flattened, &aug_rng, &settings, &loss_cfg, true).unwrap();
        let lr = cosine_lr(0, 1, settings.train.lr0);
        let expected: Vec<f64> = params0.flatten().iter().zip(&grads).map(|(p, g)| p - lr * g).collect();
        let got = out.params.flatten();
        for (e, g) in expected.iter().zip(&got) {
            assert_eq!(e.to_bits(), g.to_bits());
        }
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let ds = tiny_dataset(6);
        let mut settings = tiny_settings(1);
        settings.train.fillers = 1000;
        assert!(matches!(train(&ds, &settings), Err(GcdError::DatasetTooSmall { .. })));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let ds = tiny_dataset(7);
        let mut settings = tiny_settings(1);
        settings.train.warmup_epochs = settings.train.epochs + 1;
        assert!(matches!(train(&ds, &settings), Err(GcdError::Config(_))));
    }
}
