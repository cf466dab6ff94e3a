//! Training: the per-sample forward/backward over all calibration
//! iterations, deterministic batched gradient accumulation, Adam with the
//! halving schedule, a machine-readable epoch ledger, and resumable
//! checkpoints.

use crate::config::RunConfig;
use crate::eval::evaluate;
use crate::fusion::CalibrationStep;
use crate::geometry::{sample_miscalibration, transform_points, RigidTransform};
use crate::kernels::adam::{adam_step, scheduled_lr, AdamConfig, AdamState};
use crate::kernels::checkpoint::Checkpoint;
use crate::kernels::{GradSet, Tensor};
use crate::matchnet::MatchHeadGrads;
use crate::model::{CalibNet, IterCache, IterGrads, IterOutput, PreparedSample, SceneParams};
use crate::supervision::{
    calibration_loss, gt_matches, matching_loss, reliability_filter, total_loss,
    CalibrationLossResult, LossWeights, MapProjection, MatchMatrix,
};
use crate::synthdata::SampleData;
use rayon::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] crate::kernels::checkpoint::CheckpointError),
    #[error("model error: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("non-finite loss at epoch {epoch}, sample {sample}; diagnostics at {dump}")]
    NumericalFailure {
        epoch: usize,
        sample: u32,
        dump: String,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct SampleLosses {
    pub total: f64,
    pub calib: f64,
    pub matching: f64,
}

/// Everything the backward pass needs from one sample's forward.
pub struct SampleTrace {
    pub outputs: Vec<IterOutput>,
    caches: Vec<IterCache>,
    /// Per-iteration ground-truth matches (exported in debug dumps).
    pub gt_fv: Vec<MatchMatrix>,
    pub gt_bev: Vec<MatchMatrix>,
    pub steps: Vec<CalibrationStep>,
    pub losses: SampleLosses,
    calib_result: CalibrationLossResult,
    match_fv_grads: Vec<MatchHeadGrads>,
    match_bev_grads: Vec<MatchHeadGrads>,
    pub final_t: RigidTransform,
    /// Transform each iteration actually rasterized with.
    pub t_used: Vec<RigidTransform>,
    pub fusion_fc_outs: Vec<Tensor>,
}

/// Runs the N-iteration forward with per-iteration ground-truth matches and
/// both losses. The radar maps are re-rasterized from the running estimate
/// each iteration; gradients stop at the rasterizer, the LSTM state carries
/// gradient across iterations.
pub fn forward_sample(
    model: &CalibNet,
    sample: &PreparedSample,
    t_init: &RigidTransform,
    weights: &LossWeights,
) -> SampleTrace {
    forward_sample_with_trace(model, sample, t_init, weights, None)
}

/// As [`forward_sample`], but when `frozen_trace` is given the rasterization
/// and ground-truth matches of iteration k use `frozen_trace[k]` instead of
/// the live estimate. The gradient checker needs this: the analytic backward
/// treats the rasterized maps as constants (the rasterizer is not
/// differentiable), so finite differences must probe the same loss surface.
pub fn forward_sample_with_trace(
    model: &CalibNet,
    sample: &PreparedSample,
    t_init: &RigidTransform,
    weights: &LossWeights,
    frozen_trace: Option<&[RigidTransform]>,
) -> SampleTrace {
    let n = model.config.iterations;
    let t_residual = t_init.inverse().compose(&sample.t_gt);
    let (mut h, mut c) = model.regression.zero_state();
    let mut t_live = *t_init;
    let mut outputs = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    let mut gt_fv = Vec::with_capacity(n);
    let mut gt_bev = Vec::with_capacity(n);
    let mut steps = Vec::with_capacity(n);
    let mut fusion_fc_outs = Vec::with_capacity(n);
    let mut t_used = Vec::with_capacity(n);
    for k in 0..n {
        let t_curr = match frozen_trace {
            Some(trace) => trace[k],
            None => t_live,
        };
        t_used.push(t_curr);
        let (out, cache) = model.forward_iteration_from_transform(sample, &t_curr, &h, &c);
        gt_fv.push(gt_matches(
            &sample.radar,
            &sample.t_gt,
            &t_curr,
            &MapProjection::Fv {
                k: &sample.scene.k,
                dims: model.config.fv_dims,
            },
            true,
        ));
        gt_bev.push(gt_matches(
            &sample.radar,
            &sample.t_gt,
            &t_curr,
            &MapProjection::Bev {
                kb: &sample.scene.kb,
                cam_height: sample.scene.cam_height,
                dims: model.config.bev_dims,
            },
            false,
        ));
        t_live = t_curr.compose(&out.step.to_transform()).renormalized();
        steps.push(out.step.clone());
        fusion_fc_outs.push(CalibNet::fusion_fc_out(&cache));
        h = out.h.clone();
        c = out.c.clone();
        outputs.push(out);
        caches.push(cache);
    }

    let calib_result = calibration_loss(&steps, &t_residual);
    let fv_outs: Vec<_> = outputs.iter().map(|o| &o.match_fv).collect();
    let fv_gts: Vec<_> = gt_fv.iter().collect();
    let match_fv = matching_loss(&fv_outs, &fv_gts, weights.lambda);
    let bev_outs: Vec<_> = outputs.iter().map(|o| &o.match_bev).collect();
    let bev_gts: Vec<_> = gt_bev.iter().collect();
    let match_bev = matching_loss(&bev_outs, &bev_gts, weights.lambda);

    let matching = match_fv.loss + match_bev.loss;
    let losses = SampleLosses {
        total: total_loss(calib_result.loss, matching, weights.beta),
        calib: calib_result.loss,
        matching,
    };
    SampleTrace {
        outputs,
        caches,
        gt_fv,
        gt_bev,
        steps,
        losses,
        calib_result,
        match_fv_grads: match_fv.grads,
        match_bev_grads: match_bev.grads,
        final_t: t_live,
        t_used,
        fusion_fc_outs,
    }
}

/// Accumulates d L_total / d params for one traced sample, walking the
/// iterations in reverse and carrying the LSTM state gradient.
pub fn backward_sample(
    model: &CalibNet,
    sample: &PreparedSample,
    trace: &SampleTrace,
    weights: &LossWeights,
    grads: &mut GradSet,
) {
    let n = trace.outputs.len();
    let beta = weights.beta as f32;
    let mut dh_next = Tensor::zeros(&[model.config.lstm_hidden]);
    let mut dc_next = Tensor::zeros(&[model.config.lstm_hidden]);
    for k in (0..n).rev() {
        let (d_rot, d_trans) = trace.calib_result.step_grads[k];
        let iter_grads = IterGrads {
            d_rot,
            d_trans,
            match_fv: trace.match_fv_grads[k].scaled(beta),
            match_bev: trace.match_bev_grads[k].scaled(beta),
            dh_next,
            dc_next,
        };
        let (dh, dc) = model.backward_iteration(&trace.caches[k], &sample.image, iter_grads, grads);
        dh_next = dh;
        dc_next = dc;
    }
}

/// Attaches noise-resistant reliability flags (FV supervision) to a sample's
/// radar cloud, then precomputes the iteration-invariant state.
pub fn prepare_training_sample(
    model: &CalibNet,
    data: &SampleData,
    scene: SceneParams,
    config: &RunConfig,
) -> PreparedSample {
    let radar_cam = transform_points(&data.radar, &data.t_gt);
    let flags = reliability_filter(&radar_cam, &data.lidar, config.delta, config.delta_s, config.tau);
    let mut data = data.clone();
    data.radar.reliable = Some(flags);
    model.prepare_sample(&data, scene)
}

/// Per-sample training seed: mixes run seed, epoch, and sample id.
pub fn train_miscal_seed(seed: u64, epoch: usize, id: u32) -> u64 {
    seed ^ ((epoch as u64 + 1).wrapping_mul(0x51_7C_C1_B7_27_22_0A_95))
        ^ ((id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One structured ledger record per epoch.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub train_calib: f64,
    pub train_matching: f64,
    pub val_rot_mean_deg: f64,
    pub val_trans_mean_cm: f64,
}

pub struct TrainOutcome {
    pub model: CalibNet,
    pub records: Vec<EpochRecord>,
    pub best_val_rot_deg: f64,
    pub best_epoch: usize,
}

pub struct TrainInputs<'a> {
    pub train: &'a [SampleData],
    pub val: &'a [SampleData],
    pub scene: SceneParams,
}

/// Deterministic epoch ordering from (seed, epoch).
fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
        seed ^ (epoch as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F),
    );
    order.shuffle(&mut rng);
    order
}

/// Full training run. Writes one ledger line per epoch to `ledger` when
/// given, checkpoints the best-validation model to `best_path`, and the full
/// resumable state to `state_path`, when given.
pub struct Trainer<'a> {
    pub config: &'a RunConfig,
    pub ledger: Option<PathBuf>,
    pub best_path: Option<PathBuf>,
    pub state_path: Option<PathBuf>,
    /// Continue from this resumable state checkpoint.
    pub resume_from: Option<PathBuf>,
    pub quiet: bool,
}

impl Trainer<'_> {
    pub fn run(&self, inputs: &TrainInputs) -> Result<TrainOutcome, TrainError> {
        let config = self.config;
        let weights = config.loss_weights();
        let mut model = CalibNet::new(config.model_config());
        let mut adam = AdamState::new(&model.params);
        let mut start_epoch = 0usize;
        if let Some(path) = &self.resume_from {
            let ckpt = Checkpoint::load(path)?;
            model.load_params(&ckpt)?;
            restore_adam(&mut adam, &model, &ckpt);
            start_epoch = ckpt
                .meta
                .get("epoch")
                .and_then(|v| v.parse::<usize>().ok())
                .map(|e| e + 1)
                .unwrap_or(0);
        }
        let adam_config = AdamConfig::default();

        let mut records = Vec::new();
        let mut best_val = f64::INFINITY;
        let mut best_epoch = 0;
        for epoch in start_epoch..config.epochs {
            let lr = scheduled_lr(config.learning_rate, epoch, config.lr_halve_every);
            let order = epoch_order(config.seed, epoch, inputs.train.len());
            let mut sums = SampleLosses {
                total: 0.0,
                calib: 0.0,
                matching: 0.0,
            };
            let mut count = 0usize;
            for batch in order.chunks(config.batch_size.max(1)) {
                // Data-parallel per-sample gradients, reduced in batch order.
                let results: Vec<(GradSet, SampleLosses, Vec<Tensor>, u32)> = batch
                    .par_iter()
                    .map(|idx| {
                        let data = &inputs.train[*idx];
                        let prepared =
                            prepare_training_sample(&model, data, inputs.scene, config);
                        let mseed = train_miscal_seed(config.seed, epoch, data.id);
                        let delta = sample_miscalibration(
                            config.miscal_rot_deg,
                            config.miscal_trans_m,
                            mseed,
                        );
                        let t_init = data.t_gt.compose(&delta);
                        let trace = forward_sample(&model, &prepared, &t_init, &weights);
                        let mut grads = GradSet::zeros_like(&model.params);
                        backward_sample(&model, &prepared, &trace, &weights, &mut grads);
                        (grads, trace.losses, trace.fusion_fc_outs, data.id)
                    })
                    .collect();

                let mut batch_grads = GradSet::zeros_like(&model.params);
                let mut fc_outs = Vec::new();
                for (grads, losses, fc, id) in &results {
                    if !losses.total.is_finite() || !grads.all_finite() {
                        let dump = self.write_diagnostic_dump(epoch, *id, losses)?;
                        return Err(TrainError::NumericalFailure {
                            epoch,
                            sample: *id,
                            dump,
                        });
                    }
                    batch_grads.accumulate(grads);
                    fc_outs.extend(fc.iter().cloned());
                    sums.total += losses.total;
                    sums.calib += losses.calib;
                    sums.matching += losses.matching;
                    count += 1;
                }
                batch_grads.scale(1.0 / results.len() as f32);
                adam_step(&mut model.params, &batch_grads, &mut adam, lr as f32, &adam_config);
                model.fusion.update_stats(&mut model.params, &fc_outs);
            }

            let val_report = evaluate(
                &model,
                inputs.val,
                inputs.scene,
                (config.miscal_rot_deg, config.miscal_trans_m),
                config.seed,
            );
            let record = EpochRecord {
                epoch,
                lr,
                train_total: sums.total / count.max(1) as f64,
                train_calib: sums.calib / count.max(1) as f64,
                train_matching: sums.matching / count.max(1) as f64,
                val_rot_mean_deg: val_report.aggregate.rot_mean_deg,
                val_trans_mean_cm: val_report.aggregate.trans_mean_cm,
            };
            if !self.quiet {
                eprintln!(
                    "epoch {:>2}  lr {:.2e}  loss {:.4} (calib {:.4}, match {:.4})  val rot {:.3} deg  val trans {:.2} cm",
                    record.epoch,
                    record.lr,
                    record.train_total,
                    record.train_calib,
                    record.train_matching,
                    record.val_rot_mean_deg,
                    record.val_trans_mean_cm
                );
            }
            self.append_ledger(&record)?;

            // Best model by combined validation score; rotation dominates.
            let score = val_report.aggregate.rot_mean_deg + 0.02 * val_report.aggregate.trans_mean_cm;
            if score < best_val {
                best_val = score;
                best_epoch = epoch;
                if let Some(path) = &self.best_path {
                    let mut ckpt = model.to_checkpoint();
                    ckpt.meta.insert("epoch".into(), epoch.to_string());
                    ckpt.meta
                        .insert("val_rot_mean_deg".into(), format!("{:.6}", val_report.aggregate.rot_mean_deg));
                    ckpt.meta
                        .insert("val_trans_mean_cm".into(), format!("{:.6}", val_report.aggregate.trans_mean_cm));
                    ckpt.save(path)?;
                }
            }
            if let Some(path) = &self.state_path {
                let mut ckpt = model.to_checkpoint();
                ckpt.meta.insert("epoch".into(), epoch.to_string());
                store_adam(&adam, &model, &mut ckpt);
                ckpt.save(path)?;
            }
            records.push(record);
        }

        Ok(TrainOutcome {
            best_val_rot_deg: best_val,
            best_epoch,
            model,
            records,
        })
    }

    fn append_ledger(&self, record: &EpochRecord) -> Result<(), TrainError> {
        if let Some(path) = &self.ledger {
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(record).expect("record serializes"))?;
        }
        Ok(())
    }

    fn write_diagnostic_dump(
        &self,
        epoch: usize,
        sample: u32,
        losses: &SampleLosses,
    ) -> Result<String, TrainError> {
        let path = self
            .ledger
            .as_deref()
            .unwrap_or(Path::new("."))
            .with_extension("nan_dump.json");
        let dump = serde_json::json!({
            "epoch": epoch,
            "sample": sample,
            "loss_total": losses.total,
            "loss_calib": losses.calib,
            "loss_matching": losses.matching,
        });
        std::fs::write(&path, serde_json::to_string_pretty(&dump).unwrap())?;
        Ok(path.display().to_string())
    }
}

fn store_adam(adam: &AdamState, model: &CalibNet, ckpt: &mut Checkpoint) {
    ckpt.meta.insert("adam_t".into(), adam.t.to_string());
    for (p, (m, v)) in model.params.iter().zip(adam.m.iter().zip(adam.v.iter())) {
        ckpt.insert(format!("adam.m.{}", p.name), m.clone());
        ckpt.insert(format!("adam.v.{}", p.name), v.clone());
    }
}

fn restore_adam(adam: &mut AdamState, model: &CalibNet, ckpt: &Checkpoint) {
    if let Some(t) = ckpt.meta.get("adam_t").and_then(|v| v.parse().ok()) {
        adam.t = t;
    }
    for (idx, p) in model.params.iter().enumerate() {
        if let Some(m) = ckpt.get(&format!("adam.m.{}", p.name)) {
            adam.m[idx] = m.clone();
        }
        if let Some(v) = ckpt.get(&format!("adam.v.{}", p.name)) {
            adam.v[idx] = v.clone();
        }
    }
}

impl MatchHeadGrads {
    pub fn scaled(&self, s: f32) -> Self {
        let mut out = Self {
            dp: self.dp.clone(),
            dsigma_i: self.dsigma_i.clone(),
            dsigma_r: self.dsigma_r.clone(),
        };
        out.dp.scale(s);
        out.dsigma_i.scale(s);
        out.dsigma_r.scale(s);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate_dataset, GenConfig};

    fn tiny_config() -> RunConfig {
        RunConfig {
            channels: 8,
            ffn_hidden: 16,
            d_f: 32,
            d_z: 16,
            lstm_hidden: 16,
            epochs: 1,
            batch_size: 4,
            normalize_maps: true,
            ..RunConfig::default()
        }
    }

    fn tiny_inputs() -> (Vec<SampleData>, Vec<SampleData>, SceneParams) {
        let gen = GenConfig {
            lidar_points: 300,
            ..GenConfig::default()
        };
        let train = generate_dataset(51, 6, &gen);
        let val = generate_dataset(52, 2, &gen);
        let scene = SceneParams {
            k: gen.k,
            kb: gen.kb,
            cam_height: gen.cam_height,
        };
        (train, val, scene)
    }

    #[test]
    fn forward_sample_losses_are_finite_and_composed() {
        let config = tiny_config();
        let model = CalibNet::new(ModelConfig {
            seed: 3,
            ..config.model_config()
        });
        let (train, _, scene) = tiny_inputs();
        let prepared = prepare_training_sample(&model, &train[0], scene, &config);
        let t_init = train[0]
            .t_gt
            .compose(&sample_miscalibration(10.0, 0.25, 9));
        let weights = config.loss_weights();
        let trace = forward_sample(&model, &prepared, &t_init, &weights);
        assert!(trace.losses.total.is_finite());
        assert!(trace.losses.calib >= 0.0);
        assert!(trace.losses.matching >= 0.0);
        let expected = trace.losses.calib + weights.beta * trace.losses.matching;
        assert!((trace.losses.total - expected).abs() < 1e-12);
        assert_eq!(trace.outputs.len(), 3);
        assert_eq!(trace.gt_fv.len(), 3);
    }

    #[test]
    fn one_epoch_trains_and_checkpoints() {
        let mut config = tiny_config();
        config.epochs = 1;
        let (train, val, scene) = tiny_inputs();
        let dir = tempfile::tempdir().unwrap();
        let best = dir.path().join("best.ckpt");
        let ledger = dir.path().join("ledger.jsonl");
        let trainer = Trainer {
            config: &config,
            ledger: Some(ledger.clone()),
            best_path: Some(best.clone()),
            state_path: None,
            resume_from: None,
            quiet: true,
        };
        let outcome = trainer
            .run(&TrainInputs {
                train: &train,
                val: &val,
                scene,
            })
            .unwrap();
        assert_eq!(outcome.records.len(), 1);
        assert!(best.exists());
        // Ledger parses back line by line.
        let text = std::fs::read_to_string(&ledger).unwrap();
        for line in text.lines() {
            let _: EpochRecord = serde_json::from_str(line).unwrap();
        }
        let restored = CalibNet::from_checkpoint(&Checkpoint::load(&best).unwrap()).unwrap();
        assert_eq!(restored.param_count(), outcome.model.param_count());
    }

    #[test]
    fn resume_reproduces_continued_run_bitwise() {
        let mut config = tiny_config();
        config.epochs = 2;
        let (train, val, scene) = tiny_inputs();
        let inputs = TrainInputs {
            train: &train,
            val: &val,
            scene,
        };
        // Straight 2-epoch run.
        let full = Trainer {
            config: &config,
            ledger: None,
            best_path: None,
            state_path: None,
            resume_from: None,
            quiet: true,
        }
        .run(&inputs)
        .unwrap();

        // 1 epoch, checkpoint state, resume for the second.
        let dir = tempfile::tempdir().unwrap();
        let state = dir.path().join("state.ckpt");
        let mut half_config = config.clone();
        half_config.epochs = 1;
        Trainer {
            config: &half_config,
            ledger: None,
            best_path: None,
            state_path: Some(state.clone()),
            resume_from: None,
            quiet: true,
        }
        .run(&inputs)
        .unwrap();
        let resumed = Trainer {
            config: &config,
            ledger: None,
            best_path: None,
            state_path: None,
            resume_from: Some(state),
            quiet: true,
        }
        .run(&inputs)
        .unwrap();

        for (a, b) in full.model.params.iter().zip(resumed.model.params.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {} diverged", a.name);
            }
        }
    }
}
