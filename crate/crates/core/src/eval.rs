//! Evaluation over a dataset split: per-sample absolute calibration errors,
//! per-iteration traces, and Table-style aggregates.

use crate::fusion::iterate_calibration;
use crate::geometry::{calibration_error, rad_to_deg, sample_miscalibration, RigidTransform};
use crate::matchnet::attention_heatmaps;
use crate::model::{CalibNet, SceneParams};
use crate::raster::{rasterize_fv, write_pgm};
use crate::synthdata::SampleData;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-axis rotation (degrees) and translation (centimeters) errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub rot_mean_deg: f64,
    pub rot_deg: [f64; 3],
    pub trans_mean_cm: f64,
    pub trans_cm: [f64; 3],
}

impl ErrorRecord {
    fn from_error(e: &crate::geometry::CalibrationError) -> Self {
        let rot = [
            rad_to_deg(e.euler_abs[0]),
            rad_to_deg(e.euler_abs[1]),
            rad_to_deg(e.euler_abs[2]),
        ];
        let trans = [
            e.trans_abs[0] * 100.0,
            e.trans_abs[1] * 100.0,
            e.trans_abs[2] * 100.0,
        ];
        Self {
            rot_mean_deg: rot.iter().sum::<f64>() / 3.0,
            rot_deg: rot,
            trans_mean_cm: trans.iter().sum::<f64>() / 3.0,
            trans_cm: trans,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: u32,
    pub miscal_seed: u64,
    pub initial: ErrorRecord,
    pub final_error: ErrorRecord,
    /// Errors after each of the N iterations.
    pub per_iteration: Vec<ErrorRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub rot_mean_deg: f64,
    pub rot_deg: [f64; 3],
    pub trans_mean_cm: f64,
    pub trans_cm: [f64; 3],
    pub initial_rot_mean_deg: f64,
    pub initial_trans_mean_cm: f64,
    /// Median (rot deg, trans cm) over samples, per iteration index.
    pub iteration_medians: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub range_rot_deg: f64,
    pub range_trans_m: f64,
    pub seed: u64,
    pub iterations: usize,
    pub aggregate: Aggregate,
    pub samples: Vec<SampleEval>,
}

/// Seed for the per-sample initial perturbation, derived from the eval seed
/// and the sample id.
pub fn miscal_seed(seed: u64, id: u32) -> u64 {
    seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Evaluates the model over every sample: perturb the true extrinsic within
/// the range, run N iterations, report absolute errors. Parallel across
/// samples with index-ordered aggregation.
pub fn evaluate(
    model: &CalibNet,
    samples: &[SampleData],
    scene: SceneParams,
    range: (f64, f64),
    seed: u64,
) -> EvalReport {
    let n = model.config.iterations;
    let evals: Vec<SampleEval> = samples
        .par_iter()
        .map(|data| {
            let mseed = miscal_seed(seed, data.id);
            let delta = sample_miscalibration(range.0, range.1, mseed);
            let t_init = data.t_gt.compose(&delta);
            let prepared = model.prepare_sample(data, scene);
            let pred = iterate_calibration(model, &prepared, t_init, n);
            SampleEval {
                id: data.id,
                miscal_seed: mseed,
                initial: ErrorRecord::from_error(&calibration_error(&t_init, &data.t_gt)),
                final_error: ErrorRecord::from_error(&calibration_error(
                    &pred.final_t,
                    &data.t_gt,
                )),
                per_iteration: pred
                    .t_after
                    .iter()
                    .map(|t| ErrorRecord::from_error(&calibration_error(t, &data.t_gt)))
                    .collect(),
            }
        })
        .collect();

    let aggregate = aggregate(&evals, n);
    EvalReport {
        range_rot_deg: range.0,
        range_trans_m: range.1,
        seed,
        iterations: n,
        aggregate,
        samples: evals,
    }
}

fn mean<I: Iterator<Item = f64>>(iter: I) -> f64 {
    let (sum, count) = iter.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = values.len() / 2;
    if values.len() % 2 == 0 {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    }
}

/// Aggregate means are plain means of the per-sample records, so the report
/// stays recomputable from its own rows.
pub fn aggregate(evals: &[SampleEval], iterations: usize) -> Aggregate {
    let rot_axes = [0, 1, 2].map(|a| mean(evals.iter().map(|e| e.final_error.rot_deg[a])));
    let trans_axes = [0, 1, 2].map(|a| mean(evals.iter().map(|e| e.final_error.trans_cm[a])));
    Aggregate {
        rot_mean_deg: mean(evals.iter().map(|e| e.final_error.rot_mean_deg)),
        rot_deg: rot_axes,
        trans_mean_cm: mean(evals.iter().map(|e| e.final_error.trans_mean_cm)),
        trans_cm: trans_axes,
        initial_rot_mean_deg: mean(evals.iter().map(|e| e.initial.rot_mean_deg)),
        initial_trans_mean_cm: mean(evals.iter().map(|e| e.initial.trans_mean_cm)),
        iteration_medians: (0..iterations)
            .map(|k| {
                (
                    median(evals.iter().map(|e| e.per_iteration[k].rot_mean_deg).collect()),
                    median(evals.iter().map(|e| e.per_iteration[k].trans_mean_cm).collect()),
                )
            })
            .collect(),
    }
}

impl EvalReport {
    /// Table-layout summary: rotation means then translation means.
    pub fn table(&self) -> String {
        let a = &self.aggregate;
        let mut out = String::new();
        out.push_str(&format!(
            "range [{:.0} deg, {} m]  seed {}  samples {}\n",
            self.range_rot_deg,
            self.range_trans_m,
            self.seed,
            self.samples.len()
        ));
        out.push_str("            Rotation(deg)                     Translation(cm)\n");
        out.push_str("            Mean    Roll    Pitch   Yaw       Mean    X       Y       Z\n");
        out.push_str(&format!(
            "initial     {:<8.3}--      --      --        {:<8.3}--      --      --\n",
            a.initial_rot_mean_deg, a.initial_trans_mean_cm
        ));
        out.push_str(&format!(
            "calibrated  {:<8.3}{:<8.3}{:<8.3}{:<8.3}  {:<8.3}{:<8.3}{:<8.3}{:<8.3}\n",
            a.rot_mean_deg,
            a.rot_deg[0],
            a.rot_deg[1],
            a.rot_deg[2],
            a.trans_mean_cm,
            a.trans_cm[0],
            a.trans_cm[1],
            a.trans_cm[2]
        ));
        for (k, (rot, trans)) in a.iteration_medians.iter().enumerate() {
            out.push_str(&format!(
                "iter {}      median rot {:.3} deg  median trans {:.3} cm\n",
                k + 1,
                rot,
                trans
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Writes per-sample debug artifacts: the miscalibrated radar FV map, the
/// depth map, and both attention heatmaps with radar projection pixels
/// marked.
pub fn dump_debug_images(
    model: &CalibNet,
    data: &SampleData,
    scene: SceneParams,
    t_init: &RigidTransform,
    dir: &Path,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let prepared = model.prepare_sample(data, scene);
    let (h, c) = model.regression.zero_state();
    let (_, cache) = model.forward_iteration_from_transform(&prepared, t_init, &h, &c);
    let (fv_scores, bev_scores) = CalibNet::attention_scores(&cache);

    let (fv_h, fv_w) = model.config.fv_dims;
    let (radar_fv, _) = rasterize_fv(&data.radar, t_init, &scene.k, fv_h, fv_w);
    radar_fv.export_pgm(&dir.join("radar_fv.pgm"))?;
    let _ = radar_fv.export_blob(&dir.join("radar_fv.bin"));
    data.depth.export_pgm(&dir.join("depth_fv.pgm"))?;

    // Radar projection pixels, marked white in the heatmap exports.
    let markers: Vec<(usize, usize)> = (0..fv_h)
        .flat_map(|y| (0..fv_w).map(move |x| (y, x)))
        .filter(|(y, x)| radar_fv.occupied(*y, *x))
        .map(|(y, x)| (y / 8, x / 8))
        .collect();

    let (fgh, fgw) = model.config.fv_grid();
    let (img_attn, radar_attn) = attention_heatmaps(fv_scores, fgh, fgw);
    write_pgm(&dir.join("attn_fv_image.pgm"), fgh, fgw, img_attn.data(), &markers)?;
    write_pgm(&dir.join("attn_fv_radar.pgm"), fgh, fgw, radar_attn.data(), &markers)?;
    let _ = crate::blob::save_f32(&dir.join("attn_fv_image.bin"), &[fgh, fgw], img_attn.data());
    let _ = crate::blob::save_f32(&dir.join("attn_fv_radar.bin"), &[fgh, fgw], radar_attn.data());

    let (bgh, bgw) = model.config.bev_grid();
    let (img_attn_bev, radar_attn_bev) = attention_heatmaps(bev_scores, bgh, bgw);
    write_pgm(&dir.join("attn_bev_image.pgm"), bgh, bgw, img_attn_bev.data(), &[])?;
    write_pgm(&dir.join("attn_bev_radar.pgm"), bgh, bgw, radar_attn_bev.data(), &[])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate_dataset, GenConfig};

    fn tiny_model() -> CalibNet {
        CalibNet::new(ModelConfig {
            channels: 8,
            ffn_hidden: 16,
            d_f: 32,
            d_z: 16,
            lstm_hidden: 16,
            seed: 1,
            ..ModelConfig::default()
        })
    }

    fn tiny_set() -> (Vec<SampleData>, SceneParams) {
        let config = GenConfig {
            lidar_points: 200,
            ..GenConfig::default()
        };
        let samples = generate_dataset(31, 4, &config);
        let scene = SceneParams {
            k: config.k,
            kb: config.kb,
            cam_height: config.cam_height,
        };
        (samples, scene)
    }

    #[test]
    fn untrained_model_final_equals_initial() {
        let model = tiny_model();
        let (samples, scene) = tiny_set();
        let report = evaluate(&model, &samples, scene, (10.0, 0.25), 7);
        for s in &report.samples {
            assert!((s.final_error.rot_mean_deg - s.initial.rot_mean_deg).abs() < 1e-9);
            assert!((s.final_error.trans_mean_cm - s.initial.trans_mean_cm).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let model = tiny_model();
        let (samples, scene) = tiny_set();
        let report = evaluate(&model, &samples, scene, (10.0, 0.25), 3);
        let manual: f64 = report.samples.iter().map(|s| s.final_error.rot_mean_deg).sum::<f64>()
            / report.samples.len() as f64;
        assert!((report.aggregate.rot_mean_deg - manual).abs() < 1e-9);
        let re = aggregate(&report.samples, report.iterations);
        assert!((re.trans_mean_cm - report.aggregate.trans_mean_cm).abs() < 1e-9);
    }

    #[test]
    fn evaluation_is_bitwise_reproducible() {
        let model = tiny_model();
        let (samples, scene) = tiny_set();
        let a = evaluate(&model, &samples, scene, (10.0, 0.25), 42).to_json();
        let b = evaluate(&model, &samples, scene, (10.0, 0.25), 42).to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn table_mentions_all_columns() {
        let model = tiny_model();
        let (samples, scene) = tiny_set();
        let report = evaluate(&model, &samples, scene, (20.0, 1.5), 0);
        let table = report.table();
        for col in ["Mean", "Roll", "Pitch", "Yaw", "X", "Y", "Z"] {
            assert!(table.contains(col), "missing column {col}");
        }
    }
}
