//! The full calibration network: four feature extractors, per-view
//! cross-attention + matching + aggregation, selective fusion, and the
//! recurrent regression head, with an exact hand-written backward.

use crate::fusion::{CalibrationStep, FusionCache, RegressionCache, RegressionHead, SelectiveFusion};
use crate::geometry::{BevIntrinsics, CameraIntrinsics, PointCloud, RigidTransform};
use crate::kernels::checkpoint::{Checkpoint, CheckpointError};
use crate::kernels::{GradSet, ParamSet, Tensor};
use crate::matchnet::{
    check_map_dims, grid_to_tokens, tokens_to_grid, ImageFvCache, ImageFvExtractor, MatchHead,
    MatchHeadCache, MatchHeadGrads, MatchHeadOutput, McaBlock, McaCache, RcbCache,
    ResidualConvBlock, ThreeBlockCache, ThreeBlockStack, TwoLayerCache, TwoLayerStack,
    TOTAL_STRIDE,
};
use crate::raster::{depth_to_pseudo_bev, rasterize_bev, rasterize_fv, InfoMap, ViewTag};
use crate::synthdata::{Manifest, SampleData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint has no model_config metadata")]
    MissingConfig,
    #[error("model_config metadata is invalid: {0}")]
    BadConfig(#[from] serde_json::Error),
}

/// Architecture hyperparameters; serialized into checkpoints so a saved
/// model rebuilds its own topology.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Feature channels C of every extractor output.
    pub channels: usize,
    /// Hidden width of the cross-attention refinement FFN.
    pub ffn_hidden: usize,
    /// Length of each view's aggregated feature vector.
    pub d_f: usize,
    /// Width of the selective-fusion compact descriptor.
    pub d_z: usize,
    pub lstm_hidden: usize,
    /// Calibration iterations N.
    pub iterations: usize,
    /// Scale attention scores by 1/sqrt(C) (off: raw score product).
    pub scale_attention: bool,
    /// Divide map values by the scales below before feature extraction.
    pub normalize_maps: bool,
    pub depth_scale: f32,
    pub height_scale: f32,
    /// (h, w) of the FV maps.
    pub fv_dims: (usize, usize),
    /// (h, w) of the BEV maps.
    pub bev_dims: (usize, usize),
    /// Weight-initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            ffn_hidden: 64,
            d_f: 256,
            d_z: 128,
            lstm_hidden: 128,
            iterations: 3,
            scale_attention: false,
            normalize_maps: false,
            depth_scale: 3.5,
            height_scale: 1.2,
            fv_dims: (96, 192),
            bev_dims: (96, 96),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn fv_grid(&self) -> (usize, usize) {
        (self.fv_dims.0 / TOTAL_STRIDE, self.fv_dims.1 / TOTAL_STRIDE)
    }

    pub fn bev_grid(&self) -> (usize, usize) {
        (self.bev_dims.0 / TOTAL_STRIDE, self.bev_dims.1 / TOTAL_STRIDE)
    }

    pub fn fv_tokens(&self) -> usize {
        let (h, w) = self.fv_grid();
        h * w
    }

    pub fn bev_tokens(&self) -> usize {
        let (h, w) = self.bev_grid();
        h * w
    }
}

/// Camera/BEV geometry shared by a dataset.
#[derive(Debug, Clone, Copy)]
pub struct SceneParams {
    pub k: CameraIntrinsics,
    pub kb: BevIntrinsics,
    pub cam_height: f64,
}

impl SceneParams {
    pub fn from_manifest(m: &Manifest) -> Self {
        Self {
            k: m.k,
            kb: m.kb,
            cam_height: m.cam_height,
        }
    }
}

pub struct CalibNet {
    pub config: ModelConfig,
    pub params: ParamSet,
    radar_fv: ThreeBlockStack,
    radar_bev: ThreeBlockStack,
    image_fv: ImageFvExtractor,
    image_bev: TwoLayerStack,
    mca_fv: McaBlock,
    mca_bev: McaBlock,
    head_fv: MatchHead,
    head_bev: MatchHead,
    rcb_fv: ResidualConvBlock,
    rcb_bev: ResidualConvBlock,
    pub fusion: SelectiveFusion,
    pub regression: RegressionHead,
}

impl CalibNet {
    pub fn new(config: ModelConfig) -> Self {
        check_map_dims(config.fv_dims.0, config.fv_dims.1);
        check_map_dims(config.bev_dims.0, config.bev_dims.1);
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let (fgh, fgw) = config.fv_grid();
        let (bgh, bgw) = config.bev_grid();
        let radar_fv = ThreeBlockStack::new(&mut ps, &mut rng, "fv.radar", c);
        let radar_bev = ThreeBlockStack::new(&mut ps, &mut rng, "bev.radar", c);
        let image_fv = ImageFvExtractor::new(&mut ps, &mut rng, "fv.image", c);
        let image_bev = TwoLayerStack::new(&mut ps, &mut rng, "bev.image", c);
        let mca_fv = McaBlock::new(&mut ps, &mut rng, "fv.mca", c, config.ffn_hidden, config.scale_attention);
        let mca_bev = McaBlock::new(&mut ps, &mut rng, "bev.mca", c, config.ffn_hidden, config.scale_attention);
        let head_fv = MatchHead::new(&mut ps, &mut rng, "fv.match", c);
        let head_bev = MatchHead::new(&mut ps, &mut rng, "bev.match", c);
        let rcb_fv = ResidualConvBlock::new(&mut ps, &mut rng, "fv.rcb", c, fgh, fgw, config.d_f);
        let rcb_bev = ResidualConvBlock::new(&mut ps, &mut rng, "bev.rcb", c, bgh, bgw, config.d_f);
        let fusion = SelectiveFusion::new(&mut ps, &mut rng, "fusion", config.d_f, config.d_z);
        fusion.freeze_stats(&mut ps);
        let regression = RegressionHead::new(&mut ps, &mut rng, "regression", config.d_f, config.lstm_hidden);
        Self {
            config,
            params: ps,
            radar_fv,
            radar_bev,
            image_fv,
            image_bev,
            mca_fv,
            mca_bev,
            head_fv,
            head_bev,
            rcb_fv,
            rcb_bev,
            fusion,
            regression,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    fn map_scale(&self, view: ViewTag) -> Option<f32> {
        if !self.config.normalize_maps {
            return None;
        }
        Some(match view {
            ViewTag::Fv => self.config.depth_scale,
            ViewTag::Bev => self.config.height_scale,
        })
    }

    fn map_tensor(&self, map: &InfoMap) -> Tensor {
        map.to_tensor(self.map_scale(map.view))
    }

    /// Image-side features are independent of the calibration estimate, so
    /// they are computed once per sample and shared across iterations.
    pub fn image_features(&self, depth: &InfoMap, pseudo_bev: &InfoMap) -> ImageFeatures {
        let depth_t = self.map_tensor(depth);
        // The context branch consumes the depth map rendered as grayscale.
        let context_t = depth.to_tensor(Some(self.config.depth_scale));
        let bev_t = self.map_tensor(pseudo_bev);
        let (fv_grid_feat, fv_cache) = self.image_fv.forward(&self.params, &depth_t, Some(&context_t));
        let (bev_grid_feat, bev_cache) = self.image_bev.forward(&self.params, &bev_t);
        ImageFeatures {
            fv_tokens: grid_to_tokens(&fv_grid_feat),
            bev_tokens: grid_to_tokens(&bev_grid_feat),
            fv_cache,
            bev_cache,
        }
    }

    /// Rasterizes the radar maps for the current estimate and runs one
    /// network iteration.
    pub fn forward_iteration_from_transform(
        &self,
        sample: &PreparedSample,
        t_curr: &RigidTransform,
        h: &Tensor,
        c: &Tensor,
    ) -> (IterOutput, IterCache) {
        let (fv_h, fv_w) = self.config.fv_dims;
        let (bev_h, bev_w) = self.config.bev_dims;
        let (radar_fv, _) = rasterize_fv(&sample.radar, t_curr, &sample.scene.k, fv_h, fv_w);
        let (radar_bev, _) = rasterize_bev(
            &sample.radar,
            t_curr,
            &sample.scene.kb,
            sample.scene.cam_height,
            bev_h,
            bev_w,
        );
        self.forward_iteration(&radar_fv, &radar_bev, &sample.image, h, c)
    }

    pub fn forward_iteration(
        &self,
        radar_fv_map: &InfoMap,
        radar_bev_map: &InfoMap,
        image: &ImageFeatures,
        h: &Tensor,
        c: &Tensor,
    ) -> (IterOutput, IterCache) {
        let ps = &self.params;
        let (fv_feat, radar_fv_cache) = self.radar_fv.forward(ps, &self.map_tensor(radar_fv_map));
        let (bev_feat, radar_bev_cache) = self.radar_bev.forward(ps, &self.map_tensor(radar_bev_map));
        let radar_fv_tokens = grid_to_tokens(&fv_feat);
        let radar_bev_tokens = grid_to_tokens(&bev_feat);

        let (mca_fv_out, mca_fv_cache) = self.mca_fv.forward(ps, &image.fv_tokens, &radar_fv_tokens);
        let (mca_bev_out, mca_bev_cache) = self.mca_bev.forward(ps, &image.bev_tokens, &radar_bev_tokens);

        let (match_fv, head_fv_cache) = self.head_fv.forward(ps, &mca_fv_out.f_i_hat, &mca_fv_out.f_r_hat);
        let (match_bev, head_bev_cache) = self.head_bev.forward(ps, &mca_bev_out.f_i_hat, &mca_bev_out.f_r_hat);

        let (f_fv, rcb_fv_cache) = self.rcb_fv.forward(ps, &mca_fv_out.f_i_hat, &mca_fv_out.f_r_hat);
        let (f_bev, rcb_bev_cache) = self.rcb_bev.forward(ps, &mca_bev_out.f_i_hat, &mca_bev_out.f_r_hat);

        let (f_select, fusion_cache) = self.fusion.forward(ps, &f_bev, &f_fv);
        let (step, h_new, c_new, regression_cache) = self.regression.forward(ps, &f_select, h, c);

        (
            IterOutput {
                step,
                match_fv,
                match_bev,
                h: h_new,
                c: c_new,
            },
            IterCache {
                radar_fv: radar_fv_cache,
                radar_bev: radar_bev_cache,
                mca_fv: mca_fv_cache,
                mca_bev: mca_bev_cache,
                head_fv: head_fv_cache,
                head_bev: head_bev_cache,
                rcb_fv: rcb_fv_cache,
                rcb_bev: rcb_bev_cache,
                fusion: fusion_cache,
                regression: regression_cache,
            },
        )
    }

    /// Backward through one iteration. Accumulates parameter gradients
    /// (including the shared image extractors via `image`) and returns the
    /// gradients flowing into the previous iteration's LSTM state.
    pub fn backward_iteration(
        &self,
        cache: &IterCache,
        image: &ImageFeatures,
        d: IterGrads,
        grads: &mut GradSet,
    ) -> (Tensor, Tensor) {
        let ps = &self.params;
        let (df_select, dh_prev, dc_prev) = self.regression.backward(
            ps,
            &cache.regression,
            &d.d_rot,
            &d.d_trans,
            &d.dh_next,
            &d.dc_next,
            grads,
        );
        let (df_bev_vec, df_fv_vec) = self.fusion.backward(ps, &cache.fusion, &df_select, grads);

        let (mut di_fv, mut dr_fv) = self.rcb_fv.backward(ps, &cache.rcb_fv, &df_fv_vec, grads);
        let (mut di_bev, mut dr_bev) = self.rcb_bev.backward(ps, &cache.rcb_bev, &df_bev_vec, grads);

        let (di, dr) = self.head_fv.backward(ps, &cache.head_fv, &d.match_fv, grads);
        di_fv.add_assign(&di);
        dr_fv.add_assign(&dr);
        let (di, dr) = self.head_bev.backward(ps, &cache.head_bev, &d.match_bev, grads);
        di_bev.add_assign(&di);
        dr_bev.add_assign(&dr);

        let (d_img_fv_tokens, d_radar_fv_tokens) =
            self.mca_fv.backward(ps, &cache.mca_fv, &di_fv, &dr_fv, grads);
        let (d_img_bev_tokens, d_radar_bev_tokens) =
            self.mca_bev.backward(ps, &cache.mca_bev, &di_bev, &dr_bev, grads);

        let c = self.config.channels;
        let (fgh, fgw) = self.config.fv_grid();
        let (bgh, bgw) = self.config.bev_grid();
        self.radar_fv.backward(
            ps,
            &cache.radar_fv,
            &tokens_to_grid(&d_radar_fv_tokens, c, fgh, fgw),
            grads,
        );
        self.radar_bev.backward(
            ps,
            &cache.radar_bev,
            &tokens_to_grid(&d_radar_bev_tokens, c, bgh, bgw),
            grads,
        );
        self.image_fv.backward(
            ps,
            &image.fv_cache,
            &tokens_to_grid(&d_img_fv_tokens, c, fgh, fgw),
            grads,
        );
        self.image_bev.backward(
            ps,
            &image.bev_cache,
            &tokens_to_grid(&d_img_bev_tokens, c, bgh, bgw),
            grads,
        );
        (dh_prev, dc_prev)
    }

    /// Builds the per-sample state shared by every iteration: the pseudo-BEV
    /// raster and the image-side features.
    pub fn prepare_sample(&self, data: &SampleData, scene: SceneParams) -> PreparedSample {
        let (bev_h, bev_w) = self.config.bev_dims;
        let (pseudo_bev, _) = depth_to_pseudo_bev(
            &data.depth,
            &scene.k,
            &scene.kb,
            scene.cam_height,
            bev_h,
            bev_w,
        );
        let image = self.image_features(&data.depth, &pseudo_bev);
        PreparedSample {
            radar: data.radar.clone(),
            lidar: data.lidar.clone(),
            depth: data.depth.clone(),
            pseudo_bev,
            t_gt: data.t_gt,
            scene,
            image,
        }
    }

    // -- persistence --------------------------------------------------------

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.meta.insert(
            "model_config".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        for p in self.params.iter() {
            ckpt.insert(p.name.clone(), p.tensor.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let config_json = ckpt.meta.get("model_config").ok_or(ModelError::MissingConfig)?;
        let config: ModelConfig = serde_json::from_str(config_json)?;
        let mut model = Self::new(config);
        model.load_params(ckpt)?;
        Ok(model)
    }

    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        for p in self.params.iter_mut() {
            let stored = ckpt
                .get(&p.name)
                .ok_or_else(|| ModelError::MissingParam(p.name.clone()))?;
            if stored.shape() != p.tensor.shape() {
                return Err(ModelError::ShapeMismatch {
                    name: p.name.clone(),
                    found: stored.shape().to_vec(),
                    expected: p.tensor.shape().to_vec(),
                });
            }
            p.tensor.data_mut().copy_from_slice(stored.data());
        }
        Ok(())
    }

    /// Raw cross-attention scores of the last forward, for heatmap export.
    pub fn attention_scores(cache: &IterCache) -> (&Tensor, &Tensor) {
        (&cache.mca_fv.scores, &cache.mca_bev.scores)
    }

    /// Compact-descriptor input of the fusion layer (feeds batch-stat updates).
    pub fn fusion_fc_out(cache: &IterCache) -> Tensor {
        SelectiveFusion::fc_out(&cache.fusion)
    }
}

/// Per-sample image-side forward state, shared across iterations.
pub struct ImageFeatures {
    pub fv_tokens: Tensor,
    pub bev_tokens: Tensor,
    fv_cache: ImageFvCache,
    bev_cache: TwoLayerCache,
}

/// A sample plus everything precomputed for iteration.
pub struct PreparedSample {
    pub radar: PointCloud,
    pub lidar: PointCloud,
    pub depth: InfoMap,
    pub pseudo_bev: InfoMap,
    pub t_gt: RigidTransform,
    pub scene: SceneParams,
    pub image: ImageFeatures,
}

pub struct IterOutput {
    pub step: CalibrationStep,
    pub match_fv: MatchHeadOutput,
    pub match_bev: MatchHeadOutput,
    pub h: Tensor,
    pub c: Tensor,
}

pub struct IterCache {
    radar_fv: ThreeBlockCache,
    radar_bev: ThreeBlockCache,
    mca_fv: McaCache,
    mca_bev: McaCache,
    head_fv: MatchHeadCache,
    head_bev: MatchHeadCache,
    rcb_fv: RcbCache,
    rcb_bev: RcbCache,
    fusion: FusionCache,
    regression: RegressionCache,
}

/// Gradients flowing into one iteration's outputs.
pub struct IterGrads {
    pub d_rot: [f32; 3],
    pub d_trans: [f32; 3],
    pub match_fv: MatchHeadGrads,
    pub match_bev: MatchHeadGrads,
    pub dh_next: Tensor,
    pub dc_next: Tensor,
}

impl IterGrads {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            d_rot: [0.0; 3],
            d_trans: [0.0; 3],
            match_fv: MatchHeadGrads::zeros(config.fv_tokens()),
            match_bev: MatchHeadGrads::zeros(config.bev_tokens()),
            dh_next: Tensor::zeros(&[config.lstm_hidden]),
            dc_next: Tensor::zeros(&[config.lstm_hidden]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_miscalibration;
    use crate::synthdata::{generate_dataset, GenConfig};

    fn small_config() -> ModelConfig {
        ModelConfig {
            channels: 8,
            ffn_hidden: 16,
            d_f: 32,
            d_z: 16,
            lstm_hidden: 16,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn tiny_sample() -> (SampleData, SceneParams) {
        let config = GenConfig {
            lidar_points: 300,
            ..GenConfig::default()
        };
        let data = generate_dataset(9, 1, &config).remove(0);
        let scene = SceneParams {
            k: config.k,
            kb: config.kb,
            cam_height: config.cam_height,
        };
        (data, scene)
    }

    #[test]
    fn untrained_model_emits_identity_and_preserves_t_init() {
        let model = CalibNet::new(small_config());
        let (data, scene) = tiny_sample();
        let prepared = model.prepare_sample(&data, scene);
        let t_init = data.t_gt.compose(&sample_miscalibration(10.0, 0.25, 1));
        let pred = crate::fusion::iterate_calibration(&model, &prepared, t_init, 3);
        assert_eq!(pred.steps.len(), 3);
        for step in &pred.steps {
            assert_eq!(step.rot_vec.0.norm(), 0.0);
            assert_eq!(step.trans.norm(), 0.0);
        }
        assert!((pred.final_t.rotation - t_init.rotation).norm() < 1e-9);
        assert!((pred.final_t.translation - t_init.translation).norm() < 1e-9);
    }

    #[test]
    fn single_iteration_equals_one_forward() {
        let model = CalibNet::new(small_config());
        let (data, scene) = tiny_sample();
        let prepared = model.prepare_sample(&data, scene);
        let t_init = data.t_gt;
        let pred = crate::fusion::iterate_calibration(&model, &prepared, t_init, 1);
        let (h, c) = model.regression.zero_state();
        let (out, _) = model.forward_iteration_from_transform(&prepared, &t_init, &h, &c);
        assert_eq!(pred.steps[0].trans, out.step.trans);
        assert_eq!(pred.steps[0].rot_vec.0, out.step.rot_vec.0);
    }

    #[test]
    fn composition_matches_hand_product() {
        // Two known steps must compose exactly like the matrix product.
        let a = CalibrationStep {
            rot_vec: crate::geometry::RotationVector(nalgebra::Vector3::new(0.02, -0.01, 0.03)),
            trans: nalgebra::Vector3::new(0.1, 0.0, -0.05),
        };
        let b = CalibrationStep {
            rot_vec: crate::geometry::RotationVector(nalgebra::Vector3::new(-0.015, 0.02, 0.0)),
            trans: nalgebra::Vector3::new(0.0, 0.07, 0.02),
        };
        let t0 = sample_miscalibration(5.0, 0.1, 77);
        let composed = t0.compose(&a.to_transform()).compose(&b.to_transform());
        let manual_rot = t0.rotation * a.to_transform().rotation * b.to_transform().rotation;
        assert!((composed.rotation - manual_rot).norm() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_preserves_params_bitwise() {
        let model = CalibNet::new(small_config());
        let ckpt = model.to_checkpoint();
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let restored = CalibNet::from_checkpoint(&Checkpoint::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(restored.config, model.config);
        for (a, b) in model.params.iter().zip(restored.params.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = CalibNet::new(small_config());
        let (data, scene) = tiny_sample();
        let prepared = model.prepare_sample(&data, scene);
        let t = data.t_gt.compose(&sample_miscalibration(10.0, 0.25, 2));
        let (h, c) = model.regression.zero_state();
        let (a, _) = model.forward_iteration_from_transform(&prepared, &t, &h, &c);
        let (b, _) = model.forward_iteration_from_transform(&prepared, &t, &h, &c);
        assert_eq!(a.match_fv.p.data(), b.match_fv.p.data());
        assert_eq!(a.h.data(), b.h.data());
    }
}
