//! Selective fusion of the FV/BEV branch vectors and the autoregressive
//! regression head emitting one 6-DoF correction per iteration.

use crate::geometry::{RigidTransform, RotationVector};
use crate::kernels::lstm::{lstm_cell_backward, lstm_cell_forward, LstmCache, LstmGrads, LstmWeights};
use crate::kernels::ops::{
    batch_norm_backward, batch_norm_forward_running, leaky_relu_backward, leaky_relu_forward,
    sigmoid_scalar, BatchNormCache, BatchNormStats,
};
use crate::kernels::{GradSet, ParamId, ParamSet, Tensor};
use crate::matchnet::LinearLayer;
use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;

/// Per-channel convex blend weights over the two perspective branches.
/// `a_bev[c] + a_fv[c] == 1` for every channel.
#[derive(Debug, Clone)]
pub struct FusionWeights {
    pub a_bev: Vec<f32>,
    pub a_fv: Vec<f32>,
}

/// Channel-wise attention that selects between the BEV and FV branch
/// features: a compact descriptor gates each channel with a two-way softmax.
#[derive(Debug, Clone)]
pub struct SelectiveFusion {
    fc: LinearLayer,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    bn_mean: ParamId,
    bn_var: ParamId,
    logit_bev: LinearLayer,
    logit_fv: LinearLayer,
    pub d_f: usize,
}

pub struct FusionCache {
    f_bev: Tensor,
    f_fv: Tensor,
    sum: Tensor,
    fc_out: Tensor,
    bn: BatchNormCache,
    bn_out: Tensor,
    z: Tensor,
    pub weights: FusionWeights,
}

impl SelectiveFusion {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d_f: usize, d_z: usize) -> Self {
        let bn_gamma = ps.register(format!("{name}.bn.gamma"), Tensor::from_vec(&[d_z], vec![1.0; d_z]));
        let bn_beta = ps.register(format!("{name}.bn.beta"), Tensor::zeros(&[d_z]));
        let bn_mean = ps.register(format!("{name}.bn.running_mean"), Tensor::zeros(&[d_z]));
        let bn_var = ps.register(format!("{name}.bn.running_var"), Tensor::from_vec(&[d_z], vec![1.0; d_z]));
        Self {
            fc: LinearLayer::new(ps, rng, &format!("{name}.fc"), d_f, d_z),
            bn_gamma,
            bn_beta,
            bn_mean,
            bn_var,
            logit_bev: LinearLayer::new(ps, rng, &format!("{name}.logit_bev"), d_z, d_f),
            logit_fv: LinearLayer::new(ps, rng, &format!("{name}.logit_fv"), d_z, d_f),
            d_f,
        }
    }

    /// Marks the running-stat buffers non-trainable; call once after
    /// construction.
    pub fn freeze_stats(&self, ps: &mut ParamSet) {
        for id in [self.bn_mean, self.bn_var] {
            let idx = id.0;
            for (i, p) in ps.iter_mut().enumerate() {
                if i == idx {
                    p.trainable = false;
                }
            }
        }
    }

    fn stats(&self, ps: &ParamSet) -> BatchNormStats {
        BatchNormStats {
            running_mean: ps.get(self.bn_mean).data().to_vec(),
            running_var: ps.get(self.bn_var).data().to_vec(),
            momentum: 0.05,
        }
    }

    /// `F_select = a_bev (.) F_BEV + a_fv (.) F_FV` where the weights come
    /// from softmaxing two logit heads over a shared compact descriptor
    /// `z = leakyReLU(BatchNorm(Linear(F_BEV + F_FV)))`. The batch norm runs
    /// in running-stats mode (per-sample forward), with stats updated from
    /// observed batches between optimizer steps.
    pub fn forward(&self, ps: &ParamSet, f_bev: &Tensor, f_fv: &Tensor) -> (Tensor, FusionCache) {
        assert_eq!(f_bev.shape(), f_fv.shape());
        let d_f = self.d_f;
        assert_eq!(f_bev.len(), d_f);
        let mut sum = f_bev.clone();
        sum.add_assign(f_fv);
        let sum = sum.reshaped(&[1, d_f]);
        let fc_out = self.fc.forward(ps, &sum);
        let (bn_out, bn) = batch_norm_forward_running(
            &fc_out,
            ps.get(self.bn_gamma),
            ps.get(self.bn_beta),
            &self.stats(ps),
        );
        let z = leaky_relu_forward(&bn_out);
        let lb = self.logit_bev.forward(ps, &z);
        let lf = self.logit_fv.forward(ps, &z);

        // Two-way softmax per channel, written as a sigmoid of the logit gap.
        let mut a_bev = vec![0.0f32; d_f];
        let mut a_fv = vec![0.0f32; d_f];
        let mut f_select = vec![0.0f32; d_f];
        for c in 0..d_f {
            let ab = sigmoid_scalar(lb.data()[c] - lf.data()[c]);
            a_bev[c] = ab;
            a_fv[c] = 1.0 - ab;
            f_select[c] = ab * f_bev.data()[c] + (1.0 - ab) * f_fv.data()[c];
        }
        (
            Tensor::from_vec(&[d_f], f_select),
            FusionCache {
                f_bev: f_bev.clone(),
                f_fv: f_fv.clone(),
                sum,
                fc_out,
                bn,
                bn_out,
                z,
                weights: FusionWeights { a_bev, a_fv },
            },
        )
    }

    /// Returns `(df_bev, df_fv)`.
    pub fn backward(&self, ps: &ParamSet, cache: &FusionCache, d_select: &Tensor, grads: &mut GradSet) -> (Tensor, Tensor) {
        let d_f = self.d_f;
        let w = &cache.weights;
        let mut df_bev = vec![0.0f32; d_f];
        let mut df_fv = vec![0.0f32; d_f];
        let mut d_gap = vec![0.0f32; d_f];
        for c in 0..d_f {
            let g = d_select.data()[c];
            let ab = w.a_bev[c];
            df_bev[c] = g * ab;
            df_fv[c] = g * (1.0 - ab);
            // d a_bev / d (lb - lf) = ab * (1 - ab).
            let da = g * (cache.f_bev.data()[c] - cache.f_fv.data()[c]);
            d_gap[c] = da * ab * (1.0 - ab);
        }
        let dlb = Tensor::from_vec(&[1, d_f], d_gap.clone());
        let dlf = Tensor::from_vec(&[1, d_f], d_gap.iter().map(|v| -v).collect());
        let mut dz = self.logit_bev.backward(ps, &cache.z, &dlb, grads);
        dz.add_assign(&self.logit_fv.backward(ps, &cache.z, &dlf, grads));
        let dbn_out = leaky_relu_backward(&cache.bn_out, &dz);
        let (dfc, dgamma, dbeta) = batch_norm_backward(&cache.bn, ps.get(self.bn_gamma), &dbn_out);
        grads.get_mut(self.bn_gamma).add_assign(&dgamma);
        grads.get_mut(self.bn_beta).add_assign(&dbeta);
        let dsum = self.fc.backward(ps, &cache.sum, &dfc, grads);
        for c in 0..d_f {
            df_bev[c] += dsum.data()[c];
            df_fv[c] += dsum.data()[c];
        }
        (
            Tensor::from_vec(&[d_f], df_bev),
            Tensor::from_vec(&[d_f], df_fv),
        )
    }

    /// Momentum update of the running statistics from the compact-descriptor
    /// inputs observed over one batch, in sample-index order.
    pub fn update_stats(&self, ps: &mut ParamSet, batch_fc_outs: &[Tensor]) {
        if batch_fc_outs.is_empty() {
            return;
        }
        let d_z = ps.get(self.bn_mean).len();
        let n = batch_fc_outs.len() as f64;
        let mut mean = vec![0.0f64; d_z];
        let mut var = vec![0.0f64; d_z];
        for t in batch_fc_outs {
            for (acc, v) in mean.iter_mut().zip(t.data()) {
                *acc += *v as f64;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        for t in batch_fc_outs {
            for ((acc, v), mu) in var.iter_mut().zip(t.data()).zip(&mean) {
                let d = *v as f64 - mu;
                *acc += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let momentum = 0.05f64;
        {
            let rm = ps.get_mut(self.bn_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(&mean) {
                *r = ((1.0 - momentum) * *r as f64 + momentum * m) as f32;
            }
        }
        let rv = ps.get_mut(self.bn_var).data_mut();
        for (r, v) in rv.iter_mut().zip(&var) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * v) as f32;
        }
    }

    /// The pre-norm descriptor for one cached forward (feeds `update_stats`).
    pub fn fc_out(cache: &FusionCache) -> Tensor {
        cache.fc_out.clone()
    }
}

// ---------------------------------------------------------------------------
// regression head
// ---------------------------------------------------------------------------

/// One iteration's predicted correction.
#[derive(Debug, Clone)]
pub struct CalibrationStep {
    pub rot_vec: RotationVector,
    pub trans: Vector3<f64>,
}

impl CalibrationStep {
    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::new(self.rot_vec.to_matrix(), self.trans)
    }
}

/// LSTM over the fused feature with two linear heads; the heads start at
/// zero so an untrained model predicts the identity correction.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    rot_head: LinearLayer,
    trans_head: LinearLayer,
    pub hidden: usize,
}

pub struct RegressionCache {
    lstm: LstmCache,
    h_new: Tensor,
}

impl RegressionHead {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, d_f: usize, hidden: usize) -> Self {
        let w_x = ps.register(
            format!("{name}.lstm.w_x"),
            crate::matchnet::xavier_init(rng, &[4 * hidden, d_f], d_f, hidden),
        );
        let w_h = ps.register(
            format!("{name}.lstm.w_h"),
            crate::matchnet::xavier_init(rng, &[4 * hidden, hidden], hidden, hidden),
        );
        let b = ps.register(format!("{name}.lstm.b"), Tensor::zeros(&[4 * hidden]));
        Self {
            w_x,
            w_h,
            b,
            rot_head: LinearLayer::new_zeroed(ps, &format!("{name}.rot"), hidden, 3),
            trans_head: LinearLayer::new_zeroed(ps, &format!("{name}.trans"), hidden, 3),
            hidden,
        }
    }

    fn weights<'a>(&self, ps: &'a ParamSet) -> LstmWeights<'a> {
        LstmWeights {
            w_x: ps.get(self.w_x),
            w_h: ps.get(self.w_h),
            b: ps.get(self.b),
        }
    }

    pub fn zero_state(&self) -> (Tensor, Tensor) {
        (Tensor::zeros(&[self.hidden]), Tensor::zeros(&[self.hidden]))
    }

    /// Returns `(step, h_new, c_new, cache)`.
    pub fn forward(
        &self,
        ps: &ParamSet,
        f_select: &Tensor,
        h: &Tensor,
        c: &Tensor,
    ) -> (CalibrationStep, Tensor, Tensor, RegressionCache) {
        let step = lstm_cell_forward(f_select, h, c, &self.weights(ps));
        let h_row = step.h.reshaped(&[1, self.hidden]);
        let rot = self.rot_head.forward(ps, &h_row);
        let trans = self.trans_head.forward(ps, &h_row);
        let pred = CalibrationStep {
            rot_vec: RotationVector(Vector3::new(
                rot.data()[0] as f64,
                rot.data()[1] as f64,
                rot.data()[2] as f64,
            )),
            trans: Vector3::new(
                trans.data()[0] as f64,
                trans.data()[1] as f64,
                trans.data()[2] as f64,
            ),
        };
        let h_new = step.h.clone();
        let c_new = step.c.clone();
        (
            pred,
            h_new.clone(),
            c_new,
            RegressionCache {
                lstm: step.cache,
                h_new,
            },
        )
    }

    /// Backward through the heads and the cell. `dh_next`/`dc_next` carry
    /// gradient from the following iteration's cell; returns
    /// `(df_select, dh_prev, dc_prev)`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &RegressionCache,
        d_rot: &[f32; 3],
        d_trans: &[f32; 3],
        dh_next: &Tensor,
        dc_next: &Tensor,
        grads: &mut GradSet,
    ) -> (Tensor, Tensor, Tensor) {
        let h_row = cache.h_new.reshaped(&[1, self.hidden]);
        let drot = Tensor::from_vec(&[1, 3], d_rot.to_vec());
        let dtrans = Tensor::from_vec(&[1, 3], d_trans.to_vec());
        let mut dh = self
            .rot_head
            .backward(ps, &h_row, &drot, grads)
            .reshaped(&[self.hidden]);
        dh.add_assign(
            &self
                .trans_head
                .backward(ps, &h_row, &dtrans, grads)
                .reshaped(&[self.hidden]),
        );
        dh.add_assign(dh_next);
        let weights = self.weights(ps);
        let (mut gw_x, mut gw_h, mut gb) = (
            Tensor::zeros(ps.get(self.w_x).shape()),
            Tensor::zeros(ps.get(self.w_h).shape()),
            Tensor::zeros(ps.get(self.b).shape()),
        );
        let (dx, dh_prev, dc_prev) = lstm_cell_backward(
            &cache.lstm,
            &weights,
            &mut LstmGrads {
                w_x: &mut gw_x,
                w_h: &mut gw_h,
                b: &mut gb,
            },
            &dh,
            dc_next,
        );
        grads.get_mut(self.w_x).add_assign(&gw_x);
        grads.get_mut(self.w_h).add_assign(&gw_h);
        grads.get_mut(self.b).add_assign(&gb);
        (dx, dh_prev, dc_prev)
    }
}

// ---------------------------------------------------------------------------
// iterative calibration driver
// ---------------------------------------------------------------------------

/// Full trace of one calibration run.
#[derive(Debug, Clone)]
pub struct CalibPrediction {
    /// Per-iteration predicted corrections, length N.
    pub steps: Vec<CalibrationStep>,
    /// Estimate after each iteration (`t_after[i] = t_after[i-1] * step[i]`).
    pub t_after: Vec<RigidTransform>,
    pub final_t: RigidTransform,
}

/// Runs `n` refine-and-rerender iterations from `t_init`: each iteration
/// re-rasterizes the radar maps with the current estimate, runs the network,
/// and right-composes the predicted correction.
pub fn iterate_calibration(
    model: &crate::model::CalibNet,
    sample: &crate::model::PreparedSample,
    t_init: RigidTransform,
    n: usize,
) -> CalibPrediction {
    assert!(n >= 1, "iterate_calibration needs n >= 1");
    let mut current = t_init;
    let (mut h, mut c) = model.regression.zero_state();
    let mut steps = Vec::with_capacity(n);
    let mut t_after = Vec::with_capacity(n);
    for _ in 0..n {
        let (out, _) = model.forward_iteration_from_transform(sample, &current, &h, &c);
        let step = out.step.clone();
        current = current.compose(&step.to_transform()).renormalized();
        h = out.h;
        c = out.c;
        t_after.push(current);
        steps.push(step);
    }
    CalibPrediction {
        steps,
        t_after,
        final_t: current,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::from_vec(&[n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn fusion_weights_sum_to_one() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let fusion = SelectiveFusion::new(&mut ps, &mut r, "fuse", 16, 8);
        for _ in 0..10 {
            let a = random_vec(&mut r, 16);
            let b = random_vec(&mut r, 16);
            let (_, cache) = fusion.forward(&ps, &a, &b);
            for c in 0..16 {
                assert_abs_diff_eq!(
                    cache.weights.a_bev[c] + cache.weights.a_fv[c],
                    1.0,
                    epsilon = 1e-6
                );
                assert!(cache.weights.a_bev[c] >= 0.0 && cache.weights.a_bev[c] <= 1.0);
            }
        }
    }

    #[test]
    fn fusion_equal_logits_average_branches() {
        // Zeroed logit heads emit equal logits, so the blend is exactly the
        // mean of the two branches.
        let mut r = rng();
        let mut ps = ParamSet::new();
        let fusion = SelectiveFusion::new(&mut ps, &mut r, "fuse", 8, 4);
        for name in ["fuse.logit_bev.w", "fuse.logit_bev.b", "fuse.logit_fv.w", "fuse.logit_fv.b"] {
            let id = ps.find(name).unwrap();
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let a = random_vec(&mut r, 8);
        let b = random_vec(&mut r, 8);
        let (out, cache) = fusion.forward(&ps, &a, &b);
        for c in 0..8 {
            assert_abs_diff_eq!(cache.weights.a_bev[c], 0.5, epsilon = 1e-6);
            assert_abs_diff_eq!(
                out.data()[c],
                0.5 * (a.data()[c] + b.data()[c]),
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn fusion_equal_branches_pass_through() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let fusion = SelectiveFusion::new(&mut ps, &mut r, "fuse", 8, 4);
        let a = random_vec(&mut r, 8);
        let (out, _) = fusion.forward(&ps, &a, &a);
        for c in 0..8 {
            assert_abs_diff_eq!(out.data()[c], a.data()[c], epsilon = 1e-6);
        }
    }

    #[test]
    fn fusion_swapping_branches_and_heads_swaps_weights() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let fusion = SelectiveFusion::new(&mut ps, &mut r, "fuse", 8, 4);
        let a = random_vec(&mut r, 8);
        let b = random_vec(&mut r, 8);
        let (_, cache_ab) = fusion.forward(&ps, &a, &b);
        // Swap the logit heads' weights, then swap the inputs.
        let wb = ps.find("fuse.logit_bev.w").unwrap();
        let wf = ps.find("fuse.logit_fv.w").unwrap();
        let tmp = ps.get(wb).clone();
        *ps.get_mut(wb) = ps.get(wf).clone();
        *ps.get_mut(wf) = tmp;
        let bb = ps.find("fuse.logit_bev.b").unwrap();
        let bf = ps.find("fuse.logit_fv.b").unwrap();
        let tmp = ps.get(bb).clone();
        *ps.get_mut(bb) = ps.get(bf).clone();
        *ps.get_mut(bf) = tmp;
        let (_, cache_ba) = fusion.forward(&ps, &b, &a);
        for c in 0..8 {
            assert_abs_diff_eq!(cache_ab.weights.a_bev[c], cache_ba.weights.a_fv[c], epsilon = 1e-6);
        }
    }

    #[test]
    fn zeroed_heads_predict_identity() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let head = RegressionHead::new(&mut ps, &mut r, "reg", 16, 8);
        let (h, c) = head.zero_state();
        let f = random_vec(&mut r, 16);
        let (step, _, _, _) = head.forward(&ps, &f, &h, &c);
        assert_eq!(step.rot_vec.0, Vector3::zeros());
        assert_eq!(step.trans, Vector3::zeros());
        let t = step.to_transform();
        assert_eq!(t.rotation, nalgebra::Matrix3::identity());
    }

    #[test]
    fn update_stats_moves_running_buffers() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let fusion = SelectiveFusion::new(&mut ps, &mut r, "fuse", 8, 4);
        let before = ps.get(ps.find("fuse.bn.running_mean").unwrap()).clone();
        let batch = vec![
            Tensor::from_vec(&[1, 4], vec![4.0, 0.0, -2.0, 1.0]),
            Tensor::from_vec(&[1, 4], vec![2.0, 0.0, -2.0, 3.0]),
        ];
        fusion.update_stats(&mut ps, &batch);
        let after = ps.get(ps.find("fuse.bn.running_mean").unwrap());
        assert!(after.data()[0] > before.data()[0]);
        assert_eq!(after.data()[1], 0.0);
    }
}
