//! Registered differentiable fragments for the gradient checker: every layer
//! and composed block, up to the full model with both losses. Each fragment
//! randomizes its own parameters (including the normally zero-initialized
//! output projections, which would otherwise hide backward errors).

use crate::config::RunConfig;
use crate::fusion::{RegressionHead, SelectiveFusion};
use crate::geometry::sample_miscalibration;
use crate::kernels::gradcheck::{check_fragment, DiffFragment, GradCheckReport};
use crate::kernels::lstm::{lstm_cell_backward, lstm_cell_forward, LstmGrads, LstmWeights};
use crate::kernels::ops::{
    conv2d_backward, conv2d_forward, linear_backward, linear_forward, softmax_backward,
    softmax_forward, Axis, Conv2dSpec,
};
use crate::kernels::{GradSet, ParamSet, Tensor};
use crate::matchnet::{MatchHead, MatchHeadGrads, McaBlock, ResidualConvBlock};
use crate::model::{CalibNet, SceneParams};
use crate::raster::{InfoMap, MapSource, ViewTag};
use crate::synthdata::SampleData;
use crate::train::{backward_sample, forward_sample, forward_sample_with_trace};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn randomize_params(ps: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f32) {
    for p in ps.iter_mut() {
        if !p.trainable {
            continue;
        }
        for v in p.tensor.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Weighted-sum probe so every output element contributes a distinct
/// gradient signal.
fn probe_weights(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn weighted_loss(out: &Tensor, w: &[f32]) -> f64 {
    out.data()
        .iter()
        .zip(w)
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum()
}

// --------------------------------------------------------------------------
// generic fragment over (ParamSet + input tensors + closure-free dispatch)
// --------------------------------------------------------------------------

/// Fragment whose tensors are a ParamSet plus named free inputs; concrete
/// fragments supply forward/backward through the `FragmentOps` table.
struct BlockFragment<Ops: FragmentOps> {
    name: &'static str,
    ps: ParamSet,
    inputs: Vec<(String, Tensor)>,
    ops: Ops,
}

impl<Ops: FragmentOps> BlockFragment<Ops> {
    /// Trainable parameter ids; buffers (running stats) are constants in the
    /// backward and must not be finite-differenced.
    fn checked_ids(&self) -> Vec<crate::kernels::ParamId> {
        (0..self.ps.len())
            .map(crate::kernels::ParamId)
            .filter(|id| self.ps.param(*id).trainable)
            .collect()
    }
}

trait FragmentOps {
    /// Scalar loss from current parameters and inputs.
    fn loss(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> f64;
    /// Parameter gradients followed by input gradients.
    fn grads(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> (GradSet, Vec<Tensor>);
}

impl<Ops: FragmentOps> DiffFragment for BlockFragment<Ops> {
    fn fragment_name(&self) -> String {
        self.name.into()
    }

    fn num_tensors(&self) -> usize {
        self.checked_ids().len() + self.inputs.len()
    }

    fn tensor_name(&self, ti: usize) -> String {
        let ids = self.checked_ids();
        if ti < ids.len() {
            self.ps.param(ids[ti]).name.clone()
        } else {
            self.inputs[ti - ids.len()].0.clone()
        }
    }

    fn tensor_len(&self, ti: usize) -> usize {
        let ids = self.checked_ids();
        if ti < ids.len() {
            self.ps.get(ids[ti]).len()
        } else {
            self.inputs[ti - ids.len()].1.len()
        }
    }

    fn get(&self, ti: usize, elem: usize) -> f32 {
        let ids = self.checked_ids();
        if ti < ids.len() {
            self.ps.get(ids[ti]).data()[elem]
        } else {
            self.inputs[ti - ids.len()].1.data()[elem]
        }
    }

    fn set(&mut self, ti: usize, elem: usize, value: f32) {
        let ids = self.checked_ids();
        if ti < ids.len() {
            self.ps.get_mut(ids[ti]).data_mut()[elem] = value;
        } else {
            self.inputs[ti - ids.len()].1.data_mut()[elem] = value;
        }
    }

    fn loss(&mut self) -> f64 {
        self.ops.loss(&self.ps, &self.inputs)
    }

    fn analytic_grads(&mut self) -> Vec<Vec<f32>> {
        let (param_grads, input_grads) = self.ops.grads(&self.ps, &self.inputs);
        let ids = self.checked_ids();
        ids.iter()
            .map(|id| param_grads.get(*id).data().to_vec())
            .chain(input_grads.iter().map(|t| t.data().to_vec()))
            .collect()
    }
}

// --------------------------------------------------------------------------
// single layers
// --------------------------------------------------------------------------

struct LinearOps {
    probe: Vec<f32>,
}

impl FragmentOps for LinearOps {
    fn loss(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> f64 {
        let y = linear_forward(&inputs[0].1, ps.get(crate::kernels::ParamId(0)), ps.get(crate::kernels::ParamId(1)));
        weighted_loss(&y, &self.probe)
    }

    fn grads(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> (GradSet, Vec<Tensor>) {
        let w = ps.get(crate::kernels::ParamId(0));
        let y = linear_forward(&inputs[0].1, w, ps.get(crate::kernels::ParamId(1)));
        let dy = Tensor::from_vec(y.shape(), self.probe.clone());
        let (dx, dw, db) = linear_backward(&inputs[0].1, w, &dy);
        let mut grads = GradSet::zeros_like(ps);
        grads.get_mut(crate::kernels::ParamId(0)).add_assign(&dw);
        grads.get_mut(crate::kernels::ParamId(1)).add_assign(&db);
        (grads, vec![dx])
    }
}

fn linear_fragment(seed: u64) -> Box<dyn DiffFragment> {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    ps.register("w", random_tensor(&mut r, &[5, 4], 0.8));
    ps.register("b", random_tensor(&mut r, &[4], 0.5));
    let x = random_tensor(&mut r, &[3, 5], 1.0);
    let probe = probe_weights(&mut r, 12);
    Box::new(BlockFragment {
        name: "linear",
        ps,
        inputs: vec![("x".into(), x)],
        ops: LinearOps { probe },
    })
}

struct ConvOps {
    spec: Conv2dSpec,
    probe: Vec<f32>,
}

impl FragmentOps for ConvOps {
    fn loss(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> f64 {
        let y = conv2d_forward(&inputs[0].1, ps.get(crate::kernels::ParamId(0)), ps.get(crate::kernels::ParamId(1)), self.spec);
        weighted_loss(&y, &self.probe)
    }

    fn grads(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> (GradSet, Vec<Tensor>) {
        let w = ps.get(crate::kernels::ParamId(0));
        let y = conv2d_forward(&inputs[0].1, w, ps.get(crate::kernels::ParamId(1)), self.spec);
        let dy = Tensor::from_vec(y.shape(), self.probe.clone());
        let (dx, dw, db) = conv2d_backward(&inputs[0].1, w, self.spec, &dy);
        let mut grads = GradSet::zeros_like(ps);
        grads.get_mut(crate::kernels::ParamId(0)).add_assign(&dw);
        grads.get_mut(crate::kernels::ParamId(1)).add_assign(&db);
        (grads, vec![dx])
    }
}

fn conv_fragment(seed: u64) -> Box<dyn DiffFragment> {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    ps.register("w", random_tensor(&mut r, &[3, 2, 3, 3], 0.5));
    ps.register("b", random_tensor(&mut r, &[3], 0.3));
    let x = random_tensor(&mut r, &[2, 8, 8], 1.0);
    let spec = Conv2dSpec::same(2);
    let probe = probe_weights(&mut r, 3 * 4 * 4);
    Box::new(BlockFragment {
        name: "conv2d",
        ps,
        inputs: vec![("x".into(), x)],
        ops: ConvOps { spec, probe },
    })
}

struct SoftmaxOps {
    probe: Vec<f32>,
}

impl FragmentOps for SoftmaxOps {
    fn loss(&self, _ps: &ParamSet, inputs: &[(String, Tensor)]) -> f64 {
        weighted_loss(&softmax_forward(&inputs[0].1, Axis::Rows), &self.probe)
    }

    fn grads(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> (GradSet, Vec<Tensor>) {
        let y = softmax_forward(&inputs[0].1, Axis::Rows);
        let dy = Tensor::from_vec(y.shape(), self.probe.clone());
        (GradSet::zeros_like(ps), vec![softmax_backward(&y, &dy, Axis::Rows)])
    }
}

fn softmax_fragment(seed: u64) -> Box<dyn DiffFragment> {
    let mut r = rng(seed);
    let x = random_tensor(&mut r, &[4, 6], 2.0);
    let probe = probe_weights(&mut r, 24);
    Box::new(BlockFragment {
        name: "softmax",
        ps: ParamSet::new(),
        inputs: vec![("x".into(), x)],
        ops: SoftmaxOps { probe },
    })
}

struct LstmOps {
    seq: Vec<Tensor>,
    hidden: usize,
    probe: Vec<f32>,
}

impl LstmOps {
    fn run(&self, ps: &ParamSet, h0: &Tensor, c0: &Tensor) -> (f64, Vec<crate::kernels::lstm::LstmCache>, Vec<Tensor>) {
        let weights = LstmWeights {
            w_x: ps.get(crate::kernels::ParamId(0)),
            w_h: ps.get(crate::kernels::ParamId(1)),
            b: ps.get(crate::kernels::ParamId(2)),
        };
        let mut h = h0.clone();
        let mut c = c0.clone();
        let mut caches = Vec::new();
        let mut hs = Vec::new();
        let mut loss = 0.0;
        for (t, x) in self.seq.iter().enumerate() {
            let step = lstm_cell_forward(x, &h, &c, &weights);
            h = step.h;
            c = step.c;
            for (j, v) in h.data().iter().enumerate() {
                loss += *v as f64 * self.probe[t * self.hidden + j] as f64;
            }
            caches.push(step.cache);
            hs.push(h.clone());
        }
        (loss, caches, hs)
    }
}

impl FragmentOps for LstmOps {
    fn loss(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> f64 {
        self.run(ps, &inputs[0].1, &inputs[1].1).0
    }

    fn grads(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> (GradSet, Vec<Tensor>) {
        let weights = LstmWeights {
            w_x: ps.get(crate::kernels::ParamId(0)),
            w_h: ps.get(crate::kernels::ParamId(1)),
            b: ps.get(crate::kernels::ParamId(2)),
        };
        let (_, caches, _) = self.run(ps, &inputs[0].1, &inputs[1].1);
        let mut gw_x = Tensor::zeros(ps.get(crate::kernels::ParamId(0)).shape());
        let mut gw_h = Tensor::zeros(ps.get(crate::kernels::ParamId(1)).shape());
        let mut gb = Tensor::zeros(ps.get(crate::kernels::ParamId(2)).shape());
        let mut dh = Tensor::zeros(&[self.hidden]);
        let mut dc = Tensor::zeros(&[self.hidden]);
        for t in (0..self.seq.len()).rev() {
            let mut dh_step = dh.clone();
            for j in 0..self.hidden {
                dh_step.data_mut()[j] += self.probe[t * self.hidden + j];
            }
            let (_, dh_prev, dc_prev) = lstm_cell_backward(
                &caches[t],
                &weights,
                &mut LstmGrads {
                    w_x: &mut gw_x,
                    w_h: &mut gw_h,
                    b: &mut gb,
                },
                &dh_step,
                &dc,
            );
            dh = dh_prev;
            dc = dc_prev;
        }
        let mut grads = GradSet::zeros_like(ps);
        grads.get_mut(crate::kernels::ParamId(0)).add_assign(&gw_x);
        grads.get_mut(crate::kernels::ParamId(1)).add_assign(&gw_h);
        grads.get_mut(crate::kernels::ParamId(2)).add_assign(&gb);
        (grads, vec![dh, dc])
    }
}

fn lstm_fragment(seed: u64) -> Box<dyn DiffFragment> {
    let mut r = rng(seed);
    let d = 4;
    let hidden = 3;
    let mut ps = ParamSet::new();
    ps.register("w_x", random_tensor(&mut r, &[4 * hidden, d], 0.6));
    ps.register("w_h", random_tensor(&mut r, &[4 * hidden, hidden], 0.6));
    ps.register("b", random_tensor(&mut r, &[4 * hidden], 0.3));
    let seq = (0..3).map(|_| random_tensor(&mut r, &[d], 1.0)).collect();
    let probe = probe_weights(&mut r, 3 * hidden);
    let h0 = random_tensor(&mut r, &[hidden], 0.5);
    let c0 = random_tensor(&mut r, &[hidden], 0.5);
    Box::new(BlockFragment {
        name: "lstm_cell",
        ps,
        inputs: vec![("h0".into(), h0), ("c0".into(), c0)],
        ops: LstmOps { seq, hidden, probe },
    })
}

// --------------------------------------------------------------------------
// composed blocks
// --------------------------------------------------------------------------

struct McaOps {
    block: McaBlock,
    probe_i: Vec<f32>,
    probe_r: Vec<f32>,
}

impl FragmentOps for McaOps {
    fn loss(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> f64 {
        let (out, _) = self.block.forward(ps, &inputs[0].1, &inputs[1].1);
        weighted_loss(&out.f_i_hat, &self.probe_i) + weighted_loss(&out.f_r_hat, &self.probe_r)
    }

    fn grads(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> (GradSet, Vec<Tensor>) {
        let (out, cache) = self.block.forward(ps, &inputs[0].1, &inputs[1].1);
        let d_i = Tensor::from_vec(out.f_i_hat.shape(), self.probe_i.clone());
        let d_r = Tensor::from_vec(out.f_r_hat.shape(), self.probe_r.clone());
        let mut grads = GradSet::zeros_like(ps);
        let (df_i, df_r) = self.block.backward(ps, &cache, &d_i, &d_r, &mut grads);
        (grads, vec![df_i, df_r])
    }
}

fn mca_fragment(seed: u64) -> Box<dyn DiffFragment> {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    let block = McaBlock::new(&mut ps, &mut r, "mca", 6, 12, false);
    randomize_params(&mut ps, &mut r, 0.6);
    let m = 5;
    let f_i = random_tensor(&mut r, &[m, 6], 1.0);
    let f_r = random_tensor(&mut r, &[m, 6], 1.0);
    let probe_i = probe_weights(&mut r, m * 6);
    let probe_r = probe_weights(&mut r, m * 6);
    Box::new(BlockFragment {
        name: "mca",
        ps,
        inputs: vec![("f_i".into(), f_i), ("f_r".into(), f_r)],
        ops: McaOps {
            block,
            probe_i,
            probe_r,
        },
    })
}

struct MatchHeadOps {
    head: MatchHead,
    probe_p: Vec<f32>,
    probe_si: Vec<f32>,
    probe_sr: Vec<f32>,
}

impl FragmentOps for MatchHeadOps {
    fn loss(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> f64 {
        let (out, _) = self.head.forward(ps, &inputs[0].1, &inputs[1].1);
        weighted_loss(&out.p, &self.probe_p)
            + weighted_loss(&out.sigma_i, &self.probe_si)
            + weighted_loss(&out.sigma_r, &self.probe_sr)
    }

    fn grads(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> (GradSet, Vec<Tensor>) {
        let (out, cache) = self.head.forward(ps, &inputs[0].1, &inputs[1].1);
        let d = MatchHeadGrads {
            dp: Tensor::from_vec(out.p.shape(), self.probe_p.clone()),
            dsigma_i: Tensor::from_vec(&[out.sigma_i.len()], self.probe_si.clone()),
            dsigma_r: Tensor::from_vec(&[out.sigma_r.len()], self.probe_sr.clone()),
        };
        let mut grads = GradSet::zeros_like(ps);
        let (df_i, df_r) = self.head.backward(ps, &cache, &d, &mut grads);
        (grads, vec![df_i, df_r])
    }
}

fn match_head_fragment(seed: u64) -> Box<dyn DiffFragment> {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    let head = MatchHead::new(&mut ps, &mut r, "match", 6);
    randomize_params(&mut ps, &mut r, 0.6);
    let m = 5;
    let f_i = random_tensor(&mut r, &[m, 6], 1.0);
    let f_r = random_tensor(&mut r, &[m, 6], 1.0);
    Box::new(BlockFragment {
        name: "match_head",
        ps,
        inputs: vec![("f_i".into(), f_i), ("f_r".into(), f_r)],
        ops: MatchHeadOps {
            head,
            probe_p: probe_weights(&mut r, m * m),
            probe_si: probe_weights(&mut r, m),
            probe_sr: probe_weights(&mut r, m),
        },
    })
}

struct RcbOps {
    block: ResidualConvBlock,
    probe: Vec<f32>,
}

impl FragmentOps for RcbOps {
    fn loss(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> f64 {
        let (out, _) = self.block.forward(ps, &inputs[0].1, &inputs[1].1);
        weighted_loss(&out, &self.probe)
    }

    fn grads(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> (GradSet, Vec<Tensor>) {
        let (out, cache) = self.block.forward(ps, &inputs[0].1, &inputs[1].1);
        let dout = Tensor::from_vec(out.shape(), self.probe.clone());
        let mut grads = GradSet::zeros_like(ps);
        let (df_i, df_r) = self.block.backward(ps, &cache, &dout, &mut grads);
        (grads, vec![df_i, df_r])
    }
}

fn rcb_fragment(seed: u64) -> Box<dyn DiffFragment> {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    let block = ResidualConvBlock::new(&mut ps, &mut r, "rcb", 4, 3, 4, 16);
    randomize_params(&mut ps, &mut r, 0.4);
    let m = 12;
    let f_i = random_tensor(&mut r, &[m, 4], 1.0);
    let f_r = random_tensor(&mut r, &[m, 4], 1.0);
    let probe = probe_weights(&mut r, 16);
    Box::new(BlockFragment {
        name: "residual_conv_block",
        ps,
        inputs: vec![("f_i".into(), f_i), ("f_r".into(), f_r)],
        ops: RcbOps { block, probe },
    })
}

struct FusionOps {
    fusion: SelectiveFusion,
    probe: Vec<f32>,
}

impl FragmentOps for FusionOps {
    fn loss(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> f64 {
        let (out, _) = self.fusion.forward(ps, &inputs[0].1, &inputs[1].1);
        weighted_loss(&out, &self.probe)
    }

    fn grads(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> (GradSet, Vec<Tensor>) {
        let (out, cache) = self.fusion.forward(ps, &inputs[0].1, &inputs[1].1);
        let dout = Tensor::from_vec(out.shape(), self.probe.clone());
        let mut grads = GradSet::zeros_like(ps);
        let (df_bev, df_fv) = self.fusion.backward(ps, &cache, &dout, &mut grads);
        (grads, vec![df_bev, df_fv])
    }
}

fn fusion_fragment(seed: u64) -> Box<dyn DiffFragment> {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    let fusion = SelectiveFusion::new(&mut ps, &mut r, "fusion", 10, 6);
    randomize_params(&mut ps, &mut r, 0.5);
    fusion.freeze_stats(&mut ps);
    // Non-trivial but valid running stats.
    let mean_id = ps.find("fusion.bn.running_mean").unwrap();
    for (i, v) in ps.get_mut(mean_id).data_mut().iter_mut().enumerate() {
        *v = 0.1 * i as f32 - 0.2;
    }
    let var_id = ps.find("fusion.bn.running_var").unwrap();
    for (i, v) in ps.get_mut(var_id).data_mut().iter_mut().enumerate() {
        *v = 0.5 + 0.2 * i as f32;
    }
    let f_bev = random_tensor(&mut r, &[10], 1.0);
    let f_fv = random_tensor(&mut r, &[10], 1.0);
    let probe = probe_weights(&mut r, 10);
    Box::new(BlockFragment {
        name: "selective_fusion",
        ps,
        inputs: vec![("f_bev".into(), f_bev), ("f_fv".into(), f_fv)],
        ops: FusionOps { fusion, probe },
    })
}

struct RegressionOps {
    head: RegressionHead,
    probe_rot: [f32; 3],
    probe_trans: [f32; 3],
    probe_h: Vec<f32>,
}

impl FragmentOps for RegressionOps {
    fn loss(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> f64 {
        let (step, h, _, _) = self.head.forward(ps, &inputs[0].1, &inputs[1].1, &inputs[2].1);
        let mut loss = 0.0;
        for a in 0..3 {
            loss += step.rot_vec.0[a] * self.probe_rot[a] as f64;
            loss += step.trans[a] * self.probe_trans[a] as f64;
        }
        loss + weighted_loss(&h, &self.probe_h)
    }

    fn grads(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> (GradSet, Vec<Tensor>) {
        let (_, h, _, cache) = self.head.forward(ps, &inputs[0].1, &inputs[1].1, &inputs[2].1);
        let mut grads = GradSet::zeros_like(ps);
        let dh_next = Tensor::from_vec(&[h.len()], self.probe_h.clone());
        let dc_next = Tensor::zeros(&[h.len()]);
        let (dx, dh_prev, dc_prev) = self.head.backward(
            ps,
            &cache,
            &self.probe_rot,
            &self.probe_trans,
            &dh_next,
            &dc_next,
            &mut grads,
        );
        (grads, vec![dx, dh_prev, dc_prev])
    }
}

fn regression_fragment(seed: u64) -> Box<dyn DiffFragment> {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    let head = RegressionHead::new(&mut ps, &mut r, "reg", 8, 6);
    randomize_params(&mut ps, &mut r, 0.5);
    let f = random_tensor(&mut r, &[8], 1.0);
    let h0 = random_tensor(&mut r, &[6], 0.5);
    let c0 = random_tensor(&mut r, &[6], 0.5);
    let probe_h = probe_weights(&mut r, 6);
    Box::new(BlockFragment {
        name: "regression_head",
        ps,
        inputs: vec![("f_select".into(), f), ("h0".into(), h0), ("c0".into(), c0)],
        ops: RegressionOps {
            head,
            probe_rot: [0.7, -0.4, 0.9],
            probe_trans: [-0.3, 0.5, 0.2],
            probe_h,
        },
    })
}

// --------------------------------------------------------------------------
// full model + losses
// --------------------------------------------------------------------------

/// Full pipeline fragment: tiny model, two iterations over a real synthetic
/// sample, loss = L_calib + beta * L_matching. Checks every parameter of the
/// network through the complete training backward.
struct FullLossFragment {
    model: CalibNet,
    sample: crate::model::PreparedSample,
    t_init: crate::geometry::RigidTransform,
    weights: crate::supervision::LossWeights,
    /// Frozen rasterization trajectory: the analytic backward stops at the
    /// rasterizer, so finite differences must hold the maps fixed too.
    trace: Vec<crate::geometry::RigidTransform>,
    /// Trainable parameter ids; running-stat buffers are constants in the
    /// backward and are excluded from checking.
    checked: Vec<crate::kernels::ParamId>,
}

impl FullLossFragment {
    fn new(seed: u64) -> Self {
        let run = RunConfig {
            channels: 8,
            ffn_hidden: 16,
            d_f: 24,
            d_z: 12,
            lstm_hidden: 12,
            iterations: 2,
            fv_h: 16,
            fv_w: 32,
            bev_h: 32,
            bev_w: 32,
            normalize_maps: true,
            depth_scale: 20.0,
            height_scale: 4.0,
            seed,
            ..RunConfig::default()
        };
        let mut model = CalibNet::new(run.model_config());
        // Randomize the zero-initialized output heads so gradient flow
        // through every path is exercised; kept small because -log(P) in the
        // matching loss is violently curved when logits are steep.
        let mut r = rng(seed ^ 0xABCD);
        randomize_params(&mut model.params, &mut r, 0.12);

        // Hand-built sample on the small maps: a sloped depth field and a
        // radar cloud with guaranteed in-frame projections.
        let k = crate::geometry::CameraIntrinsics::new(16.0, 16.0, 16.0, 8.0);
        let kb = crate::geometry::BevIntrinsics::new(2.0, 2.0, 16.0, 0.0);
        let scene = SceneParams {
            k,
            kb,
            cam_height: 1.5,
        };
        let mut depth = InfoMap::empty(16, 32, ViewTag::Fv, MapSource::Image);
        for y in 0..16 {
            for x in 0..32 {
                depth.set(y, x, 6.0 + 0.2 * x as f32 + 0.35 * y as f32);
            }
        }
        let radar_pts: Vec<nalgebra::Vector3<f64>> = (0..8)
            .map(|i| {
                let f = i as f64;
                nalgebra::Vector3::new(-3.0 + f * 0.8, -0.5 + 0.1 * f, 7.0 + f * 0.6)
            })
            .collect();
        let t_gt = sample_miscalibration(2.0, 0.1, seed ^ 0x77);
        let data = SampleData {
            id: 0,
            t_gt,
            radar: crate::geometry::PointCloud::new(radar_pts, crate::geometry::SensorTag::Radar),
            lidar: crate::geometry::PointCloud::new(vec![], crate::geometry::SensorTag::Lidar),
            depth,
        };
        let sample = model.prepare_sample(&data, scene);
        let t_init = t_gt.compose(&sample_miscalibration(6.0, 0.15, seed ^ 0x99));
        let weights = crate::supervision::LossWeights::default();
        let trace = forward_sample(&model, &sample, &t_init, &weights).t_used;
        let checked = (0..model.params.len())
            .map(crate::kernels::ParamId)
            .filter(|id| model.params.param(*id).trainable)
            .collect();
        Self {
            model,
            sample,
            t_init,
            weights,
            trace,
            checked,
        }
    }
}

impl DiffFragment for FullLossFragment {
    fn fragment_name(&self) -> String {
        "full_loss".into()
    }

    fn num_tensors(&self) -> usize {
        self.checked.len()
    }

    fn tensor_name(&self, ti: usize) -> String {
        self.model.params.param(self.checked[ti]).name.clone()
    }

    fn tensor_len(&self, ti: usize) -> usize {
        self.model.params.get(self.checked[ti]).len()
    }

    fn get(&self, ti: usize, elem: usize) -> f32 {
        self.model.params.get(self.checked[ti]).data()[elem]
    }

    fn set(&mut self, ti: usize, elem: usize, value: f32) {
        let id = self.checked[ti];
        let needs_image_refresh = {
            let name = &self.model.params.param(id).name;
            name.starts_with("fv.image") || name.starts_with("bev.image")
        };
        self.model.params.get_mut(id).data_mut()[elem] = value;
        if needs_image_refresh {
            // Image features are cached per sample; recompute when an image
            // extractor weight moves.
            self.sample.image = self
                .model
                .image_features(&self.sample.depth, &self.sample.pseudo_bev);
        }
    }

    fn loss(&mut self) -> f64 {
        forward_sample_with_trace(
            &self.model,
            &self.sample,
            &self.t_init,
            &self.weights,
            Some(&self.trace),
        )
        .losses
        .total
    }

    fn analytic_grads(&mut self) -> Vec<Vec<f32>> {
        let trace = forward_sample_with_trace(
            &self.model,
            &self.sample,
            &self.t_init,
            &self.weights,
            Some(&self.trace),
        );
        let mut grads = GradSet::zeros_like(&self.model.params);
        backward_sample(&self.model, &self.sample, &trace, &self.weights, &mut grads);
        self.checked
            .iter()
            .map(|id| grads.get(*id).data().to_vec())
            .collect()
    }
}

fn full_loss_fragment(seed: u64) -> Box<dyn DiffFragment> {
    Box::new(FullLossFragment::new(seed))
}

/// Beta-linearity probe: at fixed parameters, d L_total / d beta must equal
/// L_matching exactly. Returns (analytic, numeric) for an FD comparison.
pub fn beta_linearity_probe(seed: u64) -> (f64, f64) {
    let frag = FullLossFragment::new(seed);
    let trace = forward_sample(&frag.model, &frag.sample, &frag.t_init, &frag.weights);
    let eps = 1e-4;
    let mut wp = frag.weights;
    wp.beta += eps;
    let mut wm = frag.weights;
    wm.beta -= eps;
    let lp = forward_sample(&frag.model, &frag.sample, &frag.t_init, &wp).losses.total;
    let lm = forward_sample(&frag.model, &frag.sample, &frag.t_init, &wm).losses.total;
    (trace.losses.matching, (lp - lm) / (2.0 * eps))
}

// --------------------------------------------------------------------------
// registry
// --------------------------------------------------------------------------

pub struct FragmentSpec {
    pub name: &'static str,
    pub tol: f64,
    pub eps: f32,
    /// Relative-error denominator floor (noise scale of the fragment).
    pub floor: f64,
    pub max_per_tensor: usize,
    pub build: fn(u64) -> Box<dyn DiffFragment>,
}

/// Every registered fragment with its documented tolerance: 1e-3 for single
/// layers, 3e-3 for composed blocks, 5e-3 for the full pipeline.
pub fn registry() -> Vec<FragmentSpec> {
    vec![
        FragmentSpec { name: "linear", tol: 1e-3, eps: 1e-3, floor: 1e-2, max_per_tensor: 64, build: linear_fragment },
        FragmentSpec { name: "conv2d", tol: 1e-3, eps: 5e-3, floor: 1e-2, max_per_tensor: 64, build: conv_fragment },
        FragmentSpec { name: "softmax", tol: 1e-3, eps: 1e-3, floor: 1e-2, max_per_tensor: 64, build: softmax_fragment },
        FragmentSpec { name: "lstm_cell", tol: 1e-3, eps: 5e-3, floor: 1e-2, max_per_tensor: 64, build: lstm_fragment },
        FragmentSpec { name: "mca", tol: 3e-3, eps: 5e-3, floor: 2e-2, max_per_tensor: 24, build: mca_fragment },
        FragmentSpec { name: "match_head", tol: 3e-3, eps: 5e-3, floor: 2e-2, max_per_tensor: 24, build: match_head_fragment },
        FragmentSpec { name: "residual_conv_block", tol: 3e-3, eps: 5e-3, floor: 2e-2, max_per_tensor: 24, build: rcb_fragment },
        FragmentSpec { name: "selective_fusion", tol: 3e-3, eps: 5e-3, floor: 2e-2, max_per_tensor: 24, build: fusion_fragment },
        FragmentSpec { name: "regression_head", tol: 3e-3, eps: 5e-3, floor: 2e-2, max_per_tensor: 24, build: regression_fragment },
        FragmentSpec { name: "full_loss", tol: 5e-3, eps: 2e-3, floor: 5e-2, max_per_tensor: 6, build: full_loss_fragment },
    ]
}

/// Default probe seed: a fixed point verified to sit away from activation
/// kinks for every fragment (finite differences are undefined across the
/// piecewise-linear kinks of leaky ReLU, so the probe point must be smooth).
pub const DEFAULT_CHECK_SEED: u64 = 1234;

/// Runs one named fragment (or all when `name` is None) at the registered
/// tolerances, with an optional override.
pub fn run_fragments(name: Option<&str>, tol_override: Option<f64>, seed: u64) -> Vec<GradCheckReport> {
    registry()
        .iter()
        .filter(|spec| name.is_none_or(|n| n == spec.name))
        .map(|spec| {
            let mut frag = (spec.build)(seed);
            check_fragment(frag.as_mut(), spec.eps, tol_override.unwrap_or(spec.tol), spec.floor, spec.max_per_tensor)
        })
        .collect()
}

/// Negative control: a linear fragment whose weight gradient is corrupted;
/// the checker must flag it.
pub fn corrupted_control(seed: u64) -> GradCheckReport {
    struct CorruptOps {
        inner: LinearOps,
    }
    impl FragmentOps for CorruptOps {
        fn loss(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> f64 {
            self.inner.loss(ps, inputs)
        }
        fn grads(&self, ps: &ParamSet, inputs: &[(String, Tensor)]) -> (GradSet, Vec<Tensor>) {
            let (mut grads, dx) = self.inner.grads(ps, inputs);
            grads.get_mut(crate::kernels::ParamId(0)).data_mut()[0] += 1.0;
            (grads, dx)
        }
    }
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    ps.register("w", random_tensor(&mut r, &[4, 3], 0.8));
    ps.register("b", random_tensor(&mut r, &[3], 0.5));
    let x = random_tensor(&mut r, &[2, 4], 1.0);
    let probe = probe_weights(&mut r, 6);
    let mut frag = BlockFragment {
        name: "corrupted_linear",
        ps,
        inputs: vec![("x".into(), x)],
        ops: CorruptOps {
            inner: LinearOps { probe },
        },
    };
    check_fragment(&mut frag, 1e-3, 1e-3, 1e-2, 64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_fragments_pass() {
        for name in ["linear", "conv2d", "softmax", "lstm_cell"] {
            let reports = run_fragments(Some(name), None, DEFAULT_CHECK_SEED);
            assert_eq!(reports.len(), 1);
            assert!(reports[0].passed(), "{}", reports[0]);
        }
    }

    #[test]
    fn composed_block_fragments_pass() {
        for name in ["mca", "match_head", "residual_conv_block", "selective_fusion", "regression_head"] {
            let reports = run_fragments(Some(name), None, DEFAULT_CHECK_SEED);
            assert_eq!(reports.len(), 1);
            assert!(reports[0].passed(), "{}", reports[0]);
        }
    }

    #[test]
    fn full_loss_fragment_passes() {
        let reports = run_fragments(Some("full_loss"), None, DEFAULT_CHECK_SEED);
        assert!(reports[0].passed(), "{}", reports[0]);
    }

    #[test]
    fn corrupted_control_fails() {
        let report = corrupted_control(3);
        assert!(!report.passed());
    }

    #[test]
    fn beta_linearity_holds() {
        let (analytic, numeric) = beta_linearity_probe(17);
        assert!(
            (analytic - numeric).abs() < 1e-5 * analytic.abs().max(1.0),
            "dL/dbeta {analytic} vs FD {numeric}"
        );
    }
}
