//! Feature extraction stacks, the cross-modal attention block, the residual
//! conv aggregation block, and the explicit matching head.
//!
//! Every block follows the same contract: `forward` takes `&ParamSet` and
//! returns the output plus a cache, `backward` takes the cache and the
//! output gradient, accumulates parameter gradients into a `GradSet`, and
//! returns input gradients.

use crate::kernels::ops::{
    conv2d_backward, conv2d_forward, gelu_backward, gelu_forward, layer_norm_backward,
    layer_norm_forward, leaky_relu_backward, leaky_relu_forward, linear_backward, linear_forward,
    matmul, matmul_a_bt, matmul_at_b, sigmoid_backward, sigmoid_forward, softmax_backward,
    softmax_forward, Axis, Conv2dSpec, LayerNormCache,
};
use crate::kernels::{GradSet, ParamId, ParamSet, Tensor};
use crate::raster::{MapSource, ViewTag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Feature tokens from one information map: `[C, h, w]` grid where the
/// spatial dims are the map dims divided by the total stride (8).
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub tensor: Tensor,
    pub view: ViewTag,
    pub source: MapSource,
}

pub const TOTAL_STRIDE: usize = 8;

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

pub fn xavier_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

// ---------------------------------------------------------------------------
// linear layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl LinearLayer {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        let w = ps.register(
            format!("{name}.w"),
            xavier_init(rng, &[c_in, c_out], c_in, c_out),
        );
        let b = ps.register(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self { w, b, c_in, c_out }
    }

    /// Output projections that must start as the identity-residual use this.
    pub fn new_zeroed(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize) -> Self {
        let w = ps.register(format!("{name}.w"), Tensor::zeros(&[c_in, c_out]));
        let b = ps.register(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self { w, b, c_in, c_out }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> Tensor {
        linear_forward(x, ps.get(self.w), ps.get(self.b))
    }

    pub fn backward(&self, ps: &ParamSet, x: &Tensor, dy: &Tensor, grads: &mut GradSet) -> Tensor {
        let (dx, dw, db) = linear_backward(x, ps.get(self.w), dy);
        grads.get_mut(self.w).add_assign(&dw);
        grads.get_mut(self.b).add_assign(&db);
        dx
    }
}

// ---------------------------------------------------------------------------
// conv layer (conv + leaky ReLU)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

pub struct ConvCache {
    x: Tensor,
    pre_act: Tensor,
}

impl ConvLayer {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let fan_out = c_out * kernel * kernel;
        let w = ps.register(
            format!("{name}.w"),
            xavier_init(rng, &[c_out, c_in, kernel, kernel], fan_in, fan_out),
        );
        let b = ps.register(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self { w, b, spec }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> (Tensor, ConvCache) {
        let pre = conv2d_forward(x, ps.get(self.w), ps.get(self.b), self.spec);
        let y = leaky_relu_forward(&pre);
        (
            y,
            ConvCache {
                x: x.clone(),
                pre_act: pre,
            },
        )
    }

    pub fn backward(&self, ps: &ParamSet, cache: &ConvCache, dy: &Tensor, grads: &mut GradSet) -> Tensor {
        let dpre = leaky_relu_backward(&cache.pre_act, dy);
        let (dx, dw, db) = conv2d_backward(&cache.x, ps.get(self.w), self.spec, &dpre);
        grads.get_mut(self.w).add_assign(&dw);
        grads.get_mut(self.b).add_assign(&db);
        dx
    }
}

// ---------------------------------------------------------------------------
// feature extraction stacks
// ---------------------------------------------------------------------------

/// Three stride-2 conv blocks, trained from scratch: the radar path and the
/// context path.
#[derive(Debug, Clone)]
pub struct ThreeBlockStack {
    convs: [ConvLayer; 3],
}

pub struct ThreeBlockCache {
    caches: [ConvCache; 3],
}

impl ThreeBlockStack {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let mid1 = (channels / 4).max(4);
        let mid2 = (channels / 2).max(8);
        Self {
            convs: [
                ConvLayer::new(ps, rng, &format!("{name}.conv1"), 1, mid1, 3, Conv2dSpec::same(2)),
                ConvLayer::new(ps, rng, &format!("{name}.conv2"), mid1, mid2, 3, Conv2dSpec::same(2)),
                ConvLayer::new(ps, rng, &format!("{name}.conv3"), mid2, channels, 3, Conv2dSpec::same(2)),
            ],
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> (Tensor, ThreeBlockCache) {
        let (y1, c1) = self.convs[0].forward(ps, x);
        let (y2, c2) = self.convs[1].forward(ps, &y1);
        let (y3, c3) = self.convs[2].forward(ps, &y2);
        (y3, ThreeBlockCache { caches: [c1, c2, c3] })
    }

    pub fn backward(&self, ps: &ParamSet, cache: &ThreeBlockCache, dy: &Tensor, grads: &mut GradSet) -> Tensor {
        let d2 = self.convs[2].backward(ps, &cache.caches[2], dy, grads);
        let d1 = self.convs[1].backward(ps, &cache.caches[1], &d2, grads);
        self.convs[0].backward(ps, &cache.caches[0], &d1, grads)
    }
}

/// Two conv layers (stride 4 then 2) for the semantically rich image maps.
#[derive(Debug, Clone)]
pub struct TwoLayerStack {
    convs: [ConvLayer; 2],
}

pub struct TwoLayerCache {
    caches: [ConvCache; 2],
}

impl TwoLayerStack {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let mid = (channels / 2).max(8);
        Self {
            convs: [
                ConvLayer::new(ps, rng, &format!("{name}.conv1"), 1, mid, 5, Conv2dSpec::same(4)),
                ConvLayer::new(ps, rng, &format!("{name}.conv2"), mid, channels, 3, Conv2dSpec::same(2)),
            ],
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Tensor) -> (Tensor, TwoLayerCache) {
        let (y1, c1) = self.convs[0].forward(ps, x);
        let (y2, c2) = self.convs[1].forward(ps, &y1);
        (y2, TwoLayerCache { caches: [c1, c2] })
    }

    pub fn backward(&self, ps: &ParamSet, cache: &TwoLayerCache, dy: &Tensor, grads: &mut GradSet) -> Tensor {
        let d1 = self.convs[1].backward(ps, &cache.caches[1], dy, grads);
        self.convs[0].backward(ps, &cache.caches[0], &d1, grads)
    }
}

/// Image-side FV extractor: two conv layers on the depth map, summed with a
/// context stack run on the grayscale render when provided.
#[derive(Debug, Clone)]
pub struct ImageFvExtractor {
    pub main: TwoLayerStack,
    pub context: ThreeBlockStack,
}

pub struct ImageFvCache {
    main: TwoLayerCache,
    context: Option<ThreeBlockCache>,
}

impl ImageFvExtractor {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        Self {
            main: TwoLayerStack::new(ps, rng, &format!("{name}.depth"), channels),
            context: ThreeBlockStack::new(ps, rng, &format!("{name}.context"), channels),
        }
    }

    pub fn forward(&self, ps: &ParamSet, depth: &Tensor, context: Option<&Tensor>) -> (Tensor, ImageFvCache) {
        let (mut y, main) = self.main.forward(ps, depth);
        let context_cache = context.map(|ctx| {
            let (cy, cc) = self.context.forward(ps, ctx);
            assert_eq!(cy.shape(), y.shape(), "context grid shape mismatch");
            y.add_assign(&cy);
            cc
        });
        (
            y,
            ImageFvCache {
                main,
                context: context_cache,
            },
        )
    }

    pub fn backward(&self, ps: &ParamSet, cache: &ImageFvCache, dy: &Tensor, grads: &mut GradSet) -> Tensor {
        if let Some(ctx) = &cache.context {
            self.context.backward(ps, ctx, dy, grads);
        }
        self.main.backward(ps, &cache.main, dy, grads)
    }
}

/// Checks the stride-8 contract before rasters hit a stack.
pub fn check_map_dims(h: usize, w: usize) {
    assert!(
        h.is_multiple_of(TOTAL_STRIDE) && w.is_multiple_of(TOTAL_STRIDE),
        "map dims {h}x{w} must be divisible by {TOTAL_STRIDE}"
    );
}

// ---------------------------------------------------------------------------
// grid <-> token reshape
// ---------------------------------------------------------------------------

/// `[c, h, w]` grid to `[h*w, c]` tokens, row-major over (y, x).
pub fn grid_to_tokens(grid: &Tensor) -> Tensor {
    let (c, h, w) = grid_dims(grid);
    let m = h * w;
    let g = grid.data();
    let mut out = vec![0.0f32; m * c];
    for ch in 0..c {
        for i in 0..m {
            out[i * c + ch] = g[ch * m + i];
        }
    }
    Tensor::from_vec(&[m, c], out)
}

/// Adjoint of [`grid_to_tokens`] (also its inverse).
pub fn tokens_to_grid(tokens: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
    let m = h * w;
    assert_eq!(tokens.shape(), &[m, c]);
    let t = tokens.data();
    let mut out = vec![0.0f32; c * m];
    for ch in 0..c {
        for i in 0..m {
            out[ch * m + i] = t[i * c + ch];
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn grid_dims(grid: &Tensor) -> (usize, usize, usize) {
    match grid.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("expected [c,h,w] grid, got {s:?}"),
    }
}

// ---------------------------------------------------------------------------
// multi-modal cross-attention
// ---------------------------------------------------------------------------

/// Feed-forward refinement: LayerNorm -> Linear -> GELU -> Linear, with the
/// output projection zero-initialized so the block starts as the identity.
#[derive(Debug, Clone)]
struct Ffn {
    norm_gamma: ParamId,
    norm_beta: ParamId,
    hidden: LinearLayer,
    out: LinearLayer,
}

struct FfnCache {
    ln: LayerNormCache,
    ln_out: Tensor,
    hidden_out: Tensor,
    act_out: Tensor,
}

impl Ffn {
    fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_hidden: usize, c_out: usize) -> Self {
        let norm_gamma = ps.register(format!("{name}.ln.gamma"), Tensor::from_vec(&[c_in], vec![1.0; c_in]));
        let norm_beta = ps.register(format!("{name}.ln.beta"), Tensor::zeros(&[c_in]));
        Self {
            norm_gamma,
            norm_beta,
            hidden: LinearLayer::new(ps, rng, &format!("{name}.hidden"), c_in, c_hidden),
            out: LinearLayer::new_zeroed(ps, &format!("{name}.out"), c_hidden, c_out),
        }
    }

    fn forward(&self, ps: &ParamSet, x: &Tensor) -> (Tensor, FfnCache) {
        let (ln_out, ln) = layer_norm_forward(x, ps.get(self.norm_gamma), ps.get(self.norm_beta));
        let hidden_out = self.hidden.forward(ps, &ln_out);
        let act_out = gelu_forward(&hidden_out);
        let y = self.out.forward(ps, &act_out);
        (
            y,
            FfnCache {
                ln,
                ln_out,
                hidden_out,
                act_out,
            },
        )
    }

    fn backward(&self, ps: &ParamSet, cache: &FfnCache, dy: &Tensor, grads: &mut GradSet) -> Tensor {
        let dact = self.out.backward(ps, &cache.act_out, dy, grads);
        let dhidden = gelu_backward(&cache.hidden_out, &dact);
        let dln_out = self.hidden.backward(ps, &cache.ln_out, &dhidden, grads);
        let (dx, dgamma, dbeta) = layer_norm_backward(&cache.ln, ps.get(self.norm_gamma), &dln_out);
        grads.get_mut(self.norm_gamma).add_assign(&dgamma);
        grads.get_mut(self.norm_beta).add_assign(&dbeta);
        dx
    }
}

/// Cross-attention between image and radar tokens with residual refinement.
#[derive(Debug, Clone)]
pub struct McaBlock {
    key_i: LinearLayer,
    key_r: LinearLayer,
    val_i: LinearLayer,
    val_r: LinearLayer,
    ffn_i: Ffn,
    ffn_r: Ffn,
    channels: usize,
    /// Optional 1/sqrt(c) scaling of the attention scores (off by default;
    /// the score product is used unscaled).
    pub scale_scores: bool,
}

pub struct McaCache {
    f_i: Tensor,
    f_r: Tensor,
    k_i: Tensor,
    k_r: Tensor,
    v_i: Tensor,
    v_r: Tensor,
    /// Raw scores a_IR (m x m), pre-softmax, post-scaling.
    pub scores: Tensor,
    attn_i_from_r: Tensor,
    attn_r_from_i: Tensor,
    ffn_i: FfnCache,
    ffn_r: FfnCache,
}

pub struct McaOutput {
    pub f_i_hat: Tensor,
    pub f_r_hat: Tensor,
}

impl McaBlock {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, channels: usize, ffn_hidden: usize, scale_scores: bool) -> Self {
        Self {
            key_i: LinearLayer::new(ps, rng, &format!("{name}.key_i"), channels, channels),
            key_r: LinearLayer::new(ps, rng, &format!("{name}.key_r"), channels, channels),
            val_i: LinearLayer::new(ps, rng, &format!("{name}.val_i"), channels, channels),
            val_r: LinearLayer::new(ps, rng, &format!("{name}.val_r"), channels, channels),
            ffn_i: Ffn::new(ps, rng, &format!("{name}.ffn_i"), 2 * channels, ffn_hidden, channels),
            ffn_r: Ffn::new(ps, rng, &format!("{name}.ffn_r"), 2 * channels, ffn_hidden, channels),
            channels,
            scale_scores,
        }
    }

    fn score_scale(&self) -> f32 {
        if self.scale_scores {
            1.0 / (self.channels as f32).sqrt()
        } else {
            1.0
        }
    }

    /// `f_i`, `f_r`: `[m, c]` token matrices of the two modalities.
    pub fn forward(&self, ps: &ParamSet, f_i: &Tensor, f_r: &Tensor) -> (McaOutput, McaCache) {
        assert_eq!(f_i.shape(), f_r.shape(), "mca expects same token shapes");
        let (m, c) = (f_i.shape()[0], f_i.shape()[1]);
        let k_i = self.key_i.forward(ps, f_i);
        let k_r = self.key_r.forward(ps, f_r);
        let v_i = self.val_i.forward(ps, f_i);
        let v_r = self.val_r.forward(ps, f_r);

        // a_IR[i, j] = <k_i[i], k_r[j]>, optionally scaled.
        let mut scores = Tensor::from_vec(&[m, m], matmul_a_bt(k_i.data(), k_r.data(), m, c, m));
        let scale = self.score_scale();
        if scale != 1.0 {
            scores.scale(scale);
        }

        let sm_rows = softmax_forward(&scores, Axis::Rows);
        let m_i_from_r = Tensor::from_vec(&[m, c], matmul(sm_rows.data(), v_r.data(), m, m, c));
        let scores_t = transpose(&scores);
        let sm_rows_t = softmax_forward(&scores_t, Axis::Rows);
        let m_r_from_i = Tensor::from_vec(&[m, c], matmul(sm_rows_t.data(), v_i.data(), m, m, c));

        let cat_i = concat_cols(f_i, &m_i_from_r);
        let cat_r = concat_cols(f_r, &m_r_from_i);
        let (o_i, ffn_i_cache) = self.ffn_i.forward(ps, &cat_i);
        let (o_r, ffn_r_cache) = self.ffn_r.forward(ps, &cat_r);

        let mut f_i_hat = f_i.clone();
        f_i_hat.add_assign(&o_i);
        let mut f_r_hat = f_r.clone();
        f_r_hat.add_assign(&o_r);

        (
            McaOutput { f_i_hat, f_r_hat },
            McaCache {
                f_i: f_i.clone(),
                f_r: f_r.clone(),
                k_i,
                k_r,
                v_i,
                v_r,
                scores,
                attn_i_from_r: sm_rows,
                attn_r_from_i: sm_rows_t,
                ffn_i: ffn_i_cache,
                ffn_r: ffn_r_cache,
            },
        )
    }

    /// Backward from gradients on the two refined token matrices; returns
    /// `(df_i, df_r)`.
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &McaCache,
        df_i_hat: &Tensor,
        df_r_hat: &Tensor,
        grads: &mut GradSet,
    ) -> (Tensor, Tensor) {
        let (m, c) = (cache.f_i.shape()[0], cache.f_i.shape()[1]);

        // Residual: gradients flow both into the FFN and straight through.
        let dcat_i = self.ffn_i.backward(ps, &cache.ffn_i, df_i_hat, grads);
        let dcat_r = self.ffn_r.backward(ps, &cache.ffn_r, df_r_hat, grads);
        let (df_i_direct, dm_i_from_r) = split_cols(&dcat_i, c);
        let (df_r_direct, dm_r_from_i) = split_cols(&dcat_r, c);

        let mut df_i = df_i_hat.clone();
        df_i.add_assign(&df_i_direct);
        let mut df_r = df_r_hat.clone();
        df_r.add_assign(&df_r_direct);

        // m_I<-R = softmax_rows(a) V_R.
        let dv_r = Tensor::from_vec(
            &[m, c],
            matmul_at_b(cache.attn_i_from_r.data(), dm_i_from_r.data(), m, m, c),
        );
        let d_sm_rows = Tensor::from_vec(
            &[m, m],
            matmul_a_bt(dm_i_from_r.data(), cache.v_r.data(), m, c, m),
        );
        let mut dscores = softmax_backward(&cache.attn_i_from_r, &d_sm_rows, Axis::Rows);

        // m_R<-I = softmax_rows(a^T) V_I.
        let dv_i = Tensor::from_vec(
            &[m, c],
            matmul_at_b(cache.attn_r_from_i.data(), dm_r_from_i.data(), m, m, c),
        );
        let d_sm_rows_t = Tensor::from_vec(
            &[m, m],
            matmul_a_bt(dm_r_from_i.data(), cache.v_i.data(), m, c, m),
        );
        let dscores_t = softmax_backward(&cache.attn_r_from_i, &d_sm_rows_t, Axis::Rows);
        dscores.add_assign(&transpose(&dscores_t));

        let scale = self.score_scale();
        if scale != 1.0 {
            dscores.scale(scale);
        }

        // a = K_I K_R^T.
        let dk_i = Tensor::from_vec(&[m, c], matmul(dscores.data(), cache.k_r.data(), m, m, c));
        let dk_r = Tensor::from_vec(&[m, c], matmul_at_b(dscores.data(), cache.k_i.data(), m, m, c));

        df_i.add_assign(&self.key_i.backward(ps, &cache.f_i, &dk_i, grads));
        df_r.add_assign(&self.key_r.backward(ps, &cache.f_r, &dk_r, grads));
        df_i.add_assign(&self.val_i.backward(ps, &cache.f_i, &dv_i, grads));
        df_r.add_assign(&self.val_r.backward(ps, &cache.f_r, &dv_r, grads));

        (df_i, df_r)
    }
}

pub fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = match t.shape() {
        [r, c] => (*r, *c),
        s => panic!("transpose expects rank 2, got {s:?}"),
    };
    let d = t.data();
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, ca) = (a.shape()[0], a.shape()[1]);
    let cb = b.shape()[1];
    assert_eq!(b.shape()[0], m);
    let mut out = vec![0.0f32; m * (ca + cb)];
    for i in 0..m {
        out[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        out[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Tensor::from_vec(&[m, ca + cb], out)
}

fn split_cols(t: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (m, c) = (t.shape()[0], t.shape()[1]);
    let cb = c - ca;
    let mut a = vec![0.0f32; m * ca];
    let mut b = vec![0.0f32; m * cb];
    for i in 0..m {
        a[i * ca..(i + 1) * ca].copy_from_slice(&t.data()[i * c..i * c + ca]);
        b[i * cb..(i + 1) * cb].copy_from_slice(&t.data()[i * c + ca..(i + 1) * c]);
    }
    (Tensor::from_vec(&[m, ca], a), Tensor::from_vec(&[m, cb], b))
}

// ---------------------------------------------------------------------------
// match head
// ---------------------------------------------------------------------------

/// Assignment probabilities and matchability scores for one view.
#[derive(Debug, Clone)]
pub struct MatchHeadOutput {
    /// m x m assignment probabilities in [0, 1].
    pub p: Tensor,
    /// Per-token matchability, image side, length m.
    pub sigma_i: Tensor,
    /// Per-token matchability, radar side, length m.
    pub sigma_r: Tensor,
    /// Raw similarity scores S, m x m.
    pub s: Tensor,
}

pub struct MatchHeadCache {
    f_i: Tensor,
    f_r: Tensor,
    proj_i: Tensor,
    proj_r: Tensor,
    sm_rows: Tensor,
    sm_cols: Tensor,
    out: MatchHeadOutput,
}

/// Gradients flowing into the match head outputs.
pub struct MatchHeadGrads {
    pub dp: Tensor,
    pub dsigma_i: Tensor,
    pub dsigma_r: Tensor,
}

impl MatchHeadGrads {
    pub fn zeros(m: usize) -> Self {
        Self {
            dp: Tensor::zeros(&[m, m]),
            dsigma_i: Tensor::zeros(&[m]),
            dsigma_r: Tensor::zeros(&[m]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatchHead {
    proj_i: LinearLayer,
    proj_r: LinearLayer,
    score_i: LinearLayer,
    score_r: LinearLayer,
}

impl MatchHead {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        Self {
            proj_i: LinearLayer::new(ps, rng, &format!("{name}.proj_i"), channels, channels),
            proj_r: LinearLayer::new(ps, rng, &format!("{name}.proj_r"), channels, channels),
            score_i: LinearLayer::new(ps, rng, &format!("{name}.score_i"), channels, 1),
            score_r: LinearLayer::new(ps, rng, &format!("{name}.score_r"), channels, 1),
        }
    }

    /// `P = outer(sigma_I, sigma_R) (.) col-softmax(S) (.) row-softmax(S)`
    /// with `S = Linear(f_I) Linear(f_R)^T`.
    pub fn forward(&self, ps: &ParamSet, f_i_hat: &Tensor, f_r_hat: &Tensor) -> (MatchHeadOutput, MatchHeadCache) {
        let (m, c) = (f_i_hat.shape()[0], f_i_hat.shape()[1]);
        assert_eq!(f_r_hat.shape(), &[m, c]);
        let proj_i = self.proj_i.forward(ps, f_i_hat);
        let proj_r = self.proj_r.forward(ps, f_r_hat);
        let s = Tensor::from_vec(&[m, m], matmul_a_bt(proj_i.data(), proj_r.data(), m, c, m));
        let sm_rows = softmax_forward(&s, Axis::Rows);
        let sm_cols = softmax_forward(&s, Axis::Cols);
        let sigma_i = sigmoid_forward(&self.score_i.forward(ps, f_i_hat)).reshaped(&[m]);
        let sigma_r = sigmoid_forward(&self.score_r.forward(ps, f_r_hat)).reshaped(&[m]);

        let mut p = vec![0.0f32; m * m];
        for i in 0..m {
            for j in 0..m {
                p[i * m + j] = sigma_i.data()[i]
                    * sigma_r.data()[j]
                    * sm_cols.data()[i * m + j]
                    * sm_rows.data()[i * m + j];
            }
        }
        let out = MatchHeadOutput {
            p: Tensor::from_vec(&[m, m], p),
            sigma_i,
            sigma_r,
            s: s.clone(),
        };
        (
            out.clone(),
            MatchHeadCache {
                f_i: f_i_hat.clone(),
                f_r: f_r_hat.clone(),
                proj_i,
                proj_r,
                sm_rows,
                sm_cols,
                out,
            },
        )
    }

    /// Returns `(df_i_hat, df_r_hat)`.
    pub fn backward(&self, ps: &ParamSet, cache: &MatchHeadCache, d: &MatchHeadGrads, grads: &mut GradSet) -> (Tensor, Tensor) {
        let m = cache.out.sigma_i.len();
        let sm_r = cache.sm_rows.data();
        let sm_c = cache.sm_cols.data();
        let si = cache.out.sigma_i.data();
        let sr = cache.out.sigma_r.data();
        let dp = d.dp.data();

        let mut dsigma_i = d.dsigma_i.data().to_vec();
        let mut dsigma_r = d.dsigma_r.data().to_vec();
        let mut d_sm_rows = vec![0.0f32; m * m];
        let mut d_sm_cols = vec![0.0f32; m * m];
        for i in 0..m {
            for j in 0..m {
                let g = dp[i * m + j];
                if g == 0.0 {
                    continue;
                }
                let rs = sm_r[i * m + j];
                let cs = sm_c[i * m + j];
                dsigma_i[i] += g * sr[j] * cs * rs;
                dsigma_r[j] += g * si[i] * cs * rs;
                d_sm_cols[i * m + j] = g * si[i] * sr[j] * rs;
                d_sm_rows[i * m + j] = g * si[i] * sr[j] * cs;
            }
        }

        let mut ds = softmax_backward(
            &cache.sm_rows,
            &Tensor::from_vec(&[m, m], d_sm_rows),
            Axis::Rows,
        );
        ds.add_assign(&softmax_backward(
            &cache.sm_cols,
            &Tensor::from_vec(&[m, m], d_sm_cols),
            Axis::Cols,
        ));

        // S = proj_i proj_r^T.
        let c = cache.proj_i.shape()[1];
        let dproj_i = Tensor::from_vec(&[m, c], matmul(ds.data(), cache.proj_r.data(), m, m, c));
        let dproj_r = Tensor::from_vec(&[m, c], matmul_at_b(ds.data(), cache.proj_i.data(), m, m, c));

        let mut df_i = self.proj_i.backward(ps, &cache.f_i, &dproj_i, grads);
        let mut df_r = self.proj_r.backward(ps, &cache.f_r, &dproj_r, grads);

        // sigma = sigmoid(linear(f)).
        let dsig_i = sigmoid_backward(
            &cache.out.sigma_i.reshaped(&[m, 1]),
            &Tensor::from_vec(&[m, 1], dsigma_i),
        );
        let dsig_r = sigmoid_backward(
            &cache.out.sigma_r.reshaped(&[m, 1]),
            &Tensor::from_vec(&[m, 1], dsigma_r),
        );
        df_i.add_assign(&self.score_i.backward(ps, &cache.f_i, &dsig_i, grads));
        df_r.add_assign(&self.score_r.backward(ps, &cache.f_r, &dsig_r, grads));

        (df_i, df_r)
    }
}

// ---------------------------------------------------------------------------
// residual conv block
// ---------------------------------------------------------------------------

/// Aggregates the two refined feature grids of one view into a fixed-length
/// vector: concat -> residual conv branches -> leakyReLU -> flatten -> MLP.
#[derive(Debug, Clone)]
pub struct ResidualConvBlock {
    conv_direct: ConvLayer,
    conv_a: ConvLayer,
    conv_b: ConvLayer,
    mlp_hidden: LinearLayer,
    mlp_out: LinearLayer,
    grid_h: usize,
    grid_w: usize,
    channels_out: usize,
}

pub struct RcbCache {
    direct: ConvCache,
    a: ConvCache,
    b: ConvCache,
    sum: Tensor,
    flat: Tensor,
    hidden_pre: Tensor,
    hidden_act: Tensor,
}

impl ResidualConvBlock {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        grid_h: usize,
        grid_w: usize,
        d_f: usize,
    ) -> Self {
        let c_out = channels;
        let flat = c_out * grid_h * grid_w;
        Self {
            conv_direct: ConvLayer::new(ps, rng, &format!("{name}.direct"), 2 * channels, c_out, 3, Conv2dSpec::same(1)),
            conv_a: ConvLayer::new(ps, rng, &format!("{name}.pre"), 2 * channels, c_out, 3, Conv2dSpec::same(1)),
            conv_b: ConvLayer::new(ps, rng, &format!("{name}.post"), c_out, c_out, 3, Conv2dSpec::same(1)),
            mlp_hidden: LinearLayer::new(ps, rng, &format!("{name}.mlp1"), flat, d_f),
            mlp_out: LinearLayer::new(ps, rng, &format!("{name}.mlp2"), d_f, d_f),
            grid_h,
            grid_w,
            channels_out: c_out,
        }
    }

    /// Inputs are token matrices `[m, c]`; output is the view vector `[d_f]`.
    pub fn forward(&self, ps: &ParamSet, f_i_hat: &Tensor, f_r_hat: &Tensor) -> (Tensor, RcbCache) {
        let c = f_i_hat.shape()[1];
        let grid_i = tokens_to_grid(f_i_hat, c, self.grid_h, self.grid_w);
        let grid_r = tokens_to_grid(f_r_hat, c, self.grid_h, self.grid_w);
        let cat = concat_channels(&grid_i, &grid_r);
        let (direct_out, direct) = self.conv_direct.forward(ps, &cat);
        let (a_out, a) = self.conv_a.forward(ps, &cat);
        let (b_out, b) = self.conv_b.forward(ps, &a_out);
        let mut sum = direct_out;
        sum.add_assign(&b_out);
        let act = leaky_relu_forward(&sum);
        let flat = act.reshaped(&[1, self.channels_out * self.grid_h * self.grid_w]);
        let hidden_pre = self.mlp_hidden.forward(ps, &flat);
        let hidden_act = leaky_relu_forward(&hidden_pre);
        let out = self.mlp_out.forward(ps, &hidden_act).reshaped(&[self.mlp_out.c_out]);
        (
            out,
            RcbCache {
                direct,
                a,
                b,
                sum,
                flat,
                hidden_pre,
                hidden_act,
            },
        )
    }

    /// Returns `(df_i_hat, df_r_hat)` as token matrices.
    pub fn backward(&self, ps: &ParamSet, cache: &RcbCache, dout: &Tensor, grads: &mut GradSet) -> (Tensor, Tensor) {
        let d_f = self.mlp_out.c_out;
        let dhidden_act = self.mlp_out.backward(ps, &cache.hidden_act, &dout.reshaped(&[1, d_f]), grads);
        let dhidden_pre = leaky_relu_backward(&cache.hidden_pre, &dhidden_act);
        let dflat = self.mlp_hidden.backward(ps, &cache.flat, &dhidden_pre, grads);
        let dact = dflat.reshaped(&[self.channels_out, self.grid_h, self.grid_w]);
        let dsum = leaky_relu_backward(&cache.sum, &dact);
        let mut dcat = self.conv_direct.backward(ps, &cache.direct, &dsum, grads);
        let da_out = self.conv_b.backward(ps, &cache.b, &dsum, grads);
        dcat.add_assign(&self.conv_a.backward(ps, &cache.a, &da_out, grads));
        let c = dcat.shape()[0] / 2;
        let (dgrid_i, dgrid_r) = split_channels(&dcat, c);
        (grid_to_tokens(&dgrid_i), grid_to_tokens(&dgrid_r))
    }
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = grid_dims(a);
    let (cb, hb, wb) = grid_dims(b);
    assert_eq!((h, w), (hb, wb));
    let mut out = Vec::with_capacity((ca + cb) * h * w);
    out.extend_from_slice(a.data());
    out.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, h, w], out)
}

fn split_channels(t: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (c, h, w) = grid_dims(t);
    let cb = c - ca;
    let split = ca * h * w;
    (
        Tensor::from_vec(&[ca, h, w], t.data()[..split].to_vec()),
        Tensor::from_vec(&[cb, h, w], t.data()[split..].to_vec()),
    )
}

// ---------------------------------------------------------------------------
// attention heatmaps
// ---------------------------------------------------------------------------

/// Visualization maps from the raw cross-attention scores: per token, the
/// maximum of its softmaxed attention row, reshaped to the feature grid.
pub fn attention_heatmaps(scores: &Tensor, grid_h: usize, grid_w: usize) -> (Tensor, Tensor) {
    let m = scores.shape()[0];
    assert_eq!(scores.shape(), &[m, m]);
    assert_eq!(m, grid_h * grid_w, "token count must equal grid cells");
    let rows = softmax_forward(scores, Axis::Rows);
    let rows_t = softmax_forward(&transpose(scores), Axis::Rows);
    let max_per_row = |t: &Tensor| -> Tensor {
        let d = t.data();
        let vals: Vec<f32> = (0..m)
            .map(|i| d[i * m..(i + 1) * m].iter().fold(f32::MIN, |acc, v| acc.max(*v)))
            .collect();
        Tensor::from_vec(&[grid_h, grid_w], vals)
    };
    (max_per_row(&rows), max_per_row(&rows_t))
}
