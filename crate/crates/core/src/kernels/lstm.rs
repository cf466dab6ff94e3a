//! Single LSTM cell with exact backward, unrolled by the caller for
//! backpropagation through time.

use super::ops::sigmoid_scalar;
use super::tensor::Tensor;

/// Weight views for one cell: `w_x [4H, d]`, `w_h [4H, H]`, `b [4H]`,
/// gate order i, f, g, o.
pub struct LstmWeights<'a> {
    pub w_x: &'a Tensor,
    pub w_h: &'a Tensor,
    pub b: &'a Tensor,
}

/// Intermediates needed by the backward pass.
pub struct LstmCache {
    x: Tensor,
    h_prev: Tensor,
    c_prev: Tensor,
    i: Vec<f32>,
    f: Vec<f32>,
    g: Vec<f32>,
    o: Vec<f32>,
    tanh_c_new: Vec<f32>,
}

pub struct LstmStep {
    pub h: Tensor,
    pub c: Tensor,
    pub cache: LstmCache,
}

/// Standard gate equations:
/// `c' = f (.) c + i (.) g`, `h' = o (.) tanh(c')`.
pub fn lstm_cell_forward(x: &Tensor, h: &Tensor, c: &Tensor, w: &LstmWeights) -> LstmStep {
    let d = x.len();
    let hidden = h.len();
    assert_eq!(c.len(), hidden);
    assert_eq!(w.w_x.shape(), &[4 * hidden, d], "lstm w_x shape");
    assert_eq!(w.w_h.shape(), &[4 * hidden, hidden], "lstm w_h shape");
    assert_eq!(w.b.len(), 4 * hidden);

    let mut z = vec![0.0f32; 4 * hidden];
    for (r, zv) in z.iter_mut().enumerate() {
        let mut acc = w.b.data()[r] as f64;
        let wx_row = &w.w_x.data()[r * d..(r + 1) * d];
        for (a, b) in wx_row.iter().zip(x.data()) {
            acc += *a as f64 * *b as f64;
        }
        let wh_row = &w.w_h.data()[r * hidden..(r + 1) * hidden];
        for (a, b) in wh_row.iter().zip(h.data()) {
            acc += *a as f64 * *b as f64;
        }
        *zv = acc as f32;
    }

    let mut i_g = vec![0.0f32; hidden];
    let mut f_g = vec![0.0f32; hidden];
    let mut g_g = vec![0.0f32; hidden];
    let mut o_g = vec![0.0f32; hidden];
    let mut c_new = vec![0.0f32; hidden];
    let mut tanh_c_new = vec![0.0f32; hidden];
    let mut h_new = vec![0.0f32; hidden];
    for j in 0..hidden {
        i_g[j] = sigmoid_scalar(z[j]);
        f_g[j] = sigmoid_scalar(z[hidden + j]);
        g_g[j] = z[2 * hidden + j].tanh();
        o_g[j] = sigmoid_scalar(z[3 * hidden + j]);
        c_new[j] = f_g[j] * c.data()[j] + i_g[j] * g_g[j];
        tanh_c_new[j] = c_new[j].tanh();
        h_new[j] = o_g[j] * tanh_c_new[j];
    }

    LstmStep {
        h: Tensor::from_vec(&[hidden], h_new),
        c: Tensor::from_vec(&[hidden], c_new),
        cache: LstmCache {
            x: x.clone(),
            h_prev: h.clone(),
            c_prev: c.clone(),
            i: i_g,
            f: f_g,
            g: g_g,
            o: o_g,
            tanh_c_new,
        },
    }
}

/// Gradient accumulation targets for one cell.
pub struct LstmGrads<'a> {
    pub w_x: &'a mut Tensor,
    pub w_h: &'a mut Tensor,
    pub b: &'a mut Tensor,
}

/// Backward through one cell. `dh_new` / `dc_new` are the gradients flowing
/// into this step's outputs; returns `(dx, dh_prev, dc_prev)`.
pub fn lstm_cell_backward(
    cache: &LstmCache,
    w: &LstmWeights,
    grads: &mut LstmGrads,
    dh_new: &Tensor,
    dc_new: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let hidden = cache.h_prev.len();
    let d = cache.x.len();
    assert_eq!(dh_new.len(), hidden);
    assert_eq!(dc_new.len(), hidden);

    let mut dz = vec![0.0f32; 4 * hidden];
    let mut dc_prev = vec![0.0f32; hidden];
    for j in 0..hidden {
        let dh = dh_new.data()[j];
        let tc = cache.tanh_c_new[j];
        let dc_total = dc_new.data()[j] + dh * cache.o[j] * (1.0 - tc * tc);
        let (i, f, g, o) = (cache.i[j], cache.f[j], cache.g[j], cache.o[j]);
        dz[j] = dc_total * g * i * (1.0 - i);
        dz[hidden + j] = dc_total * cache.c_prev.data()[j] * f * (1.0 - f);
        dz[2 * hidden + j] = dc_total * i * (1.0 - g * g);
        dz[3 * hidden + j] = dh * tc * o * (1.0 - o);
        dc_prev[j] = dc_total * f;
    }

    let mut dx = vec![0.0f32; d];
    let mut dh_prev = vec![0.0f32; hidden];
    {
        let gwx = grads.w_x.data_mut();
        let gwh = grads.w_h.data_mut();
        let gb = grads.b.data_mut();
        for (r, dzr) in dz.iter().enumerate() {
            if *dzr == 0.0 {
                continue;
            }
            gb[r] += dzr;
            let wx_row = &w.w_x.data()[r * d..(r + 1) * d];
            let gwx_row = &mut gwx[r * d..(r + 1) * d];
            for j in 0..d {
                dx[j] += dzr * wx_row[j];
                gwx_row[j] += dzr * cache.x.data()[j];
            }
            let wh_row = &w.w_h.data()[r * hidden..(r + 1) * hidden];
            let gwh_row = &mut gwh[r * hidden..(r + 1) * hidden];
            for j in 0..hidden {
                dh_prev[j] += dzr * wh_row[j];
                gwh_row[j] += dzr * cache.h_prev.data()[j];
            }
        }
    }

    (
        Tensor::from_vec(&[d], dx),
        Tensor::from_vec(&[hidden], dh_prev),
        Tensor::from_vec(&[hidden], dc_prev),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_zero_state_gives_zero_output() {
        let d = 3;
        let hidden = 4;
        let w_x = Tensor::zeros(&[4 * hidden, d]);
        let w_h = Tensor::zeros(&[4 * hidden, hidden]);
        let b = Tensor::zeros(&[4 * hidden]);
        let x = Tensor::from_vec(&[d], vec![1.0, -2.0, 0.5]);
        let step = lstm_cell_forward(
            &x,
            &Tensor::zeros(&[hidden]),
            &Tensor::zeros(&[hidden]),
            &LstmWeights {
                w_x: &w_x,
                w_h: &w_h,
                b: &b,
            },
        );
        assert!(step.h.data().iter().all(|v| *v == 0.0));
        assert!(step.c.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cell_state_growth_is_bounded_by_one_per_step() {
        // |c'| <= |c| + 1 element-wise: f, i in (0,1), |g| < 1.
        let d = 2;
        let hidden = 3;
        let w_x = Tensor::from_vec(&[4 * hidden, d], vec![5.0; 4 * hidden * d]);
        let w_h = Tensor::from_vec(&[4 * hidden, hidden], vec![-3.0; 4 * hidden * hidden]);
        let b = Tensor::from_vec(&[4 * hidden], vec![2.0; 4 * hidden]);
        let weights = LstmWeights {
            w_x: &w_x,
            w_h: &w_h,
            b: &b,
        };
        let mut h = Tensor::zeros(&[hidden]);
        let mut c = Tensor::from_vec(&[hidden], vec![0.7, -2.0, 0.0]);
        for step_idx in 0..5 {
            let x = Tensor::from_vec(&[d], vec![step_idx as f32, -1.0]);
            let prev_c: Vec<f32> = c.data().to_vec();
            let step = lstm_cell_forward(&x, &h, &c, &weights);
            for (new, old) in step.c.data().iter().zip(&prev_c) {
                assert!(new.abs() <= old.abs() + 1.0 + 1e-6);
            }
            h = step.h;
            c = step.c;
        }
    }
}
