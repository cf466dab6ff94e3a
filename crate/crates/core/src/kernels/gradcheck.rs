//! Central finite-difference gradient checker.
//!
//! A fragment exposes its checked tensors (parameters and, when useful,
//! inputs) by index, a pure scalar loss, and the analytic gradients for the
//! current tensor values. The checker perturbs each sampled element by
//! +/- eps and compares the central difference against the analytic value.

/// A pure differentiable map from tensor values to a scalar loss.
pub trait DiffFragment {
    fn fragment_name(&self) -> String;
    fn num_tensors(&self) -> usize;
    fn tensor_name(&self, ti: usize) -> String;
    fn tensor_len(&self, ti: usize) -> usize;
    fn get(&self, ti: usize, elem: usize) -> f32;
    fn set(&mut self, ti: usize, elem: usize, value: f32);
    /// Forward pass only; must not depend on hidden mutable state.
    fn loss(&mut self) -> f64;
    /// Forward + backward; gradients per tensor, aligned with the indices.
    fn analytic_grads(&mut self) -> Vec<Vec<f32>>;
}

#[derive(Debug, Clone)]
pub struct WorstElement {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of one fragment check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub fragment: String,
    pub max_rel_err: f64,
    pub worst: Option<WorstElement>,
    pub checked_elements: usize,
    /// Probe points straddling an activation kink, excluded from the
    /// comparison. Must stay a small minority of the samples.
    pub kink_skipped: usize,
    pub non_finite: bool,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        !self.non_finite
            && self.max_rel_err < self.tol
            && self.kink_skipped * 4 <= self.checked_elements.max(1)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {:>5} elems ({:>2} kink-skipped)  max rel err {:.3e}  tol {:.1e}  {}",
            self.fragment,
            self.checked_elements,
            self.kink_skipped,
            self.max_rel_err,
            self.tol,
            if self.passed() { "pass" } else { "FAIL" }
        )?;
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            write!(
                f,
                "  (worst {}[{}]: analytic {:.6e} vs numeric {:.6e})",
                w.tensor, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Checks up to `max_per_tensor` elements of every tensor (full coverage for
/// small tensors, deterministic strided sampling for large ones).
///
/// `floor` is the denominator floor of the relative error: gradients below
/// that magnitude are compared on an absolute scale, since f32 forward noise
/// cannot resolve relative agreement there. 1e-2 suits single layers.
pub fn check_fragment(
    frag: &mut dyn DiffFragment,
    eps: f32,
    tol: f64,
    floor: f64,
    max_per_tensor: usize,
) -> GradCheckReport {
    let analytic = frag.analytic_grads();
    assert_eq!(analytic.len(), frag.num_tensors());

    let mut report = GradCheckReport {
        fragment: frag.fragment_name(),
        max_rel_err: 0.0,
        worst: None,
        checked_elements: 0,
        kink_skipped: 0,
        non_finite: false,
        tol,
    };

    for (ti, grad) in analytic.iter().enumerate() {
        let len = frag.tensor_len(ti);
        assert_eq!(grad.len(), len, "analytic grad length mismatch");
        let stride = len.div_ceil(max_per_tensor).max(1);
        let mut elem = 0;
        while elem < len {
            let orig = frag.get(ti, elem);
            let central = |frag: &mut dyn DiffFragment, e: f32| {
                let plus = orig + e;
                let minus = orig - e;
                frag.set(ti, elem, plus);
                let lp = frag.loss();
                frag.set(ti, elem, minus);
                let lm = frag.loss();
                frag.set(ti, elem, orig);
                (lp - lm) / (plus as f64 - minus as f64)
            };
            // Two step sizes: strong disagreement marks a probe point where
            // the loss is not smooth in this element (a piecewise-linear
            // activation kink inside the probe interval), which no finite
            // difference can check. Otherwise compare against the better of
            // the raw estimates and their Richardson extrapolation.
            let n1 = central(frag, eps);
            let n2 = central(frag, eps * 0.5);
            let a = grad[elem] as f64;
            if !n1.is_finite() || !n2.is_finite() || !a.is_finite() {
                report.non_finite = true;
            }
            let disagreement = (n1 - n2).abs() / n1.abs().max(n2.abs()).max(floor);
            if disagreement > 0.1 {
                report.kink_skipped += 1;
                elem += stride;
                continue;
            }
            let richardson = (4.0 * n2 - n1) / 3.0;
            let (rel, numeric) = [n1, n2, richardson]
                .into_iter()
                .map(|n| ((a - n).abs() / a.abs().max(n.abs()).max(floor), n))
                .min_by(|x, y| x.0.partial_cmp(&y.0).unwrap())
                .unwrap();
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some(WorstElement {
                    tensor: frag.tensor_name(ti),
                    index: elem,
                    analytic: a,
                    numeric,
                });
            }
            report.checked_elements += 1;
            elem += stride;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::ops::{linear_backward, linear_forward};
    use crate::kernels::tensor::Tensor;

    /// Linear layer with loss = 0.5 * sum(y^2); optionally corrupts dW.
    struct LinearFragment {
        x: Tensor,
        w: Tensor,
        b: Tensor,
        corrupt: bool,
    }

    impl LinearFragment {
        fn new(corrupt: bool) -> Self {
            let x = Tensor::from_vec(&[2, 3], vec![0.5, -1.2, 0.3, 0.8, 0.1, -0.4]);
            let w = Tensor::from_vec(&[3, 2], vec![0.2, -0.5, 0.7, 0.1, -0.3, 0.9]);
            let b = Tensor::from_vec(&[2], vec![0.05, -0.02]);
            Self { x, w, b, corrupt }
        }

        fn tensors(&self) -> [&Tensor; 3] {
            [&self.x, &self.w, &self.b]
        }

        fn tensors_mut(&mut self, ti: usize) -> &mut Tensor {
            match ti {
                0 => &mut self.x,
                1 => &mut self.w,
                2 => &mut self.b,
                _ => unreachable!(),
            }
        }
    }

    impl DiffFragment for LinearFragment {
        fn fragment_name(&self) -> String {
            "linear".into()
        }

        fn num_tensors(&self) -> usize {
            3
        }

        fn tensor_name(&self, ti: usize) -> String {
            ["x", "w", "b"][ti].into()
        }

        fn tensor_len(&self, ti: usize) -> usize {
            self.tensors()[ti].len()
        }

        fn get(&self, ti: usize, elem: usize) -> f32 {
            self.tensors()[ti].data()[elem]
        }

        fn set(&mut self, ti: usize, elem: usize, value: f32) {
            self.tensors_mut(ti).data_mut()[elem] = value;
        }

        fn loss(&mut self) -> f64 {
            let y = linear_forward(&self.x, &self.w, &self.b);
            y.data().iter().map(|v| 0.5 * (*v as f64) * (*v as f64)).sum()
        }

        fn analytic_grads(&mut self) -> Vec<Vec<f32>> {
            let y = linear_forward(&self.x, &self.w, &self.b);
            let dy = Tensor::from_vec(y.shape(), y.data().to_vec());
            let (dx, mut dw, db) = linear_backward(&self.x, &self.w, &dy);
            if self.corrupt {
                dw.data_mut()[0] += 0.5;
            }
            vec![
                dx.data().to_vec(),
                dw.data().to_vec(),
                db.data().to_vec(),
            ]
        }
    }

    #[test]
    fn linear_passes_at_1e3() {
        let mut frag = LinearFragment::new(false);
        let report = check_fragment(&mut frag, 1e-3, 1e-3, 1e-2, 64);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_backward_fails() {
        let mut frag = LinearFragment::new(true);
        let report = check_fragment(&mut frag, 1e-3, 1e-3, 1e-2, 64);
        assert!(!report.passed());
        assert!(report.max_rel_err > 0.1);
    }
}
