//! Finite-difference verification of tape gradients.
//!
//! The checker owns the loop: it builds `requires_grad` leaves from the given
//! buffers, asks the closure for the scalar loss, reads back tape gradients,
//! and compares them against central differences `(f(x+h) - f(x-h)) / 2h`
//! computed through grad-free re-evaluations. Relative error uses the
//! denominator `max(|analytic|, |numeric|, 1e-8)`.

use crate::tensor::{Real, Tensor};

pub const REL_ERR_FLOOR: f64 = 1e-8;

/// One named parameter buffer to perturb.
#[derive(Clone)]
pub struct CheckParam<T: Real> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Real> CheckParam<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<T>) -> Self {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        CheckParam {
            name: name.into(),
            shape: shape.to_vec(),
            values,
        }
    }
}

/// Per-tensor outcome of a check.
#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    /// flat index attaining the max
    pub argmax: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub per_param: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Names of tensors exceeding the tolerance.
    pub fn flagged(&self) -> Vec<&str> {
        self.per_param
            .iter()
            .filter(|p| !(p.max_rel_err <= self.tol))
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.flagged().is_empty()
    }
}

/// Compare tape gradients of `f` against central differences.
///
/// `f` must be a deterministic scalar function of the leaf tensors it is
/// handed (one per entry of `params`, in order). It is called once with
/// `requires_grad` leaves for the analytic pass and `2 * total_elements`
/// times with plain leaves for the numeric pass.
pub fn finite_difference_check<T: Real>(
    params: &[CheckParam<T>],
    f: impl Fn(&[Tensor<T>]) -> Tensor<T>,
    step: f64,
    tol: f64,
) -> GradCheckReport {
    assert!(step > 0.0, "finite_difference_check: step must be positive");

    // Analytic pass.
    let leaves: Vec<Tensor<T>> = params
        .iter()
        .map(|p| Tensor::param(p.values.clone(), &p.shape))
        .collect();
    let loss = f(&leaves);
    assert_eq!(
        loss.numel(),
        1,
        "finite_difference_check: f must return a scalar, got {:?}",
        loss.shape()
    );
    loss.backward();
    let analytic: Vec<Vec<T>> = leaves.iter().map(|l| l.grad_or_zeros()).collect();

    // Numeric pass: perturb one scalar element at a time.
    let eval = |values: &[Vec<T>]| -> f64 {
        let leaves: Vec<Tensor<T>> = values
            .iter()
            .zip(params)
            .map(|(v, p)| Tensor::new(v.clone(), &p.shape))
            .collect();
        f(&leaves).item().to_f64()
    };

    let mut work: Vec<Vec<T>> = params.iter().map(|p| p.values.clone()).collect();
    let h = step;
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut worst = ParamReport {
            name: p.name.clone(),
            max_rel_err: 0.0,
            argmax: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..p.values.len() {
            let orig = work[pi][i];
            work[pi][i] = orig + T::from_f64(h);
            let up = eval(&work);
            work[pi][i] = orig - T::from_f64(h);
            let down = eval(&work);
            work[pi][i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][i].to_f64();
            let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.argmax = i;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        per_param.push(worst);
    }

    GradCheckReport { tol, per_param }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{
        add, class_means, cosine_pairs, cosine_rows, cross_entropy_mean, custom_unary, gelu,
        layer_norm, matmul, matmul_nt, mean_axis, mul, permute, scale, softmax, sub, sum_all,
        weighted_sum, Tensor,
    };
    use crate::rng::RngState;

    fn rand_vals(n: usize, seed: u64) -> Vec<f64> {
        let mut d = RngState::new(seed).draws();
        (0..n).map(|_| d.uniform_in(-1.0, 1.0)).collect()
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let p = CheckParam::new("x", &[4], rand_vals(4, 1));
        let report = finite_difference_check(&[p], |xs| sum_all(&mul(&xs[0], &xs[0])), 1e-4, 1e-8);
        assert!(
            report.passed(),
            "quadratic should check to 1e-8, got {:?}",
            report.per_param
        );
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        // Forward is x^2 elementwise but the registered VJP claims 3x.
        let p = CheckParam::new("x", &[3], vec![0.4, -0.7, 1.1]);
        let report = finite_difference_check(
            &[p],
            |xs| {
                let x = &xs[0];
                let data: Vec<f64> = x.data().iter().map(|v| v * v).collect();
                let xc = x.clone();
                let bad = custom_unary(x, data, x.shape().to_vec(), move |g| {
                    g.iter()
                        .zip(xc.data())
                        .map(|(gv, xv)| gv * 3.0 * xv)
                        .collect()
                });
                sum_all(&bad)
            },
            1e-4,
            1e-5,
        );
        assert!(!report.passed(), "negative control must be flagged");
        assert_eq!(report.flagged(), vec!["x"]);
    }

    /// Random-input finite-difference pass over every differentiable op at
    /// 64-bit, tolerance 1e-5.
    #[test]
    fn all_ops_pass_fd_at_1e5() {
        let tol = 1e-5;
        let h = 1e-5;

        // add / sub / mul with broadcasting
        let a = CheckParam::new("a", &[2, 3], rand_vals(6, 2));
        let b = CheckParam::new("b", &[3], rand_vals(3, 3));
        for (name, f) in [
            ("add", add as fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>),
            ("sub", sub as _),
            ("mul", mul as _),
        ] {
            let r = finite_difference_check(
                &[a.clone(), b.clone()],
                |xs| sum_all(&mul(&f(&xs[0], &xs[1]), &f(&xs[0], &xs[1]))),
                h,
                tol,
            );
            assert!(r.passed(), "{name}: {:?}", r.per_param);
        }

        // matmul (batched + broadcast rhs) and matmul_nt
        let a = CheckParam::new("a", &[2, 3, 4], rand_vals(24, 4));
        let b = CheckParam::new("b", &[4, 5], rand_vals(20, 5));
        let r = finite_difference_check(
            &[a, b],
            |xs| {
                let y = matmul(&xs[0], &xs[1]);
                sum_all(&mul(&y, &y))
            },
            h,
            tol,
        );
        assert!(r.passed(), "matmul: {:?}", r.per_param);

        let a = CheckParam::new("a", &[2, 3, 4], rand_vals(24, 6));
        let b = CheckParam::new("b", &[2, 5, 4], rand_vals(40, 7));
        let r = finite_difference_check(
            &[a, b],
            |xs| {
                let y = matmul_nt(&xs[0], &xs[1]);
                sum_all(&mul(&y, &y))
            },
            h,
            tol,
        );
        assert!(r.passed(), "matmul_nt: {:?}", r.per_param);

        // softmax (middle axis) composed with a weighting to make grads generic
        let x = CheckParam::new("x", &[2, 3, 2], rand_vals(12, 8));
        let w = Tensor::new(rand_vals(12, 9), &[2, 3, 2]);
        let r = finite_difference_check(
            &[x],
            move |xs| sum_all(&mul(&softmax(&xs[0], 1), &w)),
            h,
            tol,
        );
        assert!(r.passed(), "softmax: {:?}", r.per_param);

        // layer_norm
        let x = CheckParam::new("x", &[3, 4], rand_vals(12, 10));
        let g = CheckParam::new("gamma", &[4], rand_vals(4, 11));
        let b = CheckParam::new("beta", &[4], rand_vals(4, 12));
        let w = Tensor::new(rand_vals(12, 13), &[3, 4]);
        let r = finite_difference_check(
            &[x, g, b],
            move |xs| sum_all(&mul(&layer_norm(&xs[0], &xs[1], &xs[2], 1e-5), &w)),
            h,
            tol,
        );
        assert!(r.passed(), "layer_norm: {:?}", r.per_param);

        // gelu
        let x = CheckParam::new("x", &[6], rand_vals(6, 14));
        let r = finite_difference_check(&[x], |xs| sum_all(&mul(&gelu(&xs[0]), &gelu(&xs[0]))), h, tol);
        assert!(r.passed(), "gelu: {:?}", r.per_param);

        // cosine_rows / cosine_pairs
        let a = CheckParam::new("a", &[3, 4], rand_vals(12, 15));
        let b = CheckParam::new("b", &[3, 4], rand_vals(12, 16));
        let w = Tensor::new(rand_vals(3, 17), &[3]);
        let r = finite_difference_check(
            &[a, b],
            move |xs| sum_all(&mul(&cosine_rows(&xs[0], &xs[1]), &w)),
            h,
            tol,
        );
        assert!(r.passed(), "cosine_rows: {:?}", r.per_param);

        let a = CheckParam::new("a", &[2, 4], rand_vals(8, 18));
        let b = CheckParam::new("b", &[3, 4], rand_vals(12, 19));
        let w = Tensor::new(rand_vals(6, 20), &[2, 3]);
        let r = finite_difference_check(
            &[a, b],
            move |xs| sum_all(&mul(&cosine_pairs(&xs[0], &xs[1]), &w)),
            h,
            tol,
        );
        assert!(r.passed(), "cosine_pairs: {:?}", r.per_param);

        // class_means
        let f = CheckParam::new("feats", &[6, 3], rand_vals(18, 21));
        let w = Tensor::new(rand_vals(6, 22), &[2, 3]);
        let r = finite_difference_check(
            &[f],
            move |xs| sum_all(&mul(&class_means(&xs[0], &[0, 1, 0, 1, 0, 1], 2), &w)),
            h,
            tol,
        );
        assert!(r.passed(), "class_means: {:?}", r.per_param);

        // weighted_sum
        let f0 = CheckParam::new("f0", &[2, 3], rand_vals(6, 23));
        let f1 = CheckParam::new("f1", &[2, 3], rand_vals(6, 24));
        let w = CheckParam::new("w", &[2, 2], rand_vals(4, 25));
        let r = finite_difference_check(
            &[f0, f1, w],
            |xs| {
                let y = weighted_sum(&[xs[0].clone(), xs[1].clone()], &xs[2]);
                sum_all(&mul(&y, &y))
            },
            h,
            tol,
        );
        assert!(r.passed(), "weighted_sum: {:?}", r.per_param);

        // cross_entropy_mean
        let l = CheckParam::new("logits", &[4, 3], rand_vals(12, 26));
        let r = finite_difference_check(
            &[l],
            |xs| cross_entropy_mean(&xs[0], &[0, 2, 1, 2]),
            h,
            tol,
        );
        assert!(r.passed(), "cross_entropy_mean: {:?}", r.per_param);

        // permute + mean_axis + scale composition
        let x = CheckParam::new("x", &[2, 3, 4], rand_vals(24, 27));
        let w = Tensor::new(rand_vals(8, 28), &[4, 2]);
        let r = finite_difference_check(
            &[x],
            move |xs| {
                let p = permute(&xs[0], &[2, 0, 1]);
                let m = mean_axis(&p, 2);
                sum_all(&mul(&scale(&m, 1.7), &w))
            },
            h,
            tol,
        );
        assert!(r.passed(), "permute/mean_axis/scale: {:?}", r.per_param);
    }
}
