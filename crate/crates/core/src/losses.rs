//! Contrastive objectives with closed-form gradients.
//!
//! Every loss here is a (soft-target) cross-entropy over a similarity matrix
//! `S = A Bᵀ / τ`. With row-normalized targets `a_ij` and row softmax `π_ij`,
//! `∂L/∂S_ij = (π_ij - a_ij) / N`, from which the embedding gradients follow
//! as `G B / τ` and `Gᵀ A / τ`, and `∂L/∂log τ = -Σ G_ij S_ij`.
//!
//! The public functions validate their inputs. [`raw`] exposes the same
//! kernels without the unit-norm checks so finite differences can perturb
//! embeddings off the sphere.

use serde::{Deserialize, Serialize};

use crate::error::{CwclError, Result};
use crate::numerics::Matrix;
use crate::weights::SimilarityWeights;

pub const DEFAULT_TAU: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

/// Softmax temperature, stored as `log τ` so positivity is structural.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    log_tau: f64,
    learnable: bool,
}

impl Temperature {
    pub fn fixed(tau: f64) -> Result<Self> {
        Self::new(tau, false)
    }

    pub fn learnable(tau: f64) -> Result<Self> {
        Self::new(tau, true)
    }

    pub fn new(tau: f64, learnable: bool) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(CwclError::invalid(format!("temperature must be > 0, got {tau}")));
        }
        Ok(Self {
            log_tau: tau.ln(),
            learnable,
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn log_tau(&self) -> f64 {
        self.log_tau
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    /// Sets `log τ`, clamping τ into `[TAU_MIN, TAU_MAX]`.
    pub fn set_log_tau(&mut self, log_tau: f64) {
        self.log_tau = log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    pub fn log_tau_mut(&mut self) -> &mut f64 {
        &mut self.log_tau
    }

    pub fn clamp(&mut self) {
        self.set_log_tau(self.log_tau);
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            log_tau: DEFAULT_TAU.ln(),
            learnable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_p: Matrix,
    /// Zero when the second input is detached. SupCon has a single input and
    /// always reports zeros here.
    pub grad_q: Matrix,
    /// `∂value/∂log τ`, present when the temperature is learnable.
    pub grad_log_tau: Option<f64>,
}

impl LossOutput {
    fn check_finite(&self) -> Result<()> {
        if !self.value.is_finite() {
            return Err(CwclError::NonFinite("loss value".into()));
        }
        self.grad_p.ensure_finite("grad_p")?;
        self.grad_q.ensure_finite("grad_q")?;
        Ok(())
    }
}

/// Unvalidated loss kernels. Each returns the value, the gradient for every
/// embedding input, and `∂value/∂log τ`.
pub mod raw {
    use super::*;

    #[derive(Debug, Clone)]
    pub struct RawLoss {
        pub value: f64,
        pub grad_a: Matrix,
        pub grad_b: Matrix,
        pub grad_log_tau: f64,
    }

    /// Cross-entropy of `softmax(A Bᵀ / τ)` rows against `w` rows normalized
    /// to sum to one.
    pub fn soft_target_ce(a: &Matrix, b: &Matrix, w: &Matrix, log_tau: f64) -> Result<RawLoss> {
        let n = a.rows();
        if b.shape() != a.shape() || w.shape() != (n, n) {
            return Err(CwclError::shape(format!(
                "anchors {:?}, candidates {:?}, weights {:?}",
                a.shape(),
                b.shape(),
                w.shape()
            )));
        }
        if n == 0 {
            return Err(CwclError::invalid("empty batch"));
        }
        let tau = log_tau.exp();
        let logits = a.matmul_nt(b)?.scale(1.0 / tau);
        let inv_n = 1.0 / n as f64;

        let mut value = 0.0;
        let mut g = Matrix::zeros(n, n);
        let mut shifted = Matrix::zeros(n, n);
        for i in 0..n {
            let row = logits.row(i);
            let wrow = w.row(i);
            let total: f64 = wrow.iter().sum();
            if total <= 0.0 {
                return Err(CwclError::Undefined(format!("weight row {i} sums to {total}")));
            }
            let rn = RowNorm::new(row, None);
            let others: f64 = wrow.iter().enumerate().filter(|&(k, _)| k != rn.top).map(|(_, &x)| x).sum();
            let mut term = 0.0;
            for (j, (&s, &wij)) in row.iter().zip(wrow).enumerate() {
                term += wij * rn.log_p(s);
                g[(i, j)] = inv_n * rn.residual(j, s, wij / total, others / total);
                shifted[(i, j)] = s - rn.max;
            }
            value -= term / total;
        }
        value *= inv_n;

        let grad_a = g.matmul(b)?.scale(1.0 / tau);
        let grad_b = g.matmul_tn(a)?.scale(1.0 / tau);
        // Rows of g sum to zero, so shifting each row by its max is free and
        // avoids cancellation against large logits.
        let grad_log_tau = -dot_all(&g, &shifted);
        Ok(RawLoss {
            value,
            grad_a,
            grad_b,
            grad_log_tau,
        })
    }

    pub fn cl(p: &Matrix, q: &Matrix, log_tau: f64) -> Result<RawLoss> {
        soft_target_ce(p, q, &Matrix::identity(p.rows()), log_tau)
    }

    pub fn cwcl(p: &Matrix, q: &Matrix, w: &Matrix, log_tau: f64) -> Result<RawLoss> {
        soft_target_ce(p, q, w, log_tau)
    }

    /// CWCL in the `p → q` direction plus plain CL in the `q → p` direction.
    /// `grad_a` is for `p`, `grad_b` for `q`.
    pub fn transfer(p: &Matrix, q: &Matrix, w: &Matrix, log_tau: f64) -> Result<RawLoss> {
        let fwd = cwcl(p, q, w, log_tau)?;
        let back = cl(q, p, log_tau)?;
        Ok(RawLoss {
            value: fwd.value + back.value,
            grad_a: fwd.grad_a.add(&back.grad_b)?,
            grad_b: fwd.grad_b.add(&back.grad_a)?,
            grad_log_tau: fwd.grad_log_tau + back.grad_log_tau,
        })
    }

    /// Supervised contrastive loss over a single embedding set. The
    /// denominator skips `k = i`; positives are same-label `j ≠ i`. Anchors
    /// without positives are dropped from the average. `grad_b` is unused and
    /// left at zero.
    pub fn supcon(z: &Matrix, labels: &[usize], log_tau: f64) -> Result<RawLoss> {
        let n = z.rows();
        if labels.len() != n {
            return Err(CwclError::shape(format!(
                "{} labels for {n} embeddings",
                labels.len()
            )));
        }
        let tau = log_tau.exp();
        let logits = z.matmul_nt(z)?.scale(1.0 / tau);
        let anchors: Vec<usize> = (0..n)
            .filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i]))
            .collect();
        if anchors.is_empty() {
            return Err(CwclError::Undefined(
                "no anchor has a positive; supervised contrastive loss is undefined".into(),
            ));
        }
        let inv_m = 1.0 / anchors.len() as f64;

        let mut value = 0.0;
        let mut g = Matrix::zeros(n, n);
        let mut shifted = Matrix::zeros(n, n);
        for &i in &anchors {
            let row = logits.row(i);
            let rn = RowNorm::new(row, Some(i));
            let positives: Vec<usize> = (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            let inv_p = 1.0 / positives.len() as f64;
            let term: f64 = positives.iter().map(|&j| rn.log_p(row[j])).sum();
            value -= inv_p * term;
            let top_is_positive = positives.contains(&rn.top);
            for k in (0..n).filter(|&k| k != i) {
                let positive = labels[k] == labels[i];
                let t = if positive { inv_p } else { 0.0 };
                // 1 - target at the top entry.
                let rest = if top_is_positive { 1.0 - inv_p } else { 1.0 };
                g[(i, k)] = inv_m * rn.residual(k, row[k], t, rest);
                shifted[(i, k)] = row[k] - rn.max;
            }
        }
        value *= inv_m;

        let sym = g.add(&g.transpose())?;
        let grad_a = sym.matmul(z)?.scale(1.0 / tau);
        let grad_log_tau = -dot_all(&g, &shifted);
        Ok(RawLoss {
            value,
            grad_a,
            grad_b: Matrix::zeros(n, z.cols()),
            grad_log_tau,
        })
    }

    /// Log-normalizer of a logit row, split so that the largest entry keeps
    /// full relative precision when the softmax saturates.
    struct RowNorm {
        max: f64,
        top: usize,
        /// `log1p` of the summed exponentials of every other entry.
        log_rest: f64,
    }

    impl RowNorm {
        fn new(row: &[f64], skip: Option<usize>) -> Self {
            let mut top = usize::MAX;
            let mut max = f64::NEG_INFINITY;
            for (k, &x) in row.iter().enumerate() {
                if Some(k) != skip && (top == usize::MAX || x > max) {
                    top = k;
                    max = x;
                }
            }
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| Some(k) != skip && k != top)
                .map(|(_, &x)| (x - max).exp())
                .sum();
            Self {
                max,
                top,
                log_rest: rest.ln_1p(),
            }
        }

        fn log_p(&self, x: f64) -> f64 {
            (x - self.max) - self.log_rest
        }

        /// `softmax_j - target`, where `one_minus_target` is `1 - target`
        /// computed by the caller without cancellation.
        fn residual(&self, j: usize, x: f64, target: f64, one_minus_target: f64) -> f64 {
            if j == self.top {
                (-self.log_rest).exp_m1() + one_minus_target
            } else {
                self.log_p(x).exp() - target
            }
        }
    }

    fn dot_all(a: &Matrix, b: &Matrix) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }
}

fn validate_pair(p: &Matrix, q: &Matrix) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(CwclError::shape(format!(
            "p is {:?} but q is {:?}",
            p.shape(),
            q.shape()
        )));
    }
    if p.rows() == 0 {
        return Err(CwclError::invalid("empty batch"));
    }
    p.ensure_unit_rows()?;
    q.ensure_unit_rows()
}

fn finish(raw: raw::RawLoss, tau: &Temperature, detach_q: bool) -> Result<LossOutput> {
    let grad_q = if detach_q {
        Matrix::zeros(raw.grad_b.rows(), raw.grad_b.cols())
    } else {
        raw.grad_b
    };
    let out = LossOutput {
        value: raw.value,
        grad_p: raw.grad_a,
        grad_q,
        grad_log_tau: tau.is_learnable().then_some(raw.grad_log_tau),
    };
    out.check_finite()?;
    Ok(out)
}

/// Standard contrastive loss, `p → q` direction.
pub fn cl_loss(p: &Matrix, q: &Matrix, tau: &Temperature, detach_q: bool) -> Result<LossOutput> {
    validate_pair(p, q)?;
    finish(raw::cl(p, q, tau.log_tau())?, tau, detach_q)
}

pub fn supcon_loss(z: &Matrix, labels: &[usize], tau: &Temperature) -> Result<LossOutput> {
    if z.rows() == 0 {
        return Err(CwclError::invalid("empty batch"));
    }
    z.ensure_unit_rows()?;
    finish(raw::supcon(z, labels, tau.log_tau())?, tau, false)
}

/// Continuously weighted contrastive loss, `p → q` direction, with weights
/// taken from the `q` modality.
pub fn cwcl_loss(
    p: &Matrix,
    q: &Matrix,
    w: &SimilarityWeights,
    tau: &Temperature,
    detach_q: bool,
) -> Result<LossOutput> {
    validate_pair(p, q)?;
    finish(raw::cwcl(p, q, w.matrix(), tau.log_tau())?, tau, detach_q)
}

/// CWCL from the trainable modality to the frozen one plus CL back.
pub fn cross_modal_transfer_loss(
    p: &Matrix,
    q: &Matrix,
    w_v: &SimilarityWeights,
    tau: &Temperature,
) -> Result<LossOutput> {
    validate_pair(p, q)?;
    finish(raw::transfer(p, q, w_v.matrix(), tau.log_tau())?, tau, false)
}

/// `L_CL(p→q) + L_CL(q→p)`.
pub fn symmetric_cl_loss(p: &Matrix, q: &Matrix, tau: &Temperature) -> Result<LossOutput> {
    validate_pair(p, q)?;
    let w = Matrix::identity(p.rows());
    finish(raw::transfer(p, q, &w, tau.log_tau())?, tau, false)
}

/// Entries whose analytic gradient is at most this are skipped by
/// [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Function under test for [`grad_check`]: value and one gradient per input.
pub type GradFn<'a> = dyn Fn(&[Matrix]) -> Result<(f64, Vec<Matrix>)> + 'a;

/// Compares analytic gradients against central differences and returns the
/// largest relative error `|a - n| / max(|a|, |n|)` over entries with
/// `|a| > GRAD_CHECK_FLOOR`.
///
/// The difference quotient is the fourth-order central stencil
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
pub fn grad_check(f: &GradFn<'_>, inputs: &[Matrix], epsilon: f64) -> Result<f64> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(CwclError::invalid(format!(
            "epsilon {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    let (_, analytic) = f(inputs)?;
    if analytic.len() != inputs.len() {
        return Err(CwclError::shape("one gradient per input expected"));
    }
    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (m, grad) in analytic.iter().enumerate() {
        inputs[m].check_same_shape(grad)?;
        for e in 0..grad.data().len() {
            let a = grad.data()[e];
            if a.abs() <= GRAD_CHECK_FLOOR {
                continue;
            }
            let x0 = inputs[m].data()[e];
            let mut eval = |x: f64| -> Result<f64> {
                work[m].data_mut()[e] = x;
                Ok(f(&work)?.0)
            };
            let numeric = (-eval(x0 + 2.0 * epsilon)? + 8.0 * eval(x0 + epsilon)?
                - 8.0 * eval(x0 - epsilon)?
                + eval(x0 - 2.0 * epsilon)?)
                / (12.0 * epsilon);
            work[m].data_mut()[e] = x0;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{l2_normalize_rows, log_sum_exp, Rng};
    use crate::weights::{indicator_weights, linear_weights};

    fn unit(n: usize, d: usize, rng: &mut Rng) -> Matrix {
        l2_normalize_rows(&Matrix::random_normal(n, d, 1.0, rng)).unwrap()
    }

    fn tau(t: f64) -> Temperature {
        Temperature::fixed(t).unwrap()
    }

    #[test]
    fn cl_single_pair_is_zero() {
        let p = Matrix::from_rows(&[[0.6, 0.8]]).unwrap();
        let out = cl_loss(&p, &p, &tau(0.07), false).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad_p.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cl_uniform_logits() {
        let p = Matrix::from_rows(&[[1.0, 0.0]; 4]).unwrap();
        let out = cl_loss(&p, &p, &tau(0.07), false).unwrap();
        assert!((out.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cl_two_orthogonal_pairs() {
        let p = Matrix::identity(2);
        let out = cl_loss(&p, &p, &tau(1.0), false).unwrap();
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 0.313_262).abs() < 1e-6);
    }

    #[test]
    fn cl_rejects_bad_inputs() {
        let p = Matrix::identity(2);
        let q = Matrix::identity(3);
        assert!(matches!(cl_loss(&p, &q, &tau(1.0), false), Err(CwclError::Shape(_))));
        let bad = Matrix::from_rows(&[[1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            cl_loss(&bad, &p, &tau(1.0), false),
            Err(CwclError::NotUnitNorm { row: 0, .. })
        ));
        assert!(Temperature::fixed(0.0).is_err());
        assert!(Temperature::fixed(-1.0).is_err());
    }

    #[test]
    fn detached_q_has_zero_gradient() {
        let mut rng = Rng::new(4);
        let p = unit(5, 3, &mut rng);
        let q = unit(5, 3, &mut rng);
        let out = cl_loss(&p, &q, &tau(0.1), true).unwrap();
        assert!(out.grad_q.data().iter().all(|&x| x == 0.0));
        let attached = cl_loss(&p, &q, &tau(0.1), false).unwrap();
        assert!(attached.grad_q.frobenius_norm() > 0.0);
        assert_eq!(attached.grad_p, out.grad_p);
    }

    #[test]
    fn supcon_identical_same_class() {
        let z = Matrix::from_rows(&[[0.0, 1.0]; 3]).unwrap();
        let out = supcon_loss(&z, &[1, 1, 1], &tau(0.07)).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supcon_without_positives_is_undefined() {
        let z = Matrix::identity(2);
        assert!(matches!(
            supcon_loss(&z, &[0, 1], &tau(0.07)),
            Err(CwclError::Undefined(_))
        ));
    }

    #[test]
    fn supcon_skips_anchors_without_positives() {
        let mut rng = Rng::new(8);
        let z = unit(3, 4, &mut rng);
        let out = supcon_loss(&z, &[0, 0, 1], &tau(0.5)).unwrap();
        // only anchors 0 and 1 count; each has the other as its sole positive
        let t = 0.5;
        let term = |i: usize, j: usize, k: usize| {
            let s = |a: usize, b: usize| crate::numerics::dot(z.row(a), z.row(b)) / t;
            -(s(i, j) - log_sum_exp(&[s(i, j), s(i, k)]))
        };
        let expected = (term(0, 1, 2) + term(1, 0, 2)) / 2.0;
        assert!((out.value - expected).abs() < 1e-12);
    }

    #[test]
    fn cwcl_indicator_matches_cl() {
        let mut rng = Rng::new(12);
        let p = unit(6, 5, &mut rng);
        let q = unit(6, 5, &mut rng);
        let t = tau(0.07);
        let a = cwcl_loss(&p, &q, &indicator_weights(6).unwrap(), &t, false).unwrap();
        let b = cl_loss(&p, &q, &t, false).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        assert!(a.grad_p.max_abs_diff(&b.grad_p) < 1e-12);
    }

    #[test]
    fn cwcl_uniform_logits_any_weights() {
        let p = Matrix::from_rows(&[[0.0, 0.0, 1.0]; 4]).unwrap();
        let mut rng = Rng::new(2);
        let w = SimilarityWeights::custom(
            crate::weights::WeightKind::Linear,
            Matrix::random_uniform(4, 4, 0.1, 1.0, &mut rng),
        )
        .unwrap();
        let out = cwcl_loss(&p, &p, &w, &tau(0.07), false).unwrap();
        assert!((out.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cwcl_rejects_zero_weight_row() {
        let p = Matrix::identity(2);
        let w = SimilarityWeights::custom(
            crate::weights::WeightKind::Linear,
            Matrix::from_rows(&[[0.0, 0.0], [0.5, 1.0]]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            cwcl_loss(&p, &p, &w, &tau(1.0), false),
            Err(CwclError::Undefined(_))
        ));
    }

    #[test]
    fn transfer_single_item_is_zero() {
        let p = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let w = indicator_weights(1).unwrap();
        let out = cross_modal_transfer_loss(&p, &p, &w, &tau(0.07)).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn transfer_with_indicator_is_symmetric_cl() {
        let mut rng = Rng::new(30);
        let p = unit(5, 4, &mut rng);
        let q = unit(5, 4, &mut rng);
        let t = tau(0.2);
        let out = cross_modal_transfer_loss(&p, &q, &indicator_weights(5).unwrap(), &t).unwrap();
        let expected = cl_loss(&p, &q, &t, false).unwrap().value + cl_loss(&q, &p, &t, false).unwrap().value;
        assert!((out.value - expected).abs() < 1e-12);
        let sym = symmetric_cl_loss(&p, &q, &t).unwrap();
        assert_eq!(sym.value, out.value);
    }

    #[test]
    fn learnable_tau_reports_gradient() {
        let mut rng = Rng::new(6);
        let p = unit(4, 3, &mut rng);
        let q = unit(4, 3, &mut rng);
        assert!(cl_loss(&p, &q, &tau(0.1), false).unwrap().grad_log_tau.is_none());
        let t = Temperature::learnable(0.1).unwrap();
        assert!(cl_loss(&p, &q, &t, false).unwrap().grad_log_tau.is_some());
    }

    #[test]
    fn temperature_clamps() {
        let mut t = Temperature::learnable(1.0).unwrap();
        t.set_log_tau(-50.0);
        assert!((t.tau() - TAU_MIN).abs() < 1e-15);
        t.set_log_tau(50.0);
        assert!((t.tau() - TAU_MAX).abs() < 1e-12);
    }

    #[test]
    fn grad_check_cl_and_cwcl() {
        let mut rng = Rng::new(100);
        let p = unit(4, 8, &mut rng);
        let q = unit(4, 8, &mut rng);
        let f = |x: &[Matrix]| {
            let r = raw::cl(&x[0], &x[1], 0.07f64.ln())?;
            Ok((r.value, vec![r.grad_a, r.grad_b]))
        };
        assert!(grad_check(&f, &[p, q], 1e-6).unwrap() < 1e-5);

        let p = unit(6, 8, &mut rng);
        let q = unit(6, 8, &mut rng);
        let w = linear_weights(&q).unwrap().matrix().clone();
        let f = |x: &[Matrix]| {
            let r = raw::cwcl(&x[0], &x[1], &w, 0.07f64.ln())?;
            Ok((r.value, vec![r.grad_a, r.grad_b]))
        };
        assert!(grad_check(&f, &[p, q], 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn grad_check_log_tau() {
        let mut rng = Rng::new(101);
        let p = unit(4, 8, &mut rng);
        let q = unit(4, 8, &mut rng);
        let f = |x: &[Matrix]| {
            let r = raw::cl(&p, &q, x[0][(0, 0)])?;
            Ok((r.value, vec![Matrix::from_vec(1, 1, vec![r.grad_log_tau])?]))
        };
        let lt = Matrix::from_vec(1, 1, vec![0.07f64.ln()]).unwrap();
        assert!(grad_check(&f, &[lt], 1e-6).unwrap() < 1e-5);
    }

    #[test]
    fn grad_check_catches_wrong_gradient() {
        let mut rng = Rng::new(102);
        let p = unit(4, 3, &mut rng);
        let q = unit(4, 3, &mut rng);
        let f = |x: &[Matrix]| {
            let r = raw::cl(&x[0], &x[1], 0.0)?;
            Ok((r.value, vec![r.grad_a.scale(1.01), r.grad_b]))
        };
        assert!(grad_check(&f, &[p, q], 1e-6).unwrap() > 1e-3);
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        let f = |_: &[Matrix]| Ok((0.0, vec![]));
        assert!(grad_check(&f, &[], 1e-2).is_err());
    }
}
