//! Stochastic correlation graph between reference and query embeddings.
//!
//! Edge `(i, j)` links reference `i` to query `j` with probability
//! `exp(-gamma * |u_i - u_j|^2)`. Training uses the binary-concrete
//! relaxation of the Bernoulli edges so gradients reach the embeddings and
//! the bandwidth; inference samples hard edges.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Binder;
use crate::tape::{sigmoid, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking logits.
pub const PROB_EPS: f64 = 1e-12;

/// RBF kernel bandwidth, stored as `ln(gamma)` so it stays positive under
/// unconstrained optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub log_gamma: Tensor,
}

impl KernelConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::contract(format!("kernel gamma must be > 0, got {gamma}")));
        }
        Ok(KernelConfig {
            log_gamma: Tensor::scalar(gamma.ln())?,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma.item().exp()
    }

    /// Binds `gamma` (not its log) onto the tape; frozen kernels bind a constant.
    pub fn bind<'t>(&self, b: &mut Binder<'t>, frozen: bool) -> Result<Var<'t>> {
        let lg = if frozen {
            b.bind_frozen(&self.log_gamma)?
        } else {
            b.bind(&self.log_gamma)?
        };
        lg.exp()
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.log_gamma);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.log_gamma);
    }
}

/// Edge probabilities and one realized adjacency (hard or relaxed).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationGraph {
    /// `N_R x N_M` kernel values.
    pub edge_probs: Tensor,
    /// Same shape; entries in `{0, 1}` when hard, `[0, 1]` when relaxed.
    pub adjacency: Tensor,
}

/// `N_R x N_M` matrix of `exp(-gamma |u_i^R - u_j^M|^2)`.
pub fn edge_probabilities<'t>(gamma: &Var<'t>, refs: &Var<'t>, queries: &Var<'t>) -> Result<Var<'t>> {
    if refs.cols() != queries.cols() {
        return Err(Error::contract(format!(
            "edge probabilities: reference dim {} vs query dim {}",
            refs.cols(),
            queries.cols()
        )));
    }
    refs.sq_euclid(queries)?.mul_scalar(gamma)?.neg()?.exp()
}

/// Kernel values for `G` groups: `refs` is `G*n x d`, `queries` is `G x d`;
/// row `g*n + i` compares reference `i` of group `g` with query `g`.
pub fn grouped_edge_probabilities<'t>(
    gamma: &Var<'t>,
    refs: &Var<'t>,
    queries: &Var<'t>,
) -> Result<Var<'t>> {
    let groups = queries.rows();
    if refs.cols() != queries.cols() || groups == 0 || refs.rows() % groups != 0 {
        return Err(Error::contract(format!(
            "grouped edge probabilities: refs {:?} vs queries {:?}",
            refs.shape(),
            queries.shape()
        )));
    }
    let n = refs.rows() / groups;
    refs.sub(&queries.repeat_rows(n)?)?
        .square()?
        .sum_last()?
        .mul_scalar(gamma)?
        .neg()?
        .exp()
}

/// Independent Bernoulli draw per entry.
pub fn sample_hard<R: Rng + ?Sized>(probs: &Tensor, rng: &mut R) -> Tensor {
    let mut out = probs.clone();
    for v in out.data_mut() {
        *v = if rng.random::<f64>() < *v { 1.0 } else { 0.0 };
    }
    out
}

/// Standard logistic draws `ln(v) - ln(1 - v)` with `v ~ U(0, 1)`.
pub fn logistic_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        let v: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        *x = v.ln() - (-v).ln_1p();
    }
    t
}

/// Binary-concrete relaxation `sigmoid((logit(p) + noise) / tau)`.
pub fn sample_relaxed<'t>(probs: &Var<'t>, tau: f64, noise: &Var<'t>) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("relaxation temperature must be > 0, got {tau}")));
    }
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let logit = p.log()?.sub(&p.one_minus()?.log()?)?;
    logit.add(noise)?.scale(1.0 / tau)?.sigmoid()
}

/// Plain-value relaxation, used by tests and diagnostics.
pub fn relaxed_value(p: f64, tau: f64, noise: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    sigmoid(((p.ln() - (1.0 - p).ln()) + noise) / tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs(gamma: f64, a: &Tensor, b: &Tensor) -> Tensor {
        let tape = Tape::new();
        let g = tape.constant(Tensor::scalar(gamma).unwrap()).unwrap();
        let av = tape.constant(a.clone()).unwrap();
        let bv = tape.constant(b.clone()).unwrap();
        edge_probabilities(&g, &av, &bv).unwrap().tensor()
    }

    #[test]
    fn coincident_embeddings_give_one() {
        let u = Tensor::matrix(1, 3, vec![0.3, -2.0, 5.0]).unwrap();
        assert_eq!(probs(1.7, &u, &u).item(), 1.0);
    }

    #[test]
    fn ln2_bandwidth_halves_unit_distance() {
        let a = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        assert!((probs(std::f64::consts::LN_2, &a, &b).item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::scalar(1.0).unwrap()).unwrap();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        assert!(matches!(edge_probabilities(&g, &a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn kernel_rejects_nonpositive_gamma() {
        assert!(KernelConfig::new(0.0).is_err());
        assert!(KernelConfig::new(-1.0).is_err());
        assert!((KernelConfig::new(2.5).unwrap().gamma() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn hard_sampler_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ones = sample_hard(&Tensor::ones(&[10, 10]), &mut rng);
        assert!(ones.data().iter().all(|&v| v == 1.0));
        let tiny = sample_hard(&Tensor::full(&[10, 10], 1e-300), &mut rng);
        assert!(tiny.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relaxed_symmetric_point_and_cold_limit() {
        for tau in [0.01, 0.3, 1.0, 7.0] {
            assert_eq!(relaxed_value(0.5, tau, 0.0), 0.5);
        }
        // as tau -> 0 the relaxation becomes the indicator of logit + noise > 0
        assert!(relaxed_value(0.7, 1e-4, -0.5) > 1.0 - 1e-12);
        assert!(relaxed_value(0.7, 1e-4, -1.0) < 1e-12);
        // p == 1 is clamped instead of producing an infinite logit
        assert!(relaxed_value(1.0, 0.3, -5.0).is_finite());
    }

    #[test]
    fn tape_relaxation_matches_scalar_formula() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::row(vec![0.2, 0.7, 1.0]).unwrap()).unwrap();
        let noise = Tensor::row(vec![0.4, -1.1, 0.3]).unwrap();
        let n = tape.constant(noise.clone()).unwrap();
        let s = sample_relaxed(&p, 0.3, &n).unwrap().tensor();
        for k in 0..3 {
            let expect = relaxed_value(p.value().data()[k], 0.3, noise.data()[k]);
            assert!((s.data()[k] - expect).abs() < 1e-14);
        }
    }
}
