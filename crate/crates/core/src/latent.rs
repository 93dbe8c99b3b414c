//! Local latent `z`, global latent `v`, the predictive head, and the
//! amortized posterior over `z`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionVars, DiagonalGaussian};
use crate::error::{Error, Result};
use crate::nn::{Binder, Linear, LinearVars, Mlp, MlpVars};
use crate::tape::{concat_last, Var};
use crate::tensor::Tensor;

/// Parent weight totals below this are treated as this value when
/// normalizing, so an empty parent set yields exactly `N(0, I)`.
pub const PARENT_EPS: f64 = 1e-8;

/// `h1` and `h2`: single linear maps applied to reference embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalLatentHeads {
    pub mean: Linear,
    pub log_var: Linear,
}

impl LocalLatentHeads {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        LocalLatentHeads {
            mean: Linear::init(dim, dim, rng),
            log_var: Linear::init(dim, dim, rng),
        }
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> Result<LocalLatentVars<'t>> {
        Ok(LocalLatentVars {
            mean: self.mean.bind(b)?,
            log_var: self.log_var.bind(b)?,
        })
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        self.mean.visit(out);
        self.log_var.visit(out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.mean.visit_mut(out);
        self.log_var.visit_mut(out);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LocalLatentVars<'t> {
    pub mean: LinearVars<'t>,
    pub log_var: LinearVars<'t>,
}

impl<'t> LocalLatentVars<'t> {
    /// Prior over `z` for queries sharing one reference set.
    ///
    /// `adjacency` is `N_R x N_M` (reference rows, query columns) and `refs`
    /// is `N_R x d`. Column `j` selects the parents of query `j`; the Gaussian
    /// parameters are the adjacency-weighted average of `h1`/`h2` over them.
    pub fn prior(&self, adjacency: &Var<'t>, refs: &Var<'t>) -> Result<DiagonalGaussian<'t>> {
        if adjacency.rows() != refs.rows() {
            return Err(Error::contract(format!(
                "local latent: adjacency has {} rows for {} references",
                adjacency.rows(),
                refs.rows()
            )));
        }
        let counts = adjacency
            .sum_rows()?
            .transpose()?
            .clamp(PARENT_EPS, f64::MAX)?;
        let at = adjacency.transpose()?;
        let mean = at.matmul(&self.mean.forward(refs)?)?.div_col(&counts)?;
        let log_var = at.matmul(&self.log_var.forward(refs)?)?.div_col(&counts)?;
        DiagonalGaussian::new(mean, log_var)
    }

    /// Prior over `z` for `G` queries with their own reference sets.
    ///
    /// `weights` is `G*n x 1` (edge indicators) and `refs` is `G*n x d`.
    pub fn prior_grouped(&self, weights: &Var<'t>, refs: &Var<'t>, n: usize) -> Result<DiagonalGaussian<'t>> {
        if weights.rows() != refs.rows() || weights.cols() != 1 {
            return Err(Error::contract(format!(
                "local latent: weights {:?} vs references {:?}",
                weights.shape(),
                refs.shape()
            )));
        }
        let counts = weights.segment_sum_rows(n)?.clamp(PARENT_EPS, f64::MAX)?;
        let mean = self
            .mean
            .forward(refs)?
            .mul_col(weights)?
            .segment_sum_rows(n)?
            .div_col(&counts)?;
        let log_var = self
            .log_var
            .forward(refs)?
            .mul_col(weights)?
            .segment_sum_rows(n)?
            .div_col(&counts)?;
        DiagonalGaussian::new(mean, log_var)
    }
}

/// Output head: `d1` (mean) and `d2` (log-variance) over `concat(z, v, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveHead {
    pub mean: Mlp,
    pub log_var: Mlp,
}

impl PredictiveHead {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        PredictiveHead {
            mean: Mlp::init(&[3 * dim, hidden, 1], rng),
            log_var: Mlp::init(&[3 * dim, hidden, 1], rng),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        PredictiveHead {
            mean: Mlp::zeros(&[3 * dim, hidden, 1]),
            log_var: Mlp::zeros(&[3 * dim, hidden, 1]),
        }
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> Result<PredictiveVars<'t>> {
        Ok(PredictiveVars {
            mean: self.mean.bind(b)?,
            log_var: self.log_var.bind(b)?,
        })
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        self.mean.visit(out);
        self.log_var.visit(out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.mean.visit_mut(out);
        self.log_var.visit_mut(out);
    }
}

#[derive(Debug, Clone)]
pub struct PredictiveVars<'t> {
    pub mean: MlpVars<'t>,
    pub log_var: MlpVars<'t>,
}

impl<'t> PredictiveVars<'t> {
    /// Gaussian over the scalar target, one row per query (`rows x 1`).
    pub fn predict(&self, z: &Var<'t>, v: &Var<'t>, u: &Var<'t>) -> Result<DiagonalGaussian<'t>> {
        if z.shape() != u.shape() || v.shape() != u.shape() {
            return Err(Error::contract(format!(
                "predict: z {:?}, v {:?}, u {:?} must agree",
                z.shape(),
                v.shape(),
                u.shape()
            )));
        }
        let e = concat_last(&[*z, *v, *u])?;
        DiagonalGaussian::new(self.mean.forward(&e)?, self.log_var.forward(&e)?)
    }
}

/// Single linear layer from a query summary to the mean and log-variance
/// of `q(z | x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub mean: Linear,
    pub log_var: Linear,
}

impl PosteriorParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        PosteriorParams {
            mean: Linear::init(dim, dim, rng),
            log_var: Linear::init(dim, dim, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        PosteriorParams {
            mean: Linear::zeros(dim, dim),
            log_var: Linear::zeros(dim, dim),
        }
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> Result<PosteriorVars<'t>> {
        Ok(PosteriorVars {
            mean: self.mean.bind(b)?,
            log_var: self.log_var.bind(b)?,
        })
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        self.mean.visit(out);
        self.log_var.visit(out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.mean.visit_mut(out);
        self.log_var.visit_mut(out);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars<'t> {
    pub mean: LinearVars<'t>,
    pub log_var: LinearVars<'t>,
}

impl<'t> PosteriorVars<'t> {
    pub fn posterior(&self, summary: &Var<'t>) -> Result<DiagonalGaussian<'t>> {
        if summary.cols() != self.mean.weight.rows() {
            return Err(Error::contract(format!(
                "posterior: summary dim {} vs expected {}",
                summary.cols(),
                self.mean.weight.rows()
            )));
        }
        DiagonalGaussian::new(self.mean.forward(summary)?, self.log_var.forward(summary)?)
    }
}

/// Global latent `v`: attention-pooled reference embeddings, one per group
/// of `n` references (`G*n x d` in, `G x d` out).
pub fn global_latent<'t>(attn: &AttentionVars<'t>, refs: &Var<'t>, n: usize) -> Result<(Var<'t>, Var<'t>)> {
    if refs.rows() == 0 {
        return Err(Error::contract("global latent: empty reference set"));
    }
    let (weights, v) = attn.grouped_pool(refs, n)?;
    Ok((v, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::AttentionParams;
    use crate::nn::uniform;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn no_parents_gives_standard_normal() {
        let heads = LocalLatentHeads::init(4, &mut rng(1));
        let tape = Tape::new();
        let vars = heads.bind(&mut Binder::new(&tape, true)).unwrap();
        let refs = tape.leaf(uniform(&[3, 4], 1.0, &mut rng(2))).unwrap();
        let adj = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let g = vars.prior(&adj, &refs).unwrap();
        assert!(g.mean.value().data().iter().all(|&v| v == 0.0));
        assert!(g.log_var.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_parent_copies_heads_and_two_parents_average() {
        let heads = LocalLatentHeads::init(3, &mut rng(3));
        let tape = Tape::new();
        let vars = heads.bind(&mut Binder::new(&tape, false)).unwrap();
        let refs_t = uniform(&[2, 3], 1.0, &mut rng(4));
        let refs = tape.constant(refs_t.clone()).unwrap();
        // query 0 has parent 1 only, query 1 has both parents
        let adj = tape
            .constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let g = vars.prior(&adj, &refs).unwrap();
        let h1 = refs_t.matmul(&heads.mean.weight);
        let h2 = refs_t.matmul(&heads.log_var.weight);
        for k in 0..3 {
            let m1 = h1.get(1, k) + heads.mean.bias.get(0, k);
            let l1 = h2.get(1, k) + heads.log_var.bias.get(0, k);
            assert!((g.mean.value().get(0, k) - m1).abs() < 1e-15);
            assert!((g.log_var.value().get(0, k) - l1).abs() < 1e-15);
            let m_avg = 0.5 * (h1.get(0, k) + h1.get(1, k)) + heads.mean.bias.get(0, k);
            assert!((g.mean.value().get(1, k) - m_avg).abs() < 1e-14);
        }
    }

    #[test]
    fn grouped_prior_matches_shared_prior() {
        let heads = LocalLatentHeads::init(3, &mut rng(5));
        let tape = Tape::new();
        let vars = heads.bind(&mut Binder::new(&tape, false)).unwrap();
        let refs_t = uniform(&[4, 3], 1.0, &mut rng(6));
        let adj_t = Tensor::matrix(4, 1, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let shared = vars
            .prior(&tape.constant(adj_t.clone()).unwrap(), &tape.constant(refs_t.clone()).unwrap())
            .unwrap();
        let grouped = vars
            .prior_grouped(&tape.constant(adj_t).unwrap(), &tape.constant(refs_t).unwrap(), 4)
            .unwrap();
        assert!(shared.mean.value().max_abs_diff(&grouped.mean.value()) < 1e-14);
        assert!(shared.log_var.value().max_abs_diff(&grouped.log_var.value()) < 1e-14);
    }

    #[test]
    fn parent_order_does_not_matter() {
        let heads = LocalLatentHeads::init(3, &mut rng(7));
        let tape = Tape::new();
        let vars = heads.bind(&mut Binder::new(&tape, false)).unwrap();
        let refs_t = uniform(&[3, 3], 1.0, &mut rng(8));
        let adj = Tensor::column(vec![1.0, 0.0, 1.0]).unwrap();
        let a = vars
            .prior(&tape.constant(adj.clone()).unwrap(), &tape.constant(refs_t.clone()).unwrap())
            .unwrap();
        let perm = [2, 1, 0];
        let b = vars
            .prior(
                &tape.constant(adj.gather_rows(&perm)).unwrap(),
                &tape.constant(refs_t.gather_rows(&perm)).unwrap(),
            )
            .unwrap();
        assert!(a.mean.value().max_abs_diff(&b.mean.value()) < 1e-14);
    }

    #[test]
    fn global_latent_single_and_identical_refs() {
        let attn = AttentionParams::init(3, &mut rng(9));
        let tape = Tape::new();
        let vars = attn.bind(&mut Binder::new(&tape, false)).unwrap();
        let one = tape.constant(Tensor::row(vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let (v, w) = global_latent(&vars, &one, 1).unwrap();
        assert_eq!(v.tensor(), one.tensor());
        assert_eq!(w.item(), 1.0);
        let same = tape.constant(Tensor::row(vec![0.5, -1.0, 2.0]).unwrap().repeat_rows(4)).unwrap();
        let (v, _) = global_latent(&vars, &same, 4).unwrap();
        assert!(v.value().max_abs_diff(&one.value()) < 1e-15);
    }

    #[test]
    fn zero_head_predicts_standard_normal() {
        let head = PredictiveHead::zeros(2, 5);
        let tape = Tape::new();
        let vars = head.bind(&mut Binder::new(&tape, false)).unwrap();
        let x = tape.constant(uniform(&[3, 2], 1.0, &mut rng(10))).unwrap();
        let g = vars.predict(&x, &x, &x).unwrap();
        assert!(g.mean.value().data().iter().all(|&v| v == 0.0));
        assert!(g.log_var.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_posterior_is_standard_normal() {
        let post = PosteriorParams::zeros(4);
        let tape = Tape::new();
        let vars = post.bind(&mut Binder::new(&tape, false)).unwrap();
        let s = tape.constant(uniform(&[2, 4], 1.0, &mut rng(11))).unwrap();
        let g = vars.posterior(&s).unwrap();
        assert!(g.mean.value().data().iter().all(|&v| v == 0.0));
        assert!(g.log_var.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn posterior_log_density_matches_scalar_oracle() {
        let post = PosteriorParams::init(5, &mut rng(12));
        let tape = Tape::new();
        let vars = post.bind(&mut Binder::new(&tape, false)).unwrap();
        let s = tape.constant(uniform(&[1, 5], 1.0, &mut rng(13))).unwrap();
        let g = vars.posterior(&s).unwrap();
        let x_t = uniform(&[1, 5], 2.0, &mut rng(14));
        let x = tape.constant(x_t.clone()).unwrap();
        let lp = g.log_density(&x).unwrap().item();
        let (m, lv) = (g.mean.tensor(), g.log_var.tensor());
        let mut oracle = 0.0;
        for k in 0..5 {
            let (mk, lk, xk) = (m.data()[k], lv.data()[k], x_t.data()[k]);
            oracle += -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * lk
                - 0.5 * (xk - mk) * (xk - mk) / lk.exp();
        }
        assert!((lp - oracle).abs() < 1e-10);
    }
}
