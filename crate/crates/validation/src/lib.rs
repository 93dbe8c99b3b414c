//! Oracles shared by the gradient checks and the acceptance suite: central
//! finite differences for every tape operation and for the whole ELBO, and
//! the synthetic train/held-out split.

use epifnp::data::SeasonSeries;
use epifnp::params::{Ablation, ModelDims, ModelParams};
use epifnp::synthetic::{generate, SyntheticConfig};
use epifnp::tape::{concat_last, concat_rows, Tape, Var};
use epifnp::trainer::{build_datasets, elbo_forward, gradients, ElboNoise};
use epifnp::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// The end-to-end setup: 12 training seasons and 4 held-out ones from the
/// same generator.
pub fn synthetic_split() -> (Vec<SeasonSeries>, Vec<SeasonSeries>) {
    let mut all = generate(&SyntheticConfig {
        seasons: 16,
        ..Default::default()
    });
    let held_out = all.split_off(12);
    (all, held_out)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    t
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    t
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

const STEP: f64 = 1e-5;

type OpFn = dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>;

/// Compares the tape gradient of `sum(W * f(inputs))` (random fixed `W`) with
/// central differences; returns the worst relative error over the inputs.
fn check_op(f: &OpFn, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> f64 {
    let eval = |xs: &[Tensor], w: &Tensor| -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone()).unwrap()).collect();
        let out = f(&vars).unwrap();
        let wv = tape.constant(w.clone()).unwrap();
        let loss = out.mul(&wv).unwrap().sum().unwrap();
        let g = loss.backward().unwrap();
        (loss.item(), vars.iter().map(|v| g.wrt(v)).collect())
    };
    let shape = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone()).unwrap()).collect();
        f(&vars).unwrap().shape()
    };
    let w = randn(&shape, rng);
    let (_, analytic) = eval(inputs, &w);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + STEP;
            let up = eval(&xs, &w).0;
            xs[i].data_mut()[j] = x.data()[j] - STEP;
            let down = eval(&xs, &w).0;
            *slot = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(analytic[i].data(), &numeric));
    }
    worst
}

/// One entry per differentiable tape operation.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let a = randn(&[3, 4], r);
    let b = randn(&[3, 4], r);
    let pos = uniform(&[3, 4], 0.5, 2.0, r);
    let col = uniform(&[3, 1], 0.5, 2.0, r);
    let row = randn(&[1, 4], r);
    let s = randn(&[1, 1], r);
    let m = randn(&[4, 5], r);
    let n = randn(&[5, 4], r);
    // keep rectifier and clamp inputs away from their kinks
    let mut kinked = randn(&[3, 4], r);
    kinked.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.1 {
            *v += 0.3
        }
    });
    let clamp_in = Tensor::matrix(1, 4, vec![-2.0, -0.5, 0.4, 3.0]).unwrap();

    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut run = |name: &'static str, inputs: Vec<Tensor>, f: &OpFn, rng: &mut ChaCha8Rng| {
        out.push((name, check_op(f, &inputs, rng)));
    };
    let r = &mut rng;
    run("add", vec![a.clone(), b.clone()], &|v| v[0].add(&v[1]), r);
    run("sub", vec![a.clone(), b.clone()], &|v| v[0].sub(&v[1]), r);
    run("mul", vec![a.clone(), b.clone()], &|v| v[0].mul(&v[1]), r);
    run("div", vec![a.clone(), pos.clone()], &|v| v[0].div(&v[1]), r);
    run("add_row", vec![a.clone(), row.clone()], &|v| v[0].add_row(&v[1]), r);
    run("mul_col", vec![a.clone(), col.clone()], &|v| v[0].mul_col(&v[1]), r);
    run("div_col", vec![a.clone(), col.clone()], &|v| v[0].div_col(&v[1]), r);
    run("mul_scalar", vec![a.clone(), s.clone()], &|v| v[0].mul_scalar(&v[1]), r);
    run("scale", vec![a.clone()], &|v| v[0].scale(-1.7), r);
    run("neg", vec![a.clone()], &|v| v[0].neg(), r);
    run("add_scalar", vec![a.clone()], &|v| v[0].add_scalar(0.3), r);
    run("one_minus", vec![a.clone()], &|v| v[0].one_minus(), r);
    run("matmul", vec![a.clone(), m.clone()], &|v| v[0].matmul(&v[1]), r);
    run("matmul_nt", vec![a.clone(), n.clone()], &|v| v[0].matmul_nt(&v[1]), r);
    run("transpose", vec![a.clone()], &|v| v[0].transpose(), r);
    run("sigmoid", vec![a.clone()], &|v| v[0].sigmoid(), r);
    run("tanh", vec![a.clone()], &|v| v[0].tanh(), r);
    run("relu", vec![kinked.clone()], &|v| v[0].relu(), r);
    run("exp", vec![a.clone()], &|v| v[0].exp(), r);
    run("log", vec![pos.clone()], &|v| v[0].log(), r);
    run("square", vec![a.clone()], &|v| v[0].square(), r);
    run("clamp", vec![clamp_in.clone()], &|v| v[0].clamp(-1.0, 1.0), r);
    run("softmax_last", vec![a.clone()], &|v| v[0].softmax_last(), r);
    run("sum", vec![a.clone()], &|v| v[0].sum(), r);
    run("mean", vec![a.clone()], &|v| v[0].mean(), r);
    run("sum_last", vec![a.clone()], &|v| v[0].sum_last(), r);
    run("sum_rows", vec![a.clone()], &|v| v[0].sum_rows(), r);
    run("sq_euclid", vec![a.clone(), n.clone()], &|v| v[0].sq_euclid(&v[1]), r);
    run("gather_rows", vec![a.clone()], &|v| v[0].gather_rows(&[2, 0, 2, 1]), r);
    run("repeat_rows", vec![a.clone()], &|v| v[0].repeat_rows(3), r);
    run("segment_sum_rows", vec![n.clone()], &|v| v[0].reshape(&[10, 2])?.segment_sum_rows(5), r);
    run("reshape", vec![a.clone()], &|v| v[0].reshape(&[6, 2]), r);
    run("concat_last", vec![a.clone(), col.clone()], &|v| concat_last(&[v[0], v[1]]), r);
    run("concat_rows", vec![a.clone(), row.clone()], &|v| concat_rows(&[v[0], v[1]]), r);
    out
}

/// A small model and dataset for whole-ELBO gradient checks.
pub struct ElboFixture {
    pub params: ModelParams,
    pub series: Vec<Vec<f64>>,
    pub queries: Vec<epifnp::trainer::TrainingExample>,
    pub noise: ElboNoise,
    pub ablation: Ablation,
}

impl ElboFixture {
    pub fn new(seed: u64, ablation: Ablation) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = ModelDims {
            hidden: 5,
            head_hidden: 4,
        };
        let params = ModelParams::init(dims, 0.3, &mut rng).unwrap();
        let seasons = generate(&SyntheticConfig {
            seasons: 3,
            length: 8,
            ..Default::default()
        });
        let series: Vec<Vec<f64>> = seasons.iter().map(|s| s.values.clone()).collect();
        let (queries, _) = build_datasets(&seasons, 1, 1).unwrap();
        let noise = ElboNoise::sample(series.len(), queries.len(), dims.hidden, &mut rng);
        ElboFixture {
            params,
            series,
            queries,
            noise,
            ablation,
        }
    }

    pub fn loss(&self, params: &ModelParams) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let vars = params.bind(&tape, true, false)?;
        let w = vec![1.0 / self.queries.len() as f64; self.queries.len()];
        let fwd = elbo_forward(&vars, &self.series, &self.queries, &w, &self.noise, 0.3, self.ablation)?;
        let g = gradients(&vars, &fwd.loss)?;
        Ok((fwd.loss.item(), g))
    }

    /// Relative error of the full gradient vector against central
    /// differences over every parameter.
    pub fn gradient_error(&self) -> f64 {
        let (_, analytic) = self.loss(&self.params).unwrap();
        let analytic: Vec<f64> = analytic.iter().flat_map(|t| t.data().to_vec()).collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        let count = self.params.tensors().len();
        for ti in 0..count {
            let len = self.params.tensors()[ti].numel();
            for j in 0..len {
                let mut p = self.params.clone();
                let orig = p.tensors()[ti].data()[j];
                p.tensors_mut()[ti].data_mut()[j] = orig + STEP;
                let up = self.loss(&p).unwrap().0;
                p.tensors_mut()[ti].data_mut()[j] = orig - STEP;
                let down = self.loss(&p).unwrap().0;
                numeric.push((up - down) / (2.0 * STEP));
            }
        }
        relative_error(&analytic, &numeric)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_central_differences() {
        let errors = op_gradient_errors();
        assert!(errors.len() >= 30);
        for (name, err) in errors {
            assert!(err < 1e-4, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn elbo_gradient_matches_central_differences() {
        for seed in [1, 2] {
            let err = ElboFixture::new(seed, Ablation::default()).gradient_error();
            assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
        }
    }

    #[test]
    fn ablated_elbo_gradients_match() {
        let variants = [
            Ablation {
                no_local: true,
                ..Default::default()
            },
            Ablation {
                deterministic_encoder: true,
                ..Default::default()
            },
            Ablation {
                no_global: true,
                ..Default::default()
            },
        ];
        for a in variants {
            let err = ElboFixture::new(3, a).gradient_error();
            assert!(err < 1e-3, "{a:?}: relative error {err:e}");
        }
    }

    #[test]
    fn elbo_is_deterministic_given_noise() {
        let f = ElboFixture::new(4, Ablation::default());
        let (a, ga) = f.loss(&f.params).unwrap();
        let (b, gb) = f.loss(&f.params).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
        assert!(a.is_finite());
    }
}
