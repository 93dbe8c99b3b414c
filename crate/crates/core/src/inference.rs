//! Monte-Carlo predictive distributions and autoregressive rollout.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::grouped_edge_probabilities;
use crate::latent::global_latent;
use crate::params::{Ablation, ModelParams};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{Hyperparams, Scaler, TrainedModel};

/// Draw counts below this raise the interval warning flag.
pub const MIN_STABLE_DRAWS: usize = 100;

/// Components evaluated per tape; bounds memory, does not affect results.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastOptions {
    /// Mixture components `S`.
    pub samples: usize,
    /// Realized draws per component.
    pub draws_per_sample: usize,
    /// Cut every edge to the reference set, as if the query embedding were
    /// infinitely far from all references.
    pub zero_parents: bool,
}

impl ForecastOptions {
    pub fn from_hyperparams(hp: &Hyperparams) -> Self {
        ForecastOptions {
            samples: hp.mc_samples,
            draws_per_sample: hp.draws_per_sample,
            zero_parents: false,
        }
    }
}

/// Uniform mixture of scalar Gaussians plus realized draws, in data units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub means: Vec<f64>,
    pub log_vars: Vec<f64>,
    pub draws: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    /// Set when fewer than [`MIN_STABLE_DRAWS`] draws back the quantiles.
    pub few_draws: bool,
}

impl Interval {
    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    /// Mixture mean.
    pub point: f64,
    pub intervals: Vec<Interval>,
    pub components: usize,
    pub draws: usize,
}

/// Type-7 sample quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

impl PredictiveDistribution {
    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// Average of the component means.
    pub fn mean(&self) -> f64 {
        self.means.iter().sum::<f64>() / self.means.len() as f64
    }

    /// Mixture variance (law of total variance).
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let n = self.means.len() as f64;
        self.means
            .iter()
            .zip(&self.log_vars)
            .map(|(mu, lv)| lv.exp() + (mu - m) * (mu - m))
            .sum::<f64>()
            / n
    }

    /// Mixture CDF at `y`.
    pub fn cdf(&self, y: f64) -> f64 {
        let n = self.means.len() as f64;
        self.means
            .iter()
            .zip(&self.log_vars)
            .map(|(mu, lv)| normal_cdf((y - mu) / (0.5 * lv).exp()))
            .sum::<f64>()
            / n
    }

    pub fn sorted_draws(&self) -> Vec<f64> {
        let mut d = self.draws.clone();
        d.sort_by(f64::total_cmp);
        d
    }

    /// Equal-tailed interval between the `(1-c)/2` and `(1+c)/2` draw quantiles.
    pub fn interval(&self, level: f64) -> Result<Interval> {
        Ok(self.intervals(&[level])?.remove(0))
    }

    /// Several intervals from one sort of the draws.
    pub fn intervals(&self, levels: &[f64]) -> Result<Vec<Interval>> {
        if self.draws.is_empty() {
            return Err(Error::contract("interval: distribution has no draws"));
        }
        let sorted = self.sorted_draws();
        levels
            .iter()
            .map(|&c| {
                if !(c > 0.0 && c < 1.0) {
                    return Err(Error::contract(format!("interval level must lie in (0, 1), got {c}")));
                }
                Ok(Interval {
                    level: c,
                    lower: quantile_sorted(&sorted, (1.0 - c) / 2.0),
                    upper: quantile_sorted(&sorted, (1.0 + c) / 2.0),
                    few_draws: sorted.len() < MIN_STABLE_DRAWS,
                })
            })
            .collect()
    }

    pub fn summary(&self, levels: &[f64]) -> Result<ForecastSummary> {
        Ok(ForecastSummary {
            point: self.mean(),
            intervals: self.intervals(levels)?,
            components: self.components(),
            draws: self.draws.len(),
        })
    }
}

/// Per-component noise, drawn in a fixed order so that results do not
/// depend on how components are batched.
struct ComponentNoise {
    refs: Vec<f64>,
    query: Vec<f64>,
    edges: Vec<f64>,
    latent: Vec<f64>,
}

impl ComponentNoise {
    fn sample<R: Rng + ?Sized>(n_refs: usize, dim: usize, rng: &mut R) -> Self {
        let mut normals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let refs = normals(n_refs * dim);
        let query = normals(dim);
        let edges = (0..n_refs).map(|_| rng.random::<f64>()).collect();
        let latent = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        ComponentNoise {
            refs,
            query,
            edges,
            latent,
        }
    }
}

/// A trained model with its reference embeddings precomputed.
#[derive(Debug, Clone)]
pub struct Forecaster<'m> {
    params: &'m ModelParams,
    scaler: Scaler,
    ablation: Ablation,
    n_refs: usize,
    /// `N_R x d` embedding means and standard deviations of the references.
    ref_mean: Tensor,
    ref_std: Tensor,
}

impl<'m> Forecaster<'m> {
    pub fn new(model: &'m TrainedModel) -> Result<Self> {
        let refs = model.scaled_references();
        if refs.is_empty() {
            return Err(Error::contract("forecast: model has no reference seasons"));
        }
        Self::with_references(&model.params, model.scaler, model.hyperparams.ablation, &refs)
    }

    /// `refs` are in model units.
    pub fn with_references(
        params: &'m ModelParams,
        scaler: Scaler,
        ablation: Ablation,
        refs: &[Vec<f64>],
    ) -> Result<Self> {
        let (ref_mean, ref_std) = embedding_params(params, refs)?;
        Ok(Forecaster {
            params,
            scaler,
            ablation,
            n_refs: refs.len(),
            ref_mean,
            ref_std,
        })
    }

    fn dim(&self) -> usize {
        self.params.dims.hidden
    }

    /// Monte-Carlo predictive distribution of the next value after `prefix`
    /// (given in data units): `samples` components, each from one joint draw
    /// of `u`, the hard parent set, `z`, and `v`.
    pub fn forecast<R: Rng + ?Sized>(
        &self,
        prefix: &[f64],
        opts: &ForecastOptions,
        rng: &mut R,
    ) -> Result<PredictiveDistribution> {
        if opts.samples == 0 || opts.draws_per_sample == 0 {
            return Err(Error::contract("forecast: sample counts must be at least 1"));
        }
        let scaled = self.scale_prefix(prefix)?;
        let queries = vec![scaled; 1];
        let (means, log_vars) = self.sample_components(&queries, &vec![0; opts.samples], opts.zero_parents, rng)?;
        Ok(self.realize(means, log_vars, opts.draws_per_sample, rng))
    }

    /// Autoregressive rollout of a one-step model. At each of the `horizon`
    /// steps, `candidates` sequences are drawn uniformly from the previous
    /// step's set, each is extended by one sample from the model, and the
    /// final step's components and draws form the result.
    pub fn autoregressive<R: Rng + ?Sized>(
        &self,
        prefix: &[f64],
        horizon: usize,
        candidates: usize,
        rng: &mut R,
    ) -> Result<PredictiveDistribution> {
        if horizon == 0 || candidates == 0 {
            return Err(Error::contract("autoregressive forecast: horizon and candidate count must be at least 1"));
        }
        let mut pool = vec![self.scale_prefix(prefix)?];
        let mut last = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..horizon {
            let picks: Vec<usize> = if pool.len() == 1 {
                vec![0; candidates]
            } else {
                (0..candidates).map(|_| rng.random_range(0..pool.len())).collect()
            };
            let (means, log_vars) = self.sample_components(&pool, &picks, false, rng)?;
            let draws: Vec<f64> = means
                .iter()
                .zip(&log_vars)
                .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            pool = picks
                .iter()
                .zip(&draws)
                .map(|(&p, &y)| {
                    let mut s = pool[p].clone();
                    s.push(y);
                    s
                })
                .collect();
            last = (means, log_vars, draws);
        }
        let (means, log_vars, draws) = last;
        Ok(self.to_data_units(means, log_vars, draws))
    }

    fn scale_prefix(&self, prefix: &[f64]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::contract("forecast: prefix is empty"));
        }
        if let Some(v) = prefix.iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!("forecast: prefix contains {v}")));
        }
        Ok(prefix.iter().map(|&x| self.scaler.forward(x)).collect())
    }

    /// One model-space Gaussian per entry of `picks`, conditioned on
    /// `queries[picks[i]]`.
    fn sample_components<R: Rng + ?Sized>(
        &self,
        queries: &[Vec<f64>],
        picks: &[usize],
        zero_parents: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        let n = self.n_refs;
        let (q_mean, q_std) = embedding_params(self.params, queries)?;
        let mut means = Vec::with_capacity(picks.len());
        let mut log_vars = Vec::with_capacity(picks.len());
        for chunk in picks.chunks(CHUNK) {
            let c = chunk.len();
            let noise: Vec<ComponentNoise> = (0..c).map(|_| ComponentNoise::sample(n, d, rng)).collect();
            let sampled = !self.ablation.deterministic_encoder;

            let mut u_refs = Tensor::zeros(&[c * n, d]);
            let mut u_q = Tensor::zeros(&[c, d]);
            let ur = u_refs.data_mut();
            for (g, nz) in noise.iter().enumerate() {
                for k in 0..n * d {
                    let e = if sampled { nz.refs[k] } else { 0.0 };
                    ur[g * n * d + k] = self.ref_mean.data()[k] + self.ref_std.data()[k] * e;
                }
            }
            let uq = u_q.data_mut();
            for (g, (nz, &p)) in noise.iter().zip(chunk).enumerate() {
                for k in 0..d {
                    let e = if sampled { nz.query[k] } else { 0.0 };
                    uq[g * d + k] = q_mean.data()[p * d + k] + q_std.data()[p * d + k] * e;
                }
            }

            let tape = Tape::new();
            let vars = self.params.bind(&tape, false, false)?;
            let u_refs = tape.constant(u_refs)?;
            let u_q = tape.constant(u_q)?;

            let z = if self.ablation.no_local {
                tape.constant(Tensor::zeros(&[c, d]))?
            } else {
                let probs = grouped_edge_probabilities(&vars.gamma, &u_refs, &u_q)?.tensor();
                let mut a = Tensor::zeros(&[c * n, 1]);
                if !zero_parents {
                    for (g, nz) in noise.iter().enumerate() {
                        for i in 0..n {
                            let p = probs.data()[g * n + i];
                            a.data_mut()[g * n + i] = if nz.edges[i] < p { 1.0 } else { 0.0 };
                        }
                    }
                }
                let prior = vars.local.prior_grouped(&tape.constant(a)?, &u_refs, n)?;
                let eps = Tensor::matrix(c, d, noise.iter().flat_map(|nz| nz.latent.iter().copied()).collect())?;
                prior.reparameterize(&tape.constant(eps)?)?
            };
            let v = if self.ablation.no_global {
                tape.constant(Tensor::zeros(&[c, d]))?
            } else {
                global_latent(&vars.global, &u_refs, n)?.0
            };
            let out = vars.head.predict(&z, &v, &u_q)?;
            means.extend_from_slice(out.mean.value().data());
            log_vars.extend_from_slice(out.log_var.value().data());
        }
        Ok((means, log_vars))
    }

    fn realize<R: Rng + ?Sized>(
        &self,
        means: Vec<f64>,
        log_vars: Vec<f64>,
        per: usize,
        rng: &mut R,
    ) -> PredictiveDistribution {
        let mut draws = Vec::with_capacity(means.len() * per);
        for (m, lv) in means.iter().zip(&log_vars) {
            let sd = (0.5 * lv).exp();
            for _ in 0..per {
                draws.push(m + sd * rng.sample::<f64, _>(StandardNormal));
            }
        }
        self.to_data_units(means, log_vars, draws)
    }

    fn to_data_units(&self, means: Vec<f64>, log_vars: Vec<f64>, draws: Vec<f64>) -> PredictiveDistribution {
        let s = self.scaler;
        let shift = s.log_var_shift();
        PredictiveDistribution {
            means: means.into_iter().map(|m| s.inverse(m)).collect(),
            log_vars: log_vars.into_iter().map(|lv| lv + shift).collect(),
            draws: draws.into_iter().map(|y| s.inverse(y)).collect(),
        }
    }
}

/// Embedding means and standard deviations (`N x d` each) of `seqs`,
/// encoded `CHUNK` sequences per tape so large rollout pools stay small.
fn embedding_params(params: &ModelParams, seqs: &[Vec<f64>]) -> Result<(Tensor, Tensor)> {
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for chunk in seqs.chunks(CHUNK) {
        let tape = Tape::new();
        let vars = params.bind(&tape, false, false)?;
        let refs: Vec<&[f64]> = chunk.iter().map(|s| s.as_slice()).collect();
        let g = vars.encoder.encode(&refs)?;
        means.extend_from_slice(g.mean.value().data());
        stds.extend(g.log_var.value().data().iter().map(|lv| (0.5 * lv).exp()));
    }
    let d = params.dims.hidden;
    Ok((Tensor::matrix(seqs.len(), d, means)?, Tensor::matrix(seqs.len(), d, stds)?))
}

/// Convenience wrapper around [`Forecaster::forecast`].
pub fn forecast<R: Rng + ?Sized>(
    model: &TrainedModel,
    prefix: &[f64],
    opts: &ForecastOptions,
    rng: &mut R,
) -> Result<PredictiveDistribution> {
    Forecaster::new(model)?.forecast(prefix, opts, rng)
}

/// Convenience wrapper around [`Forecaster::autoregressive`].
pub fn autoregressive_forecast<R: Rng + ?Sized>(
    model: &TrainedModel,
    prefix: &[f64],
    horizon: usize,
    candidates: usize,
    rng: &mut R,
) -> Result<PredictiveDistribution> {
    Forecaster::new(model)?.autoregressive(prefix, horizon, candidates, rng)
}
