//! Dataset assembly, the ELBO objective, Adam, and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::SeasonSeries;
use crate::encoder::DiagonalGaussian;
use crate::error::{Error, Result};
use crate::graph::{edge_probabilities, logistic_noise, sample_relaxed};
use crate::latent::global_latent;
use crate::params::{Ablation, InitScheme, ModelDims, ModelParams, ModelVars};
use crate::tape::{concat_rows, Tape, Var};
use crate::tensor::Tensor;

/// One `(prefix, k-ahead target)` pair drawn from a historical season.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingExample {
    /// Index into the season list the example was built from.
    pub season: usize,
    /// Observed weeks `t`; the prefix is `values[..t]`.
    pub prefix_len: usize,
    pub horizon: usize,
    /// `x^(t + k)`.
    pub target: f64,
}

/// Full historical sequences, one per season.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub seasons: Vec<SeasonSeries>,
}

/// Builds the training set of all `(x^(1..t), x^(t+k))` pairs with
/// `min_prefix <= t <= T - k`, and the reference set of full seasons.
pub fn build_datasets(
    seasons: &[SeasonSeries],
    horizon: usize,
    min_prefix: usize,
) -> Result<(Vec<TrainingExample>, ReferenceSet)> {
    if seasons.is_empty() {
        return Err(Error::contract("no seasons to build datasets from"));
    }
    if horizon == 0 || min_prefix == 0 {
        return Err(Error::contract("horizon and minimum prefix must be at least 1"));
    }
    let mut examples = Vec::new();
    for (s, season) in seasons.iter().enumerate() {
        if let Some(v) = season.values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::contract(format!(
                "season {} has invalid value {v}",
                season.id
            )));
        }
        let len = season.len();
        if len < min_prefix + horizon {
            return Err(Error::contract(format!(
                "season {} has {len} weeks, fewer than minimum prefix {min_prefix} + horizon {horizon}",
                season.id
            )));
        }
        for t in min_prefix..=len - horizon {
            examples.push(TrainingExample {
                season: s,
                prefix_len: t,
                horizon,
                target: season.values[t + horizon - 1],
            });
        }
    }
    Ok((
        examples,
        ReferenceSet {
            seasons: seasons.to_vec(),
        },
    ))
}

/// Affine map applied to raw values before they enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn identity() -> Self {
        Scaler { mean: 0.0, std: 1.0 }
    }

    pub fn fit(seasons: &[SeasonSeries]) -> Self {
        let all: Vec<f64> = seasons.iter().flat_map(|s| s.values.iter().copied()).collect();
        let n = all.len().max(1) as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Scaler {
            mean,
            std: if var > 0.0 { var.sqrt() } else { 1.0 },
        }
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn inverse(&self, y: f64) -> f64 {
        y * self.std + self.mean
    }

    /// Log-variance shift when mapping a model-space Gaussian back.
    pub fn log_var_shift(&self) -> f64 {
        2.0 * self.std.ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    /// Trailing window (epochs) over which validation loss is averaged
    /// before the early-stopping comparison.
    pub validation_window: usize,
    /// Initial RBF bandwidth.
    pub gamma_init: f64,
    pub freeze_gamma: bool,
    /// Binary-concrete temperature used during training.
    pub temperature: f64,
    /// Monte-Carlo mixture components per forecast.
    pub mc_samples: usize,
    /// Realized draws per mixture component.
    pub draws_per_sample: usize,
    /// ELBO samples averaged per optimization step.
    pub elbo_samples: usize,
    /// Minibatch size; `None` trains full batch.
    pub batch_size: Option<usize>,
    pub min_prefix: usize,
    pub horizon: usize,
    /// Standardize inputs and targets by training mean/std.
    pub standardize: bool,
    pub seed: u64,
    pub init: InitScheme,
    pub dims: ModelDims,
    pub ablation: Ablation,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 1e-4,
            max_epochs: 3000,
            patience: 300,
            validation_fraction: 0.05,
            validation_window: 20,
            gamma_init: 0.01,
            freeze_gamma: false,
            temperature: 0.3,
            mc_samples: 2000,
            draws_per_sample: 10,
            elbo_samples: 1,
            batch_size: None,
            min_prefix: 1,
            horizon: 1,
            standardize: false,
            seed: 0,
            init: InitScheme::default(),
            dims: ModelDims::default(),
            ablation: Ablation::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::contract(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return bad(format!(
                "validation_fraction must lie in (0, 0.5), got {}",
                self.validation_fraction
            ));
        }
        if !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return bad(format!("gamma_init must be > 0, got {}", self.gamma_init));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.validation_window == 0 {
            return bad("validation_window must be at least 1".into());
        }
        if self.mc_samples == 0 || self.draws_per_sample == 0 || self.elbo_samples == 0 {
            return bad("sample counts must be at least 1".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        if self.horizon == 0 || self.min_prefix == 0 {
            return bad("horizon and min_prefix must be at least 1".into());
        }
        if self.dims.hidden == 0 || self.dims.head_hidden == 0 {
            return bad("model dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Standard-normal and logistic noise consumed by one ELBO evaluation.
/// Holding it fixed makes the loss a deterministic function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    /// `(N_R + N_M) x d`, references first.
    pub embedding: Tensor,
    /// `N_R x N_M` logistic draws for the relaxed edges.
    pub edges: Tensor,
    /// `N_M x d` draws for `z ~ q`.
    pub latent: Tensor,
}

impl ElboNoise {
    pub fn sample<R: Rng + ?Sized>(refs: usize, queries: usize, dim: usize, rng: &mut R) -> Self {
        ElboNoise {
            embedding: normal(&[refs + queries, dim], rng),
            edges: logistic_noise(&[refs, queries], rng),
            latent: normal(&[queries, dim], rng),
        }
    }
}

pub(crate) fn normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

/// Outputs of one ELBO forward pass.
#[derive(Debug)]
pub struct ElboForward<'t> {
    /// Weighted mean of the per-example negated ELBO.
    pub loss: Var<'t>,
    /// Negated ELBO of every query (`N_M x 1`).
    pub per_example: Tensor,
    /// Predictive-head mean for every query.
    pub predicted_mean: Tensor,
}

fn term<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("{name} term: {m}")),
        other => other,
    })
}

/// Single-sample estimate of the negated ELBO
/// `-(log p(y | z, u, v) + log p(z | G, U_R) - log q(z | x))` for every query
/// in `queries`, combined into a scalar with `weights` (one per query).
///
/// `series` are the model-space season values that both queries and the
/// reference set index into; every series is a reference.
pub fn elbo_forward<'t>(
    vars: &ModelVars<'t>,
    series: &[Vec<f64>],
    queries: &[TrainingExample],
    weights: &[f64],
    noise: &ElboNoise,
    temperature: f64,
    ablation: Ablation,
) -> Result<ElboForward<'t>> {
    if queries.is_empty() {
        return Err(Error::contract("ELBO batch is empty"));
    }
    if weights.len() != queries.len() {
        return Err(Error::contract("ELBO weights must match queries"));
    }
    let tape = vars.gamma.tape();
    let n_refs = series.len();
    let n_q = queries.len();

    let seqs: Vec<&[f64]> = series.iter().map(|s| s.as_slice()).collect();
    let per_season = term("encoder", vars.encoder.prefix_summaries(&seqs))?;
    let mut offsets = Vec::with_capacity(per_season.len());
    let mut acc = 0;
    for s in &per_season {
        offsets.push(acc);
        acc += s.rows();
    }
    let table = concat_rows(&per_season)?;
    let mut rows: Vec<usize> = (0..n_refs).map(|s| offsets[s] + series[s].len() - 1).collect();
    for q in queries {
        if q.season >= n_refs || q.prefix_len == 0 || q.prefix_len > series[q.season].len() {
            return Err(Error::contract(format!("query {q:?} out of range")));
        }
        rows.push(offsets[q.season] + q.prefix_len - 1);
    }
    let summaries = table.gather_rows(&rows)?;
    let embed = term("embedding", vars.encoder.heads.forward(&summaries))?;
    let u = if ablation.deterministic_encoder {
        embed.mean
    } else {
        term("embedding", embed.reparameterize(&tape.constant(noise.embedding.clone())?))?
    };
    let ref_idx: Vec<usize> = (0..n_refs).collect();
    let q_idx: Vec<usize> = (n_refs..n_refs + n_q).collect();
    let u_refs = u.gather_rows(&ref_idx)?;
    let u_q = u.gather_rows(&q_idx)?;
    let dim = u.cols();

    let v = if ablation.no_global {
        tape.constant(Tensor::zeros(&[n_q, dim]))?
    } else {
        let (v, _) = term("global latent", global_latent(&vars.global, &u_refs, n_refs))?;
        v.repeat_rows(n_q)?
    };

    let (z, kl_part) = if ablation.no_local {
        (tape.constant(Tensor::zeros(&[n_q, dim]))?, None)
    } else {
        let probs = term("graph", edge_probabilities(&vars.gamma, &u_refs, &u_q))?;
        let adjacency = term(
            "graph",
            sample_relaxed(&probs, temperature, &tape.constant(noise.edges.clone())?),
        )?;
        let prior = term("local prior", vars.local.prior(&adjacency, &u_refs))?;
        let q_summ = summaries.gather_rows(&q_idx)?;
        let post = term("posterior", vars.posterior.posterior(&q_summ))?;
        let z = term("posterior", post.reparameterize(&tape.constant(noise.latent.clone())?))?;
        let log_prior = term("local prior", prior.log_density(&z))?;
        let log_q = term("posterior", post.log_density(&z))?;
        (z, Some(log_prior.sub(&log_q)?))
    };

    let out: DiagonalGaussian<'t> = term("predictive", vars.head.predict(&z, &v, &u_q))?;
    let targets = tape.constant(Tensor::column(queries.iter().map(|q| q.target).collect())?)?;
    let recon = term("reconstruction", out.log_density(&targets))?;
    let elbo = match kl_part {
        Some(k) => recon.add(&k)?,
        None => recon,
    };
    let neg = elbo.neg()?;
    let w = tape.constant(Tensor::column(weights.to_vec())?)?;
    let loss = term("loss", neg.mul(&w)?.sum())?;
    Ok(ElboForward {
        loss,
        per_example: neg.tensor(),
        predicted_mean: out.mean.tensor(),
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract("adam: parameter/gradient count mismatch"));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "adam: gradient shape {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Gradients of every parameter tensor, in [`ModelParams::tensors`] order.
pub fn gradients(vars: &ModelVars<'_>, loss: &Var<'_>) -> Result<Vec<Tensor>> {
    let g = loss.backward()?;
    Ok(vars.leaves.iter().map(|v| g.wrt(v)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    /// RMSE of the predictive-head mean on training queries in this pass.
    pub train_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Everything needed to forecast: parameters plus the context they were fit in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub hyperparams: Hyperparams,
    pub scaler: Scaler,
    pub references: ReferenceSet,
}

impl TrainedModel {
    /// Reference values mapped into model space.
    pub fn scaled_references(&self) -> Vec<Vec<f64>> {
        self.references
            .seasons
            .iter()
            .map(|s| s.values.iter().map(|&v| self.scaler.forward(v)).collect())
            .collect()
    }
}

fn split_validation(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::contract(format!(
            "need at least 2 training examples for a validation split, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val_sorted = val;
    val_sorted.sort_unstable();
    Ok((train, val_sorted))
}

/// Fits the model on `seasons`.
///
/// Each epoch takes one Adam step per minibatch (full batch by default) on
/// the negated ELBO with freshly sampled noise. A held-out validation
/// subset of the training pairs is scored at the start of every epoch
/// under one fixed noise draw and averaged over the last
/// `validation_window` epochs; the parameters with
/// the lowest averaged loss are returned and training stops after
/// `patience` epochs without improvement.
pub fn train(seasons: &[SeasonSeries], hp: &Hyperparams) -> Result<(TrainedModel, TrainingLog)> {
    hp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let params = ModelParams::init_with(hp.dims, hp.gamma_init, hp.init, &mut rng)?;
    train_from(seasons, hp, params, &mut rng)
}

/// [`train`] starting from given parameters and RNG state.
pub fn train_from(
    seasons: &[SeasonSeries],
    hp: &Hyperparams,
    mut params: ModelParams,
    rng: &mut ChaCha8Rng,
) -> Result<(TrainedModel, TrainingLog)> {
    hp.validate()?;
    if params.dims != hp.dims {
        return Err(Error::contract("initial parameters do not match hyperparameter dims"));
    }
    let (examples, references) = build_datasets(seasons, hp.horizon, hp.min_prefix)?;
    let scaler = if hp.standardize {
        Scaler::fit(seasons)
    } else {
        Scaler::identity()
    };
    let series: Vec<Vec<f64>> = seasons
        .iter()
        .map(|s| s.values.iter().map(|&v| scaler.forward(v)).collect())
        .collect();
    let examples: Vec<TrainingExample> = examples
        .into_iter()
        .map(|e| TrainingExample {
            target: scaler.forward(e.target),
            ..e
        })
        .collect();

    let (train_idx, val_idx) = split_validation(examples.len(), hp.validation_fraction, rng)?;
    let mut adam = Adam::new(params.tensors());
    let dim = hp.dims.hidden;

    let mut log = TrainingLog {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, ModelParams)> = None;
    let mut since_best = 0;
    let mut recent_val: std::collections::VecDeque<f64> = Default::default();

    // validation uses one fixed noise draw so its trend reflects the
    // parameters rather than resampling
    let val_queries: Vec<TrainingExample> = val_idx.iter().map(|&i| examples[i]).collect();
    let val_weights = vec![1.0 / val_queries.len() as f64; val_queries.len()];
    let mut val_rng = rng.clone();
    val_rng.set_stream(1);
    let val_noise = ElboNoise::sample(series.len(), val_queries.len(), dim, &mut val_rng);

    for epoch in 1..=hp.max_epochs {
        let val_loss = {
            let tape = Tape::new();
            let vars = params.bind(&tape, false, hp.freeze_gamma)?;
            elbo_forward(&vars, &series, &val_queries, &val_weights, &val_noise, hp.temperature, hp.ablation)
                .map_err(|e| divergence(epoch, e))?
                .loss
                .item()
        };
        if recent_val.len() == hp.validation_window {
            recent_val.pop_front();
        }
        recent_val.push_back(val_loss);
        let smoothed = recent_val.iter().sum::<f64>() / recent_val.len() as f64;
        if best.as_ref().is_none_or(|(b, _)| smoothed < *b) {
            best = Some((smoothed, params.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }

        let mut order = train_idx.clone();
        let batches: Vec<Vec<usize>> = match hp.batch_size {
            Some(b) if b < order.len() => {
                order.shuffle(rng);
                order.chunks(b).map(|c| c.to_vec()).collect()
            }
            _ => vec![order],
        };
        let mut train_loss_sum = 0.0;
        let mut sq_err = 0.0;
        let mut n_train_seen = 0usize;
        for batch in &batches {
            let queries: Vec<TrainingExample> = batch.iter().map(|&i| examples[i]).collect();
            let weights = vec![1.0 / (queries.len() * hp.elbo_samples) as f64; queries.len()];
            let tape = Tape::new();
            let vars = params.bind(&tape, true, hp.freeze_gamma)?;
            let mut grads: Option<Vec<Tensor>> = None;
            for _ in 0..hp.elbo_samples {
                let noise = ElboNoise::sample(series.len(), queries.len(), dim, rng);
                let fwd = elbo_forward(&vars, &series, &queries, &weights, &noise, hp.temperature, hp.ablation)
                    .map_err(|e| divergence(epoch, e))?;
                let g = gradients(&vars, &fwd.loss)?;
                match &mut grads {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
                    None => grads = Some(g),
                }
                train_loss_sum += fwd.per_example.sum() / hp.elbo_samples as f64;
                for (q, mu) in queries.iter().zip(fwd.predicted_mean.data()) {
                    sq_err += (q.target - mu).powi(2) / hp.elbo_samples as f64;
                }
            }
            n_train_seen += queries.len();
            let grads = grads.expect("elbo_samples >= 1");
            for g in &grads {
                g.check_finite("gradient").map_err(|e| divergence(epoch, e))?;
            }
            adam.update(&mut params.tensors_mut(), &grads, hp.learning_rate)?;
        }
        let entry = EpochLog {
            epoch,
            train_loss: train_loss_sum / n_train_seen as f64,
            validation_loss: val_loss,
            train_rmse: (sq_err / n_train_seen as f64).sqrt() * scaler.std,
        };
        if epoch == 1 || epoch % 100 == 0 {
            log::info!(
                "epoch {epoch}: train {:.4} val {:.4} rmse {:.4}",
                entry.train_loss,
                entry.validation_loss,
                entry.train_rmse
            );
        }
        log.epochs.push(entry);
        if since_best >= hp.patience {
            log.stopped_early = true;
            break;
        }
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((
        TrainedModel {
            params: best_params,
            hyperparams: hp.clone(),
            scaler,
            references,
        },
        log,
    ))
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("training diverged at epoch {epoch}: {m}")),
        other => other,
    }
}
