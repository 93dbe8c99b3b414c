use epifnp::checkpoint::{from_bytes, load_model, save_model, to_bytes};
use epifnp::encoder::DiagonalGaussian;
use epifnp::inference::{forecast, ForecastOptions, Forecaster, PredictiveDistribution};
use epifnp::latent::{LocalLatentHeads, PredictiveHead};
use epifnp::metrics::log_score_one;
use epifnp::params::{ModelDims, ModelParams};
use epifnp::synthetic::{generate, SyntheticConfig};
use epifnp::tape::Tape;
use epifnp::trainer::{
    build_datasets, elbo_forward, ElboNoise, Hyperparams, ReferenceSet, Scaler, TrainedModel,
};
use epifnp::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    t
}

fn tiny_model(seed: u64) -> TrainedModel {
    let dims = ModelDims {
        hidden: 6,
        head_hidden: 5,
    };
    let params = ModelParams::init(dims, 0.2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let seasons = generate(&SyntheticConfig {
        seasons: 4,
        length: 12,
        ..Default::default()
    });
    TrainedModel {
        params,
        hyperparams: Hyperparams {
            dims,
            ..Default::default()
        },
        scaler: Scaler::identity(),
        references: ReferenceSet { seasons },
    }
}

fn opts(samples: usize, draws: usize) -> ForecastOptions {
    ForecastOptions {
        samples,
        draws_per_sample: draws,
        zero_parents: false,
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn prior_equal_posterior_has_zero_log_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 4;
    let heads = LocalLatentHeads::init(d, &mut rng);
    let tape = Tape::new();
    let b = &mut epifnp::nn::Binder::new(&tape, false);
    let vars = heads.bind(b).unwrap();
    let refs = tape.constant(randn(&[5, d], &mut rng)).unwrap();
    let adj = tape
        .constant(Tensor::column(vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap())
        .unwrap();
    let prior = vars.prior(&adj, &refs).unwrap();

    let n = 10_000;
    let p = DiagonalGaussian::new(prior.mean.repeat_rows(n).unwrap(), prior.log_var.repeat_rows(n).unwrap()).unwrap();
    // q emits exactly the prior parameters through separate nodes
    let q = DiagonalGaussian::new(
        tape.constant(p.mean.tensor()).unwrap(),
        tape.constant(p.log_var.tensor()).unwrap(),
    )
    .unwrap();
    let noise = tape.constant(randn(&[n, d], &mut rng)).unwrap();
    let z = q.reparameterize(&noise).unwrap();
    let ratio = p.log_density(&z).unwrap().sub(&q.log_density(&z).unwrap()).unwrap().tensor();
    let (m, se) = mean_and_se(ratio.data());
    assert!(m.abs() <= 3.0 * se + 1e-12, "mean {m} se {se}");

    // a shifted q recovers the closed-form KL divergence
    let shift = 0.7;
    let q2 = DiagonalGaussian::new(
        tape.constant(p.mean.tensor().map(|v| v + shift)).unwrap(),
        tape.constant(p.log_var.tensor().map(|v| v - 0.4)).unwrap(),
    )
    .unwrap();
    let z = q2.reparameterize(&noise).unwrap();
    let lr = q2.log_density(&z).unwrap().sub(&p.log_density(&z).unwrap()).unwrap().tensor();
    let (m, se) = mean_and_se(lr.data());
    let lv = prior.log_var.tensor();
    let kl: f64 = lv
        .data()
        .iter()
        .map(|&l| {
            let (vq, vp) = ((l - 0.4f64).exp(), l.exp());
            0.5 * ((vq + shift * shift) / vp - 1.0 - (vq / vp).ln())
        })
        .sum();
    assert!((m - kl).abs() <= 3.0 * se, "mc {m} vs closed form {kl} (se {se})");
}

#[test]
fn loss_finite_at_init_over_twenty_seeds() {
    let seasons = generate(&SyntheticConfig::default());
    let (queries, _) = build_datasets(&seasons, 1, 1).unwrap();
    let series: Vec<Vec<f64>> = seasons.iter().map(|s| s.values.clone()).collect();
    let w = vec![1.0 / queries.len() as f64; queries.len()];
    let hp = Hyperparams::default();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init_with(hp.dims, hp.gamma_init, hp.init, &mut rng).unwrap();
        let tape = Tape::new();
        let vars = params.bind(&tape, true, false).unwrap();
        let noise = ElboNoise::sample(series.len(), queries.len(), hp.dims.hidden, &mut rng);
        let fwd = elbo_forward(&vars, &series, &queries, &w, &noise, hp.temperature, hp.ablation).unwrap();
        assert!(fwd.loss.item().is_finite(), "seed {seed}");
        assert!(fwd.per_example.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn standard_normal_interval_from_a_million_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws: Vec<f64> = (0..1_000_000).map(|_| rng.sample(StandardNormal)).collect();
    let d = PredictiveDistribution {
        means: vec![0.0],
        log_vars: vec![0.0],
        draws,
    };
    let i = d.interval(0.95).unwrap();
    assert!((i.lower + 1.96).abs() < 0.02 && (i.upper - 1.96).abs() < 0.02, "{i:?}");
    assert!(!i.few_draws);
}

#[test]
fn mixture_mass_matches_draw_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let k = rng.random_range(1..6);
        let means: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let log_vars: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.0)).collect();
        let draws: Vec<f64> = (0..100_000)
            .map(|i| {
                let c = i % k;
                means[c] + (0.5 * log_vars[c]).exp() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let d = PredictiveDistribution { means, log_vars, draws };
        let y: f64 = rng.random_range(-2.0..2.0);
        let analytic = d.cdf(y + 0.5) - d.cdf(y - 0.5);
        let counted = d.draws.iter().filter(|&&x| (x - y).abs() <= 0.5).count() as f64 / d.draws.len() as f64;
        assert!((analytic - counted).abs() < 5e-3, "{analytic} vs {counted}");
        assert!((log_score_one(&d, y) + analytic.ln()).abs() < 1e-12);
    }
}

#[test]
fn forecasts_are_reproducible() {
    let model = tiny_model(5);
    let prefix = &model.references.seasons[0].values[..6].to_vec();
    let a = forecast(&model, prefix, &opts(300, 3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = forecast(&model, prefix, &opts(300, 3), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    let c = forecast(&model, prefix, &opts(300, 3), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert_ne!(a, c);
    assert_eq!(a.draws.len(), 900);
}

#[test]
fn checkpoint_reload_forecasts_identically() {
    let model = tiny_model(6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_model(&path, &model).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(to_bytes(&back).unwrap(), to_bytes(&model).unwrap());
    let prefix = model.references.seasons[1].values[..4].to_vec();
    let a = forecast(&model, &prefix, &opts(200, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = forecast(&back, &prefix, &opts(200, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);

    let mut bytes = to_bytes(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x20;
    assert!(from_bytes(&bytes).is_err());
}

#[test]
fn one_step_rollout_equals_direct_forecast() {
    let model = tiny_model(7);
    let f = Forecaster::new(&model).unwrap();
    let prefix = model.references.seasons[2].values[..5].to_vec();
    let direct = f.forecast(&prefix, &opts(500, 1), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let rolled = f.autoregressive(&prefix, 1, 500, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(direct, rolled);
}

#[test]
fn constant_model_rollout_variance() {
    let mut model = tiny_model(8);
    let (mu, var): (f64, f64) = (1.5, 0.36);
    let dims = model.params.dims;
    let mut head = PredictiveHead::zeros(dims.hidden, dims.head_hidden);
    head.mean.layers[1].bias.data_mut()[0] = mu;
    head.log_var.layers[1].bias.data_mut()[0] = var.ln();
    model.params.head = head;
    let n = 100_000;
    let d = Forecaster::new(&model)
        .unwrap()
        .autoregressive(&[1.0, 2.0], 2, n, &mut ChaCha8Rng::seed_from_u64(5))
        .unwrap();
    let (m, _) = mean_and_se(&d.draws);
    let sample_var = d.draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    // standard error of a Gaussian sample variance
    let se = var * (2.0 / (n as f64 - 1.0)).sqrt();
    assert!((sample_var - var).abs() < 3.0 * se, "{sample_var} vs {var}");
    assert!(d.means.iter().all(|&x| x == mu));
}

#[test]
fn zero_parents_draw_z_from_the_standard_prior() {
    let model = tiny_model(9);
    let prefix = model.references.seasons[0].values[..8].to_vec();
    let o = ForecastOptions {
        zero_parents: true,
        ..opts(400, 2)
    };
    let a = forecast(&model, &prefix, &o, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let b = forecast(&model, &prefix, &opts(400, 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a.components(), 400);
    assert_ne!(a.means, b.means);
    assert!(a.draws.iter().all(|v| v.is_finite()));
}
