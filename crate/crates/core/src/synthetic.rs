//! Noisy seasonal curves for tests and smoke runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::SeasonSeries;

/// A Gaussian bump on a flat baseline, with per-season jitter in peak
/// week, height and width, plus white observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seasons: usize,
    pub length: usize,
    pub first_year: i32,
    pub baseline: f64,
    pub peak_height: f64,
    pub peak_week: f64,
    pub width: f64,
    /// Std-dev of the peak week shift.
    pub phase_jitter: f64,
    /// Relative std-dev of the peak height.
    pub height_jitter: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seasons: 12,
            length: 33,
            first_year: 2000,
            baseline: 1.0,
            peak_height: 4.0,
            peak_week: 18.0,
            width: 4.0,
            phase_jitter: 3.0,
            height_jitter: 0.2,
            noise_sd: 0.15,
            seed: 7,
        }
    }
}

/// Generates `cfg.seasons` independent seasons; values are clipped at zero.
pub fn generate(cfg: &SyntheticConfig) -> Vec<SeasonSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.seasons)
        .map(|s| {
            let shift: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.phase_jitter;
            let height = cfg.peak_height * (1.0 + cfg.height_jitter * rng.sample::<f64, _>(StandardNormal)).max(0.2);
            let center = cfg.peak_week + shift;
            let values = (0..cfg.length)
                .map(|t| {
                    let d = (t as f64 - center) / cfg.width;
                    let clean = cfg.baseline + height * (-0.5 * d * d).exp();
                    (clean + cfg.noise_sd * rng.sample::<f64, _>(StandardNormal)).max(0.0)
                })
                .collect();
            SeasonSeries::new(cfg.first_year + s as i32, values)
        })
        .collect()
}
