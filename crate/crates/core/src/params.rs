//! The full parameter set and its binding onto a tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionParams, AttentionVars, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::KernelConfig;
use crate::latent::{
    LocalLatentHeads, LocalLatentVars, PosteriorParams, PosteriorVars, PredictiveHead,
    PredictiveVars,
};
use crate::nn::Binder;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Layer widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// GRU hidden size, which is also the embedding and latent dimension.
    pub hidden: usize,
    /// Width of the first layer of the predictive head.
    pub head_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            hidden: 50,
            head_hidden: 50,
        }
    }
}

/// Model variants used for ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Replace the local latent `z` by zeros (and drop its ELBO terms).
    #[serde(default)]
    pub no_local: bool,
    /// Replace the global latent `v` by zeros.
    #[serde(default)]
    pub no_global: bool,
    /// Use the embedding mean instead of sampling `u`.
    #[serde(default)]
    pub deterministic_encoder: bool,
}

/// Weight initialization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` everywhere.
    FanIn,
    /// Fan-in uniform, except that the embedding-mean and predictive-mean
    /// perceptrons get He/LeCun gains (see [`crate::nn::Mlp::rectify`]).
    #[default]
    Rectified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoder: EncoderParams,
    pub kernel: KernelConfig,
    pub local: LocalLatentHeads,
    pub global: AttentionParams,
    pub head: PredictiveHead,
    pub posterior: PosteriorParams,
}

impl ModelParams {
    /// Default-scheme initialization.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, gamma: f64, rng: &mut R) -> Result<Self> {
        Self::init_with(dims, gamma, InitScheme::default(), rng)
    }

    /// Both schemes consume the same random numbers.
    pub fn init_with<R: Rng + ?Sized>(
        dims: ModelDims,
        gamma: f64,
        scheme: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.hidden == 0 || dims.head_hidden == 0 {
            return Err(Error::contract("model dimensions must be positive"));
        }
        let d = dims.hidden;
        let mut p = ModelParams {
            dims,
            encoder: EncoderParams::init(d, rng),
            kernel: KernelConfig::new(gamma)?,
            local: LocalLatentHeads::init(d, rng),
            global: AttentionParams::init(d, rng),
            head: PredictiveHead::init(d, dims.head_hidden, rng),
            posterior: PosteriorParams::init(d, rng),
        };
        if scheme == InitScheme::Rectified {
            p.encoder.heads.mean.rectify();
            p.head.mean.rectify();
        }
        Ok(p)
    }

    /// Every tensor in a fixed order shared by [`Self::tensors_mut`] and
    /// [`Self::bind`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.encoder.visit(&mut out);
        self.kernel.visit(&mut out);
        self.local.visit(&mut out);
        self.global.visit(&mut out);
        self.head.visit(&mut out);
        self.posterior.visit(&mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.encoder.visit_mut(&mut out);
        self.kernel.visit_mut(&mut out);
        self.local.visit_mut(&mut out);
        self.global.visit_mut(&mut out);
        self.head.visit_mut(&mut out);
        self.posterior.visit_mut(&mut out);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        self.tensors()
            .iter()
            .try_for_each(|t| t.check_finite("model parameters"))
    }

    /// Places all parameters on `tape`. With `trainable` they become leaves
    /// (the kernel bandwidth stays constant when `freeze_gamma` is set).
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool, freeze_gamma: bool) -> Result<ModelVars<'t>> {
        let mut b = Binder::new(tape, trainable);
        let encoder = self.encoder.bind(&mut b)?;
        let gamma = self.kernel.bind(&mut b, freeze_gamma)?;
        let local = self.local.bind(&mut b)?;
        let global = self.global.bind(&mut b)?;
        let head = self.head.bind(&mut b)?;
        let posterior = self.posterior.bind(&mut b)?;
        Ok(ModelVars {
            encoder,
            gamma,
            local,
            global,
            head,
            posterior,
            leaves: b.vars().to_vec(),
        })
    }
}

/// Parameters bound onto a tape.
#[derive(Debug, Clone)]
pub struct ModelVars<'t> {
    pub encoder: EncoderVars<'t>,
    /// `exp(log_gamma)`.
    pub gamma: Var<'t>,
    pub local: LocalLatentVars<'t>,
    pub global: AttentionVars<'t>,
    pub head: PredictiveVars<'t>,
    pub posterior: PosteriorVars<'t>,
    /// Bound tensors in [`ModelParams::tensors`] order.
    pub leaves: Vec<Var<'t>>,
}
