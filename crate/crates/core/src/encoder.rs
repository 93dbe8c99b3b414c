//! Probabilistic sequence encoder: GRU, self-attention pooling, and the
//! Gaussian embedding heads.
//!
//! Attention pooling turns the `t x t` scaled dot-product score matrix into
//! one weight per time step by averaging the scores each step receives over
//! all queries, then normalizing with a softmax. Because scores are linear
//! in the query, the averaged score for key `j` equals `mean(q) . k_j / sqrt(d)`,
//! which is how it is evaluated here. For a sequence of length `T` the
//! prefix summaries for every `t <= T` come out of one causal pass: row
//! `t - 1` only sees queries and keys from the first `t` steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Binder, Mlp, MlpVars, uniform};
use crate::tape::{concat_rows, Tape, Var};
use crate::tensor::Tensor;

/// Large negative additive mask; softmax maps it to exactly zero weight.
const MASKED: f64 = -1.0e30;

/// Single-layer GRU over a scalar input series.
///
/// Gates follow the usual convention:
/// `r = s(x Wir + bir + h Whr + bhr)`, `z = s(x Wiz + biz + h Whz + bhz)`,
/// `n = tanh(x Win + bin + r * (h Whn + bhn))`, `h' = (1 - z) * n + z * h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_ir: Tensor,
    pub w_iz: Tensor,
    pub w_in: Tensor,
    pub w_hr: Tensor,
    pub w_hz: Tensor,
    pub w_hn: Tensor,
    pub b_ir: Tensor,
    pub b_iz: Tensor,
    pub b_in: Tensor,
    pub b_hr: Tensor,
    pub b_hz: Tensor,
    pub b_hn: Tensor,
}

impl GruParams {
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let b = 1.0 / (hidden as f64).sqrt();
        let mut m = |shape: &[usize]| uniform(shape, b, rng);
        GruParams {
            w_ir: m(&[1, hidden]),
            w_iz: m(&[1, hidden]),
            w_in: m(&[1, hidden]),
            w_hr: m(&[hidden, hidden]),
            w_hz: m(&[hidden, hidden]),
            w_hn: m(&[hidden, hidden]),
            b_ir: m(&[1, hidden]),
            b_iz: m(&[1, hidden]),
            b_in: m(&[1, hidden]),
            b_hr: m(&[1, hidden]),
            b_hz: m(&[1, hidden]),
            b_hn: m(&[1, hidden]),
        }
    }

    pub fn zeros(hidden: usize) -> Self {
        let z = |shape: &[usize]| Tensor::zeros(shape);
        GruParams {
            w_ir: z(&[1, hidden]),
            w_iz: z(&[1, hidden]),
            w_in: z(&[1, hidden]),
            w_hr: z(&[hidden, hidden]),
            w_hz: z(&[hidden, hidden]),
            w_hn: z(&[hidden, hidden]),
            b_ir: z(&[1, hidden]),
            b_iz: z(&[1, hidden]),
            b_in: z(&[1, hidden]),
            b_hr: z(&[1, hidden]),
            b_hz: z(&[1, hidden]),
            b_hn: z(&[1, hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hr.rows()
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.w_ir, &self.w_iz, &self.w_in, &self.w_hr, &self.w_hz, &self.w_hn, &self.b_ir,
            &self.b_iz, &self.b_in, &self.b_hr, &self.b_hz, &self.b_hn,
        ]
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.extend(self.tensors());
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.extend([
            &mut self.w_ir,
            &mut self.w_iz,
            &mut self.w_in,
            &mut self.w_hr,
            &mut self.w_hz,
            &mut self.w_hn,
            &mut self.b_ir,
            &mut self.b_iz,
            &mut self.b_in,
            &mut self.b_hr,
            &mut self.b_hz,
            &mut self.b_hn,
        ]);
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> Result<GruVars<'t>> {
        let v = self
            .tensors()
            .iter()
            .map(|t| b.bind(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(GruVars {
            w_ir: v[0],
            w_iz: v[1],
            w_in: v[2],
            w_hr: v[3],
            w_hz: v[4],
            w_hn: v[5],
            b_ir: v[6],
            b_iz: v[7],
            b_in: v[8],
            b_hr: v[9],
            b_hz: v[10],
            b_hn: v[11],
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars<'t> {
    pub w_ir: Var<'t>,
    pub w_iz: Var<'t>,
    pub w_in: Var<'t>,
    pub w_hr: Var<'t>,
    pub w_hz: Var<'t>,
    pub w_hn: Var<'t>,
    pub b_ir: Var<'t>,
    pub b_iz: Var<'t>,
    pub b_in: Var<'t>,
    pub b_hr: Var<'t>,
    pub b_hz: Var<'t>,
    pub b_hn: Var<'t>,
}

impl<'t> GruVars<'t> {
    fn gate(&self, x: &Var<'t>, h: &Var<'t>, wi: &Var<'t>, bi: &Var<'t>, wh: &Var<'t>, bh: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(wi)?
            .add_row(bi)?
            .add(&h.matmul(wh)?.add_row(bh)?)?
            .sigmoid()
    }

    /// One recurrence step for a batch: `x` is `B x 1`, `h` is `B x H`.
    pub fn step(&self, x: &Var<'t>, h: &Var<'t>) -> Result<Var<'t>> {
        let r = self.gate(x, h, &self.w_ir, &self.b_ir, &self.w_hr, &self.b_hr)?;
        let z = self.gate(x, h, &self.w_iz, &self.b_iz, &self.w_hz, &self.b_hz)?;
        let hn = h.matmul(&self.w_hn)?.add_row(&self.b_hn)?;
        let n = x
            .matmul(&self.w_in)?
            .add_row(&self.b_in)?
            .add(&r.mul(&hn)?)?
            .tanh()?;
        z.one_minus()?.mul(&n)?.add(&z.mul(h)?)
    }

    /// Runs every sequence from a zero state. Returns one `T_s x H` matrix of
    /// hidden states per sequence. Sequences may differ in length; shorter
    /// ones are zero padded at the end, which cannot affect earlier states.
    pub fn run(&self, sequences: &[&[f64]]) -> Result<Vec<Var<'t>>> {
        if sequences.is_empty() {
            return Err(Error::contract("gru: no sequences"));
        }
        if let Some(i) = sequences.iter().position(|s| s.is_empty()) {
            return Err(Error::contract(format!("gru: sequence {i} is empty")));
        }
        let tape = self.w_hr.tape();
        let batch = sequences.len();
        let hidden = self.w_hr.rows();
        let steps = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut h = tape.constant(Tensor::zeros(&[batch, hidden]))?;
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let col: Vec<f64> = sequences
                .iter()
                .map(|s| s.get(t).copied().unwrap_or(0.0))
                .collect();
            let x = tape.constant(Tensor::column(col)?)?;
            h = self.step(&x, &h)?;
            states.push(h);
        }
        if batch == 1 {
            return Ok(vec![concat_rows(&states)?]);
        }
        let stacked = concat_rows(&states)?;
        sequences
            .iter()
            .enumerate()
            .map(|(s, seq)| {
                let idx: Vec<usize> = (0..seq.len()).map(|t| t * batch + s).collect();
                stacked.gather_rows(&idx)
            })
            .collect()
    }
}

/// Single-head query/key projections used for attention pooling.
///
/// Pooling returns a convex combination of the input rows themselves, so
/// there is no value projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub query: Tensor,
    pub key: Tensor,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let b = 1.0 / (dim as f64).sqrt();
        AttentionParams {
            query: uniform(&[dim, dim], b, rng),
            key: uniform(&[dim, dim], b, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        AttentionParams {
            query: Tensor::zeros(&[dim, dim]),
            key: Tensor::zeros(&[dim, dim]),
        }
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> Result<AttentionVars<'t>> {
        Ok(AttentionVars {
            query: b.bind(&self.query)?,
            key: b.bind(&self.key)?,
        })
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.query);
        out.push(&self.key);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.query);
        out.push(&mut self.key);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars<'t> {
    pub query: Var<'t>,
    pub key: Var<'t>,
}

impl<'t> AttentionVars<'t> {
    fn scale(&self) -> f64 {
        1.0 / (self.query.cols() as f64).sqrt()
    }

    /// Causal pooled scores for a `T x d` sequence: entry `(t, j)` is the
    /// averaged attention score key `j` receives from queries `0..=t`, and
    /// entries with `j > t` are masked out.
    pub fn causal_scores(&self, hidden: &Var<'t>) -> Result<Var<'t>> {
        let tape = hidden.tape();
        let steps = hidden.rows();
        let mut avg = Tensor::zeros(&[steps, steps]);
        let mut mask = Tensor::zeros(&[steps, steps]);
        for t in 0..steps {
            for j in 0..steps {
                if j <= t {
                    avg.data_mut()[t * steps + j] = 1.0 / (t + 1) as f64;
                } else {
                    mask.data_mut()[t * steps + j] = MASKED;
                }
            }
        }
        let q = hidden.matmul(&self.query)?;
        let k = hidden.matmul(&self.key)?;
        let mean_q = tape.constant(avg)?.matmul(&q)?;
        mean_q
            .matmul_nt(&k)?
            .scale(self.scale())?
            .add(&tape.constant(mask)?)
    }

    /// Prefix summaries of a `T x d` sequence. Returns the `T x T` weight
    /// matrix (row `t - 1` holds the weights for the length-`t` prefix) and
    /// the `T x d` matrix of pooled summaries.
    pub fn causal_pool(&self, hidden: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let alpha = self.causal_scores(hidden)?.softmax_last()?;
        let pooled = alpha.matmul(hidden)?;
        Ok((alpha, pooled))
    }

    /// Pools `G` independent sets of `n` rows each (stacked as `G*n x d`).
    /// Returns the `G x n` weights and the `G x d` pooled vectors.
    pub fn grouped_pool(&self, rows: &Var<'t>, n: usize) -> Result<(Var<'t>, Var<'t>)> {
        if n == 0 || rows.rows() % n != 0 {
            return Err(Error::contract(format!(
                "attention pool: {} rows do not split into sets of {n}",
                rows.rows()
            )));
        }
        let groups = rows.rows() / n;
        let mean_q = rows
            .segment_sum_rows(n)?
            .scale(1.0 / n as f64)?
            .matmul(&self.query)?;
        let k = rows.matmul(&self.key)?;
        let scores = k
            .mul(&mean_q.repeat_rows(n)?)?
            .sum_last()?
            .scale(self.scale())?
            .reshape(&[groups, n])?;
        let weights = scores.softmax_last()?;
        let pooled = rows
            .mul_col(&weights.reshape(&[groups * n, 1])?)?
            .segment_sum_rows(n)?;
        Ok((weights, pooled))
    }
}

/// The two embedding perceptrons `g1` (mean) and `g2` (log-variance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingHeads {
    pub mean: Mlp,
    pub log_var: Mlp,
}

impl EmbeddingHeads {
    /// Three linear layers `d -> d -> d -> d`.
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        EmbeddingHeads {
            mean: Mlp::init(&[dim; 4], rng),
            log_var: Mlp::init(&[dim; 4], rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingHeads {
            mean: Mlp::zeros(&[dim; 4]),
            log_var: Mlp::zeros(&[dim; 4]),
        }
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> Result<EmbeddingVars<'t>> {
        Ok(EmbeddingVars {
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
pub struct EmbeddingVars<'t> {
    pub mean: MlpVars<'t>,
    pub log_var: MlpVars<'t>,
}

impl<'t> EmbeddingVars<'t> {
    pub fn forward(&self, summary: &Var<'t>) -> Result<DiagonalGaussian<'t>> {
        Ok(DiagonalGaussian {
            mean: self.mean.forward(summary)?,
            log_var: self.log_var.forward(summary)?,
        })
    }
}

/// Row-wise diagonal Gaussians: each row of `mean`/`log_var` is one distribution.
#[derive(Debug, Clone, Copy)]
pub struct DiagonalGaussian<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
}

impl<'t> DiagonalGaussian<'t> {
    pub fn new(mean: Var<'t>, log_var: Var<'t>) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::contract(format!(
                "gaussian: mean {:?} vs log-variance {:?}",
                mean.shape(),
                log_var.shape()
            )));
        }
        Ok(DiagonalGaussian { mean, log_var })
    }

    /// `rows` independent standard normals of dimension `dim`.
    pub fn standard(tape: &'t Tape, rows: usize, dim: usize) -> Result<Self> {
        Ok(DiagonalGaussian {
            mean: tape.constant(Tensor::zeros(&[rows, dim]))?,
            log_var: tape.constant(Tensor::zeros(&[rows, dim]))?,
        })
    }

    /// `mean + exp(log_var / 2) * noise`, differentiable in both parameters.
    pub fn reparameterize(&self, noise: &Var<'t>) -> Result<Var<'t>> {
        if noise.shape() != self.mean.shape() {
            return Err(Error::contract(format!(
                "reparameterize: noise {:?} vs mean {:?}",
                noise.shape(),
                self.mean.shape()
            )));
        }
        self.log_var.scale(0.5)?.exp()?.mul(noise)?.add(&self.mean)
    }

    /// Log density of each row of `x`, summed over dimensions (`rows x 1`).
    pub fn log_density(&self, x: &Var<'t>) -> Result<Var<'t>> {
        if x.shape() != self.mean.shape() {
            return Err(Error::contract(format!(
                "log_density: point {:?} vs mean {:?}",
                x.shape(),
                self.mean.shape()
            )));
        }
        let dim = self.mean.cols() as f64;
        let sq = x.sub(&self.mean)?.square()?;
        let scaled = sq.mul(&self.log_var.neg()?.exp()?)?;
        scaled
            .add(&self.log_var)?
            .sum_last()?
            .scale(-0.5)?
            .add_scalar(-0.5 * dim * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Encoder parameters: GRU, pooling attention, and embedding heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub gru: GruParams,
    pub attention: AttentionParams,
    pub heads: EmbeddingHeads,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        EncoderParams {
            gru: GruParams::init(hidden, rng),
            attention: AttentionParams::init(hidden, rng),
            heads: EmbeddingHeads::init(hidden, rng),
        }
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> Result<EncoderVars<'t>> {
        Ok(EncoderVars {
            gru: self.gru.bind(b)?,
            attention: self.attention.bind(b)?,
            heads: self.heads.bind(b)?,
        })
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        self.gru.visit(out);
        self.attention.visit(out);
        self.heads.visit(out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.gru.visit_mut(out);
        self.attention.visit_mut(out);
        self.heads.visit_mut(out);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderVars<'t> {
    pub gru: GruVars<'t>,
    pub attention: AttentionVars<'t>,
    pub heads: EmbeddingVars<'t>,
}

impl<'t> EncoderVars<'t> {
    /// Summaries of every prefix of every sequence: one `T_s x d` matrix per
    /// sequence whose row `t - 1` is the pooled summary of `x^(1..t)`.
    pub fn prefix_summaries(&self, sequences: &[&[f64]]) -> Result<Vec<Var<'t>>> {
        self.gru
            .run(sequences)?
            .iter()
            .map(|h| Ok(self.attention.causal_pool(h)?.1))
            .collect()
    }

    /// Summaries of whole sequences (`N x d`, one row per sequence).
    pub fn summaries(&self, sequences: &[&[f64]]) -> Result<Var<'t>> {
        let all = self.prefix_summaries(sequences)?;
        let lasts = all
            .iter()
            .map(|s| s.gather_rows(&[s.rows() - 1]))
            .collect::<Result<Vec<_>>>()?;
        concat_rows(&lasts)
    }

    /// Embedding distributions of whole sequences.
    pub fn encode(&self, sequences: &[&[f64]]) -> Result<DiagonalGaussian<'t>> {
        self.heads.forward(&self.summaries(sequences)?)
    }
}

/// Hidden states of one sequence, evaluated outside any training tape.
pub fn gru_forward(params: &GruParams, sequence: &[f64]) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = params.bind(&mut Binder::new(&tape, false))?;
    let h = vars.run(&[sequence])?;
    Ok(h[0].tensor())
}

/// Attention weights over the rows of `hidden` (`t x d`) and the pooled summary.
pub fn attention_summary(params: &AttentionParams, hidden: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if hidden.rows() == 0 {
        return Err(Error::contract("attention: empty hidden sequence"));
    }
    let tape = Tape::new();
    let vars = params.bind(&mut Binder::new(&tape, false))?;
    let h = tape.constant(hidden.clone())?;
    let (alpha, pooled) = vars.causal_pool(&h)?;
    let last = h.rows() - 1;
    let weights = alpha.value().row_slice(last).to_vec();
    let summary = pooled.value().row_slice(last).to_vec();
    Ok((weights, summary))
}

/// Mean and log-variance of the embedding of one sequence.
pub fn encode(params: &EncoderParams, sequence: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let vars = params.bind(&mut Binder::new(&tape, false))?;
    let g = vars.encode(&[sequence])?;
    let mean = g.mean.value().data().to_vec();
    let log_var = g.log_var.value().data().to_vec();
    Ok((mean, log_var))
}
