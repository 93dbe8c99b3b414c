//! Dense layers, initialization, and parameter binding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fully connected layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: uniform(&[fan_in, fan_out], bound, rng),
            bias: uniform(&[1, fan_out], bound, rng),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> Result<LinearVars<'t>> {
        Ok(LinearVars {
            weight: b.bind(&self.weight)?,
            bias: b.bind(&self.bias)?,
        })
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> LinearVars<'t> {
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

/// Stack of linear layers with rectifiers between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width including input and output.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        Mlp {
            layers: sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect(),
        }
    }

    /// Rescales fan-in uniform weights so the signal survives the
    /// rectifiers: hidden layers become He-uniform `sqrt(6/fan_in)`, the
    /// output layer LeCun-uniform `sqrt(3/fan_in)`. Biases are left alone.
    pub fn rectify(&mut self) {
        let n = self.layers.len();
        for (i, l) in self.layers.iter_mut().enumerate() {
            let gain = if i + 1 < n { 6f64.sqrt() } else { 3f64.sqrt() };
            l.weight.data_mut().iter_mut().for_each(|w| *w *= gain);
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Mlp {
            layers: sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn bind<'t>(&self, b: &mut Binder<'t>) -> Result<MlpVars<'t>> {
        Ok(MlpVars {
            layers: self.layers.iter().map(|l| l.bind(b)).collect::<Result<_>>()?,
        })
    }

    pub(crate) fn visit<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        self.layers.iter().for_each(|l| l.visit(out));
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(out));
    }
}

#[derive(Debug, Clone)]
pub struct MlpVars<'t> {
    pub layers: Vec<LinearVars<'t>>,
}

impl<'t> MlpVars<'t> {
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = *x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Places parameter tensors on a tape, remembering the order of binding.
///
/// Trainable binders create leaves; frozen binders create constants so no
/// gradient work is done for them.
pub struct Binder<'t> {
    tape: &'t Tape,
    trainable: bool,
    vars: Vec<Var<'t>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape, trainable: bool) -> Self {
        Binder {
            tape,
            trainable,
            vars: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&mut self, t: &Tensor) -> Result<Var<'t>> {
        let v = if self.trainable {
            self.tape.leaf(t.clone())?
        } else {
            self.tape.constant(t.clone())?
        };
        self.vars.push(v);
        Ok(v)
    }

    /// Binds `t` as a constant regardless of the binder mode.
    pub fn bind_frozen(&mut self, t: &Tensor) -> Result<Var<'t>> {
        let v = self.tape.constant(t.clone())?;
        self.vars.push(v);
        Ok(v)
    }

    /// Bound variables in binding order.
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Linear::init(25, 4, &mut rng);
        assert!(l.weight.data().iter().all(|v| v.abs() <= 0.2));
        assert!(l.bias.data().iter().all(|v| v.abs() <= 0.2));
    }

    #[test]
    fn mlp_relu_only_between_layers() {
        let tape = Tape::new();
        let mut mlp = Mlp::zeros(&[2, 2, 1]);
        mlp.layers[1].bias = Tensor::row(vec![-3.0]).unwrap();
        let mut b = Binder::new(&tape, true);
        let vars = mlp.bind(&mut b).unwrap();
        let x = tape.constant(Tensor::row(vec![1.0, 1.0]).unwrap()).unwrap();
        // negative output survives: no rectifier after the final layer
        assert_eq!(vars.forward(&x).unwrap().item(), -3.0);
    }
}
