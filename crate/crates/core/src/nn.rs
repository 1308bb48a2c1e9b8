//! Parameterized layers recorded onto a [`Tape`].

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::LAYER_NORM_EPS;

pub(crate) fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, id: ParamId) -> Var {
    tape.param(id, store.get(id))
}

/// `x W + b`
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), fan_in, fan_out, group, rng);
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), &[1, fan_out], 0.0, group));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = bind(tape, store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = bind(tape, store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), &[1, dim], 1.0, group),
            bias: store.add_const(format!("{name}.bias"), &[1, dim], 0.0, group),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = bind(tape, store, self.gain);
        let b = bind(tape, store, self.bias);
        tape.layer_norm_rows(x, g, b, T::lit(LAYER_NORM_EPS))
    }
}

/// Position-wise two-layer ReLU network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::EncoderDecoder;
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, true, g, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, dim, true, g, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, store, h)
    }
}
