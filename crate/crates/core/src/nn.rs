//! Neural building blocks on top of the graph: LSTM cell, embeddings,
//! dropout and the single-layer ReLU feed-forward nets.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Weight initialisation. Weights are uniform in `[-scale, scale]`; the
/// LSTM forget-gate bias starts at `forget_bias`, other biases at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitConfig {
    pub scale: f64,
    pub forget_bias: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            scale: 0.08,
            forget_bias: 1.0,
        }
    }
}

pub fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if scale > 0.0 {
        for x in t.data_mut() {
            *x = rng.random_range(-scale..=scale);
        }
    }
    t
}

/// Hidden and cell vectors of one LSTM. Generic so the same layout holds
/// graph nodes during a step and plain tensors between steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LstmState<T> {
    pub h: T,
    pub c: T,
}

impl<T> LstmState<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LstmState<U> {
        LstmState {
            h: f(&self.h),
            c: f(&self.c),
        }
    }
}

impl LstmState<Tensor> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }
}

/// Gate blocks are stacked in the order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: &InitConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w_ih = store.insert(format!("{prefix}.w_ih"), uniform(&[4 * hidden, input], init.scale, rng))?;
        let w_hh = store.insert(format!("{prefix}.w_hh"), uniform(&[4 * hidden, hidden], init.scale, rng))?;
        let mut b = Tensor::zeros(&[4 * hidden]);
        for x in &mut b.data_mut()[hidden..2 * hidden] {
            *x = init.forget_bias;
        }
        let bias = store.insert(format!("{prefix}.bias"), b)?;
        Ok(LstmParams {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    pub fn num_scalars(&self) -> usize {
        4 * self.hidden * (self.input + self.hidden + 1)
    }

    /// One LSTM update:
    /// `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, prev: &LstmState<Var>) -> Result<LstmState<Var>> {
        let d = self.hidden;
        let xs = g.value(x).shape().to_vec();
        if xs != [self.input] {
            return Err(shape_err("lstm_step input", &xs, &[self.input]));
        }
        for v in [prev.h, prev.c] {
            let s = g.value(v).shape();
            if s != [d] {
                return Err(shape_err("lstm_step state", s, &[d]));
            }
        }
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let bias = g.param(self.bias);
        let a = g.matmul(w_ih, x)?;
        let b = g.matmul(w_hh, prev.h)?;
        let pre = g.add(a, b)?;
        let pre = g.add(pre, bias)?;

        let i_pre = g.slice(pre, 0, d)?;
        let f_pre = g.slice(pre, d, d)?;
        let c_pre = g.slice(pre, 2 * d, d)?;
        let o_pre = g.slice(pre, 3 * d, d)?;
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let cand = g.tanh(c_pre);
        let o = g.sigmoid(o_pre);

        let keep = g.mul(f, prev.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// Inverted dropout. In eval mode, or at rate 0, returns `x` itself.
pub fn dropout_apply(
    g: &mut Graph<'_>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let shape = g.value(x).shape().to_vec();
    let mut mask = Tensor::zeros(&shape);
    for m in mask.data_mut() {
        let u: f64 = rng.random();
        *m = if u < rate { 0.0 } else { keep_scale };
    }
    let mask = g.constant(mask);
    g.mul(x, mask)
}

/// Row `token` of an embedding table.
pub fn embed_lookup(g: &mut Graph<'_>, table: Var, token: usize) -> Result<Var> {
    let rows = g.value(table).rows();
    if token >= rows {
        return Err(Error::Index {
            op: "embed_lookup",
            index: token,
            len: rows,
        });
    }
    g.row(table, token)
}

/// `max(0, W x + b)`.
pub fn relu_ff(g: &mut Graph<'_>, weight: Var, bias: Var, x: Var) -> Result<Var> {
    let wx = g.matmul(weight, x)?;
    let pre = g.add(wx, bias)?;
    Ok(g.relu(pre))
}

/// Registered weights of one [`relu_ff`] layer.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl FeedForward {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        init: &InitConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.insert(format!("{prefix}.weight"), uniform(&[output, input], init.scale, rng))?;
        let bias = store.insert(format!("{prefix}.bias"), Tensor::zeros(&[output]))?;
        Ok(FeedForward { weight, bias })
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        relu_ff(g, w, b, x)
    }
}
