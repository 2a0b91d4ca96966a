//! One top-down attention channel: an attention LSTM whose hidden state
//! queries the region features `V` and the pooled convolutional features
//! `V̄`, producing the input of the channel's language LSTM.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{uniform, InitConfig, LstmParams, LstmState};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-image region features: `v` holds one row per proposed region,
/// `v_conv` the convolutional features pooled from the same proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    v: Tensor,
    v_conv: Tensor,
}

impl RegionFeatures {
    pub fn new(v: Tensor, v_conv: Tensor) -> Result<Self> {
        if v.rank() != 2 || v.shape() != v_conv.shape() {
            return Err(shape_err("RegionFeatures", v.shape(), v_conv.shape()));
        }
        Ok(RegionFeatures { v, v_conv })
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn v_conv(&self) -> &Tensor {
        &self.v_conv
    }

    /// Region count K.
    pub fn k(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.v.shape()[1]
    }
}

/// Additive attention `β = w_βᵀ tanh(W_v F + (W_h h) 1ᵀ)`, `α = softmax(β)`.
/// One instance is shared by every channel and both feature sets.
#[derive(Clone, Debug)]
pub struct AttentionNet {
    pub w_v: ParamId,
    pub w_h: ParamId,
    pub w_beta: ParamId,
}

/// Query-independent part of attention over one feature matrix, computed
/// once per image.
#[derive(Clone, Copy, Debug)]
pub struct AttendKeys {
    pub features_t: Var,
    pub proj: Var,
}

impl AttentionNet {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        feature_dim: usize,
        hidden: usize,
        att_dim: usize,
        init: &InitConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(AttentionNet {
            w_v: store.insert(format!("{prefix}.w_v"), uniform(&[att_dim, feature_dim], init.scale, rng))?,
            w_h: store.insert(format!("{prefix}.w_h"), uniform(&[att_dim, hidden], init.scale, rng))?,
            w_beta: store.insert(format!("{prefix}.w_beta"), uniform(&[att_dim], init.scale, rng))?,
        })
    }

    pub fn keys(&self, g: &mut Graph<'_>, features: Var) -> Result<AttendKeys> {
        if g.value(features).rank() != 2 {
            return Err(shape_err("attend", g.value(features).shape(), &[0, 0]));
        }
        let w_v = g.param(self.w_v);
        let w_v_t = g.transpose(w_v)?;
        let proj = g.matmul(features, w_v_t)?;
        let features_t = g.transpose(features)?;
        Ok(AttendKeys { features_t, proj })
    }

    /// Returns `(α, Σ_i α_i f_i)`.
    pub fn attend(&self, g: &mut Graph<'_>, keys: &AttendKeys, h: Var) -> Result<(Var, Var)> {
        let w_h = g.param(self.w_h);
        let w_beta = g.param(self.w_beta);
        let q = g.matmul(w_h, h)?;
        let pre = g.add_row(keys.proj, q)?;
        let act = g.tanh(pre);
        let beta = g.matmul(act, w_beta)?;
        let alpha = g.softmax(beta)?;
        let attended = g.matmul(keys.features_t, alpha)?;
        Ok((alpha, attended))
    }
}

/// One-shot attention over a `K×d_v` feature node.
pub fn attend(g: &mut Graph<'_>, net: &AttentionNet, features: Var, h: Var) -> Result<(Var, Var)> {
    if g.value(features).rank() == 2 && g.value(features).shape()[0] == 0 {
        return Err(Error::Invalid("attend over zero regions".into()));
    }
    let keys = net.keys(g, features)?;
    net.attend(g, &keys, h)
}

/// Graph-side view of one image, shared by every timestep of a caption.
#[derive(Clone, Copy, Debug)]
pub struct RegionContext {
    pub k: usize,
    pub v: Var,
    pub v_conv: Var,
    pub conv_mean: Var,
    pub keys_v: AttendKeys,
    pub keys_conv: AttendKeys,
}

impl RegionContext {
    pub fn new(g: &mut Graph<'_>, regions: &RegionFeatures, net: &AttentionNet) -> Result<Self> {
        let v = g.constant(regions.v().clone());
        let v_conv = g.constant(regions.v_conv().clone());
        let conv_mean = g.mean_rows(v_conv)?;
        let keys_v = net.keys(g, v)?;
        let keys_conv = net.keys(g, v_conv)?;
        Ok(RegionContext {
            k: regions.k(),
            v,
            v_conv,
            conv_mean,
            keys_v,
            keys_conv,
        })
    }
}

/// `[embed(y); mean_rows(V̄)]`, fed identically to every attention LSTM.
pub fn attention_lstm_input(g: &mut Graph<'_>, embed_y: Var, v_conv: Var) -> Result<Var> {
    let pooled = g.mean_rows(v_conv)?;
    g.concat(&[embed_y, pooled])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelState<T> {
    pub attn: LstmState<T>,
    pub lang: LstmState<T>,
}

impl<T> ChannelState<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ChannelState<U> {
        ChannelState {
            attn: self.attn.map(&mut f),
            lang: self.lang.map(&mut f),
        }
    }
}

impl ChannelState<Tensor> {
    pub fn zeros(hidden: usize) -> Self {
        ChannelState {
            attn: LstmState::zeros(hidden),
            lang: LstmState::zeros(hidden),
        }
    }
}

/// Private recurrent weights of one channel.
#[derive(Clone, Debug)]
pub struct ChannelParams {
    pub attn: LstmParams,
    pub lang: LstmParams,
}

impl ChannelParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        shared_in: usize,
        feature_dim: usize,
        hidden: usize,
        init: &InitConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let attn = LstmParams::register(store, &format!("{prefix}.attn_lstm"), shared_in, hidden, init, rng)?;
        let lang = LstmParams::register(
            store,
            &format!("{prefix}.lang_lstm"),
            lang_input_dim(feature_dim, hidden),
            hidden,
            init,
            rng,
        )?;
        Ok(ChannelParams { attn, lang })
    }
}

pub fn lang_input_dim(feature_dim: usize, hidden: usize) -> usize {
    2 * feature_dim + hidden
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelOutput {
    pub attn: LstmState<Var>,
    pub lang_input: Var,
    pub alpha_v: Var,
    pub alpha_conv: Var,
}

/// Steps the attention LSTM, attends over `V` and `V̄` with its new hidden
/// state and assembles `[att_V; att_V̄; h_attn]`. The caller steps the
/// language LSTM.
pub fn channel_step(
    g: &mut Graph<'_>,
    attn_lstm: &LstmParams,
    state: &ChannelState<Var>,
    shared_in: Var,
    ctx: &RegionContext,
    net: &AttentionNet,
) -> Result<ChannelOutput> {
    let attn = attn_lstm.step(g, shared_in, &state.attn)?;
    let (alpha_v, att_v) = net.attend(g, &ctx.keys_v, attn.h)?;
    let (alpha_conv, att_conv) = net.attend(g, &ctx.keys_conv, attn.h)?;
    let lang_input = g.concat(&[att_v, att_conv, attn.h])?;
    Ok(ChannelOutput {
        attn,
        lang_input,
        alpha_v,
        alpha_conv,
    })
}
