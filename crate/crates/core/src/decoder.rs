//! Twin cascaded attention decoder and the single-channel baseline.
//!
//! Per timestep the twin decoder runs, in order:
//!
//! 1. both channels on the shared input `[embed(y); mean(V̄)]`
//!    (left yields h¹/c¹, right h³/c³);
//! 2. both language LSTMs (h²/c², h⁴/c⁴);
//! 3. the cascaded gates from the ungated states:
//!    `g1 = σ(W_A¹(h¹+c¹))`, `g2 = σ(W_A²(h³+c³)) + g1`,
//!    `g3 = σ(W_A³(h²+c²+h⁴+c⁴)) + g2`;
//! 4. `c² ← g1⊙c²`, `c⁴ ← g2⊙c⁴` (the gated cells are carried forward);
//! 5. the joint LSTM from state `(h²+h⁴, c²+c⁴)` on input
//!    `lang_in¹ + lang_in²`, then `c⁵ ← g3⊙c⁵`;
//! 6. the meta hypothesis
//!    `MH = drop₀.₅(drop₀.₃(h²) + drop₀.₇(h⁴) + drop₀.₈(h⁵))`.
//!
//! Dropout masks are drawn from the caller's generator in the order
//! h², h⁴, h⁵, MH.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{channel_step, lang_input_dim, AttentionNet, ChannelParams, ChannelState, RegionContext};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{dropout_apply, embed_lookup, uniform, InitConfig, LstmParams, LstmState, Mode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Twin,
    Baseline,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecoderKind::Twin => write!(f, "twin"),
            DecoderKind::Baseline => write!(f, "baseline"),
        }
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "twin" => Ok(DecoderKind::Twin),
            "baseline" => Ok(DecoderKind::Baseline),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected twin or baseline)"
            ))),
        }
    }
}

/// Dropout rates of the meta hypothesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaDropout {
    pub left: f64,
    pub right: f64,
    pub joint: f64,
    pub output: f64,
}

impl Default for MetaDropout {
    fn default() -> Self {
        MetaDropout {
            left: 0.3,
            right: 0.7,
            joint: 0.8,
            output: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState<T> {
    pub left: ChannelState<T>,
    pub right: ChannelState<T>,
    pub joint: LstmState<T>,
}

impl<T> DecoderState<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DecoderState<U> {
        DecoderState {
            left: self.left.map(&mut f),
            right: self.right.map(&mut f),
            joint: self.joint.map(&mut f),
        }
    }
}

impl DecoderState<Tensor> {
    pub fn zeros(hidden: usize) -> Self {
        DecoderState {
            left: ChannelState::zeros(hidden),
            right: ChannelState::zeros(hidden),
            joint: LstmState::zeros(hidden),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateSet<T> {
    pub g1: T,
    pub g2: T,
    pub g3: T,
}

#[derive(Clone, Debug)]
pub struct GateParams {
    pub w_a1: ParamId,
    pub w_a2: ParamId,
    pub w_a3: ParamId,
}

impl GateParams {
    pub fn register(store: &mut ParamStore, hidden: usize, init: &InitConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(GateParams {
            w_a1: store.insert("gates.w_a1", uniform(&[hidden, hidden], init.scale, rng))?,
            w_a2: store.insert("gates.w_a2", uniform(&[hidden, hidden], init.scale, rng))?,
            w_a3: store.insert("gates.w_a3", uniform(&[hidden, hidden], init.scale, rng))?,
        })
    }
}

/// Cascaded adaptive gates from the current, not yet gated, states.
pub fn adaptive_gates(g: &mut Graph<'_>, params: &GateParams, state: &DecoderState<Var>) -> Result<GateSet<Var>> {
    let (w1, w2, w3) = (g.param(params.w_a1), g.param(params.w_a2), g.param(params.w_a3));

    let s1 = g.add(state.left.attn.h, state.left.attn.c)?;
    let p1 = g.matmul(w1, s1)?;
    let g1 = g.sigmoid(p1);

    let s2 = g.add(state.right.attn.h, state.right.attn.c)?;
    let p2 = g.matmul(w2, s2)?;
    let own2 = g.sigmoid(p2);
    let g2 = g.add(own2, g1)?;

    let s3 = g.add_all(&[
        state.left.lang.h,
        state.left.lang.c,
        state.right.lang.h,
        state.right.lang.c,
    ])?;
    let p3 = g.matmul(w3, s3)?;
    let own3 = g.sigmoid(p3);
    let g3 = g.add(own3, g2)?;
    Ok(GateSet { g1, g2, g3 })
}

/// `(g1⊙c², g2⊙c⁴, g3⊙c⁵)`.
pub fn apply_gates(g: &mut Graph<'_>, gates: &GateSet<Var>, c2: Var, c4: Var, c5: Var) -> Result<(Var, Var, Var)> {
    Ok((g.mul(gates.g1, c2)?, g.mul(gates.g2, c4)?, g.mul(gates.g3, c5)?))
}

/// Incoming joint-LSTM state `(h²+h⁴, c²+c⁴)` and input `in¹ + in²`.
pub fn joint_fuse(
    g: &mut Graph<'_>,
    left_lang: &LstmState<Var>,
    right_lang: &LstmState<Var>,
    left_in: Var,
    right_in: Var,
) -> Result<(LstmState<Var>, Var)> {
    let h = g.add(left_lang.h, right_lang.h)?;
    let c = g.add(left_lang.c, right_lang.c)?;
    let input = g.add(left_in, right_in)?;
    Ok((LstmState { h, c }, input))
}

pub fn meta_hypothesis(
    g: &mut Graph<'_>,
    h2: Var,
    h4: Var,
    h5: Var,
    rates: &MetaDropout,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    for v in [h4, h5] {
        if g.value(v).shape() != g.value(h2).shape() {
            return Err(shape_err("meta_hypothesis", g.value(h2).shape(), g.value(v).shape()));
        }
    }
    let a = dropout_apply(g, h2, rates.left, mode, rng)?;
    let b = dropout_apply(g, h4, rates.right, mode, rng)?;
    let c = dropout_apply(g, h5, rates.joint, mode, rng)?;
    let sum = g.add_all(&[a, b, c])?;
    dropout_apply(g, sum, rates.output, mode, rng)
}

/// Sizes shared by both decoders and the grounding head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub att_dim: usize,
}

impl Dims {
    pub fn shared_input(&self) -> usize {
        self.embed + self.feature_dim
    }

    pub fn lang_input(&self) -> usize {
        lang_input_dim(self.feature_dim, self.hidden)
    }
}

#[derive(Clone, Debug)]
pub struct TwinDecoder {
    pub embed: ParamId,
    pub attention: AttentionNet,
    pub left: ChannelParams,
    pub right: ChannelParams,
    pub gates: GateParams,
    pub joint: LstmParams,
    pub dropout: MetaDropout,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct BaselineDecoder {
    pub embed: ParamId,
    pub attention: AttentionNet,
    pub channel: ChannelParams,
    pub hidden: usize,
}

/// Everything the grounding head and the next timestep need.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: RecurrentState<Var>,
    /// Word-prediction vector: MH for the twin decoder, the language
    /// hypothesis for the baseline.
    pub hypothesis: Var,
    /// Joint (or language) hypothesis h at this step.
    pub h: Var,
    /// Joint (or language) context after gating.
    pub c: Var,
    /// Joint (or language) hypothesis from the previous step.
    pub h_prev: Var,
    pub shared_input: Var,
    pub gates: Option<GateSet<Var>>,
    pub alphas: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecurrentState<T> {
    Twin(DecoderState<T>),
    Baseline(ChannelState<T>),
}

impl<T> RecurrentState<T> {
    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> RecurrentState<U> {
        match self {
            RecurrentState::Twin(s) => RecurrentState::Twin(s.map(f)),
            RecurrentState::Baseline(s) => RecurrentState::Baseline(s.map(f)),
        }
    }

    /// The hypothesis the sentinel gate reads as "previous".
    pub fn top_h(&self) -> &T {
        match self {
            RecurrentState::Twin(s) => &s.joint.h,
            RecurrentState::Baseline(s) => &s.lang.h,
        }
    }
}

impl RecurrentState<Var> {
    pub fn to_values(&self, g: &Graph<'_>) -> RecurrentState<Tensor> {
        self.map(|&v| g.value(v).clone())
    }
}

impl RecurrentState<Tensor> {
    pub fn to_graph(&self, g: &mut Graph<'_>) -> RecurrentState<Var> {
        self.map(|t| g.constant(t.clone()))
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Twin(TwinDecoder),
    Baseline(BaselineDecoder),
}

impl Decoder {
    pub fn register(
        kind: DecoderKind,
        store: &mut ParamStore,
        dims: &Dims,
        dropout: MetaDropout,
        init: &InitConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embed = store.insert("embed", uniform(&[dims.vocab, dims.embed], init.scale, rng))?;
        let attention = AttentionNet::register(store, "attention", dims.feature_dim, dims.hidden, dims.att_dim, init, rng)?;
        Ok(match kind {
            DecoderKind::Twin => {
                let left = ChannelParams::register(store, "left", dims.shared_input(), dims.feature_dim, dims.hidden, init, rng)?;
                let right = ChannelParams::register(store, "right", dims.shared_input(), dims.feature_dim, dims.hidden, init, rng)?;
                let gates = GateParams::register(store, dims.hidden, init, rng)?;
                let joint = LstmParams::register(store, "joint_lstm", dims.lang_input(), dims.hidden, init, rng)?;
                Decoder::Twin(TwinDecoder {
                    embed,
                    attention,
                    left,
                    right,
                    gates,
                    joint,
                    dropout,
                    hidden: dims.hidden,
                })
            }
            DecoderKind::Baseline => {
                let channel = ChannelParams::register(store, "channel", dims.shared_input(), dims.feature_dim, dims.hidden, init, rng)?;
                Decoder::Baseline(BaselineDecoder {
                    embed,
                    attention,
                    channel,
                    hidden: dims.hidden,
                })
            }
        })
    }

    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::Twin(_) => DecoderKind::Twin,
            Decoder::Baseline(_) => DecoderKind::Baseline,
        }
    }

    pub fn embed(&self) -> ParamId {
        match self {
            Decoder::Twin(d) => d.embed,
            Decoder::Baseline(d) => d.embed,
        }
    }

    pub fn attention(&self) -> &AttentionNet {
        match self {
            Decoder::Twin(d) => &d.attention,
            Decoder::Baseline(d) => &d.attention,
        }
    }

    pub fn init_state(&self) -> RecurrentState<Tensor> {
        match self {
            Decoder::Twin(d) => RecurrentState::Twin(DecoderState::zeros(d.hidden)),
            Decoder::Baseline(d) => RecurrentState::Baseline(ChannelState::zeros(d.hidden)),
        }
    }

    pub fn step(
        &self,
        g: &mut Graph<'_>,
        state: &RecurrentState<Var>,
        token: usize,
        ctx: &RegionContext,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<StepOutput> {
        match (self, state) {
            (Decoder::Twin(d), RecurrentState::Twin(s)) => d.step(g, s, token, ctx, mode, rng),
            (Decoder::Baseline(d), RecurrentState::Baseline(s)) => d.step(g, s, token, ctx),
            _ => Err(Error::Invalid("decoder state does not match decoder kind".into())),
        }
    }
}

fn shared_input(g: &mut Graph<'_>, embed: ParamId, token: usize, ctx: &RegionContext) -> Result<Var> {
    let table = g.param(embed);
    let e = embed_lookup(g, table, token)?;
    g.concat(&[e, ctx.conv_mean])
}

impl TwinDecoder {
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        state: &DecoderState<Var>,
        token: usize,
        ctx: &RegionContext,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<StepOutput> {
        let x = shared_input(g, self.embed, token, ctx)?;
        let left = channel_step(g, &self.left.attn, &state.left, x, ctx, &self.attention)?;
        let right = channel_step(g, &self.right.attn, &state.right, x, ctx, &self.attention)?;
        let lang_l = self.left.lang.step(g, left.lang_input, &state.left.lang)?;
        let lang_r = self.right.lang.step(g, right.lang_input, &state.right.lang)?;

        let ungated = DecoderState {
            left: ChannelState {
                attn: left.attn.clone(),
                lang: lang_l.clone(),
            },
            right: ChannelState {
                attn: right.attn.clone(),
                lang: lang_r.clone(),
            },
            joint: state.joint.clone(),
        };
        let gates = adaptive_gates(g, &self.gates, &ungated)?;
        let c2 = g.mul(gates.g1, lang_l.c)?;
        let c4 = g.mul(gates.g2, lang_r.c)?;
        let lang_l = LstmState { h: lang_l.h, c: c2 };
        let lang_r = LstmState { h: lang_r.h, c: c4 };

        let (joint_prev, joint_in) = joint_fuse(g, &lang_l, &lang_r, left.lang_input, right.lang_input)?;
        let joint = self.joint.step(g, joint_in, &joint_prev)?;
        let c5 = g.mul(gates.g3, joint.c)?;

        let mh = meta_hypothesis(g, lang_l.h, lang_r.h, joint.h, &self.dropout, mode, rng)?;

        Ok(StepOutput {
            state: RecurrentState::Twin(DecoderState {
                left: ChannelState {
                    attn: left.attn,
                    lang: lang_l,
                },
                right: ChannelState {
                    attn: right.attn,
                    lang: lang_r,
                },
                joint: LstmState { h: joint.h, c: c5 },
            }),
            hypothesis: mh,
            h: joint.h,
            c: c5,
            h_prev: state.joint.h,
            shared_input: x,
            gates: Some(gates),
            alphas: vec![left.alpha_v, left.alpha_conv, right.alpha_v, right.alpha_conv],
        })
    }
}

impl BaselineDecoder {
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        state: &ChannelState<Var>,
        token: usize,
        ctx: &RegionContext,
    ) -> Result<StepOutput> {
        let x = shared_input(g, self.embed, token, ctx)?;
        let out = channel_step(g, &self.channel.attn, state, x, ctx, &self.attention)?;
        let lang = self.channel.lang.step(g, out.lang_input, &state.lang)?;
        Ok(StepOutput {
            state: RecurrentState::Baseline(ChannelState {
                attn: out.attn,
                lang: lang.clone(),
            }),
            hypothesis: lang.h,
            h: lang.h,
            c: lang.c,
            h_prev: state.lang.h,
            shared_input: x,
            gates: None,
            alphas: vec![out.alpha_v, out.alpha_conv],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::RegionFeatures;
    use crate::seed::rng_for;
    use crate::tensor::sigmoid;

    fn consts(g: &mut Graph<'_>, vals: &[f64]) -> Var {
        g.constant(Tensor::vector(vals.to_vec()))
    }

    #[test]
    fn zero_state_gates_cascade_to_half_steps() {
        let mut store = ParamStore::new();
        let zero = InitConfig {
            scale: 0.0,
            forget_bias: 0.0,
        };
        let gp = GateParams::register(&mut store, 4, &zero, &mut rng_for(0, "g")).unwrap();
        let mut g = Graph::new(&store);
        let state = DecoderState::zeros(4).map(|t| g.constant(t.clone()));
        let gates = adaptive_gates(&mut g, &gp, &state).unwrap();
        assert!(g.value(gates.g1).data().iter().all(|&x| x == 0.5));
        assert!(g.value(gates.g2).data().iter().all(|&x| x == 1.0));
        assert!(g.value(gates.g3).data().iter().all(|&x| x == 1.5));
    }

    #[test]
    fn gates_match_scalar_loop() {
        let d = 4;
        let mut store = ParamStore::new();
        let init = InitConfig {
            scale: 0.9,
            forget_bias: 1.0,
        };
        let gp = GateParams::register(&mut store, d, &init, &mut rng_for(3, "g")).unwrap();
        let mut rng = rng_for(4, "states");
        let vals: Vec<Tensor> = (0..8).map(|_| uniform(&[d], 1.0, &mut rng)).collect();
        let mut g = Graph::new(&store);
        let v: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let state = DecoderState {
            left: ChannelState {
                attn: LstmState { h: v[0], c: v[1] },
                lang: LstmState { h: v[2], c: v[3] },
            },
            right: ChannelState {
                attn: LstmState { h: v[4], c: v[5] },
                lang: LstmState { h: v[6], c: v[7] },
            },
            joint: LstmState { h: v[0], c: v[0] },
        };
        let gates = adaptive_gates(&mut g, &gp, &state).unwrap();

        let x = |i: usize, j: usize| vals[i].data()[j];
        let affine = |w: ParamId, input: &dyn Fn(usize) -> f64, r: usize| {
            let wd = store.get(w).data();
            (0..d).map(|j| wd[r * d + j] * input(j)).sum::<f64>()
        };
        for r in 0..d {
            let g1 = sigmoid(affine(gp.w_a1, &|j| x(0, j) + x(1, j), r));
            let g2 = sigmoid(affine(gp.w_a2, &|j| x(4, j) + x(5, j), r)) + g1;
            let g3 = sigmoid(affine(gp.w_a3, &|j| x(2, j) + x(3, j) + x(6, j) + x(7, j), r)) + g2;
            assert!((g.value(gates.g1).data()[r] - g1).abs() < 1e-12);
            assert!((g.value(gates.g2).data()[r] - g2).abs() < 1e-12);
            assert!((g.value(gates.g3).data()[r] - g3).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_application_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let ones = consts(&mut g, &[1.0, 1.0]);
        let half = consts(&mut g, &[0.5, 0.5]);
        let c2 = consts(&mut g, &[2.0, 4.0]);
        let c4 = consts(&mut g, &[-1.0, 3.0]);
        let zero = consts(&mut g, &[0.0, 0.0]);
        let gates = GateSet { g1: ones, g2: ones, g3: ones };
        let (a, b, c) = apply_gates(&mut g, &gates, c2, c4, zero).unwrap();
        assert_eq!(g.value(a).data(), &[2.0, 4.0]);
        assert_eq!(g.value(b).data(), &[-1.0, 3.0]);
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);
        let gates = GateSet { g1: half, g2: half, g3: half };
        let (a, _, c) = apply_gates(&mut g, &gates, c2, c4, zero).unwrap();
        assert_eq!(g.value(a).data(), &[1.0, 2.0]);
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn joint_fuse_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = LstmState {
            h: consts(&mut g, &[0.1, 0.2]),
            c: consts(&mut g, &[0.3, -0.4]),
        };
        let lin = consts(&mut g, &[1.0, 2.0, 3.0]);
        let (prev, input) = joint_fuse(&mut g, &l, &l, lin, lin).unwrap();
        assert_eq!(g.value(prev.h).data(), &[0.2, 0.4]);
        assert_eq!(g.value(prev.c).data(), &[0.6, -0.8]);
        assert_eq!(g.value(input).data(), &[2.0, 4.0, 6.0]);

        let z = LstmState {
            h: consts(&mut g, &[0.0, 0.0]),
            c: consts(&mut g, &[0.0, 0.0]),
        };
        let zin = consts(&mut g, &[0.0, 0.0, 0.0]);
        let (prev, input) = joint_fuse(&mut g, &l, &z, lin, zin).unwrap();
        assert_eq!(g.value(prev.h), g.value(l.h));
        assert_eq!(g.value(prev.c), g.value(l.c));
        assert_eq!(g.value(input), g.value(lin));
    }

    #[test]
    fn meta_hypothesis_eval_is_plain_sum() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let h2 = consts(&mut g, &[0.1, -0.7, 0.3]);
        let h4 = consts(&mut g, &[0.2, 0.25, -0.9]);
        let h5 = consts(&mut g, &[-0.05, 0.5, 0.33]);
        let mut rng = rng_for(1, "mh");
        let mh = meta_hypothesis(&mut g, h2, h4, h5, &MetaDropout::default(), Mode::Eval, &mut rng).unwrap();
        let expect: Vec<f64> = (0..3)
            .map(|i| g.value(h2).data()[i] + g.value(h4).data()[i] + g.value(h5).data()[i])
            .collect();
        assert_eq!(g.value(mh).data(), expect.as_slice());

        let z = consts(&mut g, &[0.0; 3]);
        for mode in [Mode::Train, Mode::Eval] {
            let mh = meta_hypothesis(&mut g, z, z, z, &MetaDropout::default(), mode, &mut rng).unwrap();
            assert!(g.value(mh).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn meta_hypothesis_train_expectation() {
        let n = 100_000;
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let mk = |s: f64| Tensor::vector((0..n).map(|i| s * (1.0 + (i % 5) as f64 * 0.1)).collect());
        let h2 = g.constant(mk(0.3));
        let h4 = g.constant(mk(0.5));
        let h5 = g.constant(mk(0.2));
        let mh = meta_hypothesis(&mut g, h2, h4, h5, &MetaDropout::default(), Mode::Train, &mut rng_for(2, "mh")).unwrap();
        let expected: f64 = [h2, h4, h5].iter().map(|&v| g.value(v).sum()).sum();
        let got = g.value(mh).sum();
        assert!((got / expected - 1.0).abs() < 0.03, "{got} vs {expected}");
    }

    fn twin_fixture(seed: u64) -> (ParamStore, Decoder, RegionFeatures) {
        let dims = Dims {
            vocab: 12,
            embed: 8,
            hidden: 8,
            feature_dim: 5,
            att_dim: 8,
        };
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init");
        let init = InitConfig {
            scale: 0.3,
            forget_bias: 1.0,
        };
        let dec = Decoder::register(DecoderKind::Twin, &mut store, &dims, MetaDropout::default(), &init, &mut rng).unwrap();
        let regions = RegionFeatures::new(uniform(&[3, 5], 1.0, &mut rng), uniform(&[3, 5], 1.0, &mut rng)).unwrap();
        (store, dec, regions)
    }

    #[test]
    fn twin_step_is_deterministic() {
        let (store, dec, regions) = twin_fixture(5);
        let run = || {
            let mut g = Graph::new(&store);
            let ctx = RegionContext::new(&mut g, &regions, dec.attention()).unwrap();
            let s = dec.init_state().to_graph(&mut g);
            let mut rng = rng_for(77, "drop");
            let out = dec.step(&mut g, &s, 3, &ctx, Mode::Train, &mut rng).unwrap();
            let out = dec.step(&mut g, &out.state, 4, &ctx, Mode::Train, &mut rng).unwrap();
            (g.value(out.hypothesis).clone(), out.state.to_values(&g))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn symmetric_channels_agree_until_the_cascade_separates_them() {
        let (mut store, dec, regions) = twin_fixture(6);
        let names: Vec<String> = store
            .iter()
            .filter(|(n, _)| n.starts_with("left."))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in names {
            let v = store.by_name(&n).unwrap().clone();
            let id = store.id(&n.replacen("left.", "right.", 1)).unwrap();
            *store.get_mut(id) = v;
        }
        let mut g = Graph::new(&store);
        let ctx = RegionContext::new(&mut g, &regions, dec.attention()).unwrap();
        let s = dec.init_state().to_graph(&mut g);
        let mut rng = rng_for(1, "drop");
        let out = dec.step(&mut g, &s, 5, &ctx, Mode::Eval, &mut rng).unwrap();
        let RecurrentState::Twin(ts) = &out.state else { unreachable!() };
        assert_eq!(g.value(ts.left.lang.h), g.value(ts.right.lang.h));
        assert_eq!(g.value(ts.left.attn.h), g.value(ts.right.attn.h));
        // g2 = σ(..) + g1 differs from g1, so the carried cells differ.
        assert_ne!(g.value(ts.left.lang.c), g.value(ts.right.lang.c));
        let out2 = dec.step(&mut g, &out.state, 7, &ctx, Mode::Eval, &mut rng).unwrap();
        let RecurrentState::Twin(ts2) = &out2.state else { unreachable!() };
        assert_eq!(g.value(ts2.left.attn.h), g.value(ts2.right.attn.h));
    }
}
