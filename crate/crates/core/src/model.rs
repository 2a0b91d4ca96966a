//! Captioning model: a decoder (twin or baseline) plus the grounding head,
//! with teacher-forced forward passes and single-step inference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{RegionContext, RegionFeatures};
use crate::data::{subcategory_word, Grounding, SceneRecord, Vocab};
use crate::decoder::{Decoder, DecoderKind, Dims, MetaDropout, RecurrentState, StepOutput};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grounding::{best_region, GroundingHead, GroundingVars, PointerKeys};
use crate::nn::{InitConfig, Mode};
use crate::params::ParamStore;
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: DecoderKind,
    pub embed: usize,
    pub hidden: usize,
    pub att_dim: usize,
    pub feature_dim: usize,
    pub dropout: MetaDropout,
    pub init: InitConfig,
}

impl ModelConfig {
    pub fn dims(&self, vocab: usize) -> Dims {
        Dims {
            vocab,
            embed: self.embed,
            hidden: self.hidden,
            feature_dim: self.feature_dim,
            att_dim: self.att_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("att_dim", self.att_dim),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let d = &self.dropout;
        for (name, r) in [("left", d.left), ("right", d.right), ("joint", d.joint), ("output", d.output)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{name} dropout rate must be in [0, 1), got {r}")));
            }
        }
        Ok(())
    }
}

/// What the model should emit at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Word(usize),
    Region { region: usize, plural: bool, subcategory: usize },
}

impl Target {
    /// Index into the composed distribution over `vocab + K` entries.
    pub fn entry(&self, vocab: usize) -> usize {
        match *self {
            Target::Word(w) => w,
            Target::Region { region, .. } => vocab + region,
        }
    }
}

/// Teacher-forcing inputs `[BOS, w1..wn]` and targets `[w1..wn, EOS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSequence {
    pub inputs: Vec<usize>,
    pub targets: Vec<Target>,
}

pub fn teacher_sequence(record: &SceneRecord, vocab: &Vocab) -> TeacherSequence {
    let mut inputs = vec![Vocab::BOS];
    let mut targets = Vec::with_capacity(record.tokens.len() + 1);
    for (tok, g) in record.tokens.iter().zip(&record.grounding) {
        let idx = vocab.index_or_unk(tok);
        inputs.push(idx);
        targets.push(match *g {
            Grounding::Textual => Target::Word(idx),
            Grounding::Visual { region, plural, subcategory } => Target::Region { region, plural, subcategory },
        });
    }
    targets.push(Target::Word(Vocab::EOS));
    TeacherSequence { inputs, targets }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: Dims,
    pub decoder: Decoder,
    pub head: GroundingHead,
}

/// Per-image graph nodes shared across timesteps.
#[derive(Clone, Copy, Debug)]
pub struct ImageContext {
    pub regions: RegionContext,
    pub pointer: PointerKeys,
}

/// Values produced by one inference step.
#[derive(Clone, Debug)]
pub struct InferStep {
    /// `log P_full`, textual entries first, then one per region.
    pub log_probs: Vec<f64>,
    /// Arg-max `(plural, sub-category)` of slot filling for every region.
    pub slots: Vec<(bool, usize)>,
    pub state: RecurrentState<Tensor>,
}

impl Model {
    /// Registers every parameter into a fresh store, drawing initial values
    /// from the `init` stream of `seed`.
    pub fn build(config: &ModelConfig, vocab: &Vocab, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let dims = config.dims(vocab.len());
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "init");
        let decoder = Decoder::register(config.kind, &mut store, &dims, config.dropout, &config.init, &mut rng)?;
        let head = GroundingHead::register(
            &mut store,
            &dims,
            decoder.embed(),
            vocab.subcategory_rows()?,
            &config.init,
            &mut rng,
        )?;
        Ok((
            Model {
                config: config.clone(),
                dims,
                decoder,
                head,
            },
            store,
        ))
    }

    pub fn kind(&self) -> DecoderKind {
        self.decoder.kind()
    }

    pub fn image_context(&self, g: &mut Graph<'_>, regions: &RegionFeatures) -> Result<ImageContext> {
        if regions.feature_dim() != self.dims.feature_dim {
            return Err(Error::Config(format!(
                "region features have {} dimensions, model expects {}",
                regions.feature_dim(),
                self.dims.feature_dim
            )));
        }
        let rc = RegionContext::new(g, regions, self.decoder.attention())?;
        let pointer = self.head.pointer_keys(g, &rc)?;
        Ok(ImageContext { regions: rc, pointer })
    }

    /// One decoder step followed by the grounding head.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        ctx: &ImageContext,
        state: &RecurrentState<Var>,
        token: usize,
        slot_region: Option<usize>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(StepOutput, GroundingVars)> {
        let out = self.decoder.step(g, state, token, &ctx.regions, mode, rng)?;
        let head = self.head.forward(g, &out, &ctx.regions, &ctx.pointer, slot_region)?;
        Ok((out, head))
    }

    /// Teacher-forced pass over a whole caption; one head output per target.
    pub fn forward_teacher(
        &self,
        g: &mut Graph<'_>,
        regions: &RegionFeatures,
        seq: &TeacherSequence,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Vec<GroundingVars>> {
        let ctx = self.image_context(g, regions)?;
        let mut state = self.decoder.init_state().to_graph(g);
        let mut outs = Vec::with_capacity(seq.targets.len());
        for (&token, target) in seq.inputs.iter().zip(&seq.targets) {
            let slot = match *target {
                Target::Region { region, .. } => Some(region),
                Target::Word(_) => None,
            };
            let (step, head) = self.step(g, &ctx, &state, token, slot, mode, rng)?;
            state = step.state;
            outs.push(head);
        }
        Ok(outs)
    }

    /// Eval-mode step on plain values, for generation.
    pub fn infer_step(
        &self,
        store: &ParamStore,
        regions: &RegionFeatures,
        state: &RecurrentState<Tensor>,
        token: usize,
    ) -> Result<InferStep> {
        let mut g = Graph::new(store);
        let ctx = self.image_context(&mut g, regions)?;
        let sv = state.to_graph(&mut g);
        // Eval mode never draws from the stream.
        let mut rng = rng_for(0, "unused");
        let (out, head) = self.step(&mut g, &ctx, &sv, token, Some(0), Mode::Eval, &mut rng)?;
        let k = regions.k();
        let log_txt = g.value(head.log_txt).data();
        let log_r = g.value(head.log_r).data();
        let log_sentinel = log_r[k];
        let mut log_probs: Vec<f64> = log_txt.iter().map(|&l| l + log_sentinel).collect();
        log_probs.extend_from_slice(&log_r[..k]);

        let mut slots = Vec::with_capacity(k);
        for region in 0..k {
            let (pp, psc) = self.head.slot_fill(&mut g, &ctx.regions, region, out.h)?;
            let plural = best_region(g.value(pp).data()) == 1;
            slots.push((plural, best_region(g.value(psc).data())));
        }
        Ok(InferStep {
            log_probs,
            slots,
            state: out.state.to_values(&g),
        })
    }

    /// Surface word for a chosen region slot.
    pub fn slot_word(plural: bool, subcategory: usize) -> &'static str {
        subcategory_word(subcategory, plural)
    }
}

/// Per-item dropout stream, independent of batch composition and worker
/// count.
pub fn item_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    rng_for(seed, &format!("dropout/{epoch}/{index}"))
}
