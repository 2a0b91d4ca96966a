#![allow(dead_code)]

use ntt_core::decoder::{Decoder, DecoderKind, Dims, MetaDropout};
use ntt_core::gradcheck::{finite_diff_check, GradCheckReport};
use ntt_core::grounding::GroundingHead;
use ntt_core::model::{Model, ModelConfig, Target, TeacherSequence};
use ntt_core::nn::{uniform, InitConfig, Mode};
use ntt_core::seed::rng_for;
use ntt_core::train::{composite_loss, LossWeights};
use ntt_core::attention::RegionFeatures;
use ntt_core::ParamStore;

/// Model with d = e = 8, K = 3, S = 12 and three sub-categories, built
/// without a corpus vocabulary.
pub fn small_model(kind: DecoderKind, seed: u64) -> (Model, ParamStore) {
    let dims = Dims {
        vocab: 12,
        embed: 8,
        hidden: 8,
        feature_dim: 6,
        att_dim: 8,
    };
    let init = InitConfig {
        scale: 0.5,
        forget_bias: 1.0,
    };
    let config = ModelConfig {
        kind,
        embed: dims.embed,
        hidden: dims.hidden,
        att_dim: dims.att_dim,
        feature_dim: dims.feature_dim,
        dropout: MetaDropout::default(),
        init,
    };
    let mut store = ParamStore::new();
    let mut rng = rng_for(seed, "small-model");
    let decoder = Decoder::register(kind, &mut store, &dims, config.dropout, &init, &mut rng).unwrap();
    let head = GroundingHead::register(&mut store, &dims, decoder.embed(), vec![3, 4, 5], &init, &mut rng).unwrap();
    (
        Model {
            config,
            dims,
            decoder,
            head,
        },
        store,
    )
}

pub fn small_regions(seed: u64, k: usize) -> RegionFeatures {
    let mut rng = rng_for(seed, "small-regions");
    RegionFeatures::new(uniform(&[k, 6], 1.0, &mut rng), uniform(&[k, 6], 1.0, &mut rng)).unwrap()
}

pub fn small_sequence() -> TeacherSequence {
    TeacherSequence {
        inputs: vec![0, 4, 7, 3],
        targets: vec![
            Target::Word(4),
            Target::Word(7),
            Target::Region {
                region: 1,
                plural: true,
                subcategory: 2,
            },
            Target::Word(1),
        ],
    }
}

/// Finite-difference check of the composite loss through every parameter
/// of decoder and head, with dropout masks fixed across evaluations.
pub fn full_gradient_check(kind: DecoderKind, tolerance: f64) -> GradCheckReport {
    let (model, store) = small_model(kind, 5);
    let regions = small_regions(6, 3);
    let seq = small_sequence();
    finite_diff_check(
        &store,
        |g| {
            let mut rng = rng_for(9, "fixed-dropout");
            let outs = model.forward_teacher(g, &regions, &seq, Mode::Train, &mut rng)?;
            composite_loss(g, &outs, &seq.targets, 12, &LossWeights::default())
        },
        1e-5,
        tolerance,
    )
    .unwrap()
}
