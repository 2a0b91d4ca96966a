//! Greedy and beam-search caption generation over the composed word
//! distribution. Choosing a region entry emits the slot-filled word for that
//! region, which is fed back as the next input.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::RegionFeatures;
use crate::data::{subcategory_word, write_atomic, Grounding, SceneRecord, Vocab};
use crate::decoder::RecurrentState;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_MAX_LEN: usize = 20;

/// The resolved word behind one region entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotWord {
    pub token: usize,
    pub plural: bool,
    pub subcategory: usize,
}

#[derive(Clone, Debug)]
pub struct Expansion<S> {
    /// Log-probabilities over `textual_size + K` entries.
    pub log_probs: Vec<f64>,
    /// One resolved word per region entry.
    pub slots: Vec<SlotWord>,
    pub state: S,
}

/// Anything that can score the next entry given a prefix.
pub trait StepModel {
    type State: Clone;

    fn textual_size(&self) -> usize;
    fn start(&self) -> (Self::State, usize);
    fn expand(&self, state: &Self::State, token: usize) -> Result<Expansion<Self::State>>;
    fn eos(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptionToken {
    pub token: usize,
    pub grounding: Grounding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionHypothesis {
    pub tokens: Vec<CaptionToken>,
    /// Entries chosen at each step, including a final EOS if emitted.
    pub entries: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl CaptionHypothesis {
    fn empty() -> Self {
        CaptionHypothesis {
            tokens: Vec::new(),
            entries: Vec::new(),
            log_prob: 0.0,
            finished: false,
        }
    }

    /// Region indices of the visual tokens, in order.
    pub fn regions(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .filter_map(|t| match t.grounding {
                Grounding::Visual { region, .. } => Some(region),
                Grounding::Textual => None,
            })
            .collect()
    }
}

/// Higher log-probability first, then lexicographically smaller entries.
fn rank(a: &CaptionHypothesis, b: &CaptionHypothesis) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.entries.cmp(&b.entries))
}

fn extend<S>(h: &CaptionHypothesis, exp: &Expansion<S>, entry: usize, textual: usize, eos: usize) -> CaptionHypothesis {
    let mut next = h.clone();
    next.entries.push(entry);
    next.log_prob += exp.log_probs[entry];
    if entry == eos {
        next.finished = true;
    } else if entry < textual {
        next.tokens.push(CaptionToken {
            token: entry,
            grounding: Grounding::Textual,
        });
    } else {
        let region = entry - textual;
        let slot = exp.slots[region];
        next.tokens.push(CaptionToken {
            token: slot.token,
            grounding: Grounding::Visual {
                region,
                plural: slot.plural,
                subcategory: slot.subcategory,
            },
        });
    }
    next
}

fn last_input(h: &CaptionHypothesis, bos: usize) -> usize {
    h.tokens.last().map_or(bos, |t| t.token)
}

fn check<S>(exp: &Expansion<S>, textual: usize) -> Result<()> {
    if exp.log_probs.len() != textual + exp.slots.len() || exp.log_probs.iter().any(|l| l.is_nan()) {
        return Err(Error::Invalid(format!(
            "step produced {} entries for {} textual + {} regions",
            exp.log_probs.len(),
            textual,
            exp.slots.len()
        )));
    }
    Ok(())
}

/// Arg-max decoding; ties go to the lowest entry.
pub fn greedy<M: StepModel>(model: &M, max_len: usize) -> Result<CaptionHypothesis> {
    let (mut state, bos) = model.start();
    let textual = model.textual_size();
    let mut hyp = CaptionHypothesis::empty();
    while hyp.entries.len() < max_len {
        let exp = model.expand(&state, last_input(&hyp, bos))?;
        check(&exp, textual)?;
        let mut best = 0;
        for (i, &l) in exp.log_probs.iter().enumerate() {
            if l > exp.log_probs[best] {
                best = i;
            }
        }
        hyp = extend(&hyp, &exp, best, textual, model.eos());
        if hyp.finished {
            return Ok(hyp);
        }
        state = exp.state;
    }
    hyp.finished = true;
    Ok(hyp)
}

/// Length-unnormalised beam search. Hypotheses that emit EOS leave the beam;
/// those still open at `max_len` are closed as they stand.
pub fn beam_search<M: StepModel>(model: &M, beam: usize, max_len: usize) -> Result<CaptionHypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let (start, bos) = model.start();
    let textual = model.textual_size();
    let mut active = vec![(CaptionHypothesis::empty(), start)];
    let mut finished: Vec<CaptionHypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for (hyp, state) in &active {
            let exp = model.expand(state, last_input(hyp, bos))?;
            check(&exp, textual)?;
            let exp = std::rc::Rc::new(exp);
            for entry in 0..exp.log_probs.len() {
                candidates.push((extend(hyp, &exp, entry, textual, model.eos()), exp.clone()));
            }
        }
        candidates.sort_by(|a, b| rank(&a.0, &b.0));
        candidates.truncate(beam);
        active.clear();
        for (hyp, exp) in candidates {
            if hyp.finished {
                finished.push(hyp);
            } else {
                active.push((hyp, exp.state.clone()));
            }
        }
        // Scores only fall as captions grow, so a finished caption at least
        // as good as every open one cannot be beaten.
        let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if active.iter().all(|(h, _)| h.log_prob < best_done) {
            active.clear();
        }
        if active.is_empty() {
            break;
        }
    }
    finished.extend(active.into_iter().map(|(mut h, _)| {
        h.finished = true;
        h
    }));
    finished.sort_by(rank);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::Invalid("beam search produced no hypothesis".into()))
}

/// The captioning model bound to one image.
pub struct SceneModel<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub regions: &'a RegionFeatures,
    pub vocab: &'a Vocab,
}

impl StepModel for SceneModel<'_> {
    type State = RecurrentState<Tensor>;

    fn textual_size(&self) -> usize {
        self.vocab.len()
    }

    fn start(&self) -> (Self::State, usize) {
        (self.model.decoder.init_state(), Vocab::BOS)
    }

    fn eos(&self) -> usize {
        Vocab::EOS
    }

    fn expand(&self, state: &Self::State, token: usize) -> Result<Expansion<Self::State>> {
        let step = self.model.infer_step(self.store, self.regions, state, token)?;
        let slots = step
            .slots
            .iter()
            .map(|&(plural, subcategory)| SlotWord {
                token: self.vocab.index_or_unk(subcategory_word(subcategory, plural)),
                plural,
                subcategory,
            })
            .collect();
        Ok(Expansion {
            log_probs: step.log_probs,
            slots,
            state: step.state,
        })
    }
}

/// Beam search over every record, in corpus order.
pub fn caption_corpus(
    model: &Model,
    store: &ParamStore,
    records: &[SceneRecord],
    vocab: &Vocab,
    beam: usize,
    max_len: usize,
    workers: usize,
) -> Result<Vec<CaptionHypothesis>> {
    let run = |r: &SceneRecord| {
        let sm = SceneModel {
            model,
            store,
            regions: &r.regions,
            vocab,
        };
        beam_search(&sm, beam, max_len)
    };
    if workers <= 1 {
        return records.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| records.par_iter().map(run).collect())
}

pub fn caption_words(h: &CaptionHypothesis, vocab: &Vocab) -> Vec<String> {
    h.tokens
        .iter()
        .map(|t| vocab.token(t.token).unwrap_or(crate::data::UNK).to_string())
        .collect()
}

/// Caption text with visual words in brackets, e.g. `a [cat] on a [couch]`.
pub fn render_caption(h: &CaptionHypothesis, vocab: &Vocab) -> String {
    h.tokens
        .iter()
        .zip(caption_words(h, vocab))
        .map(|(t, w)| if t.grounding.is_visual() { format!("[{w}]") } else { w })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    id: u64,
    caption: String,
    tokens: Vec<String>,
    grounding: Vec<Option<(usize, u8, usize)>>,
    log_prob: f64,
}

pub fn captions_to_string(records: &[SceneRecord], hyps: &[CaptionHypothesis], vocab: &Vocab) -> Result<String> {
    if records.len() != hyps.len() {
        return Err(Error::Invalid(format!("{} records but {} captions", records.len(), hyps.len())));
    }
    let mut out = String::new();
    for (r, h) in records.iter().zip(hyps) {
        let line = CaptionLine {
            id: r.id,
            caption: render_caption(h, vocab),
            tokens: caption_words(h, vocab),
            grounding: h
                .tokens
                .iter()
                .map(|t| match t.grounding {
                    Grounding::Textual => None,
                    Grounding::Visual { region, plural, subcategory } => Some((region, plural as u8, subcategory)),
                })
                .collect(),
            log_prob: h.log_prob,
        };
        out.push_str(&serde_json::to_string(&line).expect("caption serialises"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_captions(path: &std::path::Path, records: &[SceneRecord], hyps: &[CaptionHypothesis], vocab: &Vocab) -> Result<()> {
    write_atomic(path, captions_to_string(records, hyps, vocab)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-entry tables keyed by the full prefix of entries.
    struct TableModel {
        textual: usize,
        regions: usize,
        seed: u64,
    }

    impl TableModel {
        fn logits(&self, prefix: &[usize]) -> Vec<f64> {
            use rand::Rng;
            let key = prefix.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",");
            let mut rng = crate::seed::rng_for(self.seed, &key);
            let raw: Vec<f64> = (0..self.textual + self.regions).map(|_| rng.random::<f64>() * 3.0).collect();
            let m = raw.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = raw.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
            raw.iter().map(|x| x - z).collect()
        }
    }

    /// State is the fed token history, so every prefix gets its own table.
    struct HistoryModel(TableModel);

    impl StepModel for HistoryModel {
        type State = Vec<usize>;

        fn textual_size(&self) -> usize {
            self.0.textual
        }

        fn start(&self) -> (Vec<usize>, usize) {
            (vec![], 1000)
        }

        fn eos(&self) -> usize {
            1
        }

        fn expand(&self, state: &Vec<usize>, token: usize) -> Result<Expansion<Vec<usize>>> {
            let mut history = state.clone();
            if token != 1000 {
                history.push(token);
            }
            let log_probs = self.0.logits(&history);
            Ok(Expansion {
                log_probs,
                // Region r emits token 100 + r so histories stay distinct.
                slots: (0..self.0.regions)
                    .map(|r| SlotWord {
                        token: 100 + r,
                        plural: false,
                        subcategory: r,
                    })
                    .collect(),
                state: history,
            })
        }
    }

    fn brute_force(m: &HistoryModel, max_len: usize) -> (f64, Vec<usize>) {
        let n = m.0.textual + m.0.regions;
        let mut best = (f64::NEG_INFINITY, vec![]);
        fn walk(m: &HistoryModel, n: usize, max_len: usize, history: Vec<usize>, entries: Vec<usize>, lp: f64, best: &mut (f64, Vec<usize>)) {
            let log_probs = m.0.logits(&history);
            for e in 0..n {
                let mut ent = entries.clone();
                ent.push(e);
                let l = lp + log_probs[e];
                let done = e == 1 || ent.len() == max_len;
                if done {
                    if l > best.0 || (l == best.0 && ent < best.1) {
                        *best = (l, ent);
                    }
                } else {
                    let mut h = history.clone();
                    h.push(if e < m.0.textual { e } else { 100 + e - m.0.textual });
                    walk(m, n, max_len, h, ent, l, best);
                }
            }
        }
        walk(m, n, max_len, vec![], vec![], 0.0, &mut best);
        best
    }

    #[test]
    fn beam_matches_exhaustive_enumeration() {
        for seed in 0..20 {
            let m = HistoryModel(TableModel {
                textual: 3,
                regions: 1,
                seed,
            });
            let (lp, entries) = brute_force(&m, 3);
            let got = beam_search(&m, 64, 3).unwrap();
            assert!((got.log_prob - lp).abs() < 1e-12, "seed {seed}");
            assert_eq!(got.entries, entries, "seed {seed}");
        }
    }

    #[test]
    fn hand_built_two_step_model() {
        // Step 1: P(a)=0.6, P(EOS)=0.4. After a: P(EOS)=0.3, P(b)=0.7.
        // Greedy takes a then b (0.42, truncated at 2); the best full
        // sequence is the same. With max_len 1, "EOS" (0.4) loses to "a"
        // (0.6) closed at the length limit.
        struct Two;
        impl StepModel for Two {
            type State = usize;
            fn textual_size(&self) -> usize {
                3
            }
            fn start(&self) -> (usize, usize) {
                (0, 0)
            }
            fn eos(&self) -> usize {
                1
            }
            fn expand(&self, depth: &usize, _t: usize) -> Result<Expansion<usize>> {
                let p: [f64; 3] = if *depth == 0 { [1e-12, 0.4, 0.6] } else { [1e-12, 0.3, 0.7] };
                Ok(Expansion {
                    log_probs: p.iter().map(|x| x.ln()).collect(),
                    slots: vec![],
                    state: depth + 1,
                })
            }
        }
        let h = beam_search(&Two, 3, 2).unwrap();
        assert_eq!(h.entries, vec![2, 2]);
        assert!((h.log_prob - 0.42f64.ln()).abs() < 1e-12);
        let h = beam_search(&Two, 3, 1).unwrap();
        assert_eq!(h.entries, vec![2]);
        assert!(h.finished);
    }

    #[test]
    fn beam_one_equals_greedy() {
        for seed in 0..50 {
            let m = HistoryModel(TableModel {
                textual: 5,
                regions: 3,
                seed,
            });
            assert_eq!(beam_search(&m, 1, 8).unwrap(), greedy(&m, 8).unwrap());
        }
    }

    #[test]
    fn region_choice_emits_slot_word() {
        struct Pointy;
        impl StepModel for Pointy {
            type State = ();
            fn textual_size(&self) -> usize {
                2
            }
            fn start(&self) -> ((), usize) {
                ((), 0)
            }
            fn eos(&self) -> usize {
                1
            }
            fn expand(&self, _: &(), token: usize) -> Result<Expansion<()>> {
                let log_probs = if token == 0 { vec![-9.0, -9.0, -0.01] } else { vec![-9.0, -0.01, -9.0] };
                Ok(Expansion {
                    log_probs,
                    slots: vec![SlotWord {
                        token: 7,
                        plural: true,
                        subcategory: 3,
                    }],
                    state: (),
                })
            }
        }
        let h = greedy(&Pointy, 5).unwrap();
        assert_eq!(h.entries, vec![2, 1]);
        assert_eq!(
            h.tokens,
            vec![CaptionToken {
                token: 7,
                grounding: Grounding::Visual {
                    region: 0,
                    plural: true,
                    subcategory: 3
                }
            }]
        );
        assert_eq!(h.regions(), vec![0]);
    }

    #[test]
    fn zero_beam_rejected() {
        let m = HistoryModel(TableModel {
            textual: 3,
            regions: 1,
            seed: 0,
        });
        assert!(beam_search(&m, 0, 3).is_err());
    }

    #[test]
    fn render_brackets_visual_words() {
        let vocab = Vocab::from_tokens(["a", "cat", "couch", "on"]);
        let t = |w: &str| vocab.index(w).unwrap();
        let h = CaptionHypothesis {
            tokens: vec![
                CaptionToken { token: t("a"), grounding: Grounding::Textual },
                CaptionToken { token: t("cat"), grounding: Grounding::Visual { region: 0, plural: false, subcategory: 0 } },
                CaptionToken { token: t("on"), grounding: Grounding::Textual },
                CaptionToken { token: t("a"), grounding: Grounding::Textual },
                CaptionToken { token: t("couch"), grounding: Grounding::Visual { region: 2, plural: false, subcategory: 14 } },
            ],
            entries: vec![],
            log_prob: -1.0,
            finished: true,
        };
        assert_eq!(render_caption(&h, &vocab), "a [cat] on a [couch]");
    }
}
