//! Corpus BLEU, CIDEr, grounding accuracy and the results table.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Grounding, SceneRecord};
use crate::error::{Error, Result};
use crate::inference::CaptionHypothesis;

type NGram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<NGram<'_>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_aligned(candidates: usize, references: usize) -> Result<()> {
    if candidates == 0 {
        return Err(Error::Invalid("metric over an empty corpus".into()));
    }
    if candidates != references {
        return Err(Error::Invalid(format!(
            "{candidates} candidates but {references} references"
        )));
    }
    Ok(())
}

/// Corpus-level BLEU-n with clipped counts, uniform weights over 1..=n and
/// the brevity penalty. No smoothing: a zero precision gives zero.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    check_aligned(candidates.len(), references.len())?;
    if n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let rc = ngram_counts(r, order);
            for (g, count) in ngram_counts(c, order) {
                matched += count.min(rc.get(g).copied().unwrap_or(0));
                total += count;
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn tfidf<'a>(counts: &HashMap<NGram<'a>, usize>, idf: &HashMap<NGram<'a>, f64>, default_idf: f64) -> HashMap<NGram<'a>, f64> {
    let total: usize = counts.values().sum();
    counts
        .iter()
        .map(|(g, &c)| (*g, c as f64 / total as f64 * idf.get(g).copied().unwrap_or(default_idf)))
        .collect()
}

fn cosine(a: &HashMap<NGram<'_>, f64>, b: &HashMap<NGram<'_>, f64>) -> f64 {
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr: per order n = 1..4, the tf-idf cosine between candidate and
/// reference with `idf = ln(N / max(1, df))` over the N references; the four
/// orders are averaged and scaled by 10.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_aligned(candidates.len(), references.len())?;
    let n_docs = references.len();
    if n_docs < 2 {
        return Err(Error::Invalid(
            "CIDEr needs at least 2 scenes for document frequencies; use BLEU for a single caption".into(),
        ));
    }
    let mut score = 0.0;
    for order in 1..=4 {
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r, order)).collect();
        let mut df: HashMap<NGram<'_>, usize> = HashMap::new();
        for rc in &ref_counts {
            for g in rc.keys() {
                *df.entry(*g).or_insert(0) += 1;
            }
        }
        let idf: HashMap<NGram<'_>, f64> = df
            .iter()
            .map(|(g, &d)| (*g, (n_docs as f64 / d.max(1) as f64).ln()))
            .collect();
        let unseen = (n_docs as f64).ln();
        let mut sum = 0.0;
        for (c, rc) in candidates.iter().zip(&ref_counts) {
            let cv = tfidf(&ngram_counts(c, order), &idf, unseen);
            let rv = tfidf(rc, &idf, unseen);
            sum += cosine(&cv, &rv);
        }
        score += sum / n_docs as f64;
    }
    Ok(10.0 * score / 4.0)
}

/// Fraction of ground-truth visual tokens whose generated counterpart, at the
/// same position among visual tokens, points to the same region.
pub fn grounding_accuracy(hyps: &[CaptionHypothesis], records: &[SceneRecord]) -> Result<f64> {
    check_aligned(hyps.len(), records.len())?;
    let (mut correct, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(records) {
        let generated = h.regions();
        for (i, (_, g)) in r.visual_slots().enumerate() {
            total += 1;
            if let Grounding::Visual { region, .. } = *g {
                if generated.get(i) == Some(&region) {
                    correct += 1;
                }
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub bleu1: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub grounding: Option<f64>,
}

impl EvalRow {
    /// Scores as percentages to two decimals, e.g. `NBT 73.84 32.64 100.71`.
    pub fn render(&self) -> String {
        let [a, b, c] = self.cells();
        format!("{} {a} {b} {c}", self.model)
    }

    fn cells(&self) -> [String; 3] {
        [self.bleu1, self.bleu4, self.cider].map(|x| format!("{:.2}", 100.0 * x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub corpus_size: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn render_table(&self) -> String {
        let header = ["Model", "BLEU1", "BLEU4", "CIDEr", "Ground"];
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                let [a, b, c] = r.cells();
                let g = r.grounding.map_or("-".to_string(), |g| format!("{:.2}", 100.0 * g));
                [r.model.clone(), a, b, c, g]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        writeln!(out, "# split={} scenes={}", self.split, self.corpus_size).expect("write to string");
        let line = |cells: &[String]| -> String {
            let mut s = format!("{:<w$}", cells[0], w = widths[0]);
            for (cell, w) in cells[1..].iter().zip(&widths[1..]) {
                write!(s, "  {cell:>w$}").expect("write to string");
            }
            s
        };
        out.push_str(&line(&header.map(String::from)));
        out.push('\n');
        for row in &body {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn render_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let mut v = serde_json::to_value(row).expect("row serialises");
            v["split"] = self.split.clone().into();
            v["scenes"] = self.corpus_size.into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::CaptionToken;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn corpus(v: &[&str]) -> Vec<Vec<String>> {
        v.iter().map(|s| toks(s)).collect()
    }

    #[test]
    fn bleu_identity_is_one() {
        let c = corpus(&["a cat is sleeping on a couch", "two dogs are running"]);
        assert!((bleu(&c, &c, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((bleu(&c, &c, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_clips_repeated_words() {
        let c = corpus(&["the the the the"]);
        let r = corpus(&["the cat"]);
        assert!((bleu(&c, &r, 1).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn bleu4_needs_four_grams() {
        let c = corpus(&["a cat sleeps"]);
        assert_eq!(bleu(&c, &c, 4).unwrap(), 0.0);
    }

    #[test]
    fn bleu_hand_computed_with_brevity_penalty() {
        // p1 = 3/3, r = 5, c = 3: BP = exp(1 - 5/3).
        let c = corpus(&["a cat is"]);
        let r = corpus(&["a cat is on couch"]);
        let expect = (1.0 - 5.0 / 3.0f64).exp();
        assert!((bleu(&c, &r, 1).unwrap() - expect).abs() < 1e-12);
        // p1 = 3/3, p2 = 2/2: BLEU2 has the same value.
        assert!((bleu(&c, &r, 2).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_contributes_nothing() {
        let c = corpus(&["", "a cat"]);
        let r = corpus(&["a dog", "a cat"]);
        // p1 = 2/2, c = 2 < r = 4.
        let expect = (1.0f64 - 2.0).exp();
        assert!((bleu(&c, &r, 1).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn cider_identity_is_ten() {
        let c = corpus(&[
            "a cat is sleeping",
            "two dogs are running fast",
            "one bird was sitting there",
        ]);
        assert!((cider(&c, &c).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn cider_disjoint_is_zero() {
        let c = corpus(&["w x y z", "p q r s"]);
        let r = corpus(&["a b c d", "e f g h"]);
        assert_eq!(cider(&c, &r).unwrap(), 0.0);
    }

    #[test]
    fn cider_hand_computed() {
        // Two scenes, references "a b" and "a c"; candidate 1 is "a b",
        // candidate 2 is "c c". Only unigrams contribute.
        // idf(a) = 0, idf(b) = idf(c) = ln 2.
        // Scene 1: identical vectors with non-zero b -> cosine 1.
        // Scene 2: candidate {c: ln2}, reference {a: 0, c: 0.5 ln2} -> 1.
        // Bigram order: scene 1 identical "a b" (idf ln 2) -> 1; scene 2
        // candidate "c c" vs "a c" share nothing -> 0.
        let c = corpus(&["a b", "c c"]);
        let r = corpus(&["a b", "a c"]);
        let expect = 10.0 * ((1.0 + 1.0) / 2.0 + (1.0 + 0.0) / 2.0) / 4.0;
        assert!((cider(&c, &r).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn cider_single_scene_errors() {
        let c = corpus(&["a cat"]);
        let err = cider(&c, &c).unwrap_err().to_string();
        assert!(err.contains("BLEU"), "{err}");
    }

    proptest! {
        #[test]
        fn cider_ignores_corpus_order(
            words in proptest::collection::vec(proptest::collection::vec(0u8..6, 1..7), 3..8),
            shift in 0usize..8,
        ) {
            let refs: Vec<Vec<String>> = words.iter().map(|w| w.iter().map(|x| format!("w{x}")).collect()).collect();
            let cands: Vec<Vec<String>> = refs.iter().map(|r| r.iter().rev().cloned().collect()).collect();
            let n = refs.len();
            let rot = |v: &Vec<Vec<String>>| { let mut v = v.clone(); v.rotate_left(shift % n); v };
            let a = cider(&cands, &refs).unwrap();
            let b = cider(&rot(&cands), &rot(&refs)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
            let b1 = bleu(&cands, &refs, 1).unwrap();
            prop_assert!((0.0..=1.0).contains(&b1));
            prop_assert!((b1 - bleu(&rot(&cands), &rot(&refs), 1).unwrap()).abs() < 1e-12);
        }
    }

    fn hyp(regions: &[Option<usize>]) -> CaptionHypothesis {
        CaptionHypothesis {
            tokens: regions
                .iter()
                .map(|r| CaptionToken {
                    token: 3,
                    grounding: match r {
                        Some(region) => Grounding::Visual {
                            region: *region,
                            plural: false,
                            subcategory: 0,
                        },
                        None => Grounding::Textual,
                    },
                })
                .collect(),
            entries: vec![],
            log_prob: 0.0,
            finished: true,
        }
    }

    fn records() -> Vec<SceneRecord> {
        use crate::data::{gen_corpus, CorpusConfig};
        gen_corpus(11, 10, &CorpusConfig::default()).unwrap()
    }

    fn truth(r: &SceneRecord) -> Vec<Option<usize>> {
        r.grounding
            .iter()
            .map(|g| match *g {
                Grounding::Visual { region, .. } => Some(region),
                Grounding::Textual => None,
            })
            .collect()
    }

    #[test]
    fn grounding_accuracy_cases() {
        let recs = records();
        let perfect: Vec<_> = recs.iter().map(|r| hyp(&truth(r))).collect();
        assert_eq!(grounding_accuracy(&perfect, &recs).unwrap(), 1.0);
        let none: Vec<_> = recs.iter().map(|_| hyp(&[None, None])).collect();
        assert_eq!(grounding_accuracy(&none, &recs).unwrap(), 0.0);

        // Hand count over the first two scenes: scene 0 keeps its first
        // slot and drops the rest; scene 1 is shifted by one region.
        let two = &recs[..2];
        let t0: Vec<usize> = truth(&two[0]).into_iter().flatten().collect();
        let t1: Vec<usize> = truth(&two[1]).into_iter().flatten().collect();
        let h0 = hyp(&[Some(t0[0])]);
        let h1 = hyp(&t1.iter().map(|&r| Some((r + 1) % two[1].k())).collect::<Vec<_>>());
        let expect = 1.0 / (t0.len() + t1.len()) as f64;
        assert!((grounding_accuracy(&[h0, h1], two).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn report_renders_reference_row() {
        let row = EvalRow {
            model: "NBT".into(),
            bleu1: 0.7384,
            bleu4: 0.3264,
            cider: 1.0071,
            grounding: None,
        };
        assert_eq!(row.render(), "NBT 73.84 32.64 100.71");
        let report = EvalReport {
            split: "test".into(),
            corpus_size: 5000,
            rows: vec![
                row.clone(),
                EvalRow {
                    model: "twin".into(),
                    grounding: Some(0.5),
                    ..row
                },
            ],
        };
        let table = report.render_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("Model"));
        assert!(lines[2].split_whitespace().collect::<Vec<_>>().join(" ").starts_with("NBT 73.84 32.64 100.71"));
        assert!(lines[3].starts_with("twin"));
        let widths: Vec<usize> = lines[1..].iter().map(|l| l.len()).collect();
        assert!(widths.iter().all(|&w| w == widths[0]));
        assert_eq!(report.render_jsonl().lines().count(), 2);
    }
}
