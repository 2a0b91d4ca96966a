//! Turns decoder outputs into word probabilities.
//!
//! * pointer logits `u_i = w_hᵀ tanh(W_v v_i + W_z h)` over the K regions;
//! * sentinel `s = σ(W_x x + W_h h_prev) ⊙ tanh(c)`;
//! * `P_r = softmax([u; w_hᵀ tanh(W_s s + W_z h)])`, sentinel last;
//! * `P_txt = softmax(W_q MH)`;
//! * `P_full = [P_txt · P_r[K]; P_r[0..K]]`;
//! * slot filling `P_p = softmax(W_p R_b([v; h]))`,
//!   `P_sc = softmax(Uᵀ W_sc R_g([v; h]))` with U the embedding rows of the
//!   sub-category words.

use rand::Rng;

use crate::attention::RegionContext;
use crate::decoder::{Dims, StepOutput};
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{uniform, FeedForward, InitConfig};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GroundingHead {
    pub pointer_w_v: ParamId,
    pub w_z: ParamId,
    pub w_h: ParamId,
    pub w_s: ParamId,
    pub sentinel_w_x: ParamId,
    pub sentinel_w_h: ParamId,
    pub w_q: ParamId,
    pub r_b: FeedForward,
    pub w_p: ParamId,
    pub r_g: FeedForward,
    pub w_sc: ParamId,
    pub embed: ParamId,
    pub subcat_rows: Vec<usize>,
}

/// Graph nodes of one timestep's distributions, plus their logs.
#[derive(Clone, Copy, Debug)]
pub struct GroundingVars {
    pub p_txt: Var,
    pub p_r: Var,
    pub p_full: Var,
    pub p_p: Var,
    pub p_sc: Var,
    pub log_txt: Var,
    pub log_r: Var,
    pub log_p: Var,
    pub log_sc: Var,
    pub slot_region: usize,
}

/// Query-independent pointer projection `W_v V`, computed once per image.
#[derive(Clone, Copy, Debug)]
pub struct PointerKeys {
    pub proj: Var,
}

impl GroundingHead {
    pub fn register(
        store: &mut ParamStore,
        dims: &Dims,
        embed: ParamId,
        subcat_rows: Vec<usize>,
        init: &InitConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if subcat_rows.is_empty() {
            return Err(Error::Config("at least one sub-category is required".into()));
        }
        if let Some(&bad) = subcat_rows.iter().find(|&&r| r >= dims.vocab) {
            return Err(Error::Index {
                op: "subcategory row",
                index: bad,
                len: dims.vocab,
            });
        }
        let (a, d, fd) = (dims.att_dim, dims.hidden, dims.feature_dim);
        let s = init.scale;
        Ok(GroundingHead {
            pointer_w_v: store.insert("head.pointer_w_v", uniform(&[a, fd], s, rng))?,
            w_z: store.insert("head.w_z", uniform(&[a, d], s, rng))?,
            w_h: store.insert("head.w_h", uniform(&[a], s, rng))?,
            w_s: store.insert("head.w_s", uniform(&[a, d], s, rng))?,
            sentinel_w_x: store.insert("head.sentinel_w_x", uniform(&[d, dims.shared_input()], s, rng))?,
            sentinel_w_h: store.insert("head.sentinel_w_h", uniform(&[d, d], s, rng))?,
            w_q: store.insert("head.w_q", uniform(&[dims.vocab, d], s, rng))?,
            r_b: FeedForward::register(store, "head.r_b", fd + d, d, init, rng)?,
            w_p: store.insert("head.w_p", uniform(&[2, d], s, rng))?,
            r_g: FeedForward::register(store, "head.r_g", fd + d, d, init, rng)?,
            w_sc: store.insert("head.w_sc", uniform(&[dims.embed, d], s, rng))?,
            embed,
            subcat_rows,
        })
    }

    pub fn num_subcategories(&self) -> usize {
        self.subcat_rows.len()
    }

    pub fn pointer_keys(&self, g: &mut Graph<'_>, ctx: &RegionContext) -> Result<PointerKeys> {
        let w = g.param(self.pointer_w_v);
        let wt = g.transpose(w)?;
        let proj = g.matmul(ctx.v, wt)?;
        Ok(PointerKeys { proj })
    }

    /// One logit per region.
    pub fn pointing_logits(&self, g: &mut Graph<'_>, keys: &PointerKeys, h: Var) -> Result<Var> {
        let w_z = g.param(self.w_z);
        let w_h = g.param(self.w_h);
        let q = g.matmul(w_z, h)?;
        let pre = g.add_row(keys.proj, q)?;
        let act = g.tanh(pre);
        g.matmul(act, w_h)
    }

    pub fn sentinel(&self, g: &mut Graph<'_>, x: Var, h_prev: Var, c: Var) -> Result<Var> {
        let wx = g.param(self.sentinel_w_x);
        let wh = g.param(self.sentinel_w_h);
        let a = g.matmul(wx, x)?;
        let b = g.matmul(wh, h_prev)?;
        let pre = g.add(a, b)?;
        let gate = g.sigmoid(pre);
        let tc = g.tanh(c);
        g.mul(gate, tc)
    }

    /// Region logits plus the sentinel logit, appended last. Returns the
    /// logits; callers softmax them.
    pub fn region_logits(&self, g: &mut Graph<'_>, u: Var, s: Var, h: Var) -> Result<Var> {
        let w_s = g.param(self.w_s);
        let w_z = g.param(self.w_z);
        let w_h = g.param(self.w_h);
        let a = g.matmul(w_s, s)?;
        let b = g.matmul(w_z, h)?;
        let pre = g.add(a, b)?;
        let act = g.tanh(pre);
        let prod = g.mul(w_h, act)?;
        let sent = g.sum(prod);
        g.concat(&[u, sent])
    }

    pub fn textual_logits(&self, g: &mut Graph<'_>, mh: Var) -> Result<Var> {
        let w_q = g.param(self.w_q);
        g.matmul(w_q, mh)
    }

    /// Plurality and sub-category logits for the region feature `v`.
    pub fn slot_logits(&self, g: &mut Graph<'_>, v: Var, h: Var) -> Result<(Var, Var)> {
        let vh = g.concat(&[v, h])?;
        let rb = self.r_b.apply(g, vh)?;
        let w_p = g.param(self.w_p);
        let plural = g.matmul(w_p, rb)?;

        let rg = self.r_g.apply(g, vh)?;
        let w_sc = g.param(self.w_sc);
        let projected = g.matmul(w_sc, rg)?;
        let table = g.param(self.embed);
        let u = g.rows(table, &self.subcat_rows)?;
        let sub = g.matmul(u, projected)?;
        Ok((plural, sub))
    }

    /// `(P_p, P_sc)` for one region.
    pub fn slot_fill(&self, g: &mut Graph<'_>, ctx: &RegionContext, region: usize, h: Var) -> Result<(Var, Var)> {
        if region >= ctx.k {
            return Err(Error::Index {
                op: "slot_fill region",
                index: region,
                len: ctx.k,
            });
        }
        let v = g.row(ctx.v, region)?;
        let (pl, sc) = self.slot_logits(g, v, h)?;
        Ok((g.softmax(pl)?, g.softmax(sc)?))
    }

    /// Full head for one decoder step. `slot_region` selects the region fed
    /// to slot filling; `None` picks the most probable region.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        step: &StepOutput,
        ctx: &RegionContext,
        keys: &PointerKeys,
        slot_region: Option<usize>,
    ) -> Result<GroundingVars> {
        let u = self.pointing_logits(g, keys, step.h)?;
        let s = self.sentinel(g, step.shared_input, step.h_prev, step.c)?;
        let r_logits = self.region_logits(g, u, s, step.h)?;
        let p_r = g.softmax(r_logits)?;
        let log_r = g.log_softmax(r_logits)?;

        let t_logits = self.textual_logits(g, step.hypothesis)?;
        let p_txt = g.softmax(t_logits)?;
        let log_txt = g.log_softmax(t_logits)?;
        let p_full = compose_word_distribution(g, p_txt, p_r)?;

        let slot_region = match slot_region {
            Some(r) => r,
            None => best_region(&g.value(p_r).data()[..ctx.k]),
        };
        if slot_region >= ctx.k {
            return Err(Error::Index {
                op: "slot region",
                index: slot_region,
                len: ctx.k,
            });
        }
        let v = g.row(ctx.v, slot_region)?;
        let (pl, sc) = self.slot_logits(g, v, step.h)?;
        Ok(GroundingVars {
            p_txt,
            p_r,
            p_full,
            p_p: g.softmax(pl)?,
            p_sc: g.softmax(sc)?,
            log_txt,
            log_r,
            log_p: g.log_softmax(pl)?,
            log_sc: g.log_softmax(sc)?,
            slot_region,
        })
    }
}

/// `[P_txt · P_r[K]; P_r[0..K]]`.
pub fn compose_word_distribution(g: &mut Graph<'_>, p_txt: Var, p_r: Var) -> Result<Var> {
    let kp1 = g.value(p_r).len();
    if g.value(p_r).rank() != 1 || g.value(p_txt).rank() != 1 {
        return Err(shape_err("compose_word_distribution", g.value(p_txt).shape(), g.value(p_r).shape()));
    }
    let sentinel = g.pick(p_r, kp1 - 1)?;
    let textual = g.mul_scalar_var(p_txt, sentinel)?;
    if kp1 == 1 {
        return Ok(textual);
    }
    let regions = g.slice(p_r, 0, kp1 - 1)?;
    g.concat(&[textual, regions])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn best_region(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionNet, RegionFeatures};
    use crate::seed::rng_for;
    use crate::tensor::{sigmoid, Tensor};

    fn dims() -> Dims {
        Dims {
            vocab: 12,
            embed: 6,
            hidden: 8,
            feature_dim: 4,
            att_dim: 8,
        }
    }

    fn fixture(scale: f64) -> (ParamStore, GroundingHead, AttentionNet, RegionFeatures) {
        let d = dims();
        let mut store = ParamStore::new();
        let mut rng = rng_for(21, "head");
        let init = InitConfig {
            scale,
            forget_bias: 1.0,
        };
        let embed = store.insert("embed", uniform(&[d.vocab, d.embed], 0.5, &mut rng)).unwrap();
        let att = AttentionNet::register(&mut store, "att", d.feature_dim, d.hidden, d.att_dim, &init, &mut rng).unwrap();
        let head = GroundingHead::register(&mut store, &d, embed, vec![3, 4, 5], &init, &mut rng).unwrap();
        let regions = RegionFeatures::new(uniform(&[3, 4], 1.0, &mut rng), uniform(&[3, 4], 1.0, &mut rng)).unwrap();
        (store, head, att, regions)
    }

    fn vecc(g: &mut Graph<'_>, v: &[f64]) -> Var {
        g.constant(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn zero_weights_point_uniformly() {
        let (store, head, att, regions) = fixture(0.0);
        let mut g = Graph::new(&store);
        let ctx = RegionContext::new(&mut g, &regions, &att).unwrap();
        let keys = head.pointer_keys(&mut g, &ctx).unwrap();
        let h = vecc(&mut g, &[0.3; 8]);
        let u = head.pointing_logits(&mut g, &keys, h).unwrap();
        assert_eq!(g.value(u).data(), &[0.0, 0.0, 0.0]);
        let p = g.softmax(u).unwrap();
        assert!(g.value(p).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_region_pointer_is_certain() {
        let (store, head, att, _) = fixture(0.4);
        let regions = RegionFeatures::new(
            Tensor::matrix(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            Tensor::matrix(1, 4, vec![0.0; 4]).unwrap(),
        )
        .unwrap();
        let mut g = Graph::new(&store);
        let ctx = RegionContext::new(&mut g, &regions, &att).unwrap();
        let keys = head.pointer_keys(&mut g, &ctx).unwrap();
        let h = vecc(&mut g, &[0.1; 8]);
        let u = head.pointing_logits(&mut g, &keys, h).unwrap();
        let p = g.softmax(u).unwrap();
        assert_eq!(g.value(p).data(), &[1.0]);
    }

    #[test]
    fn pointer_matches_scalar_loop() {
        let (store, head, att, regions) = fixture(0.5);
        let hv: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new(&store);
        let ctx = RegionContext::new(&mut g, &regions, &att).unwrap();
        let keys = head.pointer_keys(&mut g, &ctx).unwrap();
        let h = vecc(&mut g, &hv);
        let u = head.pointing_logits(&mut g, &keys, h).unwrap();
        let wv = store.get(head.pointer_w_v).data();
        let wz = store.get(head.w_z).data();
        let wh = store.get(head.w_h).data();
        for i in 0..3 {
            let vi = regions.v().row(i).unwrap();
            let mut ui = 0.0;
            for r in 0..8 {
                let mut s = 0.0;
                for j in 0..4 {
                    s += wv[r * 4 + j] * vi.data()[j];
                }
                for j in 0..8 {
                    s += wz[r * 8 + j] * hv[j];
                }
                ui += wh[r] * s.tanh();
            }
            assert!((g.value(u).data()[i] - ui).abs() < 1e-12);
        }
    }

    #[test]
    fn sentinel_examples() {
        let (store, head, _, _) = fixture(0.0);
        let mut g = Graph::new(&store);
        let x = vecc(&mut g, &[0.5; 10]);
        let hp = vecc(&mut g, &[0.2; 8]);
        let cv: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let c = vecc(&mut g, &cv);
        let s = head.sentinel(&mut g, x, hp, c).unwrap();
        for (got, c) in g.value(s).data().iter().zip(&cv) {
            assert_eq!(*got, 0.5 * c.tanh());
        }
        let z = vecc(&mut g, &[0.0; 8]);
        let s = head.sentinel(&mut g, x, hp, z).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sentinel_matches_scalar_loop() {
        let (store, head, _, _) = fixture(0.5);
        let xv: Vec<f64> = (0..10).map(|i| (i as f64).cos() * 0.5).collect();
        let hv: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let cv: Vec<f64> = (0..8).map(|i| 0.25 * i as f64 - 1.0).collect();
        let mut g = Graph::new(&store);
        let (x, hp, c) = (vecc(&mut g, &xv), vecc(&mut g, &hv), vecc(&mut g, &cv));
        let s = head.sentinel(&mut g, x, hp, c).unwrap();
        let wx = store.get(head.sentinel_w_x).data();
        let wh = store.get(head.sentinel_w_h).data();
        for r in 0..8 {
            let mut pre = 0.0;
            for j in 0..10 {
                pre += wx[r * 10 + j] * xv[j];
            }
            for j in 0..8 {
                pre += wh[r * 8 + j] * hv[j];
            }
            let expect = sigmoid(pre) * cv[r].tanh();
            assert!((g.value(s).data()[r] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn region_distribution_examples() {
        let (store, head, _, _) = fixture(0.0);
        let mut g = Graph::new(&store);
        let u = vecc(&mut g, &[0.0, 0.0, 0.0]);
        let s = vecc(&mut g, &[0.4; 8]);
        let h = vecc(&mut g, &[0.1; 8]);
        let logits = head.region_logits(&mut g, u, s, h).unwrap();
        let p = g.softmax(logits).unwrap();
        assert!(g.value(p).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let saturated = vecc(&mut g, &[0.0, 0.0, 0.0, 30.0]);
        let p = g.softmax(saturated).unwrap();
        assert!(g.value(p).data()[3] > 0.999);
        assert!((g.value(p).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn textual_distribution_examples() {
        let (store, head, _, _) = fixture(0.0);
        let mut g = Graph::new(&store);
        let mh = vecc(&mut g, &[0.9; 8]);
        let l = head.textual_logits(&mut g, mh).unwrap();
        let p = g.softmax(l).unwrap();
        assert!(g.value(p).data().iter().all(|&x| (x - 1.0 / 12.0).abs() < 1e-15));
        let two = vecc(&mut g, &[3f64.ln(), 0.0]);
        let p = g.softmax(two).unwrap();
        assert!((g.value(p).data()[0] - 0.75).abs() < 1e-15);
        assert!((g.value(p).data()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn composed_distribution_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let p_txt = vecc(&mut g, &[0.1, 0.2, 0.3, 0.4]);
        let all_sentinel = vecc(&mut g, &[0.0, 0.0, 1.0]);
        let full = compose_word_distribution(&mut g, p_txt, all_sentinel).unwrap();
        assert_eq!(g.value(full).data(), &[0.1, 0.2, 0.3, 0.4, 0.0, 0.0]);

        let no_sentinel = vecc(&mut g, &[0.25, 0.75, 0.0]);
        let full = compose_word_distribution(&mut g, p_txt, no_sentinel).unwrap();
        assert_eq!(g.value(full).data(), &[0.0, 0.0, 0.0, 0.0, 0.25, 0.75]);

        let uniform4 = vecc(&mut g, &[0.25; 4]);
        let p_r = vecc(&mut g, &[0.3, 0.3, 0.4]);
        let full = compose_word_distribution(&mut g, uniform4, p_r).unwrap();
        for &x in &g.value(full).data()[..4] {
            assert!((x - 0.1).abs() < 1e-15);
        }
        assert!((g.value(full).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_slot_fill_is_uniform() {
        let (mut store, head, att, regions) = fixture(0.0);
        *store.get_mut(head.embed) = Tensor::zeros(&[12, 6]);
        let mut g = Graph::new(&store);
        let ctx = RegionContext::new(&mut g, &regions, &att).unwrap();
        let h = vecc(&mut g, &[0.2; 8]);
        let (pp, psc) = head.slot_fill(&mut g, &ctx, 1, h).unwrap();
        assert_eq!(g.value(pp).data(), &[0.5, 0.5]);
        assert!(g.value(psc).data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_subcategory_is_certain() {
        let d = dims();
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, "x");
        let embed = store.insert("embed", uniform(&[12, 6], 0.5, &mut rng)).unwrap();
        let att = AttentionNet::register(&mut store, "att", 4, 8, 8, &InitConfig::default(), &mut rng).unwrap();
        let head = GroundingHead::register(&mut store, &d, embed, vec![7], &InitConfig::default(), &mut rng).unwrap();
        let regions = RegionFeatures::new(uniform(&[2, 4], 1.0, &mut rng), uniform(&[2, 4], 1.0, &mut rng)).unwrap();
        let mut g = Graph::new(&store);
        let ctx = RegionContext::new(&mut g, &regions, &att).unwrap();
        let h = vecc(&mut g, &[0.2; 8]);
        let (_, psc) = head.slot_fill(&mut g, &ctx, 0, h).unwrap();
        assert_eq!(g.value(psc).data(), &[1.0]);
    }

    #[test]
    fn slot_fill_matches_scalar_loop() {
        let (store, head, att, regions) = fixture(0.5);
        let hv: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).sin()).collect();
        let mut g = Graph::new(&store);
        let ctx = RegionContext::new(&mut g, &regions, &att).unwrap();
        let h = vecc(&mut g, &hv);
        let (pp, psc) = head.slot_fill(&mut g, &ctx, 2, h).unwrap();

        let v = regions.v().row(2).unwrap();
        let vh: Vec<f64> = v.data().iter().chain(&hv).copied().collect();
        let relu_layer = |ff: &FeedForward| -> Vec<f64> {
            let w = store.get(ff.weight).data();
            let b = store.get(ff.bias).data();
            (0..8)
                .map(|r| {
                    let s: f64 = b[r] + (0..12).map(|j| w[r * 12 + j] * vh[j]).sum::<f64>();
                    s.max(0.0)
                })
                .collect()
        };
        let softmax = |l: &[f64]| -> Vec<f64> {
            let m = l.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = l.iter().map(|x| (x - m).exp()).sum();
            l.iter().map(|x| (x - m).exp() / z).collect()
        };
        let rb = relu_layer(&head.r_b);
        let wp = store.get(head.w_p).data();
        let pl: Vec<f64> = (0..2).map(|c| (0..8).map(|j| wp[c * 8 + j] * rb[j]).sum()).collect();
        let rg = relu_layer(&head.r_g);
        let wsc = store.get(head.w_sc).data();
        let proj: Vec<f64> = (0..6).map(|e| (0..8).map(|j| wsc[e * 8 + j] * rg[j]).sum()).collect();
        let emb = store.get(head.embed).data();
        let sc: Vec<f64> = [3usize, 4, 5]
            .iter()
            .map(|&row| (0..6).map(|e| emb[row * 6 + e] * proj[e]).sum())
            .collect();
        for (a, b) in g.value(pp).data().iter().zip(softmax(&pl)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(psc).data().iter().zip(softmax(&sc)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn best_region_breaks_ties_low() {
        assert_eq!(best_region(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(best_region(&[0.5, 0.5]), 0);
    }
}
