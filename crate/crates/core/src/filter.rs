//! Saliency-ranked query selection for the detection encoder.
//!
//! At encoder layer `l` only the top `β_t · γ_l · N_t` tokens of each level `t`
//! (ranked by saliency) are updated by deformable attention; the rest keep their
//! value, optionally plus a learned row/column background embedding.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::deformable::{DeformableEncoderLayer, SamplingFrame, TokenLayout};
use crate::error::{config_err, shape_err, Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Array;

/// Guards the floor against products like `0.6 * 5 = 2.9999999999999996`.
const FLOOR_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSchedule {
    /// Per pyramid level, highest resolution first.
    pub beta: Vec<f64>,
    /// Per detection-encoder layer.
    pub gamma: Vec<f64>,
}

impl Default for FilterSchedule {
    fn default() -> Self {
        Self::published()
    }
}

impl FilterSchedule {
    pub fn published() -> Self {
        Self {
            beta: vec![0.6, 0.8, 1.0, 1.0],
            gamma: vec![1.0, 0.8, 0.6, 0.6, 0.4, 0.2],
        }
    }

    pub fn ones(levels: usize, layers: usize) -> Self {
        Self {
            beta: vec![1.0; levels],
            gamma: vec![1.0; layers],
        }
    }

    pub fn validate(&self, levels: usize, layers: usize) -> Result<()> {
        if self.beta.len() != levels {
            return config_err(format!("beta has {} entries for {levels} levels", self.beta.len()));
        }
        if self.gamma.len() != layers {
            return config_err(format!("gamma has {} entries for {layers} layers", self.gamma.len()));
        }
        for &r in self.beta.iter().chain(&self.gamma) {
            check_ratio(r)?;
        }
        Ok(())
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        return config_err(format!("filtering ratio {r} outside (0, 1]"));
    }
    Ok(())
}

/// Filtering options of the detection encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Off: every token is active in every layer.
    pub enabled: bool,
    /// Add the row/column background embedding to unselected tokens.
    pub background_embedding: bool,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let s = FilterSchedule::published();
        Self {
            enabled: true,
            background_embedding: true,
            beta: s.beta,
            gamma: s.gamma,
        }
    }
}

impl FilterConfig {
    pub fn schedule(&self) -> FilterSchedule {
        FilterSchedule {
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
        }
    }
}

/// `floor(β·γ·N)`, at least 1 for a non-empty level.
pub fn budget(n: usize, beta: f64, gamma: f64) -> Result<usize> {
    check_ratio(beta)?;
    check_ratio(gamma)?;
    if n == 0 {
        return Ok(0);
    }
    let k = (beta * gamma * n as f64 + FLOOR_EPS).floor() as usize;
    Ok(k.clamp(1, n))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActiveQuerySet {
    /// Sorted flat token indices.
    pub phi: Vec<usize>,
    pub level_offsets: Vec<usize>,
    pub budget_per_level: Vec<usize>,
}

impl ActiveQuerySet {
    pub fn all(counts: &[usize]) -> Self {
        let total = counts.iter().sum();
        Self {
            phi: (0..total).collect(),
            level_offsets: offsets(counts),
            budget_per_level: counts.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

fn offsets(counts: &[usize]) -> Vec<usize> {
    counts
        .iter()
        .scan(0, |acc, &c| {
            let s = *acc;
            *acc += c;
            Some(s)
        })
        .collect()
}

/// Indices of the `k` largest scores, ties to the lower index, in ascending order.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < scores.len() {
        idx.select_nth_unstable_by(k, |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Active set for encoder layer `layer`: per level, the top-budget tokens by score.
pub fn select_active(
    scores: &[f64],
    counts: &[usize],
    schedule: &FilterSchedule,
    layer: usize,
) -> Result<ActiveQuerySet> {
    let total: usize = counts.iter().sum();
    if scores.len() != total {
        return shape_err(format!("{} scores for {total} tokens", scores.len()));
    }
    if counts.len() != schedule.beta.len() {
        return config_err(format!("{} levels but {} beta entries", counts.len(), schedule.beta.len()));
    }
    let gamma = *schedule
        .gamma
        .get(layer)
        .ok_or_else(|| Error::Config(format!("no gamma for layer {layer}")))?;
    let level_offsets = offsets(counts);
    let mut phi = Vec::new();
    let mut budget_per_level = Vec::with_capacity(counts.len());
    for (t, (&n, &start)) in counts.iter().zip(&level_offsets).enumerate() {
        let k = budget(n, schedule.beta[t], gamma)?;
        budget_per_level.push(k);
        phi.extend(top_k(&scores[start..start + n], k).into_iter().map(|i| i + start));
    }
    Ok(ActiveQuerySet {
        phi,
        level_offsets,
        budget_per_level,
    })
}

/// `B_{i,j} = [R_i, C_j]` with learned row and column tables.
#[derive(Clone, Debug)]
pub struct BackgroundEmbedding {
    pub rows: ParamId,
    pub cols: ParamId,
    pub max_rows: usize,
    pub max_cols: usize,
    pub dim: usize,
}

impl BackgroundEmbedding {
    pub fn new(init: &mut Init<'_>, name: &str, max_rows: usize, max_cols: usize, dim: usize) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return config_err(format!("background embedding width {dim} must be even"));
        }
        Ok(Self {
            rows: init.trunc_normal(&format!("{name}.rows"), &[max_rows, dim / 2], 0.02),
            cols: init.trunc_normal(&format!("{name}.cols"), &[max_cols, dim / 2], 0.02),
            max_rows,
            max_cols,
            dim,
        })
    }

    fn check(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.max_rows || j >= self.max_cols {
            return Err(Error::Contract(format!(
                "background cell ({i}, {j}) outside {}x{} table",
                self.max_rows, self.max_cols
            )));
        }
        Ok(())
    }

    pub fn embed(&self, store: &ParamStore, i: usize, j: usize) -> Result<Vec<f64>> {
        self.check(i, j)?;
        let mut v = store.value(self.rows).row(i).to_vec();
        v.extend_from_slice(store.value(self.cols).row(j));
        Ok(v)
    }

    /// `[cells.len(), d]` embeddings as a graph value.
    pub fn gather(&self, g: &mut Graph<'_>, cells: &[(usize, usize)]) -> Result<Var> {
        for &(i, j) in cells {
            self.check(i, j)?;
        }
        let r = g.param(self.rows);
        let c = g.param(self.cols);
        let ri: Vec<usize> = cells.iter().map(|c| c.0).collect();
        let ci: Vec<usize> = cells.iter().map(|c| c.1).collect();
        let r = g.gather_rows(r, &ri);
        let c = g.gather_rows(c, &ci);
        Ok(g.concat_cols(&[r, c]))
    }
}

/// Applies one deformable encoder layer to the active tokens only.
///
/// Selected rows are updated against the full token set; every other row is
/// passed through, plus its background embedding when one is given.
pub fn filtered_encoder_layer(
    g: &mut Graph<'_>,
    layer: &DeformableEncoderLayer,
    tokens: Var,
    pos: Var,
    layout: &TokenLayout,
    frame: &SamplingFrame,
    phi: &[usize],
    background: Option<&BackgroundEmbedding>,
) -> Result<Var> {
    let n = g.shape(tokens)[0];
    if n != layout.len() || frame.base.rows() != n {
        return shape_err(format!("{n} tokens for a layout of {}", layout.len()));
    }
    if let Some(&bad) = phi.iter().find(|&&i| i >= n) {
        return Err(Error::Contract(format!("active index {bad} out of {n}")));
    }
    let mut base = tokens;
    if let Some(bg) = background {
        let mut selected = vec![false; n];
        phi.iter().for_each(|&i| selected[i] = true);
        let rest: Vec<usize> = (0..n).filter(|&i| !selected[i]).collect();
        if !rest.is_empty() {
            let cells: Vec<(usize, usize)> = rest
                .iter()
                .map(|&t| {
                    let (_, i, j) = layout.cell(t);
                    (i, j)
                })
                .collect();
            let emb = bg.gather(g, &cells)?;
            let kept = g.gather_rows(tokens, &rest);
            let kept = g.add(kept, emb);
            base = g.scatter_rows(tokens, kept, &rest);
        }
    }
    if phi.is_empty() {
        return Ok(base);
    }
    let q = g.gather_rows(tokens, phi);
    let p = g.gather_rows(pos, phi);
    let sub = frame.subset(phi);
    let updated = layer.forward(g, q, p, tokens, &layout.dims(), &sub);
    Ok(g.scatter_rows(base, updated, phi))
}

/// Attention sampling sites over all encoder layers under four filtering regimes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBudget {
    pub tokens: usize,
    pub heads: usize,
    pub points: usize,
    pub layers: usize,
    pub sites_baseline: u64,
    pub sites_layer_wise: u64,
    pub sites_scale_level: u64,
    pub sites_joint: u64,
}

impl AttentionBudget {
    pub fn rows(&self) -> [(&'static str, u64); 4] {
        [
            ("No hierarchical filtering", self.sites_baseline),
            ("Layer-wise filtering", self.sites_layer_wise),
            ("Scale-level filtering", self.sites_scale_level),
            ("Joint filtering", self.sites_joint),
        ]
    }

    pub fn ratio(&self, sites: u64) -> f64 {
        sites as f64 / self.sites_baseline.max(1) as f64
    }
}

/// Exact integer site totals for the baseline and the three filtered regimes.
pub fn attention_site_count(
    schedule: &FilterSchedule,
    token_counts: &[usize],
    layers: usize,
    heads: usize,
    points: usize,
) -> Result<AttentionBudget> {
    schedule.validate(token_counts.len(), layers)?;
    let hk = (heads * points) as u64;
    let sum = |use_beta: bool, use_gamma: bool| -> Result<u64> {
        let mut s = 0u64;
        for l in 0..layers {
            for (t, &n) in token_counts.iter().enumerate() {
                let b = if use_beta { schedule.beta[t] } else { 1.0 };
                let gm = if use_gamma { schedule.gamma[l] } else { 1.0 };
                s += budget(n, b, gm)? as u64 * hk;
            }
        }
        Ok(s)
    };
    Ok(AttentionBudget {
        tokens: token_counts.iter().sum(),
        heads,
        points,
        layers,
        sites_baseline: sum(false, false)?,
        sites_layer_wise: sum(false, true)?,
        sites_scale_level: sum(true, false)?,
        sites_joint: sum(true, true)?,
    })
}

/// Active-set sizes per layer: `Σ_t budget(N_t, β_t, γ_l)`.
pub fn active_sizes(schedule: &FilterSchedule, token_counts: &[usize]) -> Result<Vec<usize>> {
    schedule
        .gamma
        .iter()
        .map(|&gm| {
            token_counts
                .iter()
                .zip(&schedule.beta)
                .map(|(&n, &b)| budget(n, b, gm))
                .sum()
        })
        .collect()
}

/// Mask `[N, 1]` with ones on the active rows.
pub fn active_mask(n: usize, phi: &[usize]) -> Array {
    let mut m = Array::zeros(&[n, 1]);
    for &i in phi {
        m.data_mut()[i] = 1.0;
    }
    m
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autograd::gradcheck::numeric_grad;
    use crate::params::ParamGroup;
    use crate::saliency::LevelGeometry;

    #[test]
    fn budget_examples() {
        assert_eq!(budget(100, 0.6, 0.4).unwrap(), 24);
        assert_eq!(budget(100, 1.0, 1.0).unwrap(), 100);
        assert_eq!(budget(1, 0.6, 0.2).unwrap(), 1);
        assert_eq!(budget(5, 0.6, 1.0).unwrap(), 3);
        assert!(matches!(budget(10, 0.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(budget(10, 1.0, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.9, 0.1, 0.8, 0.2], 2), vec![0, 2]);
        assert_eq!(top_k(&[0.5; 4], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.3, 0.2, 0.1], 3), vec![0, 1, 2]);
    }

    fn brute_top_k(scores: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut out = idx[..k].to_vec();
        out.sort();
        out
    }

    proptest! {
        #[test]
        fn select_matches_brute_force(
            scores in prop::collection::vec(prop_oneof![(-3i32..3).prop_map(f64::from), -1.0f64..1.0], 4..512),
            layer in 0usize..6,
        ) {
            let n = scores.len();
            let counts = [n / 2, n / 4, n / 8, n - n / 2 - n / 4 - n / 8];
            let sched = FilterSchedule::published();
            let set = select_active(&scores, &counts, &sched, layer).unwrap();
            let mut expect = Vec::new();
            let mut start = 0;
            for (t, &c) in counts.iter().enumerate() {
                let k = budget(c, sched.beta[t], sched.gamma[layer]).unwrap();
                prop_assert_eq!(set.budget_per_level[t], k);
                expect.extend(brute_top_k(&scores[start..start + c], k).into_iter().map(|i| i + start));
                start += c;
            }
            prop_assert_eq!(&set.phi, &expect);
            prop_assert_eq!(set.phi.len(), set.budget_per_level.iter().sum::<usize>());
            prop_assert!(set.phi.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn budgets_shrink_with_depth(n in 1usize..5000) {
            let s = FilterSchedule::published();
            for t in 0..4 {
                let b: Vec<usize> = s.gamma.iter().map(|&g| budget(n, s.beta[t], g).unwrap()).collect();
                prop_assert!(b.windows(2).all(|w| w[1] <= w[0]));
            }
        }
    }

    #[test]
    fn score_length_mismatch() {
        let r = select_active(&[0.0; 5], &[2, 2], &FilterSchedule::ones(2, 1), 0);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn site_count_ratios() {
        let b = attention_site_count(&FilterSchedule::published(), &[4000; 4], 6, 8, 4).unwrap();
        assert!((b.ratio(b.sites_joint) - 0.51).abs() < 0.01 * 0.51);
        assert!((b.ratio(b.sites_layer_wise) - 0.6).abs() < 1e-9);
        assert!((b.ratio(b.sites_scale_level) - 0.85).abs() < 1e-9);
        let ones = attention_site_count(&FilterSchedule::ones(4, 6), &[10, 7, 3, 1], 6, 8, 4).unwrap();
        assert_eq!(ones.sites_joint, ones.sites_baseline);
        assert_eq!(ones.sites_baseline, 21 * 6 * 32);
    }

    struct Fixture {
        store: ParamStore,
        layer: DeformableEncoderLayer,
        bg: BackgroundEmbedding,
        layout: TokenLayout,
    }

    fn fixture() -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut init = Init::new(&mut store, &mut rng, ParamGroup::Det);
        let layer = DeformableEncoderLayer::new(&mut init, "enc", 8, 2, 2, 2, 16);
        let bg = BackgroundEmbedding::new(&mut init, "bg", 4, 4, 8).unwrap();
        // random offsets and weights so the layer is not trivially symmetric
        let w_off = layer.attn.offsets.weight;
        let w_att = layer.attn.weights.weight;
        for id in [w_off, w_att] {
            let n = store.value(id).len();
            let vals: Vec<f64> = (0..n).map(|i| ((i * 31 % 17) as f64 - 8.0) * 0.01).collect();
            store.value_mut(id).data_mut().copy_from_slice(&vals);
        }
        let layout = TokenLayout::new(LevelGeometry::pyramid(&[(4, 4), (2, 2)], 4, 16, 16));
        Fixture {
            store,
            layer,
            bg,
            layout,
        }
    }

    #[test]
    fn all_selected_matches_unfiltered_layer_bit_exact() {
        let f = fixture();
        let frame = SamplingFrame::points(&f.layout.reference_points(), &f.layout, 2, 2);
        let phi: Vec<usize> = (0..20).collect();
        let mut g = Graph::inference(&f.store);
        let x = g.constant(Array::from_fn(&[20, 8], |i| (i as f64 * 0.7).sin()));
        let p = g.constant(Array::from_fn(&[20, 8], |i| (i as f64 * 0.3).cos()));
        let full = f.layer.forward(&mut g, x, p, x, &f.layout.dims(), &frame);
        let filt = filtered_encoder_layer(&mut g, &f.layer, x, p, &f.layout, &frame, &phi, Some(&f.bg)).unwrap();
        assert_eq!(g.value(full).data(), g.value(filt).data());
        assert_eq!(g.stats.attention_sites, 2 * 20 * 2 * 2);
    }

    #[test]
    fn unselected_rows_pass_through() {
        let f = fixture();
        let frame = SamplingFrame::points(&f.layout.reference_points(), &f.layout, 2, 2);
        let phi = vec![1, 5, 17];
        let mut g = Graph::inference(&f.store);
        let x = g.constant(Array::from_fn(&[20, 8], |i| (i as f64 * 0.7).sin()));
        let p = g.constant(Array::zeros(&[20, 8]));
        let y = filtered_encoder_layer(&mut g, &f.layer, x, p, &f.layout, &frame, &phi, None).unwrap();
        assert_eq!(g.stats.attention_sites, 3 * 2 * 2);
        for r in 0..20 {
            let same = g.value(x).row(r) == g.value(y).row(r);
            assert_eq!(same, !phi.contains(&r), "row {r}");
        }
        // empty active set: background only
        let y = filtered_encoder_layer(&mut g, &f.layer, x, p, &f.layout, &frame, &[], Some(&f.bg)).unwrap();
        let (_, i, j) = f.layout.cell(18);
        let e = f.bg.embed(&f.store, i, j).unwrap();
        for c in 0..8 {
            assert_eq!(g.value(y).row(18)[c], g.value(x).row(18)[c] + e[c]);
        }
    }

    #[test]
    fn background_rows_share_halves() {
        let f = fixture();
        let a = f.bg.embed(&f.store, 1, 2).unwrap();
        let b = f.bg.embed(&f.store, 1, 3).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a[..4], b[..4]);
        assert!(matches!(f.bg.embed(&f.store, 4, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn background_receives_gradient_through_unselected_tokens() {
        let f = fixture();
        let frame = SamplingFrame::points(&f.layout.reference_points(), &f.layout, 2, 2);
        let phi = vec![0, 16];
        let x0 = Array::from_fn(&[20, 8], |i| (i as f64 * 0.7).sin());
        // token 5 is cell (1, 1) of level 0 and is unselected
        let loss_of = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let x = g.constant(x0.clone());
            let p = g.constant(Array::zeros(&[20, 8]));
            let y = filtered_encoder_layer(&mut g, &f.layer, x, p, &f.layout, &frame, &phi, Some(&f.bg)).unwrap();
            let r = g.slice_rows(y, 5, 1);
            let r = g.square(r);
            let l = g.sum(r);
            (g.value(l).item(), g.backward(l).param(f.bg.rows).map(|v| v.to_vec()))
        };
        let (_, analytic) = loss_of(&f.store);
        let analytic = analytic.unwrap();
        let rows0 = f.store.value(f.bg.rows).clone();
        let numeric = numeric_grad(&rows0, 1e-6, |r| {
            let mut s = f.store.clone();
            *s.value_mut(f.bg.rows) = r.clone();
            loss_of(&s).0
        });
        let row1: Vec<f64> = numeric[4..8].to_vec();
        assert!(row1.iter().any(|v| v.abs() > 1e-6));
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6);
        }
    }
}
