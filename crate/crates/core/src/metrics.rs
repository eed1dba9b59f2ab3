//! Detection AP, SR fidelity and analytic compute accounting.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, SizeBucket};
use crate::data::{self, Annotation, Sample};
use crate::detection::Detection;
use crate::encoder::effective_window;
use crate::error::{shape_err, Result};
use crate::filter::{self, AttentionBudget, FilterSchedule};
use crate::model::{ModelConfig, SdcoNet};
use crate::params::ParamStore;
use crate::spatial::ceil_div;
use crate::tensor::Array;

/// Reported when two images are identical.
pub const PSNR_CAP: f64 = 99.0;

/// Detections kept per image when scoring.
pub const MAX_DETS: usize = 100;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Mean over IoU thresholds 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when no ground truth falls in the bucket.
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
    /// Per class id, over all thresholds; classes without ground truth are absent.
    pub per_class_ap: BTreeMap<usize, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AreaRange {
    All,
    Bucket(SizeBucket),
}

impl AreaRange {
    fn admits(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Bucket(b) => SizeBucket::of_area(area) == b,
        }
    }
}

fn xyxy(b: [f64; 4]) -> [f64; 4] {
    [b[0], b[1], b[0] + b[2], b[1] + b[3]]
}

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Per-detection outcome inside one (image, class) cell.
struct Scored {
    score: f64,
    /// `Some(true)` matched, `Some(false)` unmatched, `None` ignored.
    tp: Option<bool>,
}

/// Greedy score-ordered one-to-one matching for one image and class.
fn match_image(dets: &[&Detection], gts: &[&Annotation], thr: f64, range: AreaRange) -> (Vec<Scored>, usize) {
    // ground truth outside the area range is ignored: it can absorb a detection
    // without counting as a miss; ignored boxes sort last
    let mut gt: Vec<(&Annotation, bool)> = gts
        .iter()
        .map(|a| (*a, !range.admits(a.bbox[2] * a.bbox[3])))
        .collect();
    gt.sort_by_key(|(_, ignored)| *ignored);
    let positives = gt.iter().filter(|(_, ig)| !ig).count();
    let mut taken = vec![false; gt.len()];
    let mut out = Vec::with_capacity(dets.len());
    let t = thr.min(1.0 - 1e-10);
    for d in dets {
        let mut best = t;
        let mut hit: Option<usize> = None;
        for (k, (a, ignored)) in gt.iter().enumerate() {
            if taken[k] {
                continue;
            }
            if let Some(h) = hit {
                if !gt[h].1 && *ignored {
                    break;
                }
            }
            let v = iou(xyxy(d.bbox), xyxy(a.bbox));
            if v < best {
                continue;
            }
            best = v;
            hit = Some(k);
        }
        let tp = match hit {
            Some(k) => {
                taken[k] = true;
                if gt[k].1 {
                    None
                } else {
                    Some(true)
                }
            }
            None if !range.admits(d.bbox[2] * d.bbox[3]) => None,
            None => Some(false),
        };
        out.push(Scored { score: d.score, tp });
    }
    (out, positives)
}

/// 101-point interpolated precision over recall.
fn integrate(mut scored: Vec<Scored>, positives: usize) -> Option<f64> {
    if positives == 0 {
        return None;
    }
    scored.retain(|s| s.tp.is_some());
    // stable sort keeps image order among equal scores
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    for s in &scored {
        if s.tp == Some(true) {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / positives as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

/// Per-class AP at one threshold and area range.
fn class_aps(dets: &[Detection], gts: &[Annotation], thr: f64, range: AreaRange) -> BTreeMap<usize, f64> {
    let mut classes: Vec<usize> = gts.iter().map(|a| a.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut images: Vec<u64> = gts.iter().map(|a| a.image_id).chain(dets.iter().map(|d| d.image_id)).collect();
    images.sort_unstable();
    images.dedup();
    let mut out = BTreeMap::new();
    for &c in &classes {
        let mut all = Vec::new();
        let mut positives = 0;
        for &img in &images {
            let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.image_id == img && d.class_id == c).collect();
            ds.sort_by(|a, b| b.score.total_cmp(&a.score));
            ds.truncate(MAX_DETS);
            let gs: Vec<&Annotation> = gts.iter().filter(|a| a.image_id == img && a.class_id == c).collect();
            let (scored, p) = match_image(&ds, &gs, thr, range);
            all.extend(scored);
            positives += p;
        }
        if let Some(ap) = integrate(all, positives) {
            out.insert(c, ap);
        }
    }
    out
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// AP family over all thresholds, classes and size buckets.
pub fn compute_ap(dets: &[Detection], gts: &[Annotation]) -> ApReport {
    let thresholds = iou_thresholds();
    let range_ap = |range: AreaRange| -> (Option<f64>, Vec<BTreeMap<usize, f64>>) {
        let per_thr: Vec<BTreeMap<usize, f64>> = thresholds.iter().map(|&t| class_aps(dets, gts, t, range)).collect();
        let m = mean(per_thr.iter().filter_map(|m| mean(m.values().copied())));
        (m, per_thr)
    };
    let (ap, per_thr) = range_ap(AreaRange::All);
    let at = |k: usize| mean(per_thr[k].values().copied()).unwrap_or(0.0);
    let mut per_class_ap = BTreeMap::new();
    if let Some(first) = per_thr.first() {
        for &c in first.keys() {
            per_class_ap.insert(c, per_thr.iter().map(|m| m[&c]).sum::<f64>() / per_thr.len() as f64);
        }
    }
    ApReport {
        ap: ap.unwrap_or(0.0),
        ap50: at(0),
        ap75: at(5),
        ap_s: range_ap(AreaRange::Bucket(SizeBucket::Small)).0,
        ap_m: range_ap(AreaRange::Bucket(SizeBucket::Medium)).0,
        ap_l: range_ap(AreaRange::Bucket(SizeBucket::Large)).0,
        per_class_ap,
    }
}

/// `10·log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Array, b: &Array) -> Result<f64> {
    if a.shape() != b.shape() {
        return shape_err(format!("psnr of {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// One filtering regime of the detection encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterVariant {
    pub label: String,
    pub sites: u64,
    /// Deformable-attention MACs that scale with the active query count.
    pub attention_macs: u64,
    pub detector_encoder_macs: u64,
    pub total_macs: u64,
    pub total_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub input: (usize, usize),
    pub level_tokens: Vec<usize>,
    /// Module MACs outside the detection encoder.
    pub modules: BTreeMap<String, u64>,
    pub budget: AttentionBudget,
    /// No, layer-wise, scale-level and joint filtering, in that order.
    pub variants: Vec<FilterVariant>,
    /// Joint-filtering total in GMACs (the usual "FLOPs" convention).
    pub flops_g: f64,
}

impl FlopsReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "input {}x{}, tokens {:?}\n{:<28} {:>14} {:>16} {:>16} {:>8}\n",
            self.input.0, self.input.1, self.level_tokens, "variant", "sites", "attn MACs", "total MACs", "ratio"
        );
        let base = self.variants[0].attention_macs.max(1) as f64;
        for v in &self.variants {
            s.push_str(&format!(
                "{:<28} {:>14} {:>16} {:>16} {:>8.4}\n",
                v.label,
                v.sites,
                v.attention_macs,
                v.total_macs,
                v.attention_macs as f64 / base
            ));
        }
        for (name, macs) in &self.modules {
            s.push_str(&format!("  {name:<26} {macs:>14}\n"));
        }
        s
    }
}

fn swin_layer_macs(h: usize, w: usize, c: usize, window: usize, mlp_ratio: f64) -> u64 {
    let m = effective_window(window, h, w);
    let n = (ceil_div(h, m) * m * ceil_div(w, m) * m) as u64;
    let c = c as u64;
    let hidden = (c as f64 * mlp_ratio).round() as u64;
    n * (3 * c * c + 2 * (m * m) as u64 * c + c * c + 2 * c * hidden)
}

/// Analytic multiply-accumulate counts for an `h × w` LR input.
pub fn flops_report(config: &ModelConfig, h: usize, w: usize) -> Result<FlopsReport> {
    config.validate()?;
    let e = &config.encoder;
    let dims = e.level_dims(h, w);
    let ch = &e.stage_channels;
    let tokens: Vec<usize> = dims.iter().map(|&(a, b)| a * b).collect();
    let n_all: u64 = tokens.iter().sum::<usize>() as u64;
    let mut modules = BTreeMap::new();

    let mut enc = (tokens[0] * e.patch_size * e.patch_size * 3 * ch[0]) as u64;
    for s in 0..ch.len() {
        if s > 0 {
            enc += (tokens[s] * 4 * ch[s - 1] * ch[s]) as u64;
        }
        for _ in 0..e.stage_depths[s] {
            enc += swin_layer_macs(dims[s].0, dims[s].1, ch[s], e.window_size, e.mlp_ratio);
        }
    }
    modules.insert("shared_encoder".to_string(), enc);

    let sr = &config.decoder_sr;
    let targets = [dims[2], dims[1], dims[0], (ceil_div(h, 2), ceil_div(w, 2)), (h, w)];
    let mut dec = 0u64;
    let mut dim = ch[3];
    let mut prev = dims[3];
    for (i, &(th, tw)) in targets.iter().enumerate() {
        dec += (prev.0 * prev.1 * dim * 2 * dim) as u64;
        let out = dim / 2;
        let skip = if i < 3 { ch[2 - i] } else if i == 4 { 3 } else { 0 };
        dec += (th * tw * (out + skip) * out) as u64;
        for _ in 0..sr.blocks_per_level {
            dec += swin_layer_macs(th, tw, out, e.window_size, e.mlp_ratio);
        }
        dim = out;
        prev = (th, tw);
    }
    let k = sr.recon_channels;
    dec += (h * w * 9 * dim * 4 * k + 4 * h * w * 9 * k * 3) as u64;
    modules.insert("sr_decoder".to_string(), dec);

    let hid = config.saliency.hidden as u64;
    let sal: u64 = tokens
        .iter()
        .zip(ch)
        .map(|(&n, &c)| n as u64 * (c as u64 * hid + hid * hid + hid))
        .sum();
    modules.insert("saliency_head".to_string(), sal);

    let det = &config.detector;
    let d = det.d_model as u64;
    let (heads, points, levels) = (det.heads as u64, det.points as u64, ch.len() as u64);
    let hlk = heads * levels * points;
    let dh = d / heads;
    let input_proj: u64 = tokens.iter().zip(ch).map(|(&n, &c)| (n * c) as u64 * d).sum();
    modules.insert("detector_input_proj".to_string(), input_proj);
    let classes = det.num_classes as u64;
    let box_mlp = 2 * d * d + 4 * d;
    modules.insert(
        "detector_proposals".to_string(),
        n_all * (d * d + d * classes + box_mlp),
    );
    let q = det.num_queries.min(tokens.iter().sum()) as u64;
    let ffn = det.ffn_dim as u64;
    let per_query_cross = d * hlk * 3 + hlk * 4 * dh + d * d;
    let dec_layer = q * (3 * d * d)
        + q * (4 * d * d)
        + 2 * q * q * d
        + n_all * d * d
        + q * per_query_cross
        + q * 2 * d * ffn
        + q * (d * classes + box_mlp);
    modules.insert("detector_decoder".to_string(), dec_layer * det.decoder_layers as u64);

    let schedule = config.filter.schedule();
    let budget = filter::attention_site_count(&schedule, &tokens, det.encoder_layers, det.heads, det.points)?;
    let others: u64 = modules.values().sum();
    let ones = FilterSchedule::ones(ch.len(), det.encoder_layers);
    let variant = |label: &str, beta: &[f64], gamma: &[f64]| -> Result<FilterVariant> {
        let mut active = 0u64;
        for &gm in gamma {
            for (&n, &b) in tokens.iter().zip(beta) {
                active += filter::budget(n, b, gm)? as u64;
            }
        }
        let attention_macs = active * per_query_cross;
        let enc_macs = det.encoder_layers as u64 * n_all * d * d + attention_macs + active * 2 * d * ffn;
        let total = others + enc_macs;
        Ok(FilterVariant {
            label: label.to_string(),
            sites: active * heads * points,
            attention_macs,
            detector_encoder_macs: enc_macs,
            total_macs: total,
            total_g: total as f64 / 1e9,
        })
    };
    let rows = budget.rows();
    let variants = vec![
        variant(rows[0].0, &ones.beta, &ones.gamma)?,
        variant(rows[1].0, &ones.beta, &schedule.gamma)?,
        variant(rows[2].0, &schedule.beta, &ones.gamma)?,
        variant(rows[3].0, &schedule.beta, &schedule.gamma)?,
    ];
    let flops_g = variants[3].total_g;
    Ok(FlopsReport {
        input: (h, w),
        level_tokens: tokens,
        modules,
        budget,
        variants,
        flops_g,
    })
}

/// Median frames per second over `runs` single-image forward passes after `warmup` passes.
pub fn measure_fps(model: &SdcoNet, store: &ParamStore, lr: &Array, warmup: usize, runs: usize) -> Result<f64> {
    for _ in 0..warmup {
        model.predict(store, lr, 0, MAX_DETS)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        model.predict(store, lr, 0, MAX_DETS)?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(1.0 / times[times.len() / 2].max(1e-12))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub detection: ApReport,
    /// Mean per-image PSNR of the model's SR output.
    pub psnr_db: f64,
    /// Mean per-image PSNR of bicubic ×2 upsampling.
    pub bicubic_psnr_db: f64,
    pub fps: Option<f64>,
    pub flops_g: f64,
    pub images: usize,
}

/// Predictions and SR outputs for every sample, in order.
pub fn predict_all(model: &SdcoNet, store: &ParamStore, samples: &[Sample]) -> Result<Vec<(Vec<Detection>, Array)>> {
    samples
        .par_iter()
        .map(|s| model.predict(store, &s.lr, s.image_id, MAX_DETS))
        .collect()
}

pub fn evaluate(model: &SdcoNet, store: &ParamStore, samples: &[Sample]) -> Result<(EvalReport, Vec<Detection>)> {
    let outputs = predict_all(model, store, samples)?;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let (mut p, mut pb) = (0.0, 0.0);
    for (s, (d, sr)) in samples.iter().zip(outputs) {
        dets.extend(d);
        gts.extend(s.annotations.iter().cloned());
        p += psnr(&sr, &s.hr)?;
        pb += psnr(&data::upscale(&s.lr), &s.hr)?;
    }
    let n = samples.len().max(1) as f64;
    let flops_g = match samples.first() {
        Some(s) => flops_report(&model.config, s.lr.shape()[0], s.lr.shape()[1])?.flops_g,
        None => 0.0,
    };
    Ok((
        EvalReport {
            detection: compute_ap(&dets, &gts),
            psnr_db: p / n,
            bicubic_psnr_db: pb / n,
            fps: None,
            flops_g,
            images: samples.len(),
        },
        dets,
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn det(image_id: u64, class_id: usize, score: f64, bbox: [f64; 4]) -> Detection {
        Detection {
            image_id,
            class_id,
            score,
            bbox,
        }
    }

    #[test]
    fn perfect_and_empty() {
        let g = [Annotation::new(0, 1, [10.0, 10.0, 20.0, 20.0])];
        let r = compute_ap(&[det(0, 1, 0.9, [10.0, 10.0, 20.0, 20.0])], &g);
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        assert_eq!(r.ap_s, Some(1.0));
        assert_eq!(r.ap_m, None);
        let r = compute_ap(&[], &g);
        assert_eq!((r.ap, r.ap50), (0.0, 0.0));
    }

    #[test]
    fn false_positive_after_full_recall_keeps_ap50() {
        let g = [Annotation::new(0, 0, [0.0, 0.0, 10.0, 10.0])];
        // IoU 0.9 with the ground truth
        let tp = det(0, 0, 0.9, [0.0, 0.0, 10.0, 9.0]);
        let fp = det(0, 0, 0.8, [50.0, 50.0, 10.0, 10.0]);
        assert!((iou(xyxy(tp.bbox), xyxy(g[0].bbox)) - 0.9).abs() < 1e-12);
        assert_eq!(compute_ap(&[tp, fp], &g).ap50, 1.0);
        // the false positive ranked first halves precision at every recall level
        let fp_first = det(0, 0, 0.95, [50.0, 50.0, 10.0, 10.0]);
        assert!((compute_ap(&[tp, fp_first], &g).ap50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn classes_without_ground_truth_are_excluded() {
        let g = [Annotation::new(0, 0, [0.0, 0.0, 10.0, 10.0])];
        let d = [det(0, 0, 0.9, [0.0, 0.0, 10.0, 10.0]), det(0, 3, 0.99, [20.0, 20.0, 5.0, 5.0])];
        let r = compute_ap(&d, &g);
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.per_class_ap.keys().copied().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn buckets_partition_ground_truth() {
        for a in [1.0, 1023.9, 1024.0, 9215.0, 9216.0, 1e6] {
            let hits = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large]
                .iter()
                .filter(|&&b| AreaRange::Bucket(b).admits(a))
                .count();
            assert_eq!(hits, 1);
        }
    }

    proptest! {
        #[test]
        fn ap_monotonicity(
            boxes in prop::collection::vec((0.0f64..80.0, 0.0f64..80.0, 4.0f64..30.0, 4.0f64..30.0), 1..6),
            noise in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0, 0.05f64..0.95), 6),
        ) {
            let gts: Vec<Annotation> = boxes.iter().map(|&(x, y, w, h)| Annotation::new(0, 0, [x, y, w, h])).collect();
            let dets: Vec<Detection> = boxes.iter().zip(&noise).map(|(&(x, y, w, h), &(dx, dy, s))| {
                det(0, 0, s, [x + dx, y + dy, w, h])
            }).collect();
            let base = compute_ap(&dets, &gts);
            prop_assert!(base.ap <= base.ap50 + 1e-12);
            prop_assert!((0.0..=1.0).contains(&base.ap) && (0.0..=1.0).contains(&base.ap50));
            // a lowest-score false positive cannot raise AP50
            let mut more = dets.clone();
            more.push(det(0, 0, 0.001, [500.0, 500.0, 5.0, 5.0]));
            prop_assert!(compute_ap(&more, &gts).ap50 <= base.ap50 + 1e-12);
            // an exact top-scoring hit on an extra object cannot lower AP
            let mut g2 = gts.clone();
            g2.push(Annotation::new(0, 0, [300.0, 300.0, 20.0, 20.0]));
            let mut d2 = dets.clone();
            d2.push(det(0, 0, 0.999, [300.0, 300.0, 20.0, 20.0]));
            prop_assert!(compute_ap(&d2, &g2).ap >= base.ap - 1e-12);
        }
    }

    #[test]
    fn psnr_values() {
        let a = Array::full(&[4, 4, 3], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&a, &b).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Array::zeros(&[4, 4, 1])).is_err());
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.2] {
            let n = Array::from_fn(&[4, 4, 3], |i| 0.5 + if i % 2 == 0 { amp } else { -amp });
            let v = psnr(&a, &n).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn site_accounting_matches_instrumented_forward() {
        use rand::SeedableRng;

        use crate::autograd::Graph;

        let cfg = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let net = SdcoNet::new(&mut store, &mut rng, &cfg).unwrap();
        for (h, w) in [(32, 32), (24, 40)] {
            let lr = Array::from_fn(&[h, w, 3], |i| ((i * 13) % 29) as f64 / 29.0);
            let mut g = Graph::inference(&store);
            let out = net.forward(&mut g, &lr, false).unwrap();
            let r = flops_report(&cfg, h, w).unwrap();
            assert_eq!(out.detection.encoder_sites, r.variants[3].sites);
        }
    }

    #[test]
    fn flops_ratios_and_scaling() {
        let cfg = ModelConfig::default();
        let r = flops_report(&cfg, 64, 64).unwrap();
        assert_eq!(r.variants.len(), 4);
        let base = r.variants[0].attention_macs as f64;
        let joint = r.variants[3].attention_macs as f64 / base;
        let b = r.budget.ratio(r.budget.sites_joint);
        assert!((joint - b).abs() < 1e-12);
        assert_eq!(r.variants[3].sites, r.budget.sites_joint);
        assert!(r.variants.windows(2).all(|w| w[0].label != w[1].label));
        assert!(r.variants[3].total_macs < r.variants[0].total_macs);

        let big = flops_report(&cfg, 128, 128).unwrap();
        assert_eq!(big.modules["saliency_head"], 4 * r.modules["saliency_head"]);
        assert_eq!(big.modules["detector_input_proj"], 4 * r.modules["detector_input_proj"]);

        let mut ones = cfg.clone();
        ones.filter.beta = vec![1.0; 4];
        ones.filter.gamma = vec![1.0; 6];
        let r = flops_report(&ones, 64, 64).unwrap();
        assert!(r.variants.iter().all(|v| v.total_macs == r.variants[0].total_macs));
    }
}
