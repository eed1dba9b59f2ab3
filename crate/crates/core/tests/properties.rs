use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdconet::autograd::Graph;
use sdconet::boxes::giou;
use sdconet::encoder::SharedEncoder;
use sdconet::filter::{active_sizes, budget, select_active};
use sdconet::matching::{assignment_cost, hungarian};
use sdconet::metrics::psnr;
use sdconet::params::Init;
use sdconet::sr::{pixel_shuffle, SrDecoder};
use sdconet::trainer::{clip_grad_norm, global_norm, routing};
use sdconet::{Array, FilterSchedule, ModelConfig, ParamGroup, ParamStore, SrConfig, TrainConfig};

fn tiny_encoder_and_decoder() -> (ParamStore, SharedEncoder, SrDecoder) {
    let cfg = ModelConfig::tiny().encoder;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut init = Init::new(&mut store, &mut rng, ParamGroup::Feat);
    let enc = SharedEncoder::new(&mut init, &cfg).unwrap();
    let dec = SrDecoder::new(
        &mut init.with_group(ParamGroup::Sr),
        &SrConfig::default(),
        &cfg.stage_channels,
        &cfg.num_heads,
        cfg.window_size,
        cfg.mlp_ratio,
    )
    .unwrap();
    (store, enc, dec)
}

fn image(h: usize, w: usize, seed: usize) -> Array {
    Array::from_fn(&[h, w, 3], |i| ((i * 31 + seed * 7) % 97) as f64 / 97.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_dims_channels_and_sr_shape(h in 1usize..48, w in 1usize..48) {
        let (store, enc, dec) = tiny_encoder_and_decoder();
        let channels = ModelConfig::tiny().encoder.stage_channels;
        let mut g = Graph::inference(&store);
        let x = g.constant(image(h, w, 0));
        let p = enc.encode(&mut g, x).unwrap();
        for s in 0..4 {
            let d = 1usize << (s + 2);
            prop_assert_eq!(g.shape(p.levels[s]), &[h.div_ceil(d), w.div_ceil(d), channels[s]][..]);
        }
        let sr = dec.decode(&mut g, &p, x).unwrap();
        prop_assert_eq!(g.shape(sr), &[2 * h, 2 * w, 3][..]);
    }

    #[test]
    fn encoding_is_deterministic(h in 4usize..40, w in 4usize..40, seed in 0usize..100) {
        let (store, enc, _) = tiny_encoder_and_decoder();
        let run = || {
            let mut g = Graph::inference(&store);
            let x = g.constant(image(h, w, seed));
            let p = enc.encode(&mut g, x).unwrap();
            g.value(p.levels[3]).data().to_vec()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn pixel_shuffle_permutes_values(h in 1usize..6, w in 1usize..6, c in 1usize..4) {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let src = Array::from_fn(&[h, w, 4 * c], |i| i as f64);
        let x = g.constant(src);
        let y = pixel_shuffle(&mut g, x).unwrap();
        prop_assert_eq!(g.shape(y), &[2 * h, 2 * w, c][..]);
        let mut vals = g.value(y).data().to_vec();
        vals.sort_by(f64::total_cmp);
        let expect: Vec<f64> = (0..h * w * 4 * c).map(|i| i as f64).collect();
        prop_assert_eq!(vals, expect);
    }
}

fn arb_box() -> impl Strategy<Value = [f64; 4]> {
    (-5.0f64..5.0, -5.0f64..5.0, 0.01f64..4.0, 0.01f64..4.0).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

proptest! {
    #[test]
    fn giou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = giou(a, b).unwrap();
        prop_assert!((ab - giou(b, a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((giou(a, a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_beats_every_permutation(
        gts in 1usize..=6,
        extra in 0usize..3,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let queries = gts + extra;
        let cost: Vec<Vec<f64>> = (0..queries).map(|_| (0..gts).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let got = assignment_cost(&cost, &hungarian(&cost));
        let mut best = f64::INFINITY;
        let mut rows: Vec<usize> = (0..queries).collect();
        permute(&mut rows, 0, &mut |p| {
            let total: f64 = (0..gts).map(|c| cost[p[c]][c]).sum();
            best = best.min(total);
        });
        prop_assert!(got <= best + 1e-9);
    }

    #[test]
    fn clipping_never_exceeds_the_bound(
        vals in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 1..20), 1..6),
        max_norm in 0.001f64..5.0,
    ) {
        let mut grads: Vec<Option<Vec<f64>>> = vals.into_iter().map(Some).collect();
        let before = global_norm(&grads);
        let reported = clip_grad_norm(&mut grads, max_norm);
        prop_assert_eq!(before, reported);
        prop_assert!(global_norm(&grads) <= max_norm + 1e-6);
    }

    #[test]
    fn routing_and_sr_rate_laws(
        t_det in 1usize..20,
        extra in 1usize..20,
        rho in 0.001f64..0.999,
        milestones in prop::collection::vec(1usize..40, 0..3),
    ) {
        let cfg = TrainConfig { t_det, t_tot: t_det + extra, rho, milestones, ..TrainConfig::default() };
        for epoch in 1..=cfg.t_tot {
            let (stage, g) = routing(&cfg, epoch);
            prop_assert_eq!(stage == 1, epoch <= t_det);
            prop_assert_eq!(g.sr.frozen, stage == 1);
            if stage == 2 {
                prop_assert_eq!(g.sr.lr, rho * g.det.lr);
                prop_assert!(g.sr.lr < g.det.lr);
            }
        }
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed in any::<u64>(), a in 0.01f64..0.1) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = Array::full(&[8, 8, 3], 0.5);
        let noise: Vec<f64> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
        let at = |amp: f64| {
            let noisy = Array::new(vec![8, 8, 3], noise.iter().map(|n| 0.5 + amp * n).collect());
            psnr(&noisy, &clean).unwrap()
        };
        let (p1, p2, p3) = (at(a), at(2.0 * a), at(4.0 * a));
        prop_assert!(p1 > p2 && p2 > p3);
    }

    #[test]
    fn active_sets_conserve_budgets(
        counts in prop::collection::vec(1usize..300, 4),
        scores_seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(scores_seed);
        let n: usize = counts.iter().sum();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..16) as f64).collect();
        let s = FilterSchedule::published();
        let sizes = active_sizes(&s, &counts).unwrap();
        for layer in 0..s.gamma.len() {
            let set = select_active(&scores, &counts, &s, layer).unwrap();
            let mut uniq = set.phi.clone();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), set.phi.len());
            prop_assert_eq!(set.phi.len(), sizes[layer]);
            let expect: usize = counts.iter().zip(&s.beta).map(|(&c, &b)| budget(c, b, s.gamma[layer]).unwrap()).sum();
            prop_assert_eq!(set.phi.len(), expect);
        }
        // gamma never increases, so neither does any level's budget
        for (&c, &b) in counts.iter().zip(&s.beta) {
            let per_layer: Vec<usize> = s.gamma.iter().map(|&g| budget(c, b, g).unwrap()).collect();
            prop_assert!(per_layer.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}
