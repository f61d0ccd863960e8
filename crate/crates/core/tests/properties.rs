// SPDX-License-Identifier: MIT OR Apache-2.0

use csae_core::data::*;
use csae_core::diagnostics::*;
use csae_core::model::argmax;
use csae_core::tokenizer::{tokenize_batch, TokenizerDims, TokenizerParams};
use csae_core::{AdamState, Parameters, StepLrSchedule, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit() -> impl Strategy<Value = f32> {
    0.0f32..=1.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_length_must_match_shape(shape in prop::collection::vec(1usize..5, 1..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(&shape, vec![0.0f32; n]).is_ok());
        prop_assert!(Tensor::new(&shape, vec![0.0f32; n + extra]).is_err());
        let t = Tensor::<f32>::zeros(&shape);
        prop_assert_eq!(t.numel(), t.data().len());
    }

    #[test]
    fn step_lr_is_closed_form_and_non_increasing(base in 1e-5f64..1.0, step in 1usize..20, gamma in 0.01f64..=1.0, e in 0usize..200) {
        let s = StepLrSchedule::new(base, step, gamma).unwrap();
        let expect = base * gamma.powi((e / step) as i32);
        prop_assert!((s.lr(e) - expect).abs() <= 1e-12 * expect.max(1e-300));
        prop_assert!(s.lr(e + 1) <= s.lr(e));
    }

    #[test]
    fn adam_moments_track_parameter_shapes(dims in prop::collection::vec(1usize..6, 5)) {
        let d = TokenizerDims { concepts: dims[0], positions: dims[1], channels: dims[2], embed: dims[3], mask: dims[4] };
        let p = TokenizerParams::<f32>::zeros(d);
        let a = AdamState::new(&p);
        let shapes: Vec<&[usize]> = p.tensors().into_iter().map(|t| t.shape()).collect();
        let moments: Vec<&[usize]> = a.first_moments().iter().map(|t| t.shape()).collect();
        prop_assert_eq!(shapes, moments);
    }

    #[test]
    fn fusion_zeroes_absent_concepts(scores in prop::collection::vec(prop_oneof![Just(0.0f32), unit()], 1..6),
                                     seed in any::<u64>()) {
        let d = 4;
        let raw = Tensor::from_fn(&[scores.len(), d], |i| ((seed >> (i % 60)) & 7) as f32 / 7.0);
        let ann = ConceptAnnotation::fused(scores.clone(), raw.clone()).unwrap();
        for (i, &s) in scores.iter().enumerate() {
            if s == 0.0 {
                prop_assert!(ann.mask(i).iter().all(|&v| v == 0.0));
            } else {
                prop_assert_eq!(ann.mask(i), &raw.data()[i * d..(i + 1) * d]);
            }
            prop_assert!(ann.mask(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        prop_assert!(fuse_annotation(0.0, &[0.3, 1.0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generated_samples_satisfy_scene_invariants(seed in any::<u64>(), id in 0u32..10_000) {
        let s = generate_sample(seed, id);
        prop_assert_eq!(s.image.shape(), &IMAGE_SHAPE[..]);
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let scene = s.scene.clone().unwrap();
        prop_assert_eq!(s.label, scene.label());
        prop_assert_eq!(&s.foreground, &scene.foreground());
        let masks = scene.visible_masks();
        for sh in &scene.shapes {
            prop_assert!(sh.x + sh.side <= CANVAS && sh.y + sh.side <= CANVAS);
        }
        if scene.shapes.len() == 2 {
            let raw: Vec<Vec<bool>> = scene.shapes.iter().map(|sh| sh.pixel_mask()).collect();
            let area = |m: &Vec<bool>| m.iter().filter(|&&b| b).count();
            let shared = raw[0].iter().zip(&raw[1]).filter(|(a, b)| **a && **b).count();
            prop_assert!(shared as f64 <= 0.4 * area(&raw[0]).min(area(&raw[1])) as f64);
            // the shape painted last is fully visible
            prop_assert_eq!(area(&masks[1]), area(&raw[1]));
        }
        for grid in [8usize, 16, 32] {
            let r = s.regions(grid).unwrap();
            prop_assert_eq!(r.len(), grid * grid);
            for (f, b) in r.foreground.iter().zip(&r.background) {
                prop_assert!(f ^ b);
            }
            let ann = s.annotation(grid).unwrap();
            for c in 0..ann.num_concepts() {
                if ann.scores[c] == 0.0 {
                    prop_assert!(ann.mask(c).iter().all(|&v| v == 0.0));
                }
                prop_assert!(ann.mask(c).iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn downsampled_masks_stay_in_unit_range(bits in prop::collection::vec(any::<bool>(), 64), grid in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let px: Vec<f32> = bits.iter().map(|&b| b as u8 as f32).collect();
        let out = downsample_mask(&px, 8, 8, grid).unwrap();
        prop_assert_eq!(out.len(), grid * grid);
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let total: f32 = out.iter().sum::<f32>() * (64 / (grid * grid)) as f32;
        prop_assert!((total - px.iter().sum::<f32>()).abs() < 1e-3);
    }

    #[test]
    fn scores_lie_in_open_unit_interval(seed in any::<u64>(), scale in 0.1f32..50.0) {
        let d = TokenizerDims { concepts: 3, positions: 4, channels: 2, embed: 3, mask: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = TokenizerParams::<f32>::init(d, &mut rng);
        let h = Tensor::from_fn(&[2, 4, 2], |i| scale * ((i as f32 * 0.77 + seed as f32).sin()));
        let r = tokenize_batch(&h, &p).unwrap();
        for b in 0..2 {
            for s in r.scores(b) {
                prop_assert!(s > 0.0 && s < 1.0, "score {s}");
            }
        }
    }

    #[test]
    fn entropy_is_bounded(scores in prop::collection::vec(unit(), 1..20)) {
        let e = score_entropy(&scores);
        prop_assert!((0.0..=core::f64::consts::LN_2 + 1e-12).contains(&e));
    }

    #[test]
    fn entropy_groups_partition_the_evaluated_set(
        rows in prop::collection::vec((prop::collection::vec(unit(), 4), 0usize..3, 0usize..3), 1..40)
    ) {
        let scores: Vec<Vec<f32>> = rows.iter().map(|r| r.0.clone()).collect();
        let preds: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.2).collect();
        let mut notes = Vec::new();
        let e = group_entropy(1, &scores, &preds, &labels, None, &mut notes).unwrap();
        prop_assert_eq!(e.counts[0] + e.counts[1], rows.len());
        let weighted = e.correct.unwrap_or(0.0) * e.counts[0] as f64 + e.incorrect.unwrap_or(0.0) * e.counts[1] as f64;
        prop_assert!((weighted / rows.len() as f64 - e.all).abs() < 1e-9);
    }

    #[test]
    fn js_distance_is_a_bounded_symmetric_divergence(
        a in prop::collection::vec(prop::collection::vec(unit(), 3), 1..10),
        b in prop::collection::vec(prop::collection::vec(unit(), 3), 1..10),
    ) {
        let ab = js_distance(&a, &b).unwrap();
        let ba = js_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0 && ab <= core::f64::consts::LN_2.sqrt() + 1e-12);
        prop_assert!(js_distance(&a, &a).unwrap() < 1e-12);
    }

    #[test]
    fn locr_is_invariant_under_residual_scaling(
        bits in prop::collection::vec(any::<bool>(), 16),
        seed in any::<u64>(),
        k in prop_oneof![0.01f32..0.99, 1.01f32..100.0],
    ) {
        prop_assume!(bits.iter().any(|&b| b) && bits.iter().any(|&b| !b));
        let regions = RegionMasks { foreground: bits.clone(), background: bits.iter().map(|&b| !b).collect() };
        let h = Tensor::from_fn(&[16, 3], |i| ((i as u64 ^ seed) % 97) as f32 / 13.0);
        let recon = Tensor::from_fn(&[16, 3], |i| ((i as u64).wrapping_mul(seed | 1) % 89) as f32 / 11.0);
        prop_assume!(h.zip_map(&recon, |a, b| a - b).unwrap().data().iter().any(|&v| v != 0.0));
        let Ok(base) = loc_ratio(&h, &recon, &regions) else { return Ok(()) };
        let scaled = h.zip_map(&recon, |a, b| a - k * (a - b)).unwrap();
        let r = loc_ratio(&h, &scaled, &regions).unwrap();
        prop_assert!((r - base).abs() <= 1e-4 * base.max(1e-6), "{base} vs {r}");
    }

    #[test]
    fn argmax_breaks_ties_by_lowest_index(v in prop::collection::vec(0u8..4, 1..10)) {
        let f: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        let best = f.iter().cloned().fold(f32::MIN, f32::max);
        prop_assert_eq!(argmax(&f), f.iter().position(|&x| x == best).unwrap());
    }

    #[test]
    fn auc_is_rank_invariant(rows in prop::collection::vec((0.0f32..1.0, any::<bool>()), 2..40)) {
        let (s, y): (Vec<f32>, Vec<bool>) = rows.into_iter().unzip();
        let a = auc(&s, &y);
        let shifted: Vec<f32> = s.iter().map(|v| 3.0 * v + 1.0).collect();
        prop_assert_eq!(a, auc(&shifted, &y));
        if let Some(a) = a {
            let flipped: Vec<bool> = y.iter().map(|b| !b).collect();
            prop_assert!((a + auc(&s, &flipped).unwrap() - 1.0).abs() < 1e-9);
        }
    }
}
