use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpgc_core::scene::{
    add_candidate, apply_edit, describe_edit, gen_scene, owner_map, render, AttrChange, EditKind, EditOp,
    ObjectMask, SceneConfig,
};
use vpgc_core::trainpipe::{propose_edit, select_target, significance, upsample, ObjectSignificance, SignificanceReport, Upsample};
use vpgc_core::vpg::GlobalMap;

fn random_map(side: usize, rng: &mut ChaCha8Rng) -> GlobalMap {
    let raw: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    GlobalMap {
        side,
        values: raw.iter().map(|v| v / s).collect(),
    }
}

/// Pixel-by-pixel average with each pixel reading the cell it falls in.
fn brute_force_phi(map: &GlobalMap, mask: &ObjectMask) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                let r = y as usize * map.side / mask.height as usize;
                let c = x as usize * map.side / mask.width as usize;
                sum += map.values[r * map.side + c];
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn random_mask(w: u32, h: u32, rng: &mut ChaCha8Rng) -> ObjectMask {
    loop {
        let p = rng.random_range(0.05..0.9);
        let grid: Vec<bool> = (0..w * h).map(|_| rng.random_bool(p)).collect();
        if grid.iter().any(|&b| b) {
            return ObjectMask {
                object_id: 0,
                width: w,
                height: h,
                grid,
            };
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn area_phi_matches_cellwise_average(seed in 0u64..10_000, side in 1usize..9, scale in 1u32..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(side, &mut rng);
        let w = side as u32 * scale;
        let masks: Vec<ObjectMask> = (0..3).map(|_| random_mask(w, w, &mut rng)).collect();
        let r = significance(&map, &masks, Upsample::Area).unwrap();
        for (m, o) in masks.iter().zip(&r.objects) {
            prop_assert!((o.phi - brute_force_phi(&map, m)).abs() < 1e-9);
        }
    }

    #[test]
    fn upsampling_preserves_the_mean(seed in 0u64..10_000, side in 1usize..9, w in 8u32..70, h in 8u32..70) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_map(side, &mut rng);
        let mean = map.values.iter().sum::<f64>() / map.values.len() as f64;
        let up = upsample(&map, w, h, Upsample::Area);
        let up_mean = up.iter().sum::<f64>() / up.len() as f64;
        prop_assert!((up_mean - mean).abs() < 1e-9);
        let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in upsample(&map, w, h, Upsample::Bilinear) {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn target_is_a_minimum(phis in prop::collection::vec(0.0f64..1.0, 1..8)) {
        let report = SignificanceReport {
            objects: phis.iter().enumerate().map(|(i, &phi)| ObjectSignificance { object_id: i as u32, phi }).collect(),
        };
        let t = select_target(&report).unwrap() as usize;
        prop_assert!(phis.iter().all(|&p| p >= phis[t]));
        prop_assert!(phis[..t].iter().all(|&p| p > phis[t]));
    }

    #[test]
    fn edit_postconditions(seed in 0u64..100_000) {
        let cfg = SceneConfig::default();
        let before = gen_scene(seed, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let target = before.objects[rng.random_range(0..before.objects.len())].id;
        let edit = propose_edit(&before, target, seed, &cfg).unwrap();
        let after = apply_edit(&before, &edit).unwrap();
        let sentence = describe_edit(&edit, &before).unwrap();
        let unchanged = |id: u32| before.object(id) == after.object(id);
        match &edit {
            EditOp::Delete { target: t } => {
                prop_assert_eq!(*t, target);
                prop_assert!(after.object(target).is_none());
                prop_assert_eq!(after.objects.len() + 1, before.objects.len());
                prop_assert!(sentence.ends_with("was removed"));
            }
            EditOp::Swap { a, b } => {
                prop_assert_eq!(*a, target);
                prop_assert_ne!(a, b);
                let (oa, ob) = (before.object(*a).unwrap(), before.object(*b).unwrap());
                prop_assert_eq!(after.object(*a).unwrap().center, ob.center);
                prop_assert_eq!(after.object(*b).unwrap().center, oa.center);
                prop_assert!(sentence.contains("swapped places"));
            }
            EditOp::Modify { target: t, change } => {
                prop_assert_eq!(*t, target);
                let (o, n) = (before.object(target).unwrap(), after.object(target).unwrap());
                let color = usize::from(o.color != n.color);
                let shape = usize::from(o.shape != n.shape);
                prop_assert_eq!(color + shape, 1);
                prop_assert_eq!((o.center, o.size, o.z), (n.center, n.size, n.z));
                match change {
                    AttrChange::Color(c) => prop_assert_eq!(n.color, *c),
                    AttrChange::Shape(s) => prop_assert_eq!(n.shape, *s),
                }
            }
            EditOp::Add { object, center } => {
                let owner = owner_map(&before);
                let cand = add_candidate(&before, *object, *center);
                for y in 0..before.height as i32 {
                    for x in 0..before.width as i32 {
                        if cand.covers(x, y) {
                            prop_assert!(owner[(y as u32 * before.width + x as u32) as usize].is_none());
                        }
                    }
                }
                prop_assert_eq!(after.objects.len(), before.objects.len() + 1);
                prop_assert!(sentence.contains("was added"));
            }
        }
        for o in &before.objects {
            if !edit.touched().contains(&o.id) {
                prop_assert!(unchanged(o.id));
            }
        }
        prop_assert_eq!(before.objects.len() < 2 && edit.kind() == EditKind::Swap, false);
        let (_, masks) = render(&after);
        prop_assert!(masks.iter().all(|m| m.width == after.width));
    }
}

#[test]
fn kinds_are_roughly_uniform() {
    let cfg = SceneConfig::default();
    let mut counts = [0usize; 4];
    for seed in 0..2000 {
        let s = gen_scene(seed, &cfg).unwrap();
        let e = propose_edit(&s, s.objects[0].id, seed + 1, &cfg).unwrap();
        counts[EditKind::ALL.iter().position(|&k| k == e.kind()).unwrap()] += 1;
    }
    for c in counts {
        assert!((400..600).contains(&c), "{counts:?}");
    }
}

#[test]
fn proposals_are_deterministic() {
    let cfg = SceneConfig::default();
    let s = gen_scene(3, &cfg).unwrap();
    for seed in 0..50 {
        assert_eq!(propose_edit(&s, 0, seed, &cfg).unwrap(), propose_edit(&s, 0, seed, &cfg).unwrap());
    }
}
