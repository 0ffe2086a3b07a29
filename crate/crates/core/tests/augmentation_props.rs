use proptest::prelude::*;
use raf_core::augmentation::{
    combine_losses, make_plan_noise, make_plan_raf, make_plan_vanilla, AugmentError, FrameRef, LossWeights, PlanFrame,
    RafPlanner, Source,
};
use raf_core::bank::{ExpressionBank, FeatureRecord, FeatureVector};
use raf_core::retrieval::{Index, QueryConstraint, SubstituteMode};

fn world(n_frames: usize) -> (Vec<PlanFrame>, Index) {
    let mut recs = Vec::new();
    for id in 0..6 {
        for f in 0..30 {
            let t = (id * 30 + f) as f64;
            recs.push(FeatureRecord::new(
                format!("id{id}"),
                format!("{f}"),
                vec![(t * 0.7).sin(), (t * 0.3).cos(), t * 0.01],
            ));
        }
    }
    // the subject also lives in the bank and must never be retrieved
    for f in 0..10 {
        recs.push(FeatureRecord::new("subject", format!("bank{f}"), vec![f as f64 * 0.05, 0.0, 0.5]));
    }
    let index = Index::build(&ExpressionBank::ingest_records(recs, 3).unwrap()).unwrap();
    let frames = (0..n_frames)
        .map(|i| PlanFrame {
            frame_ref: FrameRef::new("subject", format!("t{i}")),
            feature: FeatureVector::new(vec![(i as f64 * 0.21).sin(), 0.1 * i as f64 % 1.0, 0.5]).unwrap(),
        })
        .collect();
    (frames, index)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn raf_plan_invariants(p in 0.0f64..=1.0, seed in any::<u64>(), epoch in 0u64..1000, top5 in any::<bool>()) {
        let (frames, index) = world(40);
        let mode = if top5 { SubstituteMode::TopKUniform(5) } else { SubstituteMode::Top1 };
        let plan = make_plan_raf(&frames, "subject", &index, p, mode, epoch, seed).unwrap();
        prop_assert_eq!(plan.items.len(), frames.len());
        let c = QueryConstraint::excluding("subject");
        for (item, f) in plan.items.iter().zip(&frames) {
            prop_assert_eq!(&item.frame_ref, &f.frame_ref);
            match item.source {
                Source::Native => {
                    prop_assert_eq!(&item.conditioning, &f.feature);
                    prop_assert!(item.neighbor.is_none());
                }
                Source::Retrieved(e) => {
                    prop_assert_ne!(index.bank().entry(e).identity_id.as_str(), "subject");
                    prop_assert_eq!(&item.conditioning, index.feature(e));
                    let top = index.knn_search(f.feature.as_slice(), mode.k(), &c).unwrap();
                    prop_assert!(top.iter().any(|n| n.entry_index == e));
                    if !top5 {
                        prop_assert_eq!(top[0].entry_index, e);
                    }
                }
                Source::Noised => prop_assert!(false, "raf plans never add noise"),
            }
        }
        prop_assert_eq!(&plan, &make_plan_raf(&frames, "subject", &index, p, mode, epoch, seed).unwrap());
    }

    #[test]
    fn substitution_flags_do_not_depend_on_mode(p in 0.0f64..=1.0, seed in any::<u64>(), epoch in 0u64..100) {
        let (frames, index) = world(30);
        let a = make_plan_raf(&frames, "subject", &index, p, SubstituteMode::Top1, epoch, seed).unwrap();
        let b = make_plan_raf(&frames, "subject", &index, p, SubstituteMode::TopKUniform(5), epoch, seed).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            prop_assert_eq!(matches!(x.source, Source::Retrieved(_)), matches!(y.source, Source::Retrieved(_)));
        }
    }

    #[test]
    fn cached_planner_matches_fresh_plans(p in 0.0f64..=1.0, seed in any::<u64>()) {
        let (frames, index) = world(25);
        let mut planner = RafPlanner::new(&frames, "subject", &index, p, SubstituteMode::TopKUniform(5), seed).unwrap();
        for epoch in [3, 0, 7, 3] {
            let cached = planner.plan(epoch).unwrap();
            let fresh = make_plan_raf(&frames, "subject", &index, p, SubstituteMode::TopKUniform(5), epoch, seed).unwrap();
            prop_assert_eq!(cached, fresh);
        }
    }

    #[test]
    fn noise_plan_is_native_plus_seeded_noise(sigma in 0.0f64..1.0, seed in any::<u64>(), epoch in 0u64..50) {
        let (frames, _) = world(20);
        let plan = make_plan_noise(&frames, sigma, epoch, seed).unwrap();
        let unit = make_plan_noise(&frames, 1.0, epoch, seed).unwrap();
        for ((item, f), u) in plan.items.iter().zip(&frames).zip(&unit.items) {
            prop_assert_eq!(item.source, Source::Noised);
            for ((c, x), cu) in item.conditioning.as_slice().iter().zip(f.feature.as_slice()).zip(u.conditioning.as_slice()) {
                // the same standard normal draw, scaled
                prop_assert!(((c - x) - sigma * (cu - x)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn combine_losses_is_convex_mixture(a in 0.0f64..10.0, b in 0.0f64..10.0, p in 0.0f64..=1.0) {
        let v = combine_losses(a, b, p).unwrap();
        prop_assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
        prop_assert!((v - ((1.0 - p) * a + p * b)).abs() <= 1e-12);
    }
}

#[test]
fn degenerate_settings_reproduce_native_features() {
    let (frames, index) = world(50);
    let raf0 = make_plan_raf(&frames, "subject", &index, 0.0, SubstituteMode::Top1, 4, 9).unwrap();
    let noise0 = make_plan_noise(&frames, 0.0, 4, 9).unwrap();
    let vanilla = make_plan_vanilla(&frames, 4, 9);
    for ((a, b), (c, f)) in raf0.items.iter().zip(&noise0.items).zip(vanilla.items.iter().zip(&frames)) {
        assert_eq!(&a.conditioning, &f.feature);
        assert_eq!(&b.conditioning, &f.feature);
        assert_eq!(&c.conditioning, &f.feature);
        assert_eq!(c.source, Source::Native);
    }
    let all = make_plan_raf(&frames, "subject", &index, 1.0, SubstituteMode::Top1, 4, 9).unwrap();
    assert_eq!(all.retrieved_count(), frames.len());
}

#[test]
fn epochs_draw_fresh_flags() {
    let (frames, index) = world(200);
    let a = make_plan_raf(&frames, "subject", &index, 0.5, SubstituteMode::Top1, 0, 1).unwrap();
    let b = make_plan_raf(&frames, "subject", &index, 0.5, SubstituteMode::Top1, 1, 1).unwrap();
    let same = a.items.iter().zip(&b.items).filter(|(x, y)| x.source == y.source).count();
    // independent Bernoulli(0.5) pairs agree about half the time
    assert!((60..140).contains(&same), "{same}");
}

#[test]
fn invalid_arguments_are_rejected() {
    let (frames, index) = world(5);
    assert!(matches!(
        make_plan_raf(&frames, "subject", &index, 1.5, SubstituteMode::Top1, 0, 0),
        Err(AugmentError::BadProbability(_))
    ));
    assert!(matches!(make_plan_noise(&frames, -0.1, 0, 0), Err(AugmentError::BadSigma(_))));
    assert!(matches!(LossWeights::new(-1.0, 0.1), Err(AugmentError::BadWeights)));
    assert!(matches!(LossWeights::new(0.0, 0.0), Err(AugmentError::BadWeights)));
    let tiny = ExpressionBank::ingest_records(
        vec![FeatureRecord::new("a", "0", vec![0.0; 3]), FeatureRecord::new("subject", "0", vec![0.0; 3])],
        3,
    )
    .unwrap();
    let tiny = Index::build(&tiny).unwrap();
    assert!(matches!(
        make_plan_raf(&frames, "subject", &tiny, 0.5, SubstituteMode::TopKUniform(5), 0, 0),
        Err(AugmentError::Retrieval(_))
    ));
}
