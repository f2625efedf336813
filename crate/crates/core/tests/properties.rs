use motion_reid::features::{featurize_session, FeatureParams, PresetName};
use motion_reid::forest::{predict_all, train, ForestParams, PredictionMatrix, PredictionRow};
use motion_reid::metrics::{
    accuracy, multiclass_auc, n_class_accuracy, n_class_accuracy_conditioned,
    n_class_accuracy_oracle, SubsetConvention, TiePolicy,
};
use motion_reid::split::{
    between_split, duration_sample, trend, within_split, DurationConfig, SessionInfo, WithinConfig,
};
use motion_reid::synth::{profile_distance, CohortSpec, ParticipantProfile};
use motion_reid::trace::{
    compose_root, euler_to_matrix, matrix_to_euler, EulerAngles, Pose, SessionKey,
};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::SeedableRng;

fn key(p: usize, week: u8) -> SessionKey {
    SessionKey {
        dataset: 1,
        week,
        section: "S01".into(),
        participant: format!("P{p:03}"),
    }
}

prop_compose! {
    /// Prediction matrix with `classes` columns and 1..=3 rows per class;
    /// scores drawn from a small grid so ties occur.
    fn prediction_matrix(max_classes: usize)(classes in 2..=max_classes)
        (scores in prop::collection::vec(prop::collection::vec(0u8..6, classes), classes..=3 * classes), classes in Just(classes))
        -> PredictionMatrix
    {
        let rows = scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| PredictionRow {
                session: key(i % classes, (i / classes) as u8 + 1),
                true_class: i % classes,
                probs: s.into_iter().map(f64::from).collect(),
            })
            .collect();
        PredictionMatrix { classes: (0..classes).map(|c| format!("P{c:03}")).collect(), rows }
    }
}

fn angles() -> impl Strategy<Value = EulerAngles> {
    (-179.0..179.0f64, -89.0..89.0f64, -179.0..179.0f64)
        .prop_map(|(y, p, r)| EulerAngles::new(y, p, r))
}

fn infos(participants: usize, weeks: u8, minutes: f64) -> Vec<SessionInfo> {
    (0..participants)
        .flat_map(|p| {
            (1..=weeks).map(move |w| SessionInfo {
                key: key(p, w),
                duration: minutes * 60.0,
            })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn euler_round_trip(a in angles()) {
        let back = matrix_to_euler(&a.matrix()).unwrap();
        let diff = (back.matrix() - a.matrix()).abs().max();
        prop_assert!(diff < 1e-12);
        prop_assert!((back.pitch - a.pitch).abs() < 1e-9);
    }

    #[test]
    fn rotations_are_orthonormal(a in angles()) {
        let r = euler_to_matrix(a.yaw, a.pitch, a.roll);
        prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_root_is_neutral(a in angles(), x in -5.0..5.0f64, z in -5.0..5.0f64) {
        let local = Pose::new(Vector3::new(x, 1.6, z), a);
        let out = compose_root(&Pose::identity(), &local);
        prop_assert!((out.position - local.position).norm() < 1e-12);
        prop_assert!((out.rotation.matrix() - a.matrix()).abs().max() < 1e-12);
    }

    #[test]
    fn auc_and_accuracy_in_unit_interval(pred in prediction_matrix(6)) {
        for tie in [TiePolicy::Half, TiePolicy::Strict] {
            let auc = multiclass_auc(&pred, tie).unwrap();
            prop_assert!((0.0..=1.0).contains(&auc));
        }
        let acc = accuracy(&pred).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn strict_ties_never_score_above_half_ties(pred in prediction_matrix(5)) {
        prop_assert!(multiclass_auc(&pred, TiePolicy::Strict).unwrap() <= multiclass_auc(&pred, TiePolicy::Half).unwrap() + 1e-15);
    }

    #[test]
    fn auc_ignores_class_relabeling(pred in prediction_matrix(5), shift in 1usize..5) {
        let c = pred.classes.len();
        let perm = |k: usize| (k + shift) % c;
        let mut moved = pred.clone();
        for r in &mut moved.rows {
            let mut probs = vec![0.0; c];
            for (k, p) in r.probs.iter().enumerate() {
                probs[perm(k)] = *p;
            }
            r.probs = probs;
            r.true_class = perm(r.true_class);
        }
        let a = multiclass_auc(&pred, TiePolicy::Half).unwrap();
        let b = multiclass_auc(&moved, TiePolicy::Half).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn n_class_accuracy_closed_forms_match_enumeration(pred in prediction_matrix(7)) {
        for n in 1..=pred.classes.len() {
            let closed = n_class_accuracy(&pred, n).unwrap();
            let enumerated = n_class_accuracy_oracle(&pred, n, SubsetConvention::Paper, None).unwrap();
            prop_assert!((closed - enumerated).abs() < 1e-12);
            let closed = n_class_accuracy_conditioned(&pred, n).unwrap();
            let enumerated = n_class_accuracy_oracle(&pred, n, SubsetConvention::Conditioned, None).unwrap();
            prop_assert!((closed - enumerated).abs() < 1e-12);
        }
    }

    #[test]
    fn n_class_accuracy_falls_with_n(pred in prediction_matrix(7)) {
        prop_assert_eq!(n_class_accuracy_conditioned(&pred, 1).unwrap(), 1.0);
        let mut last = 1.0;
        for n in 2..=pred.classes.len() {
            let v = n_class_accuracy(&pred, n).unwrap();
            prop_assert!(v <= last + 1e-15);
            last = v;
        }
    }

    #[test]
    fn spearman_bounded_and_p_valid(x in prop::collection::vec(-10.0..10.0f64, 4..30), seed in any::<u64>()) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * 0.5 + (i % 3) as f64).collect();
        let t = trend::permutation_test(&x, &y, 99, seed);
        prop_assert!(t.rho.is_nan() || (-1.0 - 1e-12..=1.0 + 1e-12).contains(&t.rho));
        prop_assert!(t.p_negative > 0.0 && t.p_negative <= 1.0);
        prop_assert!(t.p_two_sided > 0.0 && t.p_two_sided <= 1.0);
        let self_rho = trend::spearman(&x, &x);
        prop_assert!(self_rho.is_nan() || (self_rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn between_split_is_disjoint_in_weeks(participants in 2usize..6, cut in 1u8..8) {
        let train_w: Vec<u8> = (1..=cut).collect();
        let test_w: Vec<u8> = (cut + 1..=8).collect();
        let plan = between_split(&infos(participants, 8, 10.0), &train_w, &test_w).unwrap();
        plan.validate(0.0).unwrap();
        prop_assert_eq!(plan.training().count(), participants * cut as usize);
        prop_assert!(plan.training().all(|a| a.key.week <= cut));
        prop_assert!(plan.testing().all(|a| a.key.week > cut));
    }

    #[test]
    fn within_split_keeps_buffer(minutes in 10.0..30.0f64, seed in any::<u64>(), frac in 0.5..0.9f64) {
        let cfg = WithinConfig { train_fraction: frac, ..WithinConfig::default() };
        let plan = within_split(&infos(3, 2, minutes), &cfg, seed).unwrap();
        plan.validate(cfg.buffer_s).unwrap();
        for a in plan.testing() {
            for tr in &a.train {
                for te in &a.test {
                    prop_assert!(tr.gap_to(te) >= cfg.buffer_s - 1e-9);
                }
            }
        }
    }

    #[test]
    fn duration_training_sets_nest(seed in any::<u64>(), rep in 0u32..4) {
        let sessions = infos(4, 8, 12.0);
        let cfg = DurationConfig::default();
        let small = duration_sample(&sessions, 2, 3.0, &cfg, seed, rep).unwrap();
        let large = duration_sample(&sessions, 4, 3.0, &cfg, seed, rep).unwrap();
        for a in small.training() {
            prop_assert!(large.get(&a.key).is_some_and(|b| b.role == a.role));
        }
        small.validate(cfg.buffer_minutes * 60.0).unwrap();
        large.validate(cfg.buffer_minutes * 60.0).unwrap();
    }

    #[test]
    fn profile_distance_is_a_metric(s in any::<u64>()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
        let (a, b, c) = (
            ParticipantProfile::sample(&mut rng),
            ParticipantProfile::sample(&mut rng),
            ParticipantProfile::sample(&mut rng),
        );
        prop_assert_eq!(profile_distance(&a, &a), 0.0);
        prop_assert!((profile_distance(&a, &b) - profile_distance(&b, &a)).abs() < 1e-15);
        prop_assert!(profile_distance(&a, &c) <= profile_distance(&a, &b) + profile_distance(&b, &c) + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn body_space_features_ignore_rigid_placement(yaw in -180.0..180.0f64, x in -20.0..20.0f64, z in -20.0..20.0f64, seed in 0u64..1000) {
        let spec = CohortSpec { n_participants: 1, weeks: 1, minutes: 0.75, seed, ..Default::default() };
        let s = spec.generate_session(0, 1);
        let moved = s.transformed(&Pose::new(Vector3::new(x, 0.0, z), EulerAngles::new(yaw, 0.0, 0.0)));
        let preset = PresetName::M6.preset();
        let params = FeatureParams::default();
        let a = featurize_session(&s, &preset, &params).unwrap();
        let b = featurize_session(&moved, &preset, &params).unwrap();
        prop_assert_eq!(a.nrows(), b.nrows());
        let diff = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-9, "max feature change {}", diff);
    }

    #[test]
    fn forest_votes_are_distributions_and_seeded(seed in any::<u64>()) {
        let spec = CohortSpec { n_participants: 3, weeks: 2, minutes: 0.5, seed: 5, ..Default::default() };
        let preset = PresetName::M3.preset();
        let params = FeatureParams::default();
        let mats: Vec<_> = (0..3)
            .flat_map(|p| (1..=2).map(move |w| (p, w)))
            .map(|(p, w)| featurize_session(&spec.generate_session(p, w), &preset, &params).unwrap())
            .collect();
        let train_m = motion_reid::features::FeatureMatrix::concat(preset.column_names(), mats.iter().step_by(2)).unwrap();
        let fp = ForestParams { trees_per_draw: 3, draws: 2, ..ForestParams::default().with_seed(seed) };
        let f1 = train(&train_m, &fp).unwrap();
        let f2 = train(&train_m, &fp).unwrap();
        prop_assert_eq!(f1.to_bytes(), f2.to_bytes());
        let tests: Vec<_> = mats.iter().skip(1).step_by(2).map(|m| (m.sessions[0].clone(), m)).collect();
        let pred = predict_all(&f1, tests.iter().map(|(k, m)| (k, *m))).unwrap();
        for r in &pred.rows {
            prop_assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
