use viewconsist_core::experiment::{evaluate_split, pretrain_model};
use viewconsist_core::{
    generate_source, generate_target, pose_invariant_distance, BenchConfig, Benchmark,
    DomainShiftConfig, ExperimentConfig, ShapeTemplate, Split, TrainConfig,
};

fn template() -> ShapeTemplate {
    ShapeTemplate {
        surface_points: 40,
        ..ShapeTemplate::chair()
    }
}

#[test]
fn views_of_one_object_share_their_shape() {
    let targets = generate_target(&template(), 5, 8, &DomainShiftConfig::default(), 3).unwrap();
    for set in &targets {
        assert_eq!(set.views.len(), 8);
        let first = &set.views[0].gt;
        for v in &set.views {
            assert_eq!(v.object_id, set.object_id);
            assert!(pose_invariant_distance(first, &v.gt).unwrap() < 1e-20 * (1.0 + first.norm_squared()));
        }
        // distinct viewpoints really rotate the labels
        assert!((set.views[0].gt.coords() - set.views[1].gt.coords()).amax() > 1e-3);
    }
}

#[test]
fn corruption_only_touches_inputs() {
    let clean = generate_target(&template(), 4, 5, &DomainShiftConfig::none(), 11).unwrap();
    let shifted = generate_target(&template(), 4, 5, &DomainShiftConfig::default(), 11).unwrap();
    for (a, b) in clean.iter().zip(&shifted) {
        for (u, v) in a.views.iter().zip(&b.views) {
            assert_eq!(u.gt, v.gt);
            assert_eq!(u.diagonal, v.diagonal);
            assert_eq!(u.camera_rotation, v.camera_rotation);
            assert_eq!(u.subtype, v.subtype);
            assert_ne!(u.input, v.input);
        }
    }
}

#[test]
fn diagonal_is_the_label_bounding_box_diagonal() {
    for s in generate_source(&template(), 10, 2, 4).unwrap() {
        assert_eq!(s.diagonal, s.gt.bbox_diagonal());
        let c = s.gt.coords();
        let ext: f64 = c
            .row_iter()
            .map(|r| {
                let (lo, hi) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
                (hi - lo).powi(2)
            })
            .sum();
        assert!((ext.sqrt() - s.diagonal).abs() < 1e-12);
    }
}

#[test]
fn occlusion_zeroes_the_requested_fraction_of_points() {
    let shift = DomainShiftConfig {
        dropout_rate: 0.25,
        ..DomainShiftConfig::none()
    };
    let t = template();
    let expected = (0.25 * t.surface_points as f64).round() as usize;
    for set in generate_target(&t, 3, 4, &shift, 5).unwrap() {
        for v in &set.views {
            let zeros = v.input.chunks(3).filter(|p| p.iter().all(|x| *x == 0.0)).count();
            assert_eq!(zeros, expected);
        }
    }
}

#[test]
fn generation_is_seeded() {
    let cfg = BenchConfig {
        template: template(),
        source_models: 10,
        holdout_models: 4,
        target_models: 3,
        target_views: 4,
        ..BenchConfig::default()
    };
    let a = Benchmark::generate(&cfg, 1).unwrap();
    assert_eq!(a, Benchmark::generate(&cfg, 1).unwrap());
    assert_ne!(a, Benchmark::generate(&cfg, 2).unwrap());
}

#[test]
fn dataset_files_round_trip_byte_for_byte() {
    let cfg = BenchConfig {
        template: template(),
        source_models: 10,
        holdout_models: 4,
        target_models: 3,
        target_views: 4,
        ..BenchConfig::default()
    };
    let bench = Benchmark::generate(&cfg, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    bench.write(&first, &cfg, 8).unwrap();
    let (read, manifest) = Benchmark::read(&first).unwrap();
    assert_eq!(read, bench);
    assert_eq!(manifest.seed, 8);
    assert_eq!(manifest.config, cfg);
    read.write(&second, &manifest.config, manifest.seed).unwrap();
    for name in ["manifest.json", "source.jsonl", "holdout.jsonl", "target.jsonl"] {
        assert_eq!(
            std::fs::read(first.join(name)).unwrap(),
            std::fs::read(second.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn target_error_exceeds_holdout_error() {
    let cfg = ExperimentConfig {
        bench: BenchConfig {
            target_models: 10,
            target_views: 6,
            ..BenchConfig::default()
        },
        train: TrainConfig {
            pretrain_epochs: 100,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let bench = Benchmark::generate(&cfg.bench, 0).unwrap();
    let (params, _, _) = pretrain_model(&bench, &cfg, 0).unwrap();
    let holdout = evaluate_split(&params, &bench, Split::Holdout, 0, serde_json::Value::Null).unwrap();
    let target = evaluate_split(&params, &bench, Split::Target, 0, serde_json::Value::Null).unwrap();
    assert!(
        target.mean_ae > 1.2 * holdout.mean_ae,
        "target AE {} vs holdout AE {}",
        target.mean_ae,
        holdout.mean_ae
    );
}
