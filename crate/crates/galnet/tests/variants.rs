//! Integration: each training variant end to end on small synthetic data.

use galnet::checkpoint;
use galnet::data::{generate_synthetic, SyntheticConfig};
use galnet::eval::{aggregate_affinity, evaluate};
use galnet::gal::PriorGroup;
use galnet::model::{build_model, ConvBlockSpec, ModelConfig, ParamTag, Variant};
use galnet::train::{train, LrSchedule, TrainConfig};

fn small_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        m: 4,
        input: (16, 16, 1),
        backbone: vec![ConvBlockSpec::plain(8), ConvBlockSpec::plain(16)],
        branch_channels: 8,
        projection_channels: 4,
        variant,
        prior_groups: None,
        affinity_scale: false,
    }
}

fn small_data() -> (galnet::data::Dataset, galnet::data::Dataset) {
    generate_synthetic(&SyntheticConfig {
        m: 4,
        k: 2,
        factor_map: vec![0, 0, 1, 1],
        image: (16, 16),
        n_train: 160,
        n_eval: 40,
        seed: 5,
        ..Default::default()
    })
    .unwrap()
    .split(160)
    .unwrap()
}

fn small_train(variant: Variant, steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_steps: steps,
        eval_every: steps,
        ..TrainConfig::desk_default(variant)
    }
}

#[test]
fn every_variant_trains_and_improves_over_chance() {
    let (train_set, eval_set) = small_data();
    for variant in [Variant::Baseline, Variant::GalJ, Variant::GalP] {
        let mut cfg = small_model(variant);
        if variant == Variant::GalP {
            cfg.prior_groups = Some(vec![
                PriorGroup {
                    name: "low".into(),
                    members: vec![0, 1],
                },
                PriorGroup {
                    name: "high".into(),
                    members: vec![2, 3],
                },
            ]);
        }
        let (model, registry) = build_model(&cfg, 6).unwrap();
        let tc = small_train(variant, 120);
        let hist = train(&model, &registry, &train_set, Some(&eval_set), &tc, |_| {}).unwrap();
        let last = hist.last().unwrap();
        assert!(last.l_f.is_finite());
        let report = evaluate(&model, &eval_set).unwrap();
        assert!(
            report.mean_acc_f > 0.7,
            "{variant:?}: feature accuracy {} after training",
            report.mean_acc_f
        );
        if variant != Variant::Baseline {
            assert!(last.l_c.unwrap().is_finite());
            assert!(
                report.mean_acc_c.unwrap() > 0.6,
                "{variant:?}: correlation accuracy {} after training",
                report.mean_acc_c.unwrap()
            );
        }
    }
}

#[test]
fn gal_p_attention_stays_pinned_to_the_prior() {
    let (train_set, eval_set) = small_data();
    let mut cfg = small_model(Variant::GalP);
    cfg.prior_groups = Some(vec![
        PriorGroup {
            name: "low".into(),
            members: vec![0, 1],
        },
        PriorGroup {
            name: "high".into(),
            members: vec![2, 3],
        },
    ]);
    let (model, registry) = build_model(&cfg, 7).unwrap();
    let tc = small_train(Variant::GalP, 60);
    train(&model, &registry, &train_set, None, &tc, |_| {}).unwrap();
    let summary = aggregate_affinity(&model, &eval_set).unwrap();
    let prior = model.prior_graph().unwrap().affinity.to_vec();
    assert_eq!(summary.mean_attention, prior, "prior attention must not drift");
    // projections still learned under the fixed attention
    let has_proj = registry.with_tag(ParamTag::Cln).count() > 0;
    assert!(has_proj);
}

#[test]
fn gal_c_warm_start_keeps_baseline_accuracy_on_the_feature_head() {
    let dir = tempfile::tempdir().unwrap();
    let (train_set, eval_set) = small_data();

    let (base_model, base_reg) = build_model(&small_model(Variant::Baseline), 8).unwrap();
    let tc = small_train(Variant::Baseline, 150);
    train(&base_model, &base_reg, &train_set, None, &tc, |_| {}).unwrap();
    let base_report = evaluate(&base_model, &eval_set).unwrap();
    let ck = dir.path().join("base.json");
    checkpoint::save(&base_model, &base_reg, &ck).unwrap();

    let (gc_model, gc_reg) = build_model(&small_model(Variant::GalC), 9).unwrap();
    let source = checkpoint::read_file(&ck).unwrap();
    checkpoint::load_feature_net(&gc_model, &gc_reg, &source).unwrap();
    let tc = small_train(Variant::GalC, 150);
    train(&gc_model, &gc_reg, &train_set, None, &tc, |_| {}).unwrap();
    let report = evaluate(&gc_model, &eval_set).unwrap();
    // the frozen feature head carries the baseline's behavior forward;
    // batch-stat drift in the buffers allows a small wobble
    assert!(
        (report.mean_acc_f - base_report.mean_acc_f).abs() < 0.05,
        "feature-head accuracy moved from {} to {}",
        base_report.mean_acc_f,
        report.mean_acc_f
    );
    // and the correlation net actually learned something
    assert!(report.mean_acc_c.unwrap() > 0.6);
}

#[test]
fn cyclical_schedule_trains_too() {
    let (train_set, _) = small_data();
    let (model, registry) = build_model(&small_model(Variant::Baseline), 10).unwrap();
    let tc = TrainConfig {
        batch_size: 8,
        max_steps: 60,
        eval_every: 60,
        lr_schedule: LrSchedule::Cyclical {
            min_lr: 0.0,
            max_lr: 0.005,
            stepsize: 15,
        },
        ..TrainConfig::desk_default(Variant::Baseline)
    };
    let hist = train(&model, &registry, &train_set, None, &tc, |_| {}).unwrap();
    // the recorded lr follows the triangle
    assert_eq!(hist[0].lr, 0.0);
    assert!((hist[15].lr - 0.005).abs() < 1e-12);
    assert!(hist[30].lr.abs() < 1e-12);
    assert!(hist.last().unwrap().l_f.is_finite());
}
