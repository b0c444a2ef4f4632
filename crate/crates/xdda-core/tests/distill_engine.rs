//! Teacher-student engine: step contracts, pseudo-label invariants, EMA
//! exactness, and pipeline-level properties on a miniature dataset.

use rand::Rng;

use xdda_core::data::{build_dataset, DomainShiftSpec, SceneSpec, SplitCounts};
use xdda_core::detector::boxes::{iou, BBox, GtBox};
use xdda_core::detector::losses::{branch_loss, rpn_loss_on};
use xdda_core::detector::model::{BranchKind, DualBranchModel, InferenceConfig, ModelDims};
use xdda_core::distill::optim::Sgd;
use xdda_core::distill::{
    cdd_step, ema_update, generate_pseudo_labels, jdp_step, run_pipeline, DistillConfig,
    DistillError, Stage, TeacherStudentPair, TrainScene,
};
use xdda_core::image::ImageF;
use xdda_core::perceiver::PerceiverConfig;
use xdda_core::rng::rng_from;
use xdda_core::tensor::gradcheck::check_gradients;
use xdda_core::tensor::Tensor;

fn tiny_dims() -> ModelDims {
    ModelDims {
        image_size: 16,
        conv_channels: [2, 3, 4],
        top_k: 4,
        perceiver: PerceiverConfig { d_model: 8, heads: 2, d_head: 4, d_geo_emb: 16, iterations: 2 },
        ..Default::default()
    }
}

fn tiny_config() -> DistillConfig {
    DistillConfig {
        iters_jdp: 4,
        iters_cdd_plus_dtr: 6,
        cdd_warmup: 3,
        eval_every: 2,
        ..Default::default()
    }
}

fn random_image(seed: u64, size: usize) -> ImageF {
    let mut rng = rng_from(seed);
    let px: Vec<f64> = (0..size * size * 3).map(|_| rng.random::<f64>()).collect();
    ImageF::new(size, size, 3, px).unwrap()
}

fn scene(seed: u64, size: usize) -> TrainScene {
    TrainScene {
        image: random_image(seed, size),
        annotations: vec![
            GtBox { bbox: BBox::new(2.0, 3.0, 9.0, 8.0), class_id: 0 },
            GtBox { bbox: BBox::new(8.0, 9.0, 6.0, 6.0), class_id: 2 },
        ],
    }
}

#[test]
fn jdp_step_reports_nonnegative_terms() {
    let dims = tiny_dims();
    let student = DualBranchModel::new(dims, 1).unwrap();
    let mut opt = Sgd::new(0.01, 0.9, 5e-4);
    let mut rng = rng_from(2);
    let cfg = tiny_config();
    let breakdown = jdp_step(&student, &scene(3, 16), &scene(4, 16), &mut opt, &mut rng, &cfg).unwrap();
    for name in ["rpn_src", "rpn_tl", "sa_src", "tl_tl"] {
        let v = breakdown.term(name).unwrap_or_else(|| panic!("missing term {name}"));
        assert!(v.is_finite() && v >= 0.0, "{name} = {v}");
    }
    assert!(breakdown.total >= 0.0);
}

/// The summed pretraining loss (both RPN terms, SA on source, TL on
/// target-like) matches finite differences with the discrete proposal
/// structure held fixed.
#[test]
fn jdp_loss_gradient_check() {
    let dims = tiny_dims();
    let model = DualBranchModel::new(dims, 11).unwrap();
    let cfg = tiny_config().loss_config();
    let src = scene(13, 16);
    let tl = scene(14, 16);

    let plan_src = model.plan_proposals(&model.rpn_forward(&src.image).unwrap());
    let plan_tl = model.plan_proposals(&model.rpn_forward(&tl.image).unwrap());
    let build = || {
        let rpn_s = model.rpn_forward(&src.image).unwrap();
        let rpn_t = model.rpn_forward(&tl.image).unwrap();
        let f_s = model.pool_plan_features(&rpn_s.feat_map, &plan_src).unwrap();
        let f_t = model.pool_plan_features(&rpn_t.feat_map, &plan_tl).unwrap();
        let l_rpn_s = rpn_loss_on(&rpn_s, &src.annotations, &cfg).unwrap();
        let l_rpn_t = rpn_loss_on(&rpn_t, &tl.annotations, &cfg).unwrap();
        let sa = model.branch_forward(BranchKind::Sa, &f_s, &plan_src.boxes, false).unwrap();
        let l_sa = branch_loss(&sa, &plan_src.boxes, &src.annotations, dims.num_classes, &cfg).unwrap();
        let tlb = model.branch_forward(BranchKind::Tl, &f_t, &plan_tl.boxes, false).unwrap();
        let l_tl = branch_loss(&tlb, &plan_tl.boxes, &tl.annotations, dims.num_classes, &cfg).unwrap();
        l_rpn_s
            .tensor
            .add(&l_rpn_t.tensor)
            .unwrap()
            .add(&l_sa.tensor)
            .unwrap()
            .add(&l_tl.tensor)
            .unwrap()
    };
    let params = model.named_parameters();
    let named: Vec<(&str, &Tensor)> = params.iter().map(|p| (p.name(), p.tensor())).collect();
    let report = check_gradients(build, &named, 1e-3, 1e-4, 4, 17).unwrap();
    assert!(report.max_rel_err < 1e-4, "worst {}", report.max_rel_err);
}

/// The distillation loss against fixed pseudo labels (RPN against both sets,
/// SA branch with perceiver, TL branch plain) passes the same oracle.
#[test]
fn cdd_loss_gradient_check_with_fixed_pseudo_labels() {
    let dims = tiny_dims();
    let model = DualBranchModel::new(dims, 21).unwrap();
    let cfg = tiny_config().loss_config();
    let target = random_image(23, 16);
    let pseudo_sa = vec![GtBox { bbox: BBox::new(3.0, 2.0, 8.0, 9.0), class_id: 1 }];
    let pseudo_tl = vec![GtBox { bbox: BBox::new(7.0, 8.0, 7.0, 6.0), class_id: 0 }];

    let plan = model.plan_proposals(&model.rpn_forward(&target).unwrap());
    let build = || {
        let rpn = model.rpn_forward(&target).unwrap();
        let feats = model.pool_plan_features(&rpn.feat_map, &plan).unwrap();
        let l_rpn_sa = rpn_loss_on(&rpn, &pseudo_sa, &cfg).unwrap();
        let l_rpn_tl = rpn_loss_on(&rpn, &pseudo_tl, &cfg).unwrap();
        let sa = model.branch_forward(BranchKind::Sa, &feats, &plan.boxes, true).unwrap();
        let l_sa = branch_loss(&sa, &plan.boxes, &pseudo_sa, dims.num_classes, &cfg).unwrap();
        let tl = model.branch_forward(BranchKind::Tl, &feats, &plan.boxes, false).unwrap();
        let l_tl = branch_loss(&tl, &plan.boxes, &pseudo_tl, dims.num_classes, &cfg).unwrap();
        l_rpn_sa
            .tensor
            .add(&l_rpn_tl.tensor)
            .unwrap()
            .add(&l_sa.tensor)
            .unwrap()
            .add(&l_tl.tensor)
            .unwrap()
    };
    let params = model.named_parameters();
    let named: Vec<(&str, &Tensor)> = params.iter().map(|p| (p.name(), p.tensor())).collect();
    let report = check_gradients(build, &named, 1e-3, 1e-4, 4, 29).unwrap();
    assert!(report.max_rel_err < 1e-4, "worst {}", report.max_rel_err);
}

#[test]
fn pseudo_labels_empty_when_teacher_unconfident() {
    let dims = tiny_dims();
    // Freshly initialized heads produce near-uniform class scores, far below
    // the 0.7 threshold.
    let teacher = DualBranchModel::new(dims, 31).unwrap().deep_clone(true);
    let cfg = tiny_config();
    let out = generate_pseudo_labels(&teacher, &random_image(33, 16), &cfg).unwrap();
    assert!(out.sa.is_empty());
    assert!(out.tl.is_empty());
}

#[test]
fn pseudo_label_sets_satisfy_invariants_over_random_teachers() {
    let dims = tiny_dims();
    let cfg = tiny_config();
    let mut checked = 0;
    for seed in 0..100u64 {
        let teacher = DualBranchModel::new(dims, 1000 + seed).unwrap();
        // Sharpen the class head so some detections clear the threshold.
        for p in teacher.named_parameters() {
            if p.name().ends_with("cls.weight") || p.name().ends_with("cls.bias") {
                p.apply_update(|d| {
                    let mut r = rng_from(2000 + seed);
                    for v in d.iter_mut() {
                        *v = 4.0 * xdda_core::rng::sample_normal(&mut r);
                    }
                });
            }
        }
        let teacher = teacher.deep_clone(true);
        let out = generate_pseudo_labels(&teacher, &random_image(seed, 16), &cfg).unwrap();
        for set in [&out.sa, &out.tl] {
            for d in set {
                assert!(d.score >= cfg.pseudo_threshold);
            }
            for i in 0..set.len() {
                for j in i + 1..set.len() {
                    if set[i].class_id == set[j].class_id {
                        assert!(
                            iou(&set[i].bbox, &set[j].bbox) <= cfg.nms_iou,
                            "seed {seed}: duplicate boxes survived"
                        );
                    }
                }
            }
            checked += set.len();
        }
    }
    assert!(checked > 0, "sweep never produced a confident detection");
}

#[test]
fn cdd_step_requires_distillation_stage() {
    let dims = tiny_dims();
    let student = DualBranchModel::new(dims, 41).unwrap();
    let teacher = student.deep_clone(true);
    let pair = TeacherStudentPair { teacher, student, stage: Stage::Jdp };
    let mut opt = Sgd::new(0.01, 0.9, 5e-4);
    let mut rng = rng_from(43);
    let cfg = tiny_config();
    let err = cdd_step(
        &pair,
        &scene(44, 16),
        &scene(45, 16),
        &random_image(46, 16),
        &mut opt,
        &mut rng,
        &cfg,
    );
    assert!(matches!(err, Err(DistillError::Contract(_))));
}

#[test]
fn cdd_step_with_empty_pseudo_reduces_to_supervised_terms() {
    let dims = tiny_dims();
    let student = DualBranchModel::new(dims, 51).unwrap();
    let teacher = DualBranchModel::new(dims, 52).unwrap().deep_clone(true); // unconfident
    let pair = TeacherStudentPair { teacher, student, stage: Stage::Cdd };
    let mut opt = Sgd::new(0.01, 0.9, 5e-4);
    let mut rng = rng_from(53);
    let cfg = tiny_config();
    let b = cdd_step(
        &pair,
        &scene(54, 16),
        &scene(55, 16),
        &random_image(56, 16),
        &mut opt,
        &mut rng,
        &cfg,
    )
    .unwrap();
    assert_eq!(b.term("rpn_tgt"), Some(0.0));
    assert_eq!(b.term("sa_tgt"), Some(0.0));
    assert_eq!(b.term("tl_tgt"), Some(0.0));
    let supervised: f64 = ["rpn_src", "rpn_tl", "sa_src", "tl_tl"]
        .iter()
        .map(|n| b.term(n).unwrap())
        .sum();
    assert!((b.total - supervised).abs() < 1e-12);
}

#[test]
fn cdd_breakdown_has_all_terms_finite() {
    let dims = tiny_dims();
    let student = DualBranchModel::new(dims, 61).unwrap();
    // Confident teacher via sharpened heads.
    let teacher = DualBranchModel::new(dims, 62).unwrap();
    for p in teacher.named_parameters() {
        if p.name().contains(".cls.") {
            p.apply_update(|d| {
                let mut r = rng_from(63);
                for v in d.iter_mut() {
                    *v = 5.0 * xdda_core::rng::sample_normal(&mut r);
                }
            });
        }
    }
    let teacher = teacher.deep_clone(true);
    let pair = TeacherStudentPair { teacher, student, stage: Stage::Cdd };
    let mut opt = Sgd::new(0.01, 0.9, 5e-4);
    let mut rng = rng_from(64);
    let cfg = tiny_config();
    let b = cdd_step(
        &pair,
        &scene(65, 16),
        &scene(66, 16),
        &random_image(67, 16),
        &mut opt,
        &mut rng,
        &cfg,
    )
    .unwrap();
    assert!(b.terms.len() >= 7);
    for (name, v) in &b.terms {
        assert!(v.is_finite(), "{name} = {v}");
    }
}

#[test]
fn ema_alpha_one_keeps_teacher_bit_identical() {
    let dims = tiny_dims();
    let student = DualBranchModel::new(dims, 71).unwrap();
    let teacher = DualBranchModel::new(dims, 72).unwrap().deep_clone(true);
    let before: Vec<Vec<f64>> = teacher.named_parameters().iter().map(|p| p.values()).collect();
    ema_update(&teacher, &student, 1.0).unwrap();
    for (p, b) in teacher.named_parameters().iter().zip(&before) {
        for (x, y) in p.values().iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn ema_alpha_zero_copies_student_exactly() {
    let dims = tiny_dims();
    let student = DualBranchModel::new(dims, 73).unwrap();
    let teacher = DualBranchModel::new(dims, 74).unwrap().deep_clone(true);
    ema_update(&teacher, &student, 0.0).unwrap();
    for (t, s) in teacher.named_parameters().iter().zip(student.named_parameters()) {
        assert_eq!(t.values(), s.values());
    }
}

#[test]
fn ema_paper_alpha_is_exact_convex_combination() {
    let dims = tiny_dims();
    let student = DualBranchModel::new(dims, 75).unwrap();
    let teacher = DualBranchModel::new(dims, 76).unwrap().deep_clone(true);
    // Pin one parameter to the documented arithmetic case.
    teacher.named_parameters()[0].apply_update(|d| d[0] = 1.0);
    student.named_parameters()[0].apply_update(|d| d[0] = 0.0);
    let before: Vec<Vec<f64>> = teacher.named_parameters().iter().map(|p| p.values()).collect();
    let svals: Vec<Vec<f64>> = student.named_parameters().iter().map(|p| p.values()).collect();
    let alpha = 0.9996;
    ema_update(&teacher, &student, alpha).unwrap();
    assert_eq!(teacher.named_parameters()[0].values()[0], 0.9996);
    for ((p, b), s) in teacher.named_parameters().iter().zip(&before).zip(&svals) {
        for ((x, t0), s0) in p.values().iter().zip(b).zip(s) {
            let want = alpha * t0 + (1.0 - alpha) * s0;
            // Within one ulp of the direct expression.
            assert!(
                (*x == want) || (x.to_bits().abs_diff(want.to_bits()) <= 1),
                "{x} vs {want}"
            );
            // Elementwise convex combination: x lies on the segment [t0, s0].
            let (lo, hi) = if t0 <= s0 { (t0, s0) } else { (s0, t0) };
            assert!(*x >= lo - 1e-15 && *x <= hi + 1e-15);
        }
    }
    // Student untouched.
    for (p, s) in student.named_parameters().iter().zip(&svals) {
        assert_eq!(&p.values(), s);
    }
}

#[test]
fn ema_rejects_mismatched_parameter_sets() {
    let dims = tiny_dims();
    let sym = ModelDims { attention_mode: xdda_core::perceiver::AttentionMode::Sym, ..dims };
    let student = DualBranchModel::new(sym, 77).unwrap();
    let teacher = DualBranchModel::new(dims, 78).unwrap().deep_clone(true);
    assert!(matches!(
        ema_update(&teacher, &student, 0.5),
        Err(DistillError::Contract(_))
    ));
}

fn tiny_dataset(seed: u64) -> xdda_core::data::Dataset {
    let counts = SplitCounts { train_source: 6, train_target: 6, eval_target: 4 };
    let spec = SceneSpec { height: 16, width: 16, max_objects: 2, ..Default::default() };
    build_dataset(&counts, seed, &spec, &DomainShiftSpec::default()).unwrap()
}

#[test]
fn minimal_pipeline_completes_and_emits_metrics() {
    let dims = tiny_dims();
    let cfg = DistillConfig {
        iters_jdp: 1,
        iters_cdd_plus_dtr: 1,
        cdd_warmup: 1,
        eval_every: 1,
        ..Default::default()
    };
    let ds = tiny_dataset(81);
    let result = run_pipeline(&dims, &cfg, &ds, 7).unwrap();
    assert!(!result.metrics.is_empty());
    assert!(result.teacher.is_frozen());
    assert!(!result.student.is_frozen());
}

#[test]
fn pipeline_is_deterministic_for_a_fixed_seed() {
    let dims = tiny_dims();
    let cfg = tiny_config();
    let ds = tiny_dataset(91);
    let a = run_pipeline(&dims, &cfg, &ds, 3).unwrap();
    let b = run_pipeline(&dims, &cfg, &ds, 3).unwrap();
    let ja = serde_json::to_string(&a.metrics.iter().collect::<Vec<_>>()).unwrap();
    let jb = serde_json::to_string(&b.metrics.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(ja, jb, "metrics history must be bit-identical");
    for (x, y) in a.teacher.named_parameters().iter().zip(b.teacher.named_parameters()) {
        assert_eq!(x.values(), y.values());
    }
}

#[test]
fn teacher_parameters_frozen_through_warmup_and_move_in_dtr() {
    let dims = tiny_dims();
    let ds = tiny_dataset(95);
    let cfg = DistillConfig {
        iters_jdp: 2,
        iters_cdd_plus_dtr: 4,
        cdd_warmup: 4, // never reaches refinement
        eval_every: 100,
        ..Default::default()
    };
    let frozen_run = run_pipeline(&dims, &cfg, &ds, 5).unwrap();

    let cfg_jdp_only = DistillConfig { iters_cdd_plus_dtr: 0, cdd_warmup: 0, ..cfg };
    let jdp_run = run_pipeline(&dims, &cfg_jdp_only, &ds, 5).unwrap();

    // With warmup covering all distillation iterations, the teacher equals
    // the JDP checkpoint bit for bit.
    for (a, b) in frozen_run
        .teacher
        .named_parameters()
        .iter()
        .zip(jdp_run.teacher.named_parameters())
    {
        assert_eq!(a.values(), b.values(), "{}", a.name());
    }

    // Allowing refinement moves the teacher.
    let cfg_dtr = DistillConfig { cdd_warmup: 1, ..cfg };
    let dtr_run = run_pipeline(&dims, &cfg_dtr, &ds, 5).unwrap();
    let moved = dtr_run
        .teacher
        .named_parameters()
        .iter()
        .zip(jdp_run.teacher.named_parameters())
        .any(|(a, b)| a.values() != b.values());
    assert!(moved, "refinement must update the teacher");
}

#[test]
fn teacher_never_carries_gradients() {
    let dims = tiny_dims();
    let ds = tiny_dataset(97);
    let cfg = tiny_config();
    let result = run_pipeline(&dims, &cfg, &ds, 11).unwrap();
    for p in result.teacher.named_parameters() {
        assert!(!p.requires_grad());
        assert!(p.grad().is_none());
    }
}

#[test]
fn inference_ignores_tl_branch_and_perceiver() {
    let dims = tiny_dims();
    let model = DualBranchModel::new(dims, 99).unwrap();
    let img = random_image(101, 16);
    let inf = InferenceConfig::default();
    let base = model.detect(&img, BranchKind::Sa, &inf).unwrap();

    // Wreck the TL branch and both perceiver parameter sets.
    for p in model.named_parameters() {
        if p.name().starts_with("tl_branch") || p.name().starts_with("perceiver") {
            p.apply_update(|d| d.iter_mut().for_each(|v| *v = 1234.5));
        }
    }
    let after = model.detect(&img, BranchKind::Sa, &inf).unwrap();
    assert_eq!(base, after, "SA-branch inference must not touch TL or perceiver");
}
