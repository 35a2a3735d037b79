//! Evaluation harness contracts: pipeline identity under an oracle sampler,
//! determinism, seed-permutation invariance, and study edge cases.

use ctrldiff::controls::ControlKind;
use ctrldiff::data::generate_dataset;
use ctrldiff::eval::{
    evaluate_with_sampler, study_csv, timestep_extraction_study, CheatingSampler, EvalExtractor,
    ModelEvalSampler, StudyInputs,
};
use ctrldiff::fidelity::Classifier;
use ctrldiff::networks::{ControlBranch, UNet, UNetConfig};
use ctrldiff::probe::{ProbeConfig, ProbeModel};
use ctrldiff::rng::stream;
use ctrldiff::schedule::{build_schedule, NoiseSchedule, ScheduleKind};

const T_MAX: usize = 50;

struct Fx {
    unet: UNet<f64>,
    branch: ControlBranch<f64>,
    depth_probe: ProbeModel<f64>,
    edge_probe: ProbeModel<f64>,
    clf: Classifier<f64>,
    sched: NoiseSchedule<f64>,
}

fn fixture(seed: u64) -> Fx {
    let cfg = UNetConfig::tiny();
    let mut rng = stream(seed, "fx", 0);
    let unet = UNet::init(cfg.clone(), &mut rng).unwrap();
    let branch = ControlBranch::from_base(&unet, &mut rng);
    let depth_probe =
        ProbeModel::init(ProbeConfig::for_model(&cfg, ControlKind::Depth, 8), &mut rng).unwrap();
    let edge_probe =
        ProbeModel::init(ProbeConfig::for_model(&cfg, ControlKind::Edge, 8), &mut rng).unwrap();
    let clf = Classifier::init(4, &mut rng);
    let sched = build_schedule(T_MAX, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
    Fx { unet, branch, depth_probe, edge_probe, clf, sched }
}

#[test]
fn cheating_sampler_is_a_pipeline_identity() {
    let fx = fixture(1);
    // feature dim of the fidelity classifier is 32, so batches must exceed 33
    let ds = generate_dataset::<f64>(2, 36, 8, false);

    // edges: extraction of the generated (= reference) image matches itself
    let report = evaluate_with_sampler(
        &CheatingSampler,
        &EvalExtractor::Edge,
        &fx.clf,
        &ds,
        ControlKind::Edge,
        &fx.sched,
        36,
        &[0, 1, 2, 3],
        1.0,
        4,
        false,
        8,
    )
    .unwrap();
    assert_eq!(report.mean_ssim, 1.0, "edge SSIM must be exactly 1");
    assert_eq!(report.mean_rmse, 0.0);
    assert!(report.toy_fidelity < 1e-6, "fidelity {}", report.toy_fidelity);

    // depth: probe extraction agrees with itself exactly
    let extractor =
        EvalExtractor::DepthProbe { unet: &fx.unet, probe: &fx.depth_probe, sched: &fx.sched };
    let report = evaluate_with_sampler(
        &CheatingSampler,
        &extractor,
        &fx.clf,
        &ds,
        ControlKind::Depth,
        &fx.sched,
        36,
        &[0, 1, 2, 3],
        1.0,
        4,
        false,
        8,
    )
    .unwrap();
    assert_eq!(report.mean_rmse, 0.0, "depth RMSE must be exactly 0");
    assert_eq!(report.metric_name, "rmse");
}

#[test]
fn identical_seed_lists_give_identical_reports() {
    let fx = fixture(3);
    let ds = generate_dataset::<f64>(4, 34, 8, false);
    let sampler = ModelEvalSampler { unet: &fx.unet, branch: &fx.branch };
    let run = |seeds: &[u64]| {
        evaluate_with_sampler(
            &sampler,
            &EvalExtractor::Edge,
            &fx.clf,
            &ds,
            ControlKind::Edge,
            &fx.sched,
            34,
            seeds,
            2.0,
            3,
            false,
            17,
        )
        .unwrap()
    };
    let a = run(&[0, 1, 2, 3]);
    let b = run(&[0, 1, 2, 3]);
    assert_eq!(a.summary_csv(), b.summary_csv());
    assert_eq!(a.samples_csv(), b.samples_csv());

    // permutation invariance of the reported means
    let c = run(&[3, 1, 0, 2]);
    assert_eq!(a.mean_rmse, c.mean_rmse);
    assert_eq!(a.mean_ssim, c.mean_ssim);
    assert_eq!(a.toy_fidelity, c.toy_fidelity);
}

#[test]
fn too_few_seeds_is_an_error() {
    let fx = fixture(5);
    let ds = generate_dataset::<f64>(6, 34, 8, false);
    let err = evaluate_with_sampler(
        &CheatingSampler,
        &EvalExtractor::Edge,
        &fx.clf,
        &ds,
        ControlKind::Edge,
        &fx.sched,
        34,
        &[0, 1, 2],
        1.0,
        2,
        false,
        8,
    )
    .unwrap_err();
    assert!(err.to_string().contains("4"), "{err}");
}

#[test]
fn study_rejects_out_of_range_t_and_handles_empty_grids() {
    let fx = fixture(7);
    let ds = generate_dataset::<f64>(8, 8, 8, false);
    let inputs = StudyInputs {
        base_unet: &fx.unet,
        control_unet: &fx.unet,
        branch: &fx.branch,
        base_probe: &fx.edge_probe,
        control_probe: &fx.edge_probe,
        reward_probe: None,
        kind: ControlKind::Edge,
    };
    let err =
        timestep_extraction_study(&inputs, &ds, &fx.sched, &[T_MAX + 1], 8, &[0], 8).unwrap_err();
    assert!(err.to_string().contains("outside"), "{err}");

    let rows = timestep_extraction_study(&inputs, &ds, &fx.sched, &[], 8, &[0], 8).unwrap();
    assert!(rows.is_empty());
    let csv = study_csv(&rows);
    assert_eq!(csv, "t,model,rmse_onestep,rmse_probe\n");
}

#[test]
fn study_is_deterministic() {
    let fx = fixture(9);
    let ds = generate_dataset::<f64>(10, 10, 8, false);
    let inputs = StudyInputs {
        base_unet: &fx.unet,
        control_unet: &fx.unet,
        branch: &fx.branch,
        base_probe: &fx.edge_probe,
        control_probe: &fx.edge_probe,
        reward_probe: None,
        kind: ControlKind::Edge,
    };
    let a = timestep_extraction_study(&inputs, &ds, &fx.sched, &[5, 45], 10, &[0, 1], 5).unwrap();
    let b = timestep_extraction_study(&inputs, &ds, &fx.sched, &[5, 45], 10, &[0, 1], 5).unwrap();
    assert_eq!(study_csv(&a), study_csv(&b));
    assert_eq!(a.len(), 4); // two timesteps x two models
}
