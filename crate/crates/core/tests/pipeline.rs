//! Pipeline-level integration tests over synthetic scenarios: vocabulary
//! growth under duplication, ablation switches, staged-vs-monolithic
//! equivalence, and the file-based protocol surface.

use cicbm_core::concept::concept_growth_curve;
use cicbm_core::config::RunConfig;
use cicbm_core::gaussian::{
    materialize_scenario, run_e2e_scenario, sample_scenario, ScenarioConfig,
};
use cicbm_core::matrixio::load_manifest_dir;
use cicbm_core::protocol::{
    evaluate_phase, load_phase_inputs, run_phase, run_protocol, stage_bottleneck,
    stage_concepts, stage_predictor,
};
use cicbm_core::state::{load_phase_state, save_phase_state};
use cicbm_core::Real;
use std::path::{Path, PathBuf};

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn quick_cfg() -> RunConfig {
    RunConfig {
        steps: 120,
        lambda: Some(2e-3),
        ..RunConfig::default()
    }
}

#[test]
fn duplicate_candidates_keep_the_vocabulary_strictly_below_the_candidate_count() {
    let cfg = ScenarioConfig::from_file(&scenario_path("duplicate_candidates.toml")).unwrap();
    let scenario = sample_scenario(&cfg).unwrap();
    let outcome = run_e2e_scenario(&scenario, &quick_cfg()).unwrap();
    let curve = concept_growth_curve(&outcome.states.last().unwrap().concepts);
    let mut cumulative = Vec::new();
    let mut total = 0usize;
    for phase in &scenario.phases {
        total += phase.candidates.len();
        cumulative.push(total);
    }
    assert_eq!(curve.len(), cumulative.len());
    // Nondecreasing, and strictly below the cumulative candidate count once
    // duplicates start arriving.
    for w in curve.windows(2) {
        assert!(w[1] >= w[0]);
    }
    assert!(
        curve[1] < cumulative[1] && curve[2] < cumulative[2],
        "duplicates were not filtered: {curve:?} vs {cumulative:?}"
    );
    // The duplicate rejections show up in the per-phase reports.
    let dup_rejects: usize = outcome
        .reports
        .iter()
        .map(|r| r.concepts.rejected_duplicate)
        .sum();
    assert!(dup_rejects > 0);
}

#[test]
fn concept_masking_shrinks_the_vocabulary_and_still_learns() {
    let cfg = ScenarioConfig::from_file(&scenario_path("standard_2phase.toml")).unwrap();
    let scenario = sample_scenario(&cfg).unwrap();
    let run_cfg = RunConfig {
        steps: 250,
        ..quick_cfg()
    };
    let full = run_e2e_scenario(&scenario, &run_cfg).unwrap();
    let masked_cfg = RunConfig {
        mask_concepts_pct: 50.0,
        ..run_cfg.clone()
    };
    let masked = run_e2e_scenario(&scenario, &masked_cfg).unwrap();
    let m_full = full.states.last().unwrap().concepts.len();
    let m_masked = masked.states.last().unwrap().concepts.len();
    assert!(
        m_masked < m_full,
        "masking left {m_masked} of {m_full} concepts"
    );
    assert!(masked.reports.iter().any(|r| r.concepts.masked > 0));
    // Still a working classifier on this easy scenario.
    let a = masked.report.accuracy_matrix.rows()[1].clone();
    let mean: Real = a.iter().sum::<Real>() / a.len() as Real;
    assert!(mean > 0.8, "masked run collapsed to accuracy {mean}");
}

#[test]
fn concept_space_prototype_variant_runs_and_reports() {
    let cfg = ScenarioConfig::from_file(&scenario_path("standard_2phase.toml")).unwrap();
    let scenario = sample_scenario(&cfg).unwrap();
    let run_cfg = RunConfig {
        steps: 250,
        prototype_in_concept_space: true,
        ..quick_cfg()
    };
    let outcome = run_e2e_scenario(&scenario, &run_cfg).unwrap();
    assert_eq!(outcome.reports[1].predictor.pseudo.len(), 2);
    // The variant translates prototypes through a drifting, expanding basis;
    // it must run end to end but is expected to trail the full method.
    let full = run_e2e_scenario(&scenario, &quick_cfg()).unwrap();
    let variant_a21 = outcome.report.accuracy_matrix.rows()[1][0];
    let full_a21 = full.report.accuracy_matrix.rows()[1][0];
    assert!(
        variant_a21 <= full_a21 + 0.05,
        "concept-space variant unexpectedly beat the full method: {variant_a21} vs {full_a21}"
    );
}

#[test]
fn harsher_activation_noise_does_not_break_the_pipeline() {
    let cfg = ScenarioConfig::from_file(&scenario_path("standard_2phase.toml")).unwrap();
    let mut scenario = sample_scenario(&cfg).unwrap();
    scenario.generator.snr_db = Some(0.0);
    let run_cfg = RunConfig {
        steps: 250,
        ..quick_cfg()
    };
    let noisy = run_e2e_scenario(&scenario, &run_cfg).unwrap();
    let row = &noisy.report.accuracy_matrix.rows()[1];
    let mean: Real = row.iter().sum::<Real>() / row.len() as Real;
    // 0 dB means noise as strong as signal; the separable scenario still
    // carries enough structure to stay well above chance (0.25).
    assert!(mean > 0.5, "0 dB run fell to {mean}");
}

#[test]
fn staged_stages_reproduce_the_monolithic_phase_bit_for_bit() {
    let cfg = ScenarioConfig::from_file(&scenario_path("standard_2phase.toml")).unwrap();
    let scenario = sample_scenario(&cfg).unwrap();
    let run_cfg = RunConfig {
        steps: 150,
        ..quick_cfg()
    };

    let tmp = tempfile::tempdir().unwrap();
    let manifest_dir = tmp.path().join("manifests");
    materialize_scenario(&scenario, &manifest_dir, &run_cfg).unwrap();
    let manifests = load_manifest_dir(&manifest_dir).unwrap();

    // Monolithic: run_phase for phase 1.
    let inputs = load_phase_inputs(&manifests[0], 0).unwrap();
    let acts_path = manifests[0].train_activations.clone();
    let (mono_state, _) = run_phase(
        None,
        &inputs,
        |_| cicbm_core::matrixio::read_matrix(&acts_path),
        &run_cfg,
    )
    .unwrap();

    // Staged: concepts -> save/load -> bottleneck -> save/load -> predictor.
    let stage_dir = tmp.path().join("staged");
    let (staged, _) = stage_concepts(None, &inputs, &run_cfg).unwrap();
    save_phase_state(&staged, &stage_dir).unwrap();
    let mut staged = load_phase_state(&stage_dir).unwrap();
    let acts = cicbm_core::matrixio::read_matrix(&manifests[0].train_activations).unwrap();
    stage_bottleneck(&mut staged, None, &inputs, acts, &run_cfg).unwrap();
    save_phase_state(&staged, &stage_dir).unwrap();
    let mut staged = load_phase_state(&stage_dir).unwrap();
    stage_predictor(&mut staged, None, &inputs, &run_cfg).unwrap();

    let mono_b = mono_state.bottleneck().unwrap();
    let staged_b = staged.bottleneck().unwrap();
    assert_eq!(mono_b.weights, staged_b.weights);
    let mono_p = mono_state.predictor().unwrap();
    let staged_p = staged.predictor().unwrap();
    for (a, b) in mono_p.weights.iter().zip(staged_p.weights.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    for (a, b) in mono_p.bias.iter().zip(staged_p.bias.iter()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn three_phase_report_matches_offline_recomputation_from_persisted_states() {
    let cfg = ScenarioConfig::from_file(&scenario_path("duplicate_candidates.toml")).unwrap();
    let scenario = sample_scenario(&cfg).unwrap();
    let run_cfg = quick_cfg();
    let tmp = tempfile::tempdir().unwrap();
    let manifest_dir = tmp.path().join("manifests");
    materialize_scenario(&scenario, &manifest_dir, &run_cfg).unwrap();
    let out = tmp.path().join("out");
    let outcome = run_protocol(&manifest_dir, &out, &run_cfg, false).unwrap();
    assert_eq!(outcome.final_state.phase_id, 3);

    // Offline: reload every persisted phase state and recompute its accuracy
    // row from the test splits; the run report must match exactly.
    let manifests = load_manifest_dir(&manifest_dir).unwrap();
    for t in 1..=3u32 {
        let state = load_phase_state(&out.join(format!("phase_{t:03}"))).unwrap();
        let tests: Vec<_> = manifests
            .iter()
            .filter(|m| m.phase_id <= t)
            .map(|m| {
                cicbm_core::matrixio::load_feature_matrix(
                    &m.test_features,
                    m.phase_id,
                    cicbm_core::matrixio::Split::Test,
                )
                .unwrap()
            })
            .collect();
        let row = cicbm_core::protocol::compute_accuracy_row(&state, &tests).unwrap();
        let reported = &outcome.report.accuracy_matrix.rows()[t as usize - 1];
        assert_eq!(&row, reported, "phase {t} accuracy row");
    }
}

#[test]
fn protocol_rejects_overlapping_classes_before_training() {
    let cfg = ScenarioConfig::from_file(&scenario_path("standard_2phase.toml")).unwrap();
    let scenario = sample_scenario(&cfg).unwrap();
    let run_cfg = quick_cfg();
    let tmp = tempfile::tempdir().unwrap();
    let manifest_dir = tmp.path().join("manifests");
    materialize_scenario(&scenario, &manifest_dir, &run_cfg).unwrap();
    // Corrupt phase 2's manifest to re-declare class 0.
    let m2 = manifest_dir.join("phase2.toml");
    let text = std::fs::read_to_string(&m2).unwrap();
    std::fs::write(&m2, text.replace("class_ids = [2, 3]", "class_ids = [0, 3]")).unwrap();
    let err = run_protocol(&manifest_dir, &tmp.path().join("out"), &run_cfg, false);
    let msg = match err {
        Err(e) => format!("{e}"),
        Ok(_) => panic!("overlapping classes were accepted"),
    };
    assert!(msg.contains("already belongs"), "unexpected error: {msg}");
}

#[test]
fn evaluation_is_recorded_once_per_phase() {
    let cfg = ScenarioConfig::from_file(&scenario_path("standard_2phase.toml")).unwrap();
    let scenario = sample_scenario(&cfg).unwrap();
    let run_cfg = quick_cfg();
    let inputs = cicbm_core::protocol::PhaseInputs {
        phase_id: 1,
        classes: scenario.phases[0].classes.clone(),
        train: scenario.phases[0].train.clone(),
        candidates: scenario.phases[0].candidates.clone(),
        class_embeddings: scenario.phases[0].class_embeddings.clone(),
    };
    let (mut state, _) = run_phase(
        None,
        &inputs,
        |concepts| {
            scenario
                .generator
                .activations_for_set(&scenario.phases[0].train.data, concepts, 7)
        },
        &run_cfg,
    )
    .unwrap();
    let tests = vec![scenario.phases[0].test.clone()];
    evaluate_phase(&mut state, &tests, None).unwrap();
    let again = evaluate_phase(&mut state, &tests, None);
    assert!(again.is_err(), "double evaluation must be rejected");
}

#[test]
fn fidelity_reference_shape_mismatch_is_skipped_with_a_note() {
    let cfg = ScenarioConfig::from_file(&scenario_path("standard_2phase.toml")).unwrap();
    let scenario = sample_scenario(&cfg).unwrap();
    let run_cfg = quick_cfg();
    let inputs = cicbm_core::protocol::PhaseInputs {
        phase_id: 1,
        classes: scenario.phases[0].classes.clone(),
        train: scenario.phases[0].train.clone(),
        candidates: scenario.phases[0].candidates.clone(),
        class_embeddings: scenario.phases[0].class_embeddings.clone(),
    };
    let (mut state, _) = run_phase(
        None,
        &inputs,
        |concepts| {
            scenario
                .generator
                .activations_for_set(&scenario.phases[0].train.data, concepts, 7)
        },
        &run_cfg,
    )
    .unwrap();
    let tests = vec![scenario.phases[0].test.clone()];
    let wrong = ndarray::Array2::<Real>::zeros((3, 2));
    let eval = evaluate_phase(&mut state, &tests, Some((wrong, "bogus".into()))).unwrap();
    assert!(eval.fidelity.is_none());
    assert!(eval.fidelity_source.unwrap().contains("skipped"));
}

#[test]
fn fidelity_on_the_synthetic_scenario_assigns_most_units_to_their_concept() {
    let cfg = ScenarioConfig::from_file(&scenario_path("standard_2phase.toml")).unwrap();
    let scenario = sample_scenario(&cfg).unwrap();
    let run_cfg = RunConfig {
        steps: 400,
        ..quick_cfg()
    };
    let outcome = run_e2e_scenario(&scenario, &run_cfg).unwrap();
    let fid = outcome.reports[0]
        .evaluation
        .as_ref()
        .unwrap()
        .fidelity
        .as_ref()
        .expect("synthetic reference present");
    assert!(
        fid.top5_accuracy > 0.8,
        "top-5 concept accuracy {} on a recoverable target",
        fid.top5_accuracy
    );
}
