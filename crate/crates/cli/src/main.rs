//! `cicbm` — train, evaluate, and explain class-incremental concept
//! bottleneck models over precomputed feature and concept-embedding files,
//! plus the self-contained Gaussian lab.

use cicbm_core::concept::concept_growth_curve;
use cicbm_core::config::RunConfig;
use cicbm_core::error::{Error, Result};
use cicbm_core::explain::{contributions, global_weight_graph};
use cicbm_core::gaussian::{
    bayes_boundary_coeffs, boundary_disagreement, materialize_scenario, pseudo_class_models,
    run_e2e_scenario, sample_scenario, ScenarioConfig,
};
use cicbm_core::matrixio::{self, load_manifest_dir, Split};
use cicbm_core::metrics::{
    avg_incremental_accuracy, avg_incremental_forgetting, avg_phase_accuracy,
    avg_phase_forgetting, sparsity_report, weighted_avg_phase_accuracy,
    weighted_avg_phase_forgetting,
};
use cicbm_core::protocol::{
    self, audit_state_dir, evaluate_phase, generate_pseudo_for_phase, load_phase_inputs,
    phase_dir_name, run_protocol, stage_bottleneck, stage_concepts, stage_predictor,
    thread_count_from_env,
};
use cicbm_core::pseudo::prototype_accuracy;
use cicbm_core::state::{load_phase_state, save_phase_state, PhaseState, Stage};
use cicbm_core::Real;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cicbm",
    version,
    about = "Class-incremental concept bottleneck training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigOpt {
    /// TOML configuration file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigOpt {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full multi-phase protocol over a manifest directory.
    Run {
        #[arg(long)]
        manifests: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigOpt,
        /// Reuse completed phases already persisted under --out.
        #[arg(long)]
        resume: bool,
    },
    /// Filter and expand the concept set for one phase.
    FilterConcepts {
        #[arg(long)]
        manifests: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        phase: u32,
        #[command(flatten)]
        config: ConfigOpt,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        class_sim_thresh: Option<Real>,
        #[arg(long)]
        dedup_thresh: Option<Real>,
    },
    /// Train (or expand and train) the bottleneck for one phase.
    TrainBottleneck {
        #[arg(long)]
        manifests: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        phase: u32,
        #[arg(long)]
        beta: Option<Real>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        config: ConfigOpt,
    },
    /// Emit pseudo feature files for every past class.
    GenPseudo {
        #[arg(long)]
        manifests: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        phase: u32,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigOpt,
    },
    /// Fit the sparse final layer for one phase.
    FitFinal {
        #[arg(long)]
        manifests: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        phase: u32,
        #[arg(long)]
        alpha: Option<Real>,
        #[arg(long)]
        lambda: Option<Real>,
        /// Mean per-class nonzero target as LO:HI.
        #[arg(long, value_parser = parse_range)]
        target_nnz: Option<(usize, usize)>,
        #[arg(long)]
        freeze_old: bool,
        #[arg(long)]
        dense: bool,
        #[command(flatten)]
        config: ConfigOpt,
    },
    /// Evaluate a completed phase and emit the metrics report.
    Evaluate {
        #[arg(long)]
        manifests: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        phase: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-concept contributions for the samples in a feature file.
    Explain {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        phase: u32,
        #[arg(long)]
        sample_file: PathBuf,
        #[arg(long)]
        class: i32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Thresholded class weight graph.
    ExplainGlobal {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        phase: u32,
        #[arg(long)]
        class: i32,
        #[arg(long, default_value_t = cicbm_core::config::DEFAULT_EXPLAIN_THRESHOLD)]
        threshold: Real,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Phase-by-phase cosine-prototype accuracy matrices.
    PrototypeEval {
        #[arg(long)]
        manifests: PathBuf,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bayes-boundary geometry of a scenario and the pseudo-feature
    /// boundary disagreement rate.
    GaussianLab {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 20000)]
        probes: usize,
        /// Probe-stream seed (the scenario keeps its own sampling seed).
        #[arg(long, default_value_t = cicbm_core::config::DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline over a synthetic scenario, with ablation switches.
    E2e {
        #[arg(long)]
        scenario: PathBuf,
        /// Persist per-phase states and the run report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_pseudo: bool,
        #[arg(long)]
        no_concept_reg: bool,
        #[arg(long)]
        freeze_old: bool,
        #[arg(long)]
        dense: bool,
        #[arg(long)]
        beta: Option<Real>,
        /// Signal-to-noise ratio (dB) override for synthetic activations.
        #[arg(long)]
        snr: Option<Real>,
        /// Randomly mask this percentage of accepted concepts per phase.
        #[arg(long)]
        mask_concepts: Option<Real>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda: Option<Real>,
        #[command(flatten)]
        config: ConfigOpt,
        /// Also write the scenario out as a manifest directory.
        #[arg(long)]
        materialize: Option<PathBuf>,
    },
}

fn parse_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected LO:HI, got {s:?}"))?;
    let lo: usize = lo.parse().map_err(|e| format!("bad LO: {e}"))?;
    let hi: usize = hi.parse().map_err(|e| format!("bad HI: {e}"))?;
    if lo > hi {
        return Err(format!("inverted range {lo}:{hi}"));
    }
    Ok((lo, hi))
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::Format {
        path: out.unwrap_or_else(|| Path::new("<stdout>")).to_path_buf(),
        detail: e.to_string(),
    })?;
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_inputs_for_phase(
    manifests: &Path,
    phase: u32,
) -> Result<(Vec<matrixio::PhaseManifest>, protocol::PhaseInputs)> {
    let all = load_manifest_dir(manifests)?;
    let manifest = all
        .iter()
        .find(|m| m.phase_id == phase)
        .ok_or_else(|| Error::Validation(format!("no manifest for phase {phase}")))?
        .clone();
    let mut candidate_base = 0usize;
    for m in &all {
        if m.phase_id < phase {
            candidate_base +=
                cicbm_core::concept::load_candidates(&m.concept_candidates, 0)?.len();
        }
    }
    let inputs = load_phase_inputs(&manifest, candidate_base)?;
    Ok((all, inputs))
}

fn load_prev_state(state_dir: &Path, phase: u32) -> Result<Option<PhaseState>> {
    if phase == 1 {
        return Ok(None);
    }
    let dir = state_dir.join(phase_dir_name(phase - 1));
    Ok(Some(load_phase_state(&dir)?))
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = thread_count_from_env() {
        // Ignore failures from double initialization (tests, reuse).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            manifests,
            out,
            config,
            resume,
        } => {
            let cfg = config.load()?;
            let outcome = run_protocol(&manifests, &out, &cfg, resume)?;
            println!(
                "completed {} phases; average incremental accuracy {:.4}",
                outcome.final_state.phase_id, outcome.report.avg_incremental_accuracy
            );
            println!("run report: {}", out.join("run_report.toml").display());
            Ok(())
        }
        Command::FilterConcepts {
            manifests,
            state,
            phase,
            config,
            max_len,
            class_sim_thresh,
            dedup_thresh,
        } => {
            let mut cfg = config.load()?;
            if let Some(v) = max_len {
                cfg.max_concept_len = v;
            }
            if let Some(v) = class_sim_thresh {
                cfg.class_sim_threshold = v;
            }
            if let Some(v) = dedup_thresh {
                cfg.dedup_threshold = v;
            }
            cfg.validate()?;
            let (_, inputs) = load_inputs_for_phase(&manifests, phase)?;
            let prev = load_prev_state(&state, phase)?;
            let (new_state, report) = stage_concepts(prev.as_ref(), &inputs, &cfg)?;
            let dir = state.join(phase_dir_name(phase));
            save_phase_state(&new_state, &dir)?;
            println!(
                "phase {phase}: accepted {} of {} candidates ({} concepts total); state at {}",
                report.accepted,
                report.candidates,
                report.total_concepts,
                dir.display()
            );
            emit(&report, None)
        }
        Command::TrainBottleneck {
            manifests,
            state,
            phase,
            beta,
            steps,
            config,
        } => {
            let mut cfg = config.load()?;
            if let Some(v) = beta {
                cfg.beta = v;
            }
            if let Some(v) = steps {
                cfg.steps = v;
            }
            cfg.validate()?;
            let (_, inputs) = load_inputs_for_phase(&manifests, phase)?;
            let prev = load_prev_state(&state, phase)?;
            let dir = state.join(phase_dir_name(phase));
            let mut phase_state = load_phase_state(&dir)?;
            if phase_state.stage != Stage::Concepts {
                return Err(Error::Validation(format!(
                    "phase {phase} state is at stage {:?}; run filter-concepts first",
                    phase_state.stage
                )));
            }
            let acts = matrixio::read_matrix(
                &load_manifest_dir(&manifests)?
                    .iter()
                    .find(|m| m.phase_id == phase)
                    .expect("manifest present")
                    .train_activations,
            )?;
            let report = stage_bottleneck(&mut phase_state, prev.as_ref(), &inputs, acts, &cfg)?;
            save_phase_state(&phase_state, &dir)?;
            println!(
                "phase {phase}: bottleneck loss {:.6} -> {:.6} over {} steps",
                report.initial_loss, report.final_loss, report.steps
            );
            emit(&report, None)
        }
        Command::GenPseudo {
            manifests,
            state,
            phase,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let (_, inputs) = load_inputs_for_phase(&manifests, phase)?;
            let dir = state.join(phase_dir_name(phase));
            let phase_state = load_phase_state(&dir)?;
            let pseudo = generate_pseudo_for_phase(&phase_state, &inputs.train, &cfg)?;
            if pseudo.features.is_empty() {
                println!("phase {phase}: no past classes, nothing to generate");
                return Ok(());
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for (cp, donor, features) in &pseudo.features {
                let path = out.join(format!("pseudo_class_{cp:04}.cimb"));
                matrixio::save_feature_matrix(&path, features)?;
                println!(
                    "class {cp}: {} pseudo rows from donor {donor} -> {}",
                    features.samples(),
                    path.display()
                );
            }
            Ok(())
        }
        Command::FitFinal {
            manifests,
            state,
            phase,
            alpha,
            lambda,
            target_nnz,
            freeze_old,
            dense,
            config,
        } => {
            let mut cfg = config.load()?;
            if let Some(v) = alpha {
                cfg.alpha = v;
            }
            if let Some(v) = lambda {
                cfg.lambda = Some(v);
            }
            if let Some(v) = target_nnz {
                cfg.target_nnz = v;
            }
            cfg.freeze_old |= freeze_old;
            cfg.dense |= dense;
            cfg.validate()?;
            let (_, inputs) = load_inputs_for_phase(&manifests, phase)?;
            let prev = load_prev_state(&state, phase)?;
            let dir = state.join(phase_dir_name(phase));
            let mut phase_state = load_phase_state(&dir)?;
            if phase_state.stage != Stage::Bottleneck {
                return Err(Error::Validation(format!(
                    "phase {phase} state is at stage {:?}; run train-bottleneck first",
                    phase_state.stage
                )));
            }
            let report = stage_predictor(&mut phase_state, prev.as_ref(), &inputs, &cfg)?;
            save_phase_state(&phase_state, &dir)?;
            println!(
                "phase {phase}: lambda {:.6}, {} iterations, kkt residual {:.2e}",
                report.lambda, report.iterations, report.kkt_residual
            );
            emit(&report, None)
        }
        Command::Evaluate {
            manifests,
            state,
            phase,
            out,
        } => {
            let all = load_manifest_dir(&manifests)?;
            let dir = state.join(phase_dir_name(phase));
            let mut phase_state = load_phase_state(&dir)?;
            let tests: Result<Vec<_>> = all
                .iter()
                .filter(|m| m.phase_id <= phase)
                .map(|m| {
                    matrixio::load_feature_matrix(&m.test_features, m.phase_id, Split::Test)
                })
                .collect();
            let tests = tests?;
            let manifest = all
                .iter()
                .find(|m| m.phase_id == phase)
                .ok_or_else(|| Error::Validation(format!("no manifest for phase {phase}")))?;
            let evaluation = if phase_state.accuracy.phases() == phase as usize {
                // Already evaluated (for example by `run`): recompute the row
                // and verify it against the stored history instead of
                // appending a duplicate.
                let row = protocol::compute_accuracy_row(&phase_state, &tests)?;
                let stored = &phase_state.accuracy.rows()[phase as usize - 1];
                if &row != stored {
                    return Err(Error::Validation(format!(
                        "stored accuracy row {stored:?} disagrees with recomputation {row:?}"
                    )));
                }
                None
            } else {
                let fidelity_ref = Some((
                    matrixio::read_matrix(&manifest.test_activations)?,
                    manifest.test_activations.display().to_string(),
                ));
                let eval = evaluate_phase(&mut phase_state, &tests, fidelity_ref)?;
                save_phase_state(&phase_state, &dir)?;
                Some(eval)
            };
            let report = metrics_report(&phase_state, evaluation)?;
            emit(&report, out.as_deref())
        }
        Command::Explain {
            state,
            phase,
            sample_file,
            class,
            out,
        } => {
            let dir = state.join(phase_dir_name(phase));
            let phase_state = load_phase_state(&dir)?;
            let samples = matrixio::read_matrix(&sample_file)?;
            let bottleneck = phase_state.bottleneck()?;
            let predictor = phase_state.predictor()?;
            #[derive(Serialize)]
            struct Record {
                sample: usize,
                concept_id: usize,
                concept: String,
                contribution: Real,
            }
            #[derive(Serialize)]
            struct SampleSummary {
                sample: usize,
                class_id: i32,
                bias: Real,
                logit: Real,
            }
            #[derive(Serialize)]
            struct Export {
                summary: Vec<SampleSummary>,
                contribution: Vec<Record>,
            }
            let mut export = Export {
                summary: Vec::new(),
                contribution: Vec::new(),
            };
            for (i, row) in samples.rows().into_iter().enumerate() {
                let r = contributions(row, bottleneck, predictor, class)?;
                export.summary.push(SampleSummary {
                    sample: i,
                    class_id: class,
                    bias: r.bias,
                    logit: r.logit,
                });
                for (concept_id, contribution) in r.contributions {
                    export.contribution.push(Record {
                        sample: i,
                        concept_id,
                        concept: phase_state
                            .concepts
                            .entry(concept_id)
                            .map(|e| e.text.clone())
                            .unwrap_or_default(),
                        contribution,
                    });
                }
            }
            emit(&export, out.as_deref())
        }
        Command::ExplainGlobal {
            state,
            phase,
            class,
            threshold,
            out,
        } => {
            let dir = state.join(phase_dir_name(phase));
            let phase_state = load_phase_state(&dir)?;
            let edges = global_weight_graph(
                phase_state.predictor()?,
                &phase_state.concepts,
                class,
                threshold,
            )?;
            #[derive(Serialize)]
            struct Export {
                class_id: i32,
                threshold: Real,
                edge: Vec<cicbm_core::explain::WeightEdge>,
            }
            emit(
                &Export {
                    class_id: class,
                    threshold,
                    edge: edges,
                },
                out.as_deref(),
            )
        }
        Command::PrototypeEval {
            manifests,
            state,
            out,
        } => {
            let report = prototype_eval(&manifests, &state)?;
            emit(&report, out.as_deref())
        }
        Command::GaussianLab {
            scenario,
            probes,
            seed,
            out,
        } => {
            let cfg = ScenarioConfig::from_file(&scenario)?;
            let sampled = sample_scenario(&cfg)?;
            let last_phase = sampled.phases.len() as u32;
            let pseudo = pseudo_class_models(&sampled.classes, last_phase)?;
            let rate = boundary_disagreement(&pseudo, &sampled.classes, probes, seed)?;
            #[derive(Serialize)]
            struct PairBoundary {
                class_i: i32,
                class_j: i32,
                quad: Real,
                linear: Vec<Real>,
                constant: Real,
            }
            #[derive(Serialize)]
            struct LabReport {
                scenario: String,
                probes: usize,
                seed: u64,
                disagreement_rate: Real,
                boundary: Vec<PairBoundary>,
            }
            let mut pairs = Vec::new();
            for i in 0..sampled.classes.len() {
                for j in (i + 1)..sampled.classes.len() {
                    let b = bayes_boundary_coeffs(&sampled.classes[i], &sampled.classes[j])?;
                    pairs.push(PairBoundary {
                        class_i: sampled.classes[i].class_id,
                        class_j: sampled.classes[j].class_id,
                        quad: b.quad,
                        linear: b.linear.to_vec(),
                        constant: b.constant,
                    });
                }
            }
            emit(
                &LabReport {
                    scenario: sampled.name.clone(),
                    probes,
                    seed,
                    disagreement_rate: rate,
                    boundary: pairs,
                },
                out.as_deref(),
            )
        }
        Command::E2e {
            scenario,
            out,
            no_pseudo,
            no_concept_reg,
            freeze_old,
            dense,
            beta,
            snr,
            mask_concepts,
            steps,
            lambda,
            config,
            materialize,
        } => {
            let mut cfg = config.load()?;
            cfg.pseudo_concepts = !no_pseudo;
            cfg.concept_reg = !no_concept_reg;
            cfg.freeze_old |= freeze_old;
            cfg.dense |= dense;
            if let Some(v) = beta {
                cfg.beta = v;
            }
            if let Some(v) = mask_concepts {
                cfg.mask_concepts_pct = v;
            }
            if let Some(v) = steps {
                cfg.steps = v;
            }
            if let Some(v) = lambda {
                cfg.lambda = Some(v);
            }
            cfg.validate()?;
            let scenario_cfg = ScenarioConfig::from_file(&scenario)?;
            let mut sampled = sample_scenario(&scenario_cfg)?;
            if let Some(snr_db) = snr {
                sampled.generator.snr_db = Some(snr_db);
            }
            if let Some(dir) = &materialize {
                materialize_scenario(&sampled, dir, &cfg)?;
                println!("scenario materialized under {}", dir.display());
            }
            let outcome = run_e2e_scenario(&sampled, &cfg)?;
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                for s in &outcome.states {
                    save_phase_state(s, &dir.join(phase_dir_name(s.phase_id)))?;
                }
                let mut report = outcome.report.clone();
                report.audit = Some(audit_state_dir(dir)?);
                emit(&report, Some(&dir.join("run_report.toml")))?;
                println!("states and report under {}", dir.display());
            } else {
                emit(&outcome.report, None)?;
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct MetricsReport {
    phase_id: u32,
    accuracy_matrix: cicbm_core::metrics::AccuracyMatrix,
    avg_phase_accuracy: Vec<Real>,
    weighted_avg_phase_accuracy: Vec<Real>,
    avg_phase_forgetting: Vec<Real>,
    weighted_avg_phase_forgetting: Vec<Real>,
    avg_incremental_accuracy: Real,
    avg_incremental_forgetting: Option<Real>,
    sparsity: cicbm_core::metrics::SparsityReport,
    concept_growth: Vec<usize>,
    evaluation: Option<protocol::EvalReport>,
}

fn metrics_report(
    state: &PhaseState,
    evaluation: Option<protocol::EvalReport>,
) -> Result<MetricsReport> {
    let a = &state.accuracy;
    let t = a.phases();
    let collect = |f: &dyn Fn(usize) -> Result<Real>, from: usize| -> Result<Vec<Real>> {
        (from..=t).map(f).collect()
    };
    Ok(MetricsReport {
        phase_id: state.phase_id,
        accuracy_matrix: a.clone(),
        avg_phase_accuracy: collect(&|i| avg_phase_accuracy(a, i), 1)?,
        weighted_avg_phase_accuracy: collect(&|i| weighted_avg_phase_accuracy(a, i), 1)?,
        avg_phase_forgetting: if t >= 2 {
            collect(&|i| avg_phase_forgetting(a, i), 2)?
        } else {
            Vec::new()
        },
        weighted_avg_phase_forgetting: if t >= 2 {
            collect(&|i| weighted_avg_phase_forgetting(a, i), 2)?
        } else {
            Vec::new()
        },
        avg_incremental_accuracy: avg_incremental_accuracy(a)?,
        avg_incremental_forgetting: (t >= 2).then(|| avg_incremental_forgetting(a)).transpose()?,
        sparsity: sparsity_report(state.predictor()?),
        concept_growth: concept_growth_curve(&state.concepts),
        evaluation,
    })
}

#[derive(Serialize)]
struct PrototypeMatrices {
    phases: usize,
    /// Row t, column j: accuracy on phase-j data under phase-t centroids.
    train: Vec<Vec<Real>>,
    test: Vec<Vec<Real>>,
    /// Row t (t >= 2), column j < t: fraction of phase-j pseudo rows whose
    /// nearest centroid is their own class.
    pseudo: Vec<Vec<Real>>,
}

fn prototype_eval(manifests: &Path, state_dir: &Path) -> Result<PrototypeMatrices> {
    let all = load_manifest_dir(manifests)?;
    let mut states = Vec::new();
    for m in &all {
        let dir = state_dir.join(phase_dir_name(m.phase_id));
        if !dir.join("state.toml").exists() {
            break;
        }
        states.push(load_phase_state(&dir)?);
    }
    if states.is_empty() {
        return Err(Error::Validation(format!(
            "no phase states under {}",
            state_dir.display()
        )));
    }
    let cfg = RunConfig::default();
    let mut train_m = Vec::new();
    let mut test_m = Vec::new();
    let mut pseudo_m = Vec::new();
    for state in &states {
        let t = state.phase_id;
        let mut train_row = Vec::new();
        let mut test_row = Vec::new();
        for m in all.iter().filter(|m| m.phase_id <= t) {
            let train =
                matrixio::load_feature_matrix(&m.train_features, m.phase_id, Split::Train)?;
            let test = matrixio::load_feature_matrix(&m.test_features, m.phase_id, Split::Test)?;
            train_row.push(prototype_accuracy(
                train.data.view(),
                &train.labels,
                &state.centroids,
            )?);
            test_row.push(prototype_accuracy(
                test.data.view(),
                &test.labels,
                &state.centroids,
            )?);
        }
        train_m.push(train_row);
        test_m.push(test_row);
        if t >= 2 {
            let manifest = all.iter().find(|m| m.phase_id == t).expect("loaded");
            let train =
                matrixio::load_feature_matrix(&manifest.train_features, t, Split::Train)?;
            let pseudo = generate_pseudo_for_phase(state, &train, &cfg)?;
            let mut row = Vec::new();
            for m in all.iter().filter(|m| m.phase_id < t) {
                // Pool the pseudo rows of this phase's classes.
                let mut hits = 0.0;
                let mut total = 0.0;
                for (cp, _, features) in &pseudo.features {
                    if m.class_ids.contains(cp) {
                        let acc = prototype_accuracy(
                            features.data.view(),
                            &features.labels,
                            &state.centroids,
                        )?;
                        hits += acc * features.samples() as Real;
                        total += features.samples() as Real;
                    }
                }
                row.push(if total > 0.0 { hits / total } else { 0.0 });
            }
            pseudo_m.push(row);
        }
    }
    Ok(PrototypeMatrices {
        phases: states.len(),
        train: train_m,
        test: test_m,
        pseudo: pseudo_m,
    })
}
