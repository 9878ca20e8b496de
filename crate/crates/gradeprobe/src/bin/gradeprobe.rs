//! Command-line entry point.
//!
//! All commands read a TOML run configuration (`--config`); `--seed`
//! overrides the config's global seed and `--dry-run` prints the resolved
//! execution plan without running anything. Exit codes are per error
//! family: 2 config, 3 dataset/io, 4 backend, 5 probe, 6 attack, 7
//! experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};

use gradeprobe::backend::toy::ToyTransformer;
use gradeprobe::backend::{
    ActivationProbePoint, GenerationConfig, TokenPosition, WhiteBoxBackend,
};
use gradeprobe::experiments::{
    emit_report, load_antonyms, run_ablation, run_gain_experiment, run_mitigation_comparison,
    sentiment_flip, AblationSpec, GainExperimentSpec, TemplateMitigationSpec,
};
use gradeprobe::gcg::{optimize_suffix, prune_suffix, AttackBundle};
use gradeprobe::harness::gain::EvalCell;
use gradeprobe::harness::problem::{load_problems, EssayProblem, EssayRecord};
use gradeprobe::harness::score::score_distribution;
use gradeprobe::harness::template::{render_prompt, PromptTemplate};
use gradeprobe::probe::{
    average_direction, cross_validate_lambda, direction_similarity_matrix, load_probe,
    probe_correlation, save_probe, top_score_direction, train_probe, ProbeDataset,
};
use gradeprobe::store::{ingest_dataset, resolve_run, RecordKind, ResultStore, RunConfig};
use gradeprobe::token::Tokenizer;

#[derive(Parser)]
#[command(
    name = "gradeprobe",
    version,
    about = "Red-teaming toolkit for LLM essay graders"
)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the resolved execution plan and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest the configured dataset and report counts.
    Ingest,
    /// Grade essays with the configured backend and append result rows.
    Grade(GradeArgs),
    /// Linear probes over grader activations.
    Probe {
        #[command(subcommand)]
        cmd: ProbeCmd,
    },
    /// Adversarial suffix optimization and pruning.
    Attack {
        #[command(subcommand)]
        cmd: AttackCmd,
    },
    /// Evaluation experiments.
    Exp {
        #[command(subcommand)]
        cmd: ExpCmd,
    },
}

#[derive(Args)]
struct GradeArgs {
    /// Backend name from the config's registry.
    #[arg(long)]
    backend: String,
    /// Essays per (problem, template) cell.
    #[arg(long, default_value_t = 8)]
    essays: usize,
}

#[derive(Subcommand)]
enum ProbeCmd {
    /// Train a probe per (problem, template) cell and save artifacts.
    Train {
        /// Output directory for probe artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Essays per probe dataset.
        #[arg(long, default_value_t = 40)]
        essays: usize,
    },
    /// Evaluate a saved probe artifact on freshly collected data.
    Eval {
        /// Probe artifact path.
        #[arg(long)]
        probe: PathBuf,
        #[arg(long, default_value_t = 40)]
        essays: usize,
    },
    /// Compare top-score directions across cells.
    Directions {
        /// Also print the averaged direction's norm and sources.
        #[arg(long)]
        average: bool,
        #[arg(long, default_value_t = 40)]
        essays: usize,
    },
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Optimize an adversarial suffix against a probe-derived direction.
    Run {
        /// Where to write the best candidates as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        essays: usize,
    },
    /// Prune a suffix, removing tokens that do not contribute gain.
    Prune {
        /// Suffix text to prune.
        #[arg(long)]
        suffix: String,
        /// Maximum allowed gain drop per removed token.
        #[arg(long, default_value_t = 0.01)]
        threshold: f64,
        #[arg(long, default_value_t = 8)]
        essays: usize,
    },
}

#[derive(Subcommand)]
enum ExpCmd {
    /// Measure the normalized score gain of a suffix.
    Gain {
        #[arg(long)]
        suffix: String,
        #[arg(long)]
        backend: String,
        #[arg(long, default_value_t = 8)]
        essays: usize,
    },
    /// Single-token ablation table for a suffix.
    Ablate {
        #[arg(long)]
        suffix: String,
        #[arg(long)]
        backend: String,
        #[arg(long, default_value_t = 8)]
        essays: usize,
        /// Gain drop beyond which a position is flagged.
        #[arg(long)]
        drop_margin: Option<f64>,
    },
    /// Replace positive-sentiment words of a suffix with antonyms.
    Flip {
        #[arg(long)]
        suffix: String,
        /// Antonym map TOML file.
        #[arg(long, default_value = "crates/gradeprobe/data/antonyms.toml")]
        antonyms: PathBuf,
    },
    /// Compare a suffix's gain across a baseline and a mitigated arm.
    Mitigate {
        #[arg(long)]
        suffix: String,
        /// Baseline backend name.
        #[arg(long)]
        baseline: String,
        /// Mitigated backend name.
        #[arg(long)]
        mitigated: String,
        #[arg(long, default_value_t = 8)]
        essays: usize,
    },
}

/// Error families mapped to distinct exit codes.
enum AppError {
    Config(String),
    Dataset(String),
    Backend(String),
    Probe(String),
    Attack(String),
    Experiment(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            AppError::Config(_) => 2,
            AppError::Dataset(_) => 3,
            AppError::Backend(_) => 4,
            AppError::Probe(_) => 5,
            AppError::Attack(_) => 6,
            AppError::Experiment(_) => 7,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Config(m)
            | AppError::Dataset(m)
            | AppError::Backend(m)
            | AppError::Probe(m)
            | AppError::Attack(m)
            | AppError::Experiment(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// Config plus the materials every command shares.
struct Workbench {
    config: RunConfig,
    problems: Vec<EssayProblem>,
    templates: Vec<PromptTemplate>,
    run_id: String,
}

impl Workbench {
    fn load(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<Self, AppError> {
        let path = cli_config
            .as_ref()
            .ok_or_else(|| AppError::Config("--config is required".into()))?;
        let mut config =
            RunConfig::load(path).map_err(|e| AppError::Config(e.to_string()))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let problems = match &config.problems_file {
            Some(p) => load_problems(p).map_err(|e| AppError::Dataset(e.to_string()))?,
            None => gradeprobe::synthetic::toy_problems(),
        };
        let templates = match &config.templates_dir {
            Some(dir) => {
                let mut out = Vec::new();
                let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| AppError::Dataset(e.to_string()))?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.extension().map(|x| x == "toml").unwrap_or(false))
                    .collect();
                paths.sort();
                for p in paths {
                    out.push(
                        PromptTemplate::load(&p)
                            .map_err(|e| AppError::Dataset(e.to_string()))?,
                    );
                }
                out
            }
            None => gradeprobe::synthetic::toy_templates(),
        };
        let run_id = config.content_hash();
        Ok(Self {
            config,
            problems,
            templates,
            run_id,
        })
    }

    fn selected_problems(&self) -> Vec<&EssayProblem> {
        if self.config.problems.is_empty() {
            self.problems.iter().collect()
        } else {
            self.problems
                .iter()
                .filter(|p| self.config.problems.contains(&p.problem_id))
                .collect()
        }
    }

    fn selected_templates(&self) -> Vec<&PromptTemplate> {
        if self.config.templates.is_empty() {
            self.templates.iter().collect()
        } else {
            self.templates
                .iter()
                .filter(|t| self.config.templates.contains(&t.template_id))
                .collect()
        }
    }

    /// Essays for one problem: dataset essays when a dataset is configured,
    /// synthetic toy-task essays otherwise.
    fn essays_for(&self, problem: &EssayProblem, count: usize) -> Result<Vec<EssayRecord>, AppError> {
        match &self.config.dataset {
            Some(path) => {
                let (store, _) = ingest_dataset(path, &self.problems)
                    .map_err(|e| AppError::Dataset(e.to_string()))?;
                let essays: Vec<EssayRecord> = store
                    .for_problem(&problem.problem_id)
                    .into_iter()
                    .take(count)
                    .cloned()
                    .collect();
                if essays.is_empty() {
                    return Err(AppError::Dataset(format!(
                        "no essays for problem {}",
                        problem.problem_id
                    )));
                }
                Ok(essays)
            }
            None => Ok(gradeprobe::synthetic::toy_eval_essays(
                &problem.problem_id,
                count,
                self.config.seed,
            )),
        }
    }

    fn toy_backend(&self, name: &str) -> Result<ToyTransformer, AppError> {
        self.config
            .backends
            .build_toy(name)
            .map_err(|e| AppError::Backend(e.to_string()))
    }

    fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            temperature: 0.0,
            max_new_tokens: 10,
            sample_count: 1,
            random_seed: 0,
        }
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let bench = Workbench::load(&cli.config, cli.seed)?;
    let plan = resolve_run(&bench.config).map_err(|e| AppError::Config(e.to_string()))?;
    if cli.dry_run {
        print!("{}", plan.describe());
        return Ok(());
    }
    match cli.command {
        Command::Ingest => cmd_ingest(&bench),
        Command::Grade(args) => cmd_grade(&bench, &args),
        Command::Probe { cmd } => match cmd {
            ProbeCmd::Train { out, essays } => cmd_probe_train(&bench, &out, essays),
            ProbeCmd::Eval { probe, essays } => cmd_probe_eval(&bench, &probe, essays),
            ProbeCmd::Directions { average, essays } => {
                cmd_probe_directions(&bench, average, essays)
            }
        },
        Command::Attack { cmd } => match cmd {
            AttackCmd::Run { out, essays } => cmd_attack_run(&bench, out.as_deref(), essays),
            AttackCmd::Prune {
                suffix,
                threshold,
                essays,
            } => cmd_attack_prune(&bench, &suffix, threshold, essays),
        },
        Command::Exp { cmd } => match cmd {
            ExpCmd::Gain {
                suffix,
                backend,
                essays,
            } => cmd_exp_gain(&bench, &suffix, &backend, essays),
            ExpCmd::Ablate {
                suffix,
                backend,
                essays,
                drop_margin,
            } => cmd_exp_ablate(&bench, &suffix, &backend, essays, drop_margin),
            ExpCmd::Flip { suffix, antonyms } => cmd_exp_flip(&suffix, &antonyms),
            ExpCmd::Mitigate {
                suffix,
                baseline,
                mitigated,
                essays,
            } => cmd_exp_mitigate(&bench, &suffix, &baseline, &mitigated, essays),
        },
    }
}

fn cmd_ingest(bench: &Workbench) -> Result<(), AppError> {
    let path = bench
        .config
        .dataset
        .as_ref()
        .ok_or_else(|| AppError::Config("config has no dataset path".into()))?;
    let (store, report) =
        ingest_dataset(path, &bench.problems).map_err(|e| AppError::Dataset(e.to_string()))?;
    println!(
        "ingested {} essays ({} skipped, {} out of scope)",
        report.ingested, report.skipped, report.out_of_scope
    );
    for line in &report.skipped_examples {
        println!("  skipped: {line}");
    }
    for p in bench.selected_problems() {
        println!(
            "problem {}: {} essays",
            p.problem_id,
            store.for_problem(&p.problem_id).len()
        );
    }
    Ok(())
}

fn cmd_grade(bench: &Workbench, args: &GradeArgs) -> Result<(), AppError> {
    let backend = bench
        .config
        .backends
        .build_black_box(&args.backend)
        .map_err(|e| AppError::Backend(e.to_string()))?;
    let store = ResultStore::new(&bench.config.output_root.join("results"));
    let gen = bench.generation();
    for p in bench.selected_problems() {
        let essays = bench.essays_for(p, args.essays)?;
        for t in bench.selected_templates() {
            for e in &essays {
                let bundle = render_prompt(t, p, e, &BTreeMap::new(), None)
                    .map_err(|e| AppError::Experiment(e.to_string()))?;
                let dist = score_distribution(backend.as_ref(), &bundle, t, p, &gen)
                    .map_err(|e| AppError::Backend(e.to_string()))?;
                let payload = serde_json::json!({
                    "problem": p.problem_id,
                    "template": t.template_id,
                    "essay": e.essay_id,
                    "mean_score": dist.mean(),
                });
                store
                    .append(&bench.run_id, RecordKind::Grade, payload.clone())
                    .map_err(|e| AppError::Dataset(e.to_string()))?;
                println!("{payload}");
            }
        }
    }
    Ok(())
}

/// Collects a probe dataset for one (problem, template) cell on a toy
/// backend: activations at the configured probe point paired with the
/// grader's own score distribution.
fn collect_probe_dataset(
    model: &ToyTransformer,
    problem: &EssayProblem,
    template: &PromptTemplate,
    essays: &[EssayRecord],
    point: ActivationProbePoint,
    gen: &GenerationConfig,
) -> Result<ProbeDataset, AppError> {
    let mut xs = Vec::new();
    let mut ps = Vec::new();
    for e in essays {
        let bundle = render_prompt(template, problem, e, &BTreeMap::new(), None)
            .map_err(|e| AppError::Probe(e.to_string()))?;
        let seq = model.tokenizer.encode(&bundle.rendered_text);
        let acts = model
            .forward_with_capture(&seq, &[point])
            .map_err(|e| AppError::Backend(e.to_string()))?;
        xs.push(acts[&point].clone());
        let dist = score_distribution(model, &bundle, template, problem, gen)
            .map_err(|e| AppError::Backend(e.to_string()))?;
        ps.push(dist.probabilities(problem));
    }
    let n = xs.len();
    if n == 0 {
        return Err(AppError::Probe("no essays to probe".into()));
    }
    let dim = xs[0].len();
    let s = ps[0].len();
    Ok(ProbeDataset {
        probe_point: point,
        xs: Array2::from_shape_fn((n, dim), |(i, j)| xs[i][j]),
        ps: Array2::from_shape_fn((n, s), |(i, j)| ps[i][j]),
        score_values: problem.scores().map(|v| v as f64).collect(),
        problem_id: problem.problem_id.clone(),
        template_id: template.template_id.clone(),
    })
}

fn probe_context(
    bench: &Workbench,
) -> Result<(ToyTransformer, ActivationProbePoint, Vec<f64>, f64), AppError> {
    let block = bench
        .config
        .probe
        .as_ref()
        .ok_or_else(|| AppError::Config("config has no [probe] block".into()))?;
    let model = bench.toy_backend(&block.backend)?;
    let point = ActivationProbePoint {
        layer_index: block.layer_index,
        token_position: TokenPosition::EndOfInput,
    };
    Ok((model, point, block.lambda_grid.clone(), block.val_fraction))
}

fn cmd_probe_train(bench: &Workbench, out: &Path, essay_count: usize) -> Result<(), AppError> {
    let (model, point, grid, val_fraction) = probe_context(bench)?;
    let gen = bench.generation();
    std::fs::create_dir_all(out).map_err(|e| AppError::Dataset(e.to_string()))?;
    for p in bench.selected_problems() {
        let essays = bench.essays_for(p, essay_count)?;
        for t in bench.selected_templates() {
            let data = collect_probe_dataset(&model, p, t, &essays, point, &gen)?;
            let lambda = cross_validate_lambda(&data, &grid, val_fraction, bench.config.seed)
                .map_err(|e| AppError::Probe(e.to_string()))?;
            let trained = train_probe(&data, lambda, val_fraction, bench.config.seed)
                .map_err(|e| AppError::Probe(e.to_string()))?;
            let r = probe_correlation(&trained.probe, &data)
                .map_err(|e| AppError::Probe(e.to_string()))?;
            let path = out.join(format!("probe_{}_{}.prbe", p.problem_id, t.template_id));
            let file =
                std::fs::File::create(&path).map_err(|e| AppError::Dataset(e.to_string()))?;
            save_probe(&trained.probe, file).map_err(|e| AppError::Probe(e.to_string()))?;
            println!(
                "probe {} {}: lambda {lambda:e} val_kl {:.4} r {:.3} -> {}",
                p.problem_id,
                t.template_id,
                trained.val_kl,
                r,
                path.display()
            );
        }
    }
    Ok(())
}

fn cmd_probe_eval(bench: &Workbench, probe_path: &Path, essay_count: usize) -> Result<(), AppError> {
    let (model, _, _, _) = probe_context(bench)?;
    let file = std::fs::File::open(probe_path).map_err(|e| AppError::Dataset(e.to_string()))?;
    let probe = load_probe(file).map_err(|e| AppError::Probe(e.to_string()))?;
    let gen = bench.generation();
    let problem = bench
        .problems
        .iter()
        .find(|p| p.problem_id == probe.meta.problem_id)
        .ok_or_else(|| {
            AppError::Probe(format!("unknown probe problem {}", probe.meta.problem_id))
        })?;
    let template = bench
        .templates
        .iter()
        .find(|t| t.template_id == probe.meta.template_id)
        .ok_or_else(|| {
            AppError::Probe(format!("unknown probe template {}", probe.meta.template_id))
        })?;
    let essays = bench.essays_for(problem, essay_count)?;
    let data = collect_probe_dataset(&model, problem, template, &essays, probe.probe_point, &gen)?;
    let r = probe_correlation(&probe, &data).map_err(|e| AppError::Probe(e.to_string()))?;
    println!(
        "probe {} {}: r {:.3} on {} fresh essays",
        probe.meta.problem_id,
        probe.meta.template_id,
        r,
        data.len()
    );
    Ok(())
}

fn trained_directions(
    bench: &Workbench,
    essay_count: usize,
) -> Result<Vec<(Array1<f64>, (String, String))>, AppError> {
    let (model, point, grid, val_fraction) = probe_context(bench)?;
    let gen = bench.generation();
    let mut dirs = Vec::new();
    for p in bench.selected_problems() {
        let essays = bench.essays_for(p, essay_count)?;
        for t in bench.selected_templates() {
            let data = collect_probe_dataset(&model, p, t, &essays, point, &gen)?;
            let lambda = cross_validate_lambda(&data, &grid, val_fraction, bench.config.seed)
                .map_err(|e| AppError::Probe(e.to_string()))?;
            let trained = train_probe(&data, lambda, val_fraction, bench.config.seed)
                .map_err(|e| AppError::Probe(e.to_string()))?;
            dirs.push((
                top_score_direction(&trained.probe),
                (p.problem_id.clone(), t.template_id.clone()),
            ));
        }
    }
    Ok(dirs)
}

fn cmd_probe_directions(
    bench: &Workbench,
    average: bool,
    essay_count: usize,
) -> Result<(), AppError> {
    let dirs = trained_directions(bench, essay_count)?;
    let vecs: Vec<Array1<f64>> = dirs.iter().map(|(d, _)| d.clone()).collect();
    let sim =
        direction_similarity_matrix(&vecs).map_err(|e| AppError::Probe(e.to_string()))?;
    println!("cells:");
    for (i, (_, (p, t))) in dirs.iter().enumerate() {
        println!("  [{i}] problem {p} template {t}");
    }
    println!("cosine similarity matrix:");
    for i in 0..dirs.len() {
        let row: Vec<String> = (0..dirs.len()).map(|j| format!("{:+.3}", sim[[i, j]])).collect();
        println!("  {}", row.join(" "));
    }
    if average {
        let avg = average_direction(&dirs).map_err(|e| AppError::Probe(e.to_string()))?;
        let norm = avg.v.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!(
            "averaged direction over {} cells, norm {:.4}",
            avg.sources.len(),
            norm
        );
    }
    Ok(())
}

fn cmd_attack_run(
    bench: &Workbench,
    out: Option<&Path>,
    essay_count: usize,
) -> Result<(), AppError> {
    let block = bench
        .config
        .attack
        .as_ref()
        .ok_or_else(|| AppError::Config("config has no [attack] block".into()))?;
    let model = bench.toy_backend(&block.backend)?;
    let dirs = trained_directions(bench, essay_count)?;
    let target = average_direction(&dirs).map_err(|e| AppError::Probe(e.to_string()))?;
    let mut bundles = Vec::new();
    for p in bench.selected_problems() {
        let essays = bench.essays_for(p, 2.min(essay_count))?;
        for t in bench.selected_templates() {
            for e in &essays {
                bundles.push(
                    AttackBundle::prepare(&model.tokenizer, t, p, e, &BTreeMap::new())
                        .map_err(|e| AppError::Attack(e.to_string()))?,
                );
            }
        }
    }
    let mut config = block.gcg.clone();
    if config.allowed_tokens.is_empty() {
        config = config.with_ascii_tokens(&model.tokenizer);
    }
    let candidates = optimize_suffix(&model, &model.tokenizer, &bundles, &target, &config)
        .map_err(|e| AppError::Attack(e.to_string()))?;
    for (i, c) in candidates.iter().enumerate().take(5) {
        println!("#{i}: loss {:.4} suffix {:?}", c.loss, c.text);
    }
    if let Some(path) = out {
        let json = serde_json::to_vec_pretty(&candidates)
            .map_err(|e| AppError::Attack(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| AppError::Dataset(e.to_string()))?;
        println!("wrote {} candidates to {}", candidates.len(), path.display());
    }
    Ok(())
}

fn cmd_attack_prune(
    bench: &Workbench,
    suffix: &str,
    threshold: f64,
    essay_count: usize,
) -> Result<(), AppError> {
    let block = bench
        .config
        .attack
        .as_ref()
        .ok_or_else(|| AppError::Config("config has no [attack] block".into()))?;
    let model = bench.toy_backend(&block.backend)?;
    let ids = model.tokenizer.encode(suffix).ids;
    let problems = bench.selected_problems();
    let templates = bench.selected_templates();
    let mut essay_sets = Vec::new();
    for p in &problems {
        essay_sets.push(bench.essays_for(p, essay_count)?);
    }
    let mut cells = Vec::new();
    for (p, essays) in problems.iter().zip(&essay_sets) {
        for t in &templates {
            cells.push(EvalCell {
                problem: p,
                template: t,
                essays: essays.iter().collect(),
                examples: BTreeMap::new(),
            });
        }
    }
    let report = prune_suffix(
        &model,
        &model.tokenizer,
        &ids,
        &cells,
        &bench.generation(),
        bench.config.seed,
        threshold,
    )
    .map_err(|e| AppError::Attack(e.to_string()))?;
    println!(
        "pruned {:?} -> {:?} (gain {:.4} -> {:.4}, removed {:?})",
        report.original_text,
        report.pruned_text,
        report.gain_before,
        report.gain_after,
        report.removed_positions
    );
    Ok(())
}

fn build_cells<'a>(
    problems: &[&'a EssayProblem],
    templates: &[&'a PromptTemplate],
    essay_sets: &'a [Vec<EssayRecord>],
) -> Vec<EvalCell<'a>> {
    let mut cells = Vec::new();
    for (p, essays) in problems.iter().zip(essay_sets) {
        for t in templates {
            cells.push(EvalCell {
                problem: p,
                template: t,
                essays: essays.iter().collect(),
                examples: BTreeMap::new(),
            });
        }
    }
    cells
}

fn cmd_exp_gain(
    bench: &Workbench,
    suffix: &str,
    backend_name: &str,
    essay_count: usize,
) -> Result<(), AppError> {
    let backend = bench
        .config
        .backends
        .build_black_box(backend_name)
        .map_err(|e| AppError::Backend(e.to_string()))?;
    let problems = bench.selected_problems();
    let templates = bench.selected_templates();
    let mut essay_sets = Vec::new();
    for p in &problems {
        essay_sets.push(bench.essays_for(p, essay_count)?);
    }
    let cells = build_cells(&problems, &templates, &essay_sets);
    let spec = GainExperimentSpec {
        suffix: Some(suffix.to_string()),
        gen: bench.generation(),
        seed: bench.config.seed,
    };
    let report = run_gain_experiment(backend.as_ref(), &cells, &spec);
    let dir = bench.config.output_root.join(&bench.run_id).join("gain");
    let paths = emit_report(&report, &dir).map_err(|e| AppError::Experiment(e.to_string()))?;
    println!(
        "pooled gain {:.4} (std {:.4}) over {} rows, {} failures",
        report.pooled_mean_gain,
        report.gain_std,
        report.rows.len(),
        report.failures.len()
    );
    for p in paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_exp_ablate(
    bench: &Workbench,
    suffix: &str,
    backend_name: &str,
    essay_count: usize,
    drop_margin: Option<f64>,
) -> Result<(), AppError> {
    let backend = bench
        .config
        .backends
        .build_black_box(backend_name)
        .map_err(|e| AppError::Backend(e.to_string()))?;
    // the toy tokenizer's byte-level segmentation defines ablation positions
    let tokenizer = gradeprobe::synthetic::toy_task_tokenizer();
    let ids = tokenizer.encode(suffix).ids;
    let problems = bench.selected_problems();
    let templates = bench.selected_templates();
    let mut essay_sets = Vec::new();
    for p in &problems {
        essay_sets.push(bench.essays_for(p, essay_count)?);
    }
    let cells = build_cells(&problems, &templates, &essay_sets);
    let spec = AblationSpec {
        suffixes: vec![ids],
        gen: bench.generation(),
        seed: bench.config.seed,
        drop_margin,
    };
    let report = run_ablation(backend.as_ref(), &tokenizer, &cells, &spec)
        .map_err(|e| AppError::Experiment(e.to_string()))?;
    for row in &report.rows {
        match &row.removed_position {
            None => println!("full suffix: gain {:.4} (std {:.4})", row.mean_gain, row.gain_std),
            Some(pos) => println!(
                "remove {:>2} ({:?}): gain {:.4}{}",
                pos,
                row.removed_token.as_deref().unwrap_or("?"),
                row.mean_gain,
                if row.flagged { "  <- critical" } else { "" }
            ),
        }
    }
    Ok(())
}

fn cmd_exp_flip(suffix: &str, antonyms: &Path) -> Result<(), AppError> {
    let map = load_antonyms(antonyms).map_err(|e| AppError::Experiment(e.to_string()))?;
    let flipped = sentiment_flip(suffix, &map).map_err(|e| AppError::Experiment(e.to_string()))?;
    println!("{flipped}");
    Ok(())
}

fn cmd_exp_mitigate(
    bench: &Workbench,
    suffix: &str,
    baseline_name: &str,
    mitigated_name: &str,
    essay_count: usize,
) -> Result<(), AppError> {
    let baseline = bench
        .config
        .backends
        .build_black_box(baseline_name)
        .map_err(|e| AppError::Backend(e.to_string()))?;
    let mitigated = bench
        .config
        .backends
        .build_black_box(mitigated_name)
        .map_err(|e| AppError::Backend(e.to_string()))?;
    let problems = bench.selected_problems();
    let templates = bench.selected_templates();
    let mut essay_sets = Vec::new();
    for p in &problems {
        essay_sets.push(bench.essays_for(p, essay_count)?);
    }
    let cells = build_cells(&problems, &templates, &essay_sets);
    let spec = TemplateMitigationSpec {
        suffixes: vec![suffix.to_string()],
        gen: bench.generation(),
        seed: bench.config.seed,
    };
    let report = run_mitigation_comparison(baseline.as_ref(), mitigated.as_ref(), &cells, &spec);
    for row in &report.rows {
        println!(
            "suffix {:?}: baseline {:.4} mitigated {:.4} reduction {:.4}",
            row.suffix, row.baseline_mean, row.mitigated_mean, row.reduction
        );
    }
    Ok(())
}
