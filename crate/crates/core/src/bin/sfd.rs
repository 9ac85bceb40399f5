//! Pipeline command line: synthesis, training, sampling, lifting,
//! allocation, execution, full pipeline runs, report aggregation, and the
//! ablation harness.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 pipeline failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sfd_core::config::RunConfig;
use sfd_core::pipeline::{
    self, episode_flows, load_episodes, plan_episode, run_pipeline, synth_dataset, train_command,
    PipelineMode,
};
use sfd_core::scene::{write_flow_file, TaskTemplate};

#[derive(Parser)]
#[command(name = "sfd", about = "Dual-arm motion-flow pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, default_value = "sfd.toml")]
    config: PathBuf,
    /// Override the configured task template.
    #[arg(long)]
    task: Option<String>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, sfd_core::config::ConfigError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(task) = &self.task {
            cfg.task = task.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/eval episode datasets for the configured task.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Generate all four task templates.
        #[arg(long)]
        all_tasks: bool,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        eval_count: Option<usize>,
    },
    /// Train the flow model (two stages) and write the checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train two independent parameter sets (ablation variant).
        #[arg(long)]
        no_siamese: bool,
    },
    /// Sample predicted flows for one eval episode into an SFDF file.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lift flows (oracle by default) into 3D trajectory JSON files.
    Lift {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Segment, assign and schedule one eval episode; writes schedule JSON
    /// and the overlay SVG.
    Allocate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Execute the scheduled plan for one episode and write the event log.
    Execute {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Full pipeline over the eval split: sample/lift/allocate/execute/
    /// evaluate; writes a run report.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "full")]
        mode: String,
        /// Use ground-truth flows instead of sampling from a checkpoint.
        #[arg(long)]
        oracle_flows: bool,
        /// Train first if the checkpoint is missing.
        #[arg(long)]
        train: bool,
    },
    /// Aggregate run reports into CSV + SVG.
    Report {
        #[arg(long, default_value = "report.csv")]
        csv: PathBuf,
        #[arg(long, default_value = "report.svg")]
        svg: PathBuf,
        /// Input run-report JSON files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Ablation harness: full vs no_allocation (and no_siamese with
    /// --train) on the configured task; writes per-mode reports.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        oracle_flows: bool,
        #[arg(long)]
        train: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's message but pin usage errors to exit code 1.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Pipeline(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

enum CliError {
    Usage(String),
    Pipeline(String),
}

impl From<sfd_core::config::ConfigError> for CliError {
    fn from(e: sfd_core::config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<pipeline::PipelineError> for CliError {
    fn from(e: pipeline::PipelineError) -> Self {
        match e {
            pipeline::PipelineError::Config(c) => CliError::Usage(c.to_string()),
            other => CliError::Pipeline(other.to_string()),
        }
    }
}

impl From<sfd_core::report::ReportError> for CliError {
    fn from(e: sfd_core::report::ReportError) -> Self {
        CliError::Pipeline(e.to_string())
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Pipeline(format!("i/o error: {e}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common, all_tasks, train_count, eval_count } => {
            let mut cfg = common.load()?;
            if let Some(n) = train_count {
                cfg.data.train_count = n;
            }
            if let Some(n) = eval_count {
                cfg.data.eval_count = n;
            }
            let tasks: Vec<TaskTemplate> =
                if all_tasks { TaskTemplate::ALL.to_vec() } else { vec![cfg.template()?] };
            for task in tasks {
                let (train_path, eval_path) = synth_dataset(&cfg, task)?;
                println!(
                    "synth {}: {} train -> {}, {} eval -> {}",
                    task.name(),
                    cfg.data.train_count,
                    train_path.display(),
                    cfg.data.eval_count,
                    eval_path.display()
                );
            }
            Ok(())
        }
        Command::Train { common, no_siamese } => {
            let cfg = common.load()?;
            let task = cfg.template()?;
            let ckpt = train_command(&cfg, task, !no_siamese)?;
            println!("trained {} -> {}", task.name(), ckpt.display());
            Ok(())
        }
        Command::Sample { common, index, out } => {
            let cfg = common.load()?;
            let task = cfg.template()?;
            let episodes = load_episodes(&cfg, task, "eval")?;
            let ep = episodes.get(index).ok_or_else(|| {
                CliError::Pipeline(format!("episode index {index} out of range"))
            })?;
            let ckpt_path = cfg.checkpoint_path(true);
            if !ckpt_path.exists() {
                return Err(pipeline::PipelineError::MissingCheckpoint(ckpt_path).into());
            }
            let bundle = sfd_core::sfdnet::SfdBundle::load(&ckpt_path)
                .map_err(|e| CliError::Pipeline(e.to_string()))?;
            let grounding = sfd_core::scene::ground_targets(ep, &ep.instruction)
                .map_err(|e| CliError::Pipeline(e.to_string()))?;
            let mut rng = sfd_core::rng::Rng::seed(cfg.seed ^ 0x5a3f ^ (index as u64) << 16);
            let (f1, f2) = sfd_core::sfdnet::sample_flows(
                &bundle,
                (&grounding.boxes.0, &grounding.boxes.1),
                &ep.instruction,
                (ep.camera.w, ep.camera.h),
                &mut rng,
            )
            .map_err(|e| CliError::Pipeline(e.to_string()))?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(io_err)?;
            let path = out.unwrap_or_else(|| {
                cfg.out_dir.join(format!("{}_{index}_pred.sfdf", task.name()))
            });
            write_flow_file(&path, &f1, &f2).map_err(|e| CliError::Pipeline(e.to_string()))?;
            println!("sampled flows -> {}", path.display());
            Ok(())
        }
        Command::Lift { common, index } => {
            let cfg = common.load()?;
            let task = cfg.template()?;
            let episodes = load_episodes(&cfg, task, "eval")?;
            let ep = episodes
                .get(index)
                .ok_or_else(|| CliError::Pipeline(format!("episode index {index} out of range")))?;
            let (_, f1, f2) =
                episode_flows(ep, cfg.model.g).map_err(|e| CliError::Pipeline(e.to_string()))?;
            let depth = sfd_core::lift3d::EpisodeDepth { episode: ep };
            std::fs::create_dir_all(&cfg.out_dir).map_err(io_err)?;
            for (stream, flow) in [(0u8, &f1), (1u8, &f2)] {
                let lift_cfg = sfd_core::lift3d::LiftConfig {
                    v_max: cfg.sim.v_max,
                    stream,
                    ..Default::default()
                };
                let traj = sfd_core::lift3d::lift_trajectory(flow, &ep.camera, &depth, &lift_cfg)
                    .map_err(|e| CliError::Pipeline(e.to_string()))?;
                let path =
                    cfg.out_dir.join(format!("{}_{index}_traj{}.json", task.name(), stream + 1));
                traj.save_json(&path).map_err(|e| CliError::Pipeline(e.to_string()))?;
                println!("lifted stream {} -> {}", stream + 1, path.display());
            }
            Ok(())
        }
        Command::Allocate { common, index } => {
            let cfg = common.load()?;
            let task = cfg.template()?;
            let episodes = load_episodes(&cfg, task, "eval")?;
            let ep = episodes
                .get(index)
                .ok_or_else(|| CliError::Pipeline(format!("episode index {index} out of range")))?;
            let plan = plan_episode(&cfg, ep, PipelineMode::Full, true, None, index)?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(io_err)?;
            let schedule_path = cfg.out_dir.join(format!("{}_{index}_schedule.json", task.name()));
            let slots: Vec<Vec<usize>> =
                plan.schedule.slots.iter().map(|s| s.segment_ids()).collect();
            let doc = serde_json::json!({
                "version": 1,
                "task": task.name(),
                "makespan": plan.makespan,
                "stream_to_arm": plan.assignment.stream_to_arm,
                "slots": slots,
                "vlm_fallback": plan.vlm_fallback,
            });
            std::fs::write(&schedule_path, format!("{:#}\n", doc)).map_err(io_err)?;
            let overlay_path = cfg.out_dir.join(format!("{}_{index}_overlay.svg", task.name()));
            std::fs::write(&overlay_path, &plan.overlay_svg).map_err(io_err)?;
            println!(
                "allocated {} segments in {} slots (makespan {:.2}s) -> {}, {}",
                plan.segments.len(),
                plan.schedule.slots.len(),
                plan.makespan,
                schedule_path.display(),
                overlay_path.display()
            );
            Ok(())
        }
        Command::Execute { common, index } => {
            let cfg = common.load()?;
            let task = cfg.template()?;
            let episodes = load_episodes(&cfg, task, "eval")?;
            let ep = episodes
                .get(index)
                .ok_or_else(|| CliError::Pipeline(format!("episode index {index} out of range")))?;
            let plan = plan_episode(&cfg, ep, PipelineMode::Full, true, None, index)?;
            let (outcome, events) = pipeline::execute_and_evaluate(&cfg, ep, &plan)?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(io_err)?;
            let log_path = cfg.out_dir.join(format!("{}_{index}_events.jsonl", task.name()));
            sfd_core::dualsim::write_event_log(&log_path, &events)
                .map_err(|e| CliError::Pipeline(e.to_string()))?;
            println!(
                "executed: success={} collisions={} reasons={:?} -> {}",
                outcome.success,
                outcome.collisions,
                outcome.reasons,
                log_path.display()
            );
            Ok(())
        }
        Command::Pipeline { common, mode, oracle_flows, train } => {
            let cfg = common.load()?;
            let mode = PipelineMode::parse(&mode)
                .ok_or_else(|| CliError::Usage(format!("unknown mode \"{mode}\"")))?;
            let task = cfg.template()?;
            if train && !oracle_flows {
                let siamese = mode != PipelineMode::NoSiamese;
                let ckpt = cfg.checkpoint_path(siamese);
                if !ckpt.exists() {
                    train_command(&cfg, task, siamese)?;
                }
            }
            let report = run_pipeline(&cfg, mode, oracle_flows)?;
            std::fs::create_dir_all(&cfg.out_dir).map_err(io_err)?;
            let path = cfg
                .out_dir
                .join(format!("report_{}_{}.json", task.name(), report.mode));
            report.save(&path)?;
            println!(
                "pipeline {} {}: success {:.0}% over {} episodes -> {}",
                task.name(),
                report.mode,
                report.summary.success_rate * 100.0,
                report.summary.episodes,
                path.display()
            );
            Ok(())
        }
        Command::Report { csv, svg, reports } => {
            let paths: Vec<&std::path::Path> = reports.iter().map(|p| p.as_path()).collect();
            let agg = sfd_core::report::aggregate(&paths)?;
            std::fs::write(&csv, &agg.csv).map_err(io_err)?;
            std::fs::write(&svg, &agg.svg).map_err(io_err)?;
            println!("aggregated {} report(s) -> {}, {}", reports.len(), csv.display(), svg.display());
            Ok(())
        }
        Command::Ablate { common, oracle_flows, train } => {
            let cfg = common.load()?;
            let task = cfg.template()?;
            let mut modes = vec![PipelineMode::Full, PipelineMode::NoAllocation];
            if train && !oracle_flows {
                modes.push(PipelineMode::NoSiamese);
                for siamese in [true, false] {
                    let ckpt = cfg.checkpoint_path(siamese);
                    if !ckpt.exists() {
                        train_command(&cfg, task, siamese)?;
                    }
                }
            }
            std::fs::create_dir_all(&cfg.out_dir).map_err(io_err)?;
            let mut paths = Vec::new();
            for mode in modes {
                let report = run_pipeline(&cfg, mode, oracle_flows)?;
                let path = cfg
                    .out_dir
                    .join(format!("report_{}_{}.json", task.name(), report.mode));
                report.save(&path)?;
                println!(
                    "ablate {}: success {:.0}%",
                    report.mode,
                    report.summary.success_rate * 100.0
                );
                paths.push(path);
            }
            let refs: Vec<&std::path::Path> = paths.iter().map(|p| p.as_path()).collect();
            let agg = sfd_core::report::aggregate(&refs)?;
            std::fs::write(cfg.out_dir.join("ablation.csv"), &agg.csv).map_err(io_err)?;
            std::fs::write(cfg.out_dir.join("ablation.svg"), &agg.svg).map_err(io_err)?;
            Ok(())
        }
    }
}
