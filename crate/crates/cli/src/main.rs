use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pmam::checkpoint::{Checkpoint, Stage};
use pmam::config::{Preset, RunConfig};
use pmam::evalkit::PostProcessing;
use pmam::mam::LossKind;
use pmam::pipeline::{self, Grid, Paths};
use pmam::proto::PrototypeKind;
use pmam::synthgen::Split;
use pmam::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "pmam", version, about = "Prototype-based masked audio model lab")]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Globals {
    /// TOML run config applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to the config's `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Masked-prediction loss: bce or infonce.
    #[arg(long, global = true)]
    loss: Option<String>,
    /// Prototype model: gmm or kmeans.
    #[arg(long, global = true)]
    proto: Option<String>,
    #[arg(long, global = true)]
    no_mask: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Run the iterative pseudo-labeling and masked-prediction stages.
    Pretrain {
        /// Dataset directory (defaults to OUT/data).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune a classifier from a pretraining checkpoint.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to start from (defaults to OUT/pretrain/iterN).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pretraining iteration whose checkpoint to use (default: the last).
        #[arg(long)]
        from_iteration: Option<usize>,
    },
    /// Score a fine-tuned model on a labeled split.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        /// validation or strong.
        #[arg(long, default_value = "validation")]
        split: String,
        /// Skip median filtering.
        #[arg(long)]
        no_median: bool,
        /// Write raw frame probabilities per clip into this directory.
        #[arg(long)]
        dump_probs: Option<PathBuf>,
    },
    /// Correlate pseudo labels with ground truth on the validation split.
    Analyze {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pseudo-label directory (defaults to OUT/pretrain/iterN/pseudo_labels).
        #[arg(long)]
        pseudo_labels: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        iteration: usize,
        /// Number of clip timelines to export.
        #[arg(long, default_value_t = 3)]
        timelines: usize,
    },
    /// Run the condition grid over several seeds and tabulate medians.
    Experiment {
        #[arg(long)]
        data: Option<PathBuf>,
        /// tables (iteration rows plus single-axis ablations) or full.
        #[arg(long, default_value = "tables")]
        grid: String,
        /// Comma-separated seeds (defaults to the config's `seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn resolve_config(g: &Globals) -> Result<RunConfig> {
    let base = RunConfig::preset(g.preset.parse::<Preset>()?);
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load_over(&base, p)?,
        None => base,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    if let Some(i) = g.iterations {
        cfg.iterations = i;
    }
    if let Some(l) = &g.loss {
        cfg.pretrain.loss.loss_kind = l.parse::<LossKind>()?;
    }
    if let Some(p) = &g.proto {
        cfg.prototypes.kind = p.parse::<PrototypeKind>()?;
    }
    if g.no_mask {
        cfg.pretrain.mask.enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir(paths: &Paths, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| paths.data())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.globals)?;
    let paths = Paths::new(&cfg.out_dir);
    pipeline::echo_config(&cfg, &paths)?;
    match cli.command {
        Command::GenData => {
            let ds = pipeline::gen_data(&cfg, &paths.data())?;
            let m = &ds.manifest.splits;
            println!(
                "dataset at {}: {} strong, {} weak, {} unlabeled, {} validation clips",
                paths.data().display(),
                m.strong.len(),
                m.weak.len(),
                m.unlabeled.len(),
                m.validation.len()
            );
        }
        Command::Pretrain { data } => {
            let ds = pipeline::open_dataset(&cfg, &data_dir(&paths, &data))?;
            let run = pipeline::run_pretrain(&cfg, &ds, cfg.seed, Some(&paths))?;
            for it in &run.iterations {
                match it.logs.last() {
                    Some(l) => println!(
                        "iter{}: final loss_mean {:.6} -> {}",
                        it.iteration,
                        l.loss_mean,
                        paths.checkpoint(it.iteration).display()
                    ),
                    None => println!("iter0: untrained -> {}", paths.checkpoint(0).display()),
                }
            }
        }
        Command::Finetune {
            data,
            checkpoint,
            from_iteration,
        } => {
            let ds = pipeline::open_dataset(&cfg, &data_dir(&paths, &data))?;
            let iteration = from_iteration.unwrap_or(cfg.iterations);
            let path = checkpoint.unwrap_or_else(|| paths.checkpoint(iteration));
            let ckpt = Checkpoint::load(&path)?;
            let tag = match ckpt.stage {
                Stage::Pretrain(n) => format!("iter{n}"),
                Stage::Finetuned => return Err(Error::Load(format!("{} is already fine-tuned", path.display()))),
            };
            let (_, outcome) = pipeline::run_finetune(&cfg, &ds, &ckpt.params, cfg.seed)?;
            let dir = paths.finetune(&tag);
            pipeline::save_finetune(&cfg, &outcome, &dir, cfg.seed)?;
            println!(
                "{tag}: best epoch {} frame_macro_f1 {:.4} event_f1 {:.4} -> {}",
                outcome.best_epoch,
                outcome.best_metrics.frame_macro_f1,
                outcome.best_metrics.event_f1,
                dir.display()
            );
        }
        Command::Evaluate {
            data,
            model,
            split,
            no_median,
            dump_probs,
        } => {
            let ds = pipeline::open_dataset(&cfg, &data_dir(&paths, &data))?;
            let split = match split.as_str() {
                "validation" => Split::Validation,
                "strong" => Split::Strong,
                other => return Err(Error::Config(format!("cannot evaluate on split '{other}'"))),
            };
            let ckpt = Checkpoint::load(&model)?;
            let (sed, store) = pipeline::load_sed_model(&cfg, &ckpt.params, ds.config().categories)?;
            let preds = pipeline::predict_split(&sed, &store, &ds, split)?;
            if let Some(dir) = dump_probs {
                for (rec, p) in &preds {
                    write_text(&dir.join(format!("{}.csv", rec.id)), &pipeline::probabilities_csv(p))?;
                }
            }
            let mut post = cfg.finetune.post_processing();
            if no_median {
                post = PostProcessing {
                    median_window: 1,
                    ..post
                };
            }
            let report = pipeline::evaluate_split(&preds, &post)?.report();
            write_text(&paths.root.join("evaluation.txt"), &report)?;
            print!("{report}");
        }
        Command::Analyze {
            data,
            pseudo_labels,
            iteration,
            timelines,
        } => {
            let ds = pipeline::open_dataset(&cfg, &data_dir(&paths, &data))?;
            let dir = pseudo_labels.unwrap_or_else(|| paths.pseudo_labels(iteration));
            let clips = pipeline::load_validation_pseudo_labels(&ds, &dir)?;
            let labels: Vec<_> = clips.iter().map(|(_, l)| l).collect();
            let truth: Vec<_> = clips.iter().map(|(r, _)| r.clip.truth_frames()).collect();
            let analysis = pipeline::analyze(&labels, &truth.iter().collect::<Vec<_>>())?;
            let out = paths.analysis(iteration);
            pipeline::write_analysis(&out, &analysis, &clips, timelines)?;
            for (c, best) in analysis.best_per_category().iter().enumerate() {
                println!("category {c}: best prototype correlation {best:.3}");
            }
            println!("analysis written to {}", out.display());
        }
        Command::Experiment { data, grid, seeds } => {
            let ds = pipeline::open_dataset(&cfg, &data_dir(&paths, &data))?;
            let grid: Grid = grid.parse()?;
            let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
            let conditions = pipeline::conditions(grid, cfg.iterations);
            let out = paths.experiment();
            let table = pipeline::run_experiment(&cfg, &ds, &conditions, &seeds, Some(&out), |line| {
                eprintln!("{line}")
            })?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
