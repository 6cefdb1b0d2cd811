//! `segedit`: one-shot edits, training, evaluation, dataset synthesis and
//! the HTTP service.
//!
//! Exit codes: 0 success, 1 no editable target, 2 usage or configuration,
//! 3 numeric failure, 4 backend failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segedit_cli::{eval_report, exit_code, load_train_config, write_synth, EvalOptions, RUN_REPORT_VERSION};
use segedit_core::backend::{BackendConfig, Backends};
use segedit_core::combiner::prepare_background;
use segedit_core::io::{read_image, read_segmap, write_image, write_segmap};
use segedit_core::{Error, Result, Stage, StageExt};
use segedit_editnet::engine::EditEngine;
use segedit_editnet::training::{init_weights, train_with, TrainOptions};
use segedit_session::ServiceConfig;

#[derive(Parser)]
#[command(name = "segedit", version, about = "Text-guided, segmentation-driven image editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit one image and write result.png, seg_in.png, seg_out.png and report.json.
    Run(RunArgs),
    /// Train on the synthetic dataset; writes weights.segw and train_log.csv.
    Train(TrainArgs),
    /// IS and FID of edits over a synthetic test split.
    Eval(EvalArgs),
    /// Render a synthetic dataset with segmentation maps and captions.
    Synth(SynthArgs),
    /// Start the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct BackendArgs {
    /// TOML or JSON file with `segmentation`, `detection`, `super_resolution`
    /// and `inpainting` entries (`toy` or `external:<command>`).
    #[arg(long)]
    backends: Option<PathBuf>,
}

impl BackendArgs {
    fn load(&self) -> Result<Backends> {
        let config = match &self.backends {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                if path.extension().is_some_and(|e| e == "json") {
                    serde_json::from_str(&text)?
                } else {
                    toml::from_str::<BackendConfig>(&text).map_err(|e| Error::Parameter(format!("{}: {e}", path.display())))?
                }
            }
            None => BackendConfig::default(),
        };
        Backends::from_config(&config)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    text: String,
    /// Reference background for a background swap.
    #[arg(long)]
    background: Option<PathBuf>,
    /// Segmentation map PNG (with its `.json` palette sidecar) used instead
    /// of the segmentation backend.
    #[arg(long)]
    seg: Option<PathBuf>,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    backends: BackendArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Side of the rendered test images.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Service config (TOML or JSON); `SEGEDIT_*` variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    session_root: Option<PathBuf>,
}

fn run(args: RunArgs) -> Result<()> {
    let image = read_image(&args.image).at(Stage::Io)?;
    let backends = args.backends.load()?;
    let engine = EditEngine::from_checkpoint(&args.weights, backends)?;
    let user_seg = args.seg.as_deref().map(read_segmap).transpose().at(Stage::Io)?;
    let background = match &args.background {
        Some(path) => {
            let bg = read_image(path).at(Stage::Io)?;
            Some(prepare_background(&bg, &engine.backends).at(Stage::Background)?)
        }
        None => None,
    };
    let instruction = segedit_core::instruction::InstructionParser::default()
        .parse_with_background(&args.text, background.is_some())
        .at(Stage::Parse)?;
    let outcome = engine.edit_parsed(&image, instruction, user_seg.as_ref(), background.as_ref())?;

    std::fs::create_dir_all(&args.out)?;
    write_image(&outcome.output, args.out.join("result.png"))?;
    write_segmap(outcome.seg_in(), args.out.join("seg_in.png"))?;
    write_segmap(&outcome.seg_out, args.out.join("seg_out.png"))?;
    let mut report = serde_json::to_value(outcome.report(&image))?;
    report["version"] = RUN_REPORT_VERSION.into();
    std::fs::write(args.out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let config = load_train_config(&args.config)?;
    let dataset = segedit_core::synth::make_synthetic_dataset(config.dataset_size, config.dataset_seed, config.image_size);
    let (g, d) = init_weights(&config)?;
    let mut progress = |epoch: usize, phase, l: &segedit_editnet::training::TrainingLosses| {
        eprintln!("epoch {epoch} ({phase:?}): l_g {:.4} l_d {:.4}", l.l_g, l.l_d);
    };
    let options = TrainOptions {
        out_dir: Some(args.out.clone()),
        on_epoch: Some(&mut progress),
    };
    train_with(&config, &dataset, g, d, options)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let engine = EditEngine::from_checkpoint(&args.weights, Backends::toy())?;
    let report = eval_report(
        &engine,
        &EvalOptions {
            n: args.n,
            seed: args.seed,
            size: args.size,
        },
    )?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.out, serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let mut config = ServiceConfig::load(args.config.as_deref())?;
    if let Some(listen) = args.listen {
        config.listen = listen;
    }
    if let Some(w) = args.weights {
        config.weights = Some(w);
    }
    if let Some(root) = args.session_root {
        config.session_root = root;
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    eprintln!("listening on {}", config.listen);
    rt.block_on(segedit_session::serve(config))
}

fn synth(args: SynthArgs) -> Result<()> {
    write_synth(args.n, args.seed, args.size, Path::new(&args.out))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
