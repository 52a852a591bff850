//! Command-line surface: dataset generation, training, tracking, metric
//! evaluation, and curve plots.

mod plot;

use clap::{Parser, Subcommand, ValueEnum};
use predtrack::checkpoint::load_checkpoint;
use predtrack::dataset::{write_boxes, write_sequence_dir, SequenceDataset};
use predtrack::metrics::{run_eval, MetricReport};
use predtrack::synth::{SequenceSpec, SyntheticSequence};
use predtrack::tracker::{run_tracker, PredictorKind, TrackerConfig};
use predtrack::trainlab::{smoothed_endpoints, train, TrainConfig};
use predtrack::{Error, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "predtrack", version, about = "Tracking on synthetic sequences")]
struct Cli {
    /// Base random seed where the command uses randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tracking dataset
    Synth(SynthArgs),
    /// Train a model from a TOML config
    Train(TrainArgs),
    /// Run the tracker over a dataset and write one results file per sequence
    Track(TrackArgs),
    /// Score tracking results against ground truth
    Eval(EvalArgs),
    /// Render metric curves from a report as PNG images
    Plot(PlotArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Dataset directory to create sequences under.
    #[arg(long)]
    out: PathBuf,
    /// Number of sequences.
    #[arg(long, default_value_t = 5)]
    count: usize,
    /// Frames per sequence.
    #[arg(long)]
    length: Option<usize>,
    /// Square canvas side in pixels.
    #[arg(long)]
    canvas: Option<usize>,
    /// Distractor objects per sequence.
    #[arg(long)]
    distractors: Option<usize>,
    /// Target speed in pixels per frame.
    #[arg(long)]
    speed: Option<f64>,
    /// Sequence name prefix.
    #[arg(long, default_value = "seq")]
    prefix: String,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Training configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and the loss trace.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint holding training state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Transformer,
    Dcf,
}

#[derive(clap::Args)]
struct TrackArgs {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory of sequences to track.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for per-sequence results files.
    #[arg(long)]
    out: PathBuf,
    /// Classifier-weight predictor.
    #[arg(long, value_enum, default_value_t = PredictorArg::Transformer)]
    predictor: PredictorArg,
    /// Predict box-regressor weights from the full memory instead of the
    /// initial frame only.
    #[arg(long)]
    no_two_stage: bool,
    /// Memory capacity in frames, initial frame included.
    #[arg(long)]
    memory: Option<usize>,
    /// Confidence needed before a frame may enter memory.
    #[arg(long)]
    eta: Option<f64>,
    /// Crop side as a multiple of the target size; defaults to the value
    /// the model was trained with.
    #[arg(long)]
    search_factor: Option<f64>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Dataset directory holding ground truth.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory of per-sequence results files.
    #[arg(long)]
    results: PathBuf,
    /// Directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PlotArgs {
    /// Metric report (report.json from `eval`).
    #[arg(long)]
    report: PathBuf,
    /// Directory for the curve images.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let base = SequenceSpec::default();
    let spec = SequenceSpec {
        seed,
        length: args.length.unwrap_or(base.length),
        canvas: args.canvas.unwrap_or(base.canvas),
        distractors: args.distractors.unwrap_or(base.distractors),
        speed: args.speed.unwrap_or(base.speed),
        ..base
    };
    for i in 0..args.count {
        let spec = SequenceSpec {
            seed: seed.wrapping_add(i as u64),
            ..spec.clone()
        };
        let seq = SyntheticSequence::generate(&spec)?;
        let name = format!("{}-{i:03}", args.prefix);
        write_sequence_dir(&args.out, &name, &seq)?;
        println!("{name}: {} frames", seq.len());
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::config(format!("{}: {e}", args.config.display())))?;
    let mut cfg: TrainConfig = toml::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", args.config.display())))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;
    let report = train(&cfg, &args.out, args.resume.as_deref())?;
    if let (Some(first), Some(last)) = (report.trace.first(), report.trace.last()) {
        let (head, tail) = smoothed_endpoints(&report.trace, 25);
        println!(
            "steps {}..{}: loss {:.4} -> {:.4} (smoothed {:.4} -> {:.4})",
            first.step, last.step, first.total, last.total, head, tail
        );
    }
    println!("checkpoint: {}", report.checkpoint.display());
    Ok(())
}

fn cmd_track(args: &TrackArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let defaults = TrackerConfig::default();
    let cfg = TrackerConfig {
        eta: args.eta.unwrap_or(defaults.eta),
        capacity: args.memory.unwrap_or(defaults.capacity),
        predictor: match args.predictor {
            PredictorArg::Transformer => PredictorKind::Transformer,
            PredictorArg::Dcf => PredictorKind::Dcf,
        },
        two_stage: !args.no_two_stage,
        search_factor: args.search_factor.unwrap_or(model.cfg.search_factor),
        ..defaults
    };
    std::fs::create_dir_all(&args.out)?;
    let dataset = SequenceDataset::open(&args.dataset)?;
    for seq in &dataset.sequences {
        if seq.gt.is_empty() {
            return Err(Error::dataset(format!("sequence `{}` has no ground truth", seq.name)));
        }
        let frames = (0..seq.len()).map(|t| seq.frame(t));
        let tracked = run_tracker(&model, cfg, &seq.gt[0], frames)?;
        let boxes: Vec<_> = tracked.iter().map(|f| f.bbox).collect();
        write_boxes(args.out.join(format!("{}.txt", seq.name)), &boxes)?;
        let lost = tracked.iter().filter(|f| !f.found).count();
        println!("{}: {} frames, {} lost", seq.name, tracked.len(), lost);
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let report = run_eval(&args.dataset, &args.results)?;
    std::fs::create_dir_all(&args.out)?;
    report.write_json(args.out.join("report.json"))?;
    report.write_csv(args.out.join("report.csv"))?;
    let a = &report.aggregate;
    println!(
        "{} sequences: success AUC {:.4}, precision@20px {:.4}, norm precision AUC {:.4}",
        report.sequences.len(),
        a.success_auc,
        a.precision_20px,
        a.norm_precision_auc
    );
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let file = std::fs::File::open(&args.report)
        .map_err(|e| Error::config(format!("{}: {e}", args.report.display())))?;
    let report: MetricReport = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::config(format!("{}: {e}", args.report.display())))?;
    std::fs::create_dir_all(&args.out)?;
    for (name, img) in plot::report_plots(&report) {
        let path = args.out.join(name);
        img.save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli.seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Track(a) => cmd_track(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Plot(a) => cmd_plot(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
