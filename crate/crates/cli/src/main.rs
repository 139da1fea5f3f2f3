//! `handcraft`: batch front end for hand restoration.
//!
//! Exit codes: 0 success, 1 I/O failure while writing outputs, 2 invalid
//! input, 3 degenerate hand geometry, 4 backend failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "handcraft", version, about = "Restore malformed hands with aligned templates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the control image, mask and bundle JSON for each hand.
    MakeControl(MakeControlArgs),
    /// Run the full restoration for one image or a batch.
    Restore(RestoreArgs),
    /// Score restored images against their originals.
    Evaluate(EvaluateArgs),
    /// Run a grid of ablation configurations over a job directory.
    Ablate(AblateArgs),
    /// Print the template chosen for one hand.
    SelectTemplate(SelectArgs),
    /// Silhouette IoU under forced rotation offsets and a wrong mirror.
    Misalign(MisalignArgs),
    /// Write a seeded synthetic job directory.
    MakeFixtures(FixtureArgs),
    /// Write the bundled template library as PNG files plus a manifest.
    ExportTemplates(ExportArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Select {
    Silhouette,
    Random,
}

#[derive(Args, Debug, Clone)]
struct InputArgs {
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    pose: Option<PathBuf>,
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Target hand silhouette PNG, needed for silhouette selection.
    #[arg(long)]
    silhouette: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Template manifest; the bundled library when absent.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated mask scale factors.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    select: Option<Select>,
    /// Minimum classifier confidence for a malformed hand.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    force_all: bool,
    /// Components to switch off, e.g. `no-rotation,no-bbox-mask`.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
}

#[derive(Args, Debug)]
struct MakeControlArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Only this hand; every eligible hand otherwise.
    #[arg(long)]
    hand: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Jobs file (`{"jobs": [...]}`) to restore instead of a single image.
    #[arg(long, conflicts_with_all = ["image", "pose", "detections", "silhouette"])]
    batch: Option<PathBuf>,
    /// Backend executable; the built-in stub when absent.
    #[arg(long)]
    backend: Option<PathBuf>,
    /// Images restored in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    original: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    restored: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    mask: Vec<PathBuf>,
    /// JSONL of per-hand keypoint confidences.
    #[arg(long)]
    pose_records: PathBuf,
    /// JSONL of per-hand classifier confidences.
    #[arg(long)]
    classifier_records: PathBuf,
    #[arg(long, default_value = "handcraft")]
    method: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Directory holding `jobs.json`.
    #[arg(long)]
    job_dir: PathBuf,
    /// JSON array of ablation configurations; the seven table rows when
    /// absent.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    backend: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    pose: PathBuf,
    #[arg(long)]
    hand: String,
    #[arg(long)]
    silhouette: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "silhouette")]
    select: Select,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MisalignArgs {
    #[arg(long)]
    pose: PathBuf,
    #[arg(long)]
    hand: String,
    #[arg(long)]
    silhouette: PathBuf,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Template to align; chosen by silhouette when absent.
    #[arg(long)]
    template: Option<String>,
    /// Extra rotations about the wrist, degrees.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,15,30")]
    rotation_offset: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    hands: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeControl(a) => commands::make_control(a),
        Command::Restore(a) => commands::restore(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::SelectTemplate(a) => commands::select_template(a),
        Command::Misalign(a) => commands::misalign(a),
        Command::MakeFixtures(a) => commands::make_fixtures(a),
        Command::ExportTemplates(a) => commands::export_templates(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("handcraft: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
