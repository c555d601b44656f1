use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gazekit::eval::Factor;
use gazekit::features::Descriptor;
use gazekit::regress::RegressorKind;

#[derive(Parser, Debug)]
#[command(name = "gazekit", version, about = "Appearance-based gaze estimation for tablet cameras")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic labeled corpus to disk.
    Synth(SynthArgs),
    /// Validate a manifest (and annotation sidecar) and summarize it.
    Ingest(IngestArgs),
    /// Extract descriptors for every usable frame into a feature dump.
    Extract(ExtractArgs),
    /// Train a model on a whole corpus.
    Train(TrainArgs),
    /// Run an evaluation protocol.
    Eval(EvalArgs),
    /// Track gaze through one session with a trained model.
    Track(TrackArgs),
    /// Merge the summaries of several runs.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    /// Manifest CSV (or a directory holding manifest.csv), `synth` for an
    /// in-memory synthetic corpus, or `ricetabletgaze` for the dataset under
    /// $RICETABLETGAZE_ROOT.
    #[arg(long)]
    pub corpus: String,
    /// Annotation sidecar; defaults to annotations.csv next to the manifest.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Subjects of the in-memory synthetic corpus.
    #[arg(long, default_value_t = 8)]
    pub subjects: usize,
    /// Sessions per subject of the in-memory synthetic corpus.
    #[arg(long, default_value_t = 1)]
    pub sessions: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "mhog", value_parser = parse_descriptor)]
    pub feature: Descriptor,
    #[arg(long, default_value = "rf", value_parser = parse_regressor)]
    pub regressor: RegressorKind,
    /// Append the 10 eye-geometry values to the reduced feature.
    #[arg(long)]
    pub augmented: bool,
    /// Trees per forest.
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    /// Neighbors for kNN.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub subjects: usize,
    #[arg(long, default_value_t = 1)]
    pub sessions: usize,
    #[arg(long, default_value_t = 5)]
    pub frames_per_point: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value = "mhog", value_parser = parse_descriptor)]
    pub feature: Descriptor,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Loso,
    Session,
    Sweep,
    Size,
    Partition,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "loso")]
    pub protocol: Protocol,
    #[arg(long, value_parser = parse_factor)]
    pub factor: Option<Factor>,
    /// Clamp predictions to the screen before scoring.
    #[arg(long)]
    pub clamp: bool,
    /// Group sizes for the size study (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Repeats for the size study and partition experiments.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrackArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Trained model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Subject to track; defaults to the first.
    #[arg(long)]
    pub subject: Option<String>,
    /// Session to track; defaults to the subject's first.
    #[arg(long)]
    pub session: Option<String>,
    #[arg(long, default_value_t = gazekit::tracking::DEFAULT_SIGMA_T)]
    pub sigma_t: f64,
    #[arg(long, default_value_t = gazekit::tracking::DEFAULT_SIGMA_R)]
    pub sigma_r: f64,
    /// Clamp estimates to the screen.
    #[arg(long)]
    pub clamp: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories to merge.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_descriptor(s: &str) -> Result<Descriptor, String> {
    s.parse().map_err(|e: gazekit::GazeError| e.to_string())
}

fn parse_regressor(s: &str) -> Result<RegressorKind, String> {
    s.parse().map_err(|e: gazekit::GazeError| e.to_string())
}

fn parse_factor(s: &str) -> Result<Factor, String> {
    s.parse().map_err(|e: gazekit::GazeError| e.to_string())
}
