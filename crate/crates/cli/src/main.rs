//! `dpn`: desk-scale Dirichlet prior networks, gradient attacks and
//! uncertainty-based detection, driven from the command line.
//!
//! Exit codes: 0 success, 2 usage/configuration errors, 1 anything else.

mod manifest;
mod ops;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "dpn", version, about = "Dirichlet prior network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic blobs-plus-OOD-ring dataset.
    GenData(GenDataArgs),
    /// Train a classifier or prior network.
    Train(TrainArgs),
    /// Generate adversarial examples against a trained model.
    Attack(AttackArgs),
    /// Score attacks/OOD data and report per-measure AUROC.
    Evaluate(EvaluateArgs),
    /// Run the Monte-Carlo and finite-difference oracle suites.
    OracleCheck(OracleCheckArgs),
    /// Re-execute a run from its manifest into a fresh directory.
    Rerun(RerunArgs),
}

#[derive(Args, Serialize, Deserialize, Clone)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: String,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Training points per class (valid/test get a quarter each).
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    /// Isotropic blob standard deviation.
    #[arg(long, default_value_t = 0.05)]
    pub cov: f64,
    /// OOD ring radius.
    #[arg(long, default_value_t = 2.5)]
    pub radius: f64,
    /// Class means as "x,y;x,y;..."; defaults to a circle inside [0,1]^2.
    #[arg(long)]
    pub means: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum ModelChoice {
    Dnn,
    #[value(name = "pn-kl")]
    #[serde(rename = "pn-kl")]
    PnKl,
    #[value(name = "pn-rkl")]
    #[serde(rename = "pn-rkl")]
    PnRkl,
}

#[derive(Args, Serialize, Deserialize, Clone)]
pub struct TrainArgs {
    /// Dataset directory (from gen-data, or CSV splits with meta.json).
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub out: String,
    #[arg(long, value_enum)]
    pub model: ModelChoice,
    /// Training configuration file (key = value lines); defaults apply
    /// when omitted.
    #[arg(long)]
    pub config: Option<String>,
    /// Overrides the seed from the configuration file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden layer widths, comma-separated.
    #[arg(long, default_value = "128,128")]
    pub hidden: String,
    /// Enable flip/shift/rotation augmentation (image datasets only).
    #[arg(long, default_value_t = false)]
    pub augment: bool,
    /// Load IDX image/label files instead of CSV splits: paths to
    /// train-images and train-labels (optionally test via --idx-test-*).
    #[arg(long, requires = "idx_train_labels")]
    pub idx_train_images: Option<String>,
    #[arg(long)]
    pub idx_train_labels: Option<String>,
    #[arg(long, requires = "idx_test_labels")]
    pub idx_test_images: Option<String>,
    #[arg(long)]
    pub idx_test_labels: Option<String>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackChoice {
    Fgsm,
    Fgm,
    Bim,
    Mim,
    Soft,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Valid,
    Test,
}

#[derive(Args, Serialize, Deserialize, Clone)]
pub struct AttackArgs {
    /// Trained model directory (model.json + checkpoint.bin).
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub out: String,
    #[arg(long, value_enum)]
    pub attack: AttackChoice,
    #[arg(long, default_value_t = 0.3)]
    pub eps: f64,
    /// Perturbation norm: 1, 2 or inf.
    #[arg(long, default_value = "inf")]
    pub norm: String,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Defaults to eps/steps for iterative attacks and eps for one-step.
    #[arg(long)]
    pub step_size: Option<f64>,
    /// Momentum decay for mim (bim fixes it to 0).
    #[arg(long, default_value_t = 1.0)]
    pub momentum: f64,
    /// Soft-constraint trade-off for the soft attack.
    #[arg(long, default_value_t = 1.0)]
    pub soft_c: f64,
    /// Attack loss: nll or rkl (reverse KL toward a confident Dirichlet).
    #[arg(long, default_value = "nll")]
    pub loss: String,
    #[arg(long, default_value_t = 100.0)]
    pub rkl_beta: f64,
    /// Attack only the first N examples of the split.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    /// Ascend the true-class loss instead of descending a target loss.
    #[arg(long, default_value_t = false)]
    pub untargeted: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Serialize, Deserialize, Clone)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub data: String,
    /// Attack output directory (x_adv.csv + attacks.jsonl + manifest.json).
    #[arg(long)]
    pub attacks: String,
    #[arg(long)]
    pub out: String,
    /// Detection measure, repeatable; defaults to every supported measure.
    #[arg(long = "measure")]
    pub measures: Vec<String>,
}

#[derive(Args, Serialize, Deserialize, Clone)]
pub struct OracleCheckArgs {
    #[arg(long)]
    pub out: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Smaller sample counts for a fast sanity pass.
    #[arg(long, default_value_t = false)]
    pub quick: bool,
}

#[derive(Args, Clone)]
pub struct RerunArgs {
    /// manifest.json of a previous run.
    #[arg(long)]
    pub manifest: String,
    /// Fresh output directory for the reproduced artifacts.
    #[arg(long)]
    pub out: String,
}

/// Errors that should exit with the usage/configuration code.
fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<dpn_core::Error>(),
            Some(dpn_core::Error::InvalidConfig(_))
                | Some(dpn_core::Error::Format(_))
                | Some(dpn_core::Error::UnknownInput(_))
        )
    })
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => ops::gen_data(&args),
        Command::Train(args) => ops::train(&args),
        Command::Attack(args) => ops::attack(&args),
        Command::Evaluate(args) => ops::evaluate(&args),
        Command::OracleCheck(args) => ops::oracle_check(&args),
        Command::Rerun(args) => ops::rerun(&args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        let code = if is_config_error(&err) { 2 } else { 1 };
        std::process::exit(code);
    }
}
