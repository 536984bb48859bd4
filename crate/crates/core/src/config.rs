//! Flat key-value training configuration files, plus the built-in
//! per-dataset configuration table.
//!
//! Format: one `key = value` pair per line; `#` starts a comment; keys match
//! the [`TrainConfig`] fields exactly; unknown keys are an error; omitted
//! keys take the documented defaults.

use crate::error::{Error, Result};
use crate::training::{OodSource, TrainConfig};

pub const CONFIG_KEYS: [&str; 10] = [
    "eta0",
    "epochs",
    "cycle_length",
    "dropout_keep",
    "gamma",
    "beta_in",
    "beta_adv",
    "ood_source",
    "batch_size",
    "seed",
];

pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |what: &str| {
            Error::InvalidConfig(format!("line {}: bad {what} `{value}`", lineno + 1))
        };
        match key {
            "eta0" => cfg.eta0 = value.parse().map_err(|_| bad("float"))?,
            "epochs" => cfg.epochs = value.parse().map_err(|_| bad("integer"))?,
            "cycle_length" => cfg.cycle_length = value.parse().map_err(|_| bad("integer"))?,
            "dropout_keep" => cfg.dropout_keep = value.parse().map_err(|_| bad("float"))?,
            "gamma" => cfg.gamma = value.parse().map_err(|_| bad("float"))?,
            "beta_in" => cfg.beta_in = value.parse().map_err(|_| bad("float"))?,
            "beta_adv" => cfg.beta_adv = value.parse().map_err(|_| bad("float"))?,
            "ood_source" => cfg.ood_source = value.parse()?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("integer"))?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "line {}: unknown key `{other}`",
                    lineno + 1
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn format_train_config(cfg: &TrainConfig) -> String {
    format!(
        "eta0 = {}\nepochs = {}\ncycle_length = {}\ndropout_keep = {}\ngamma = {}\nbeta_in = {}\nbeta_adv = {}\nood_source = {}\nbatch_size = {}\nseed = {}\n",
        cfg.eta0,
        cfg.epochs,
        cfg.cycle_length,
        cfg.dropout_keep,
        cfg.gamma,
        cfg.beta_in,
        cfg.beta_adv,
        cfg.ood_source,
        cfg.batch_size,
        cfg.seed
    )
}

pub fn read_train_config(path: &std::path::Path) -> Result<TrainConfig> {
    parse_train_config(&std::fs::read_to_string(path)?)
}

/// One row of the built-in training-configuration table.
#[derive(Clone, Debug)]
pub struct PresetRow {
    pub dataset: &'static str,
    pub model: &'static str,
    pub config: TrainConfig,
}

/// The per-dataset training configurations for every model variant:
/// classifiers trained by likelihood (plus FGSM-adversarial variants) and
/// prior networks trained with the forward or reverse KL loss, with their
/// published learning rates, schedules, dropout keep-probabilities, OOD
/// weights and target concentrations. Batch size is 128 throughout.
pub fn preset_rows() -> Vec<PresetRow> {
    fn cfg(
        eta0: f64,
        epochs: usize,
        cycle: usize,
        keep: f64,
        gamma: f64,
        beta_in: f64,
        ood: OodSource,
    ) -> TrainConfig {
        TrainConfig {
            eta0,
            epochs,
            cycle_length: cycle,
            dropout_keep: keep,
            gamma,
            beta_in,
            beta_adv: 1.0,
            ood_source: ood,
            batch_size: 128,
            seed: 0,
        }
    }
    use OodSource::{Dataset, FgsmAdv, None as NoOod};

    vec![
        // MNIST
        PresetRow { dataset: "mnist", model: "dnn", config: cfg(1e-3, 20, 10, 0.5, 0.0, 100.0, NoOod) },
        PresetRow { dataset: "mnist", model: "pn-kl", config: cfg(1e-3, 20, 10, 0.5, 0.0, 1e3, NoOod) },
        PresetRow { dataset: "mnist", model: "pn-rkl", config: cfg(1e-3, 20, 10, 0.5, 0.0, 1e3, NoOod) },
        // SVHN
        PresetRow { dataset: "svhn", model: "dnn", config: cfg(1e-3, 40, 30, 0.5, 0.0, 100.0, NoOod) },
        PresetRow { dataset: "svhn", model: "pn-kl", config: cfg(5e-4, 40, 30, 0.7, 1.0, 1e3, Dataset("cifar-10".into())) },
        PresetRow { dataset: "svhn", model: "pn-rkl", config: cfg(5e-6, 40, 30, 0.7, 10.0, 1e3, Dataset("cifar-10".into())) },
        // CIFAR-10
        PresetRow { dataset: "cifar-10", model: "dnn", config: cfg(1e-3, 45, 30, 0.5, 0.0, 100.0, NoOod) },
        PresetRow { dataset: "cifar-10", model: "dnn-adv", config: cfg(1e-3, 45, 30, 0.5, 0.0, 100.0, FgsmAdv) },
        PresetRow { dataset: "cifar-10", model: "pn-kl", config: cfg(5e-4, 45, 30, 0.7, 1.0, 1e2, Dataset("cifar-100".into())) },
        PresetRow { dataset: "cifar-10", model: "pn-rkl", config: cfg(5e-6, 45, 30, 0.7, 10.0, 1e2, Dataset("cifar-100".into())) },
        PresetRow { dataset: "cifar-10", model: "pn-adv", config: cfg(5e-6, 45, 30, 0.7, 30.0, 1e2, FgsmAdv) },
        // CIFAR-100
        PresetRow { dataset: "cifar-100", model: "dnn", config: cfg(1e-3, 100, 70, 0.5, 0.0, 100.0, NoOod) },
        PresetRow { dataset: "cifar-100", model: "dnn-adv", config: cfg(1e-3, 100, 70, 0.5, 0.0, 100.0, FgsmAdv) },
        PresetRow { dataset: "cifar-100", model: "pn-kl", config: cfg(5e-4, 100, 70, 0.7, 1.0, 1e2, Dataset("tinyimagenet".into())) },
        PresetRow { dataset: "cifar-100", model: "pn-rkl", config: cfg(5e-6, 100, 70, 0.7, 10.0, 1e2, Dataset("tinyimagenet".into())) },
        PresetRow { dataset: "cifar-100", model: "pn-adv", config: cfg(5e-4, 100, 70, 0.7, 30.0, 1e2, FgsmAdv) },
        // TinyImageNet
        PresetRow { dataset: "tinyimagenet", model: "dnn", config: cfg(1e-3, 120, 80, 0.5, 0.0, 100.0, NoOod) },
        PresetRow { dataset: "tinyimagenet", model: "pn-kl", config: cfg(5e-4, 120, 80, 0.5, 0.0, 1e2, NoOod) },
        PresetRow { dataset: "tinyimagenet", model: "pn-rkl", config: cfg(5e-6, 120, 80, 0.5, 0.0, 1e2, NoOod) },
    ]
}
