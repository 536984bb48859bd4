//! Command implementations.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dpn_core::attacks::{
    self, AttackConfig, AttackLoss, AttackRecord, AttackResult, Norm,
};
use dpn_core::checkpoint;
use dpn_core::config::{format_train_config, parse_train_config, read_train_config};
use dpn_core::data::{
    gen_synthetic, load_dataset, load_idx_split, read_split_csv, save_dataset, write_split_csv,
    DatasetSplit, Split, SyntheticSpec,
};
use dpn_core::detect::{joint_report, reports_to_csv, reports_to_json, Measure};
use dpn_core::graph::Graph;
use dpn_core::oracle;
use dpn_core::priornet::{MlpSpec, Model, ModelKind};
use dpn_core::tensor::Tensor;
use dpn_core::training::{
    train_dnn_adversarial, train_pn_adversarial, train_standard, Objective, OodSource, Trained,
    TrainConfig,
};

use crate::manifest::{read_manifest, write_manifest, OutputDir};
use crate::{
    AttackArgs, AttackChoice, EvaluateArgs, GenDataArgs, ModelChoice, OracleCheckArgs, RerunArgs,
    SplitChoice, TrainArgs,
};

// ---------------------------------------------------------------------------
// gen-data

fn parse_means(spec: &str) -> Result<Vec<(f64, f64)>> {
    spec.split(';')
        .map(|pair| {
            let (a, b) = pair
                .split_once(',')
                .with_context(|| format!("mean `{pair}` is not x,y"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let out = OutputDir::claim(Path::new(&args.out))?;
    let means = match &args.means {
        Some(s) => parse_means(s)?,
        None => SyntheticSpec::default_means(args.classes),
    };
    let spec = SyntheticSpec {
        num_classes: args.classes,
        points_per_class: args.points,
        means,
        cov_scale: args.cov,
        ood_ring_radius: args.radius,
        seed: args.seed,
    };
    let (data, ood) = gen_synthetic(&spec)?;
    save_dataset(&out.path, &data, Some(&ood))?;
    write_manifest(
        &out.path,
        "gen-data",
        serde_json::to_value(args)?,
        &["train.csv", "valid.csv", "test.csv", "ood.csv", "meta.json"],
    )?;
    println!(
        "wrote dataset: {} train / {} valid / {} test / {} ood examples",
        data.train.len(),
        data.valid.as_ref().map_or(0, Split::len),
        data.test.as_ref().map_or(0, Split::len),
        ood.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Serialize, Deserialize)]
struct ModelFile {
    kind: ModelKind,
    spec: MlpSpec,
}

fn save_model(dir: &Path, model: &Model) -> Result<()> {
    let file = ModelFile {
        kind: model.kind,
        spec: model.spec.clone(),
    };
    std::fs::write(
        dir.join("model.json"),
        serde_json::to_string_pretty(&file)?,
    )?;
    checkpoint::save_params(&dir.join("checkpoint.bin"), model.graph().params())?;
    Ok(())
}

fn load_model(dir: &Path) -> Result<Model> {
    let file: ModelFile =
        serde_json::from_str(&std::fs::read_to_string(Path::new(dir).join("model.json"))?)
            .context("model.json")?;
    let mut model = Model::build(file.kind, file.spec, 0)?;
    checkpoint::load_into_graph(model.graph_mut(), &dir.join("checkpoint.bin"))?;
    Ok(model)
}

fn parse_hidden(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .with_context(|| format!("bad hidden width `{p}`"))
        })
        .collect()
}

fn load_train_data(args: &TrainArgs) -> Result<(DatasetSplit, Option<Split>)> {
    if let (Some(imgs), Some(labels)) = (&args.idx_train_images, &args.idx_train_labels) {
        let (train, dims) = load_idx_split(Path::new(imgs), Path::new(labels))?;
        let test = match (&args.idx_test_images, &args.idx_test_labels) {
            (Some(ti), Some(tl)) => Some(load_idx_split(Path::new(ti), Path::new(tl))?.0),
            _ => None,
        };
        let num_classes = train.y.iter().copied().max().unwrap_or(0) + 1;
        let data = DatasetSplit {
            train,
            valid: None,
            test,
            num_classes: num_classes.max(2),
            image_dims: Some(dims),
        };
        data.validate()?;
        Ok((data, None))
    } else {
        Ok(load_dataset(Path::new(&args.data))?)
    }
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let out = OutputDir::claim(Path::new(&args.out))?;
    let mut cfg = match &args.config {
        Some(path) => read_train_config(Path::new(path))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (data, ood) = load_train_data(args)?;
    let hidden = parse_hidden(&args.hidden)?;
    let kind = match args.model {
        ModelChoice::Dnn => ModelKind::Dnn,
        ModelChoice::PnKl | ModelChoice::PnRkl => ModelKind::PriorNet,
    };
    let spec = MlpSpec::new(data.train.feature_dim(), hidden, data.num_classes)
        .with_dropout(cfg.dropout_keep);
    let model = Model::build(kind, spec, cfg.seed)?;

    let trained: Trained = match (args.model, &cfg.ood_source) {
        (ModelChoice::Dnn, OodSource::FgsmAdv) => {
            train_dnn_adversarial(model, &data, &cfg, args.augment)?
        }
        (ModelChoice::Dnn, _) => {
            train_standard(model, &data, &cfg, Objective::DnnNll, None, args.augment)?
        }
        (ModelChoice::PnKl, OodSource::FgsmAdv) => {
            bail!("adversarial prior-network training uses the reverse KL loss; pass --model pn-rkl")
        }
        (ModelChoice::PnKl, _) => train_standard(
            model,
            &data,
            &cfg,
            Objective::PnKl,
            ood.as_ref(),
            args.augment,
        )?,
        (ModelChoice::PnRkl, OodSource::FgsmAdv) => {
            train_pn_adversarial(model, &data, &cfg, args.augment)?
        }
        (ModelChoice::PnRkl, _) => train_standard(
            model,
            &data,
            &cfg,
            Objective::PnRkl,
            ood.as_ref(),
            args.augment,
        )?,
    };

    save_model(&out.path, &trained.model)?;
    trained.history.write_csv(&out.join("history.csv"))?;
    std::fs::write(out.join("config.txt"), format_train_config(&cfg))?;

    let mut manifest_args = serde_json::to_value(args)?;
    manifest_args["resolved_config"] = serde_json::Value::String(format_train_config(&cfg));
    write_manifest(
        &out.path,
        "train",
        manifest_args,
        &["model.json", "checkpoint.bin", "history.csv", "config.txt"],
    )?;

    if let Some(last) = trained.history.epochs.last() {
        println!(
            "trained {} epochs: loss {:.4}, train acc {:.3}, valid acc {:.3}",
            trained.history.epochs.len(),
            last.train_loss,
            last.train_acc,
            last.valid_acc
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// attack

fn pick_split<'d>(data: &'d DatasetSplit, which: SplitChoice) -> Result<&'d Split> {
    match which {
        SplitChoice::Train => Ok(&data.train),
        SplitChoice::Valid => data
            .valid
            .as_ref()
            .context("dataset has no validation split"),
        SplitChoice::Test => data.test.as_ref().context("dataset has no test split"),
    }
}

pub fn attack(args: &AttackArgs) -> Result<()> {
    let out = OutputDir::claim(Path::new(&args.out))?;
    let model = load_model(Path::new(&args.model))?;
    let (data, _) = load_dataset(Path::new(&args.data))?;
    let split = pick_split(&data, args.split)?;
    let count = args.count.unwrap_or(split.len()).min(split.len());
    if count == 0 {
        bail!("nothing to attack: split is empty");
    }
    let norm: Norm = args.norm.parse::<Norm>()?;
    let loss_kind = match args.loss.as_str() {
        "nll" => AttackLoss::NllTarget,
        "rkl" => AttackLoss::RklTargetDirichlet,
        other => bail!(dpn_core::Error::InvalidConfig(format!(
            "unknown attack loss `{other}` (expected nll or rkl)"
        ))),
    };
    let step_size = args.step_size.unwrap_or(match args.attack {
        AttackChoice::Fgsm | AttackChoice::Fgm => args.eps,
        _ => args.eps / args.steps as f64,
    });
    let cfg = AttackConfig {
        norm,
        epsilon: args.eps,
        steps: args.steps,
        step_size,
        momentum_decay: match args.attack {
            AttackChoice::Bim => 0.0,
            _ => args.momentum,
        },
        soft_c: args.soft_c,
        loss_kind,
        targeted: !args.untargeted,
        rkl_target_beta: args.rkl_beta,
    };

    let k = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let indices: Vec<usize> = (0..count).collect();
    let true_labels: Vec<usize> = indices.iter().map(|&i| split.y[i]).collect();
    let targets: Vec<usize> = if cfg.targeted {
        true_labels
            .iter()
            .map(|&y| attacks::select_target_class(&mut rng, y, k))
            .collect::<dpn_core::Result<_>>()?
    } else {
        true_labels.clone()
    };
    let rows: Vec<&[f64]> = indices.iter().map(|&i| split.x.row(i)).collect();
    let xs = Tensor::stack_rows(&rows)?;

    let results: Vec<AttackResult> = match args.attack {
        AttackChoice::Fgsm => attacks::fgsm_batch(
            &model,
            &xs,
            &targets,
            &vec![args.eps; count],
            cfg.loss_kind,
            cfg.targeted,
            cfg.rkl_target_beta,
        )?,
        AttackChoice::Fgm => indices
            .iter()
            .map(|&i| {
                let x = Tensor::matrix(1, split.feature_dim(), split.x.row(i).to_vec())?;
                attacks::fgm(
                    &model,
                    &x,
                    targets[i],
                    args.eps,
                    norm,
                    cfg.loss_kind,
                    cfg.targeted,
                    cfg.rkl_target_beta,
                )
            })
            .collect::<dpn_core::Result<_>>()?,
        AttackChoice::Bim | AttackChoice::Mim => {
            attacks::iterative_attack_batch(&model, &xs, &targets, &cfg)?
        }
        AttackChoice::Soft => indices
            .iter()
            .map(|&i| {
                let x = Tensor::matrix(1, split.feature_dim(), split.x.row(i).to_vec())?;
                attacks::soft_constraint_attack(&model, &x, targets[i], &cfg).map(|(r, _)| r)
            })
            .collect::<dpn_core::Result<_>>()?,
    };

    // x_adv.csv keeps the true labels so evaluation can align both sets
    let adv_rows: Vec<&[f64]> = results.iter().map(|r| r.x_adv.row(0)).collect();
    let adv_split = Split::new(Tensor::stack_rows(&adv_rows)?, true_labels.clone())?;
    write_split_csv(&out.join("x_adv.csv"), &adv_split)?;

    let records: Vec<AttackRecord> = results
        .iter()
        .enumerate()
        .map(|(i, r)| AttackRecord {
            index: i,
            target_class: r.target_class,
            epsilon: args.eps,
            norm: norm.as_str().to_string(),
            achieved_delta: r.achieved_delta,
            success: r.success,
        })
        .collect();
    attacks::write_attack_manifest(&out.join("attacks.jsonl"), &records)?;

    write_manifest(
        &out.path,
        "attack",
        serde_json::to_value(args)?,
        &["x_adv.csv", "attacks.jsonl"],
    )?;

    let succeeded = results.iter().filter(|r| r.success).count();
    println!(
        "attacked {count} inputs: {succeeded} successes ({:.1}%)",
        100.0 * succeeded as f64 / count as f64
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let out = OutputDir::claim(Path::new(&args.out))?;
    let model = load_model(Path::new(&args.model))?;
    let (data, _) = load_dataset(Path::new(&args.data))?;

    let attack_dir = Path::new(&args.attacks);
    let attack_manifest = read_manifest(&attack_dir.join("manifest.json"))?;
    if attack_manifest.command != "attack" {
        bail!("{} is not an attack output directory", attack_dir.display());
    }
    let attack_args: AttackArgs = serde_json::from_value(attack_manifest.args.clone())
        .context("attack manifest args")?;
    let adv = read_split_csv(&attack_dir.join("x_adv.csv"))?;
    let records = attacks::read_attack_manifest(&attack_dir.join("attacks.jsonl"))?;
    if records.len() != adv.len() {
        bail!(dpn_core::Error::Format(format!(
            "attack dir mismatch: {} records vs {} adversarial rows",
            records.len(),
            adv.len()
        )));
    }

    // the natural counterparts are the same examples the attack used
    let split = pick_split(&data, attack_args.split)?;
    let count = adv.len().min(split.len());
    let rows: Vec<&[f64]> = (0..count).map(|i| split.x.row(i)).collect();
    let natural_x = Tensor::stack_rows(&rows)?;
    let natural_y: Vec<usize> = split.y[..count].to_vec();

    let results: Vec<AttackResult> = (0..count)
        .map(|i| -> dpn_core::Result<AttackResult> {
            Ok(AttackResult {
                x_adv: Tensor::matrix(1, adv.feature_dim(), adv.x.row(i).to_vec())?,
                achieved_delta: records[i].achieved_delta,
                target_class: records[i].target_class,
                success: records[i].success,
                early_stop: false,
            })
        })
        .collect::<dpn_core::Result<_>>()?;
    let epsilons: Vec<f64> = records.iter().map(|r| r.epsilon).collect();

    let measures: Vec<Measure> = if args.measures.is_empty() {
        match model.kind {
            ModelKind::PriorNet => Measure::ALL.to_vec(),
            ModelKind::Dnn => vec![Measure::MaxProb, Measure::PredictiveEntropy],
        }
    } else {
        args.measures
            .iter()
            .map(|m| m.parse())
            .collect::<dpn_core::Result<_>>()?
    };

    let reports = joint_report(
        &model,
        &natural_x,
        &natural_y,
        &results,
        &epsilons,
        &measures,
        !attack_args.untargeted,
    )?;
    std::fs::write(out.join("report.json"), reports_to_json(&reports)?)?;
    std::fs::write(out.join("report.csv"), reports_to_csv(&reports))?;
    write_manifest(
        &out.path,
        "evaluate",
        serde_json::to_value(args)?,
        &["report.json", "report.csv"],
    )?;

    for r in reports.iter().filter(|r| r.epsilon.is_none()) {
        println!(
            "{:>22}: AUROC {:.4} (natural acc {:.3}, attack success {:.3})",
            r.measure, r.auroc, r.accuracy_natural, r.attack_success_rate
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// oracle-check

pub fn oracle_check(args: &OracleCheckArgs) -> Result<()> {
    let out = OutputDir::claim(Path::new(&args.out))?;
    let (pairs, samples, models) = if args.quick {
        (10, 100_000, 20)
    } else {
        (50, 1_000_000, 100)
    };
    let mut checks = oracle::mc_dirichlet_oracle_checks(pairs, samples, args.seed, 3.0)?;
    checks.extend(oracle::gradient_oracle_checks(models, args.seed, 1e-4)?);

    let mut all_pass = true;
    for c in &checks {
        println!(
            "{} {:>28}: worst {:.6e} (threshold {:.0e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.threshold
        );
        all_pass &= c.pass;
    }
    std::fs::write(
        out.join("oracle_report.json"),
        serde_json::to_string_pretty(&checks)?,
    )?;
    write_manifest(
        &out.path,
        "oracle-check",
        serde_json::to_value(args)?,
        &["oracle_report.json"],
    )?;
    if !all_pass {
        bail!("oracle suite failed");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// rerun

pub fn rerun(args: &RerunArgs) -> Result<()> {
    let manifest = read_manifest(Path::new(&args.manifest))?;
    match manifest.command.as_str() {
        "gen-data" => {
            let mut cmd: GenDataArgs = serde_json::from_value(manifest.args)?;
            cmd.out = args.out.clone();
            gen_data(&cmd)
        }
        "train" => {
            let mut value = manifest.args;
            let resolved = value["resolved_config"]
                .as_str()
                .context("train manifest lacks resolved_config")?
                .to_string();
            value
                .as_object_mut()
                .context("manifest args")?
                .remove("resolved_config");
            let mut cmd: TrainArgs = serde_json::from_value(value)?;
            cmd.out = args.out.clone();
            // materialize the resolved config so overrides are reproduced
            let cfg = parse_train_config(&resolved)?;
            let tmp = Path::new(&args.out).with_extension("rerun-config.txt");
            std::fs::write(&tmp, format_train_config(&cfg))?;
            cmd.config = Some(tmp.to_string_lossy().into_owned());
            cmd.seed = Some(cfg.seed);
            let result = train(&cmd);
            let _ = std::fs::remove_file(&tmp);
            result
        }
        "attack" => {
            let mut cmd: AttackArgs = serde_json::from_value(manifest.args)?;
            cmd.out = args.out.clone();
            attack(&cmd)
        }
        "evaluate" => {
            let mut cmd: EvaluateArgs = serde_json::from_value(manifest.args)?;
            cmd.out = args.out.clone();
            evaluate(&cmd)
        }
        "oracle-check" => {
            let mut cmd: OracleCheckArgs = serde_json::from_value(manifest.args)?;
            cmd.out = args.out.clone();
            oracle_check(&cmd)
        }
        other => bail!("manifest command `{other}` cannot be re-run"),
    }
}

// keep Graph in scope for checkpoint loading signatures
#[allow(unused)]
fn _types(_: &Graph) {}
