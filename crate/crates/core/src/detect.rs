//! Uncertainty scoring, AUROC and attack/OOD detection reports.

use serde::Serialize;

use crate::attacks::AttackResult;
use crate::dirichlet::{
    differential_entropy, max_prob, mutual_information, predictive_entropy, DirichletParams,
};
use crate::error::{Error, Result};
use crate::priornet::{Model, ModelKind};
use crate::tensor::Tensor;

/// Detection measure. Confidence-flavoured measures (max probability,
/// precision alpha0) are negated so that a higher score always reads "more
/// anomalous".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Measure {
    MaxProb,
    PredictiveEntropy,
    MutualInformation,
    DifferentialEntropy,
    Alpha0,
}

impl Measure {
    pub const ALL: [Measure; 5] = [
        Measure::MaxProb,
        Measure::PredictiveEntropy,
        Measure::MutualInformation,
        Measure::DifferentialEntropy,
        Measure::Alpha0,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::MaxProb => "max_prob",
            Measure::PredictiveEntropy => "predictive_entropy",
            Measure::MutualInformation => "mutual_information",
            Measure::DifferentialEntropy => "differential_entropy",
            Measure::Alpha0 => "alpha0",
        }
    }

    fn from_alpha(self, a: &DirichletParams) -> f64 {
        match self {
            Measure::MaxProb => -max_prob(a),
            Measure::PredictiveEntropy => predictive_entropy(a),
            Measure::MutualInformation => mutual_information(a),
            Measure::DifferentialEntropy => differential_entropy(a),
            Measure::Alpha0 => -a.alpha0(),
        }
    }
}

impl std::str::FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown measure `{s}`")))
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&q| if q > 0.0 { q * q.ln() } else { 0.0 })
        .sum::<f64>()
}

/// One anomaly score per row of `xs`; higher means more anomalous.
///
/// Prior networks support every measure (computed from the output
/// Dirichlet). Plain classifiers support max_prob and predictive_entropy on
/// their softmax output; Dirichlet-specific measures are an error.
pub fn uncertainty_scores(model: &Model, xs: &Tensor, measure: Measure) -> Result<Vec<f64>> {
    match model.kind {
        ModelKind::PriorNet => {
            let alphas = model.forward_alpha(xs)?;
            Ok(alphas.iter().map(|a| measure.from_alpha(a)).collect())
        }
        ModelKind::Dnn => {
            let probs = model.forward_probs(xs)?;
            match measure {
                Measure::MaxProb => Ok(probs
                    .iter()
                    .map(|p| -p.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
                    .collect()),
                Measure::PredictiveEntropy => Ok(probs.iter().map(|p| entropy(p)).collect()),
                other => Err(Error::Unsupported(format!(
                    "measure {} needs a Dirichlet head",
                    other.as_str()
                ))),
            }
        }
    }
}

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Empty(format!("{name} score sequence is empty")));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain(format!("{name} scores contain NaN")));
    }
    Ok(())
}

/// Probability that a random anomalous score exceeds a random nominal one,
/// ties counted 1/2 (the Mann-Whitney statistic), computed exactly via
/// average ranks in O(n log n).
pub fn auroc(anomalous: &[f64], nominal: &[f64]) -> Result<f64> {
    check_scores("anomalous", anomalous)?;
    check_scores("nominal", nominal)?;
    let mut all: Vec<(f64, bool)> = anomalous
        .iter()
        .map(|&s| (s, true))
        .chain(nominal.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("NaN rejected above"));

    let mut rank_sum_anomalous = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the average rank
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        let anomalous_in_group = all[i..=j].iter().filter(|(_, a)| *a).count();
        rank_sum_anomalous += avg_rank * anomalous_in_group as f64;
        i = j + 1;
    }
    let na = anomalous.len() as f64;
    let nn = nominal.len() as f64;
    let u = rank_sum_anomalous - na * (na + 1.0) / 2.0;
    Ok(u / (na * nn))
}

/// Quadratic-time pairwise AUROC; the independent oracle for [`auroc`].
pub fn auroc_bruteforce(anomalous: &[f64], nominal: &[f64]) -> Result<f64> {
    check_scores("anomalous", anomalous)?;
    check_scores("nominal", nominal)?;
    let mut wins = 0.0;
    for &a in anomalous {
        for &n in nominal {
            if a > n {
                wins += 1.0;
            } else if a == n {
                wins += 0.5;
            }
        }
    }
    let na = anomalous.len() as f64;
    let nn = nominal.len() as f64;
    Ok(wins / (na * nn))
}

/// Fraction of successful attacks, recomputed from model predictions.
/// Targeted: predicted class equals the attack target. Untargeted: predicted
/// class differs from the true label.
pub fn attack_success_rate(
    model: &Model,
    results: &[AttackResult],
    true_labels: &[usize],
    targeted: bool,
) -> Result<f64> {
    if results.len() != true_labels.len() {
        return Err(Error::Dimension(format!(
            "{} attack results but {} labels",
            results.len(),
            true_labels.len()
        )));
    }
    if results.is_empty() {
        return Err(Error::Empty("no attack results".into()));
    }
    let mut hits = 0usize;
    for (r, &y) in results.iter().zip(true_labels) {
        let pred = model.predict(&r.x_adv)?[0];
        let success = if targeted {
            pred == r.target_class
        } else {
            pred != y
        };
        if success {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Detection summary for one measure (optionally restricted to one epsilon).
#[derive(Clone, Debug, Serialize)]
pub struct DetectionReport {
    pub measure: String,
    /// None pools every attack in the set.
    pub epsilon: Option<f64>,
    pub auroc: f64,
    pub accuracy_natural: f64,
    pub attack_success_rate: f64,
    pub scores_natural: Vec<f64>,
    pub scores_attack_or_ood: Vec<f64>,
}

/// Per-measure detection reports for a natural set against an attack set:
/// AUROC of attack-vs-natural scores, natural accuracy and attack success
/// rate. When the attacks span several epsilons, per-epsilon rows are
/// appended after each pooled row.
pub fn joint_report(
    model: &Model,
    natural_x: &Tensor,
    natural_y: &[usize],
    attacks: &[AttackResult],
    epsilons: &[f64],
    measures: &[Measure],
    targeted: bool,
) -> Result<Vec<DetectionReport>> {
    if attacks.is_empty() || natural_y.is_empty() {
        return Err(Error::Empty("joint_report needs non-empty sets".into()));
    }
    if attacks.len() != epsilons.len() {
        return Err(Error::Dimension(format!(
            "{} attacks but {} epsilons",
            attacks.len(),
            epsilons.len()
        )));
    }
    let accuracy_natural = {
        let preds = model.predict(natural_x)?;
        preds.iter().zip(natural_y).filter(|(p, y)| p == y).count() as f64
            / natural_y.len() as f64
    };
    // per spec the success rate denominates over the full attack set; for
    // untargeted rates the true labels must align with the attack set
    let success = {
        let labels: Vec<usize> = if targeted {
            vec![0; attacks.len()] // unused in targeted mode
        } else {
            natural_y.to_vec()
        };
        attack_success_rate(model, attacks, &labels, targeted)?
    };

    let adv_rows: Vec<&[f64]> = attacks.iter().map(|a| a.x_adv.row(0)).collect();
    let adv_x = Tensor::stack_rows(&adv_rows)?;

    let mut distinct_eps: Vec<f64> = Vec::new();
    for &e in epsilons {
        if !distinct_eps.iter().any(|&d| d == e) {
            distinct_eps.push(e);
        }
    }

    let mut reports = Vec::new();
    for &measure in measures {
        let scores_natural = uncertainty_scores(model, natural_x, measure)?;
        let scores_attack = uncertainty_scores(model, &adv_x, measure)?;
        reports.push(DetectionReport {
            measure: measure.as_str().to_string(),
            epsilon: None,
            auroc: auroc(&scores_attack, &scores_natural)?,
            accuracy_natural,
            attack_success_rate: success,
            scores_natural: scores_natural.clone(),
            scores_attack_or_ood: scores_attack.clone(),
        });
        if distinct_eps.len() > 1 {
            for &e in &distinct_eps {
                let subset: Vec<f64> = scores_attack
                    .iter()
                    .zip(epsilons)
                    .filter(|(_, &ae)| ae == e)
                    .map(|(s, _)| *s)
                    .collect();
                reports.push(DetectionReport {
                    measure: measure.as_str().to_string(),
                    epsilon: Some(e),
                    auroc: auroc(&subset, &scores_natural)?,
                    accuracy_natural,
                    attack_success_rate: success,
                    scores_natural: scores_natural.clone(),
                    scores_attack_or_ood: subset,
                });
            }
        }
    }
    Ok(reports)
}

/// Full report as pretty JSON.
pub fn reports_to_json(reports: &[DetectionReport]) -> Result<String> {
    serde_json::to_string_pretty(reports)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))
}

/// Summary CSV: one row per measure and epsilon bucket.
pub fn reports_to_csv(reports: &[DetectionReport]) -> String {
    let mut out = String::from("measure,epsilon,auroc,accuracy_natural,attack_success_rate\n");
    for r in reports {
        let eps = r
            .epsilon
            .map(|e| e.to_string())
            .unwrap_or_else(|| "all".to_string());
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.measure, eps, r.auroc, r.accuracy_natural, r.attack_success_rate
        ));
    }
    out
}
