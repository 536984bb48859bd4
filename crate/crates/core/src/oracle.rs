//! Monte-Carlo oracles for the closed-form Dirichlet quantities.
//!
//! These estimators are deliberately independent of the closed forms they
//! check: they evaluate plain log-density/entropy statistics on simplex
//! samples drawn via normalized Gamma variates. Used by the test suites and
//! by the `oracle-check` CLI command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::dirichlet::DirichletParams;
use crate::error::{Error, Result};
use crate::special::ln_gamma_unchecked;

/// A Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl McEstimate {
    /// |mean - value| in units of the standard error.
    pub fn sigmas_from(&self, value: f64) -> f64 {
        (self.mean - value).abs() / self.std_error.max(1e-300)
    }
}

/// Streaming mean/variance accumulator (Welford).
#[derive(Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn estimate(&self) -> McEstimate {
        let var = if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        };
        McEstimate {
            mean: self.mean,
            std_error: (var / self.n as f64).sqrt(),
        }
    }
}

/// One draw from Dir(alpha) via normalized Gamma(alpha_k, 1) variates.
/// Redraws in the (vanishingly rare) case a component underflows to zero.
pub fn sample_dirichlet(gammas: &[Gamma<f64>], rng: &mut impl Rng, out: &mut [f64]) {
    loop {
        let mut total = 0.0;
        for (slot, g) in out.iter_mut().zip(gammas) {
            let v = g.sample(rng);
            *slot = v;
            total += v;
        }
        if total > 0.0 && out.iter().all(|&v| v > 0.0) {
            for slot in out.iter_mut() {
                *slot /= total;
            }
            if out.iter().all(|&v| v > 0.0 && v.is_finite()) {
                return;
            }
        }
    }
}

fn gammas_for(p: &DirichletParams) -> Result<Vec<Gamma<f64>>> {
    p.alpha()
        .iter()
        .map(|&a| {
            Gamma::new(a, 1.0)
                .map_err(|e| Error::Domain(format!("gamma shape {a} invalid: {e}")))
        })
        .collect()
}

/// ln of the Dirichlet density at a simplex point.
fn ln_pdf(p: &DirichletParams, pi: &[f64]) -> f64 {
    let mut acc = ln_gamma_unchecked(p.alpha0());
    for (&a, &x) in p.alpha().iter().zip(pi) {
        acc -= ln_gamma_unchecked(a);
        acc += (a - 1.0) * x.ln();
    }
    acc
}

/// All three Monte-Carlo estimates from one shared sample stream:
/// KL(Dir(a) || Dir(b)), E[H[pi]] under a, and the differential entropy of a.
pub fn mc_dirichlet_suite(
    a: &DirichletParams,
    b: &DirichletParams,
    samples: usize,
    seed: u64,
) -> Result<(McEstimate, McEstimate, McEstimate)> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::Dimension(format!(
            "dimension mismatch: {} vs {}",
            a.num_classes(),
            b.num_classes()
        )));
    }
    let gammas = gammas_for(a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pi = vec![0.0; a.num_classes()];
    let (mut kl, mut ee, mut de) = (Welford::default(), Welford::default(), Welford::default());
    for _ in 0..samples {
        sample_dirichlet(&gammas, &mut rng, &mut pi);
        let lp_a = ln_pdf(a, &pi);
        let lp_b = ln_pdf(b, &pi);
        kl.push(lp_a - lp_b);
        ee.push(-pi.iter().map(|&x| x * x.ln()).sum::<f64>());
        de.push(-lp_a);
    }
    Ok((kl.estimate(), ee.estimate(), de.estimate()))
}

/// Monte-Carlo estimate of KL(Dir(a) || Dir(b)) as E_a[ln p_a - ln p_b].
pub fn mc_dirichlet_kl(
    a: &DirichletParams,
    b: &DirichletParams,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    Ok(mc_dirichlet_suite(a, b, samples, seed)?.0)
}

/// Monte-Carlo estimate of E[H[pi]] under Dir(a).
pub fn mc_expected_entropy(a: &DirichletParams, samples: usize, seed: u64) -> Result<McEstimate> {
    Ok(mc_dirichlet_suite(a, a, samples, seed)?.1)
}

/// Monte-Carlo estimate of the differential entropy E[-ln p(pi)] of Dir(a).
pub fn mc_differential_entropy(
    a: &DirichletParams,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    Ok(mc_dirichlet_suite(a, a, samples, seed)?.2)
}

/// Outcome of one oracle comparison.
#[derive(Clone, Debug, serde::Serialize)]
pub struct OracleCheck {
    pub name: String,
    /// Worst observed discrepancy (sigmas for MC checks, relative error for
    /// gradient checks).
    pub worst: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl OracleCheck {
    fn new(name: &str, worst: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            worst,
            threshold,
            pass: worst <= threshold,
        }
    }
}

/// Compare the closed-form Dirichlet KL, expected entropy and differential
/// entropy against their Monte-Carlo oracles on `pairs` random concentration
/// pairs (entries log-uniform in [0.1, 100], K in 2..=6), `samples` draws
/// each. Reports the worst deviation in standard errors per quantity.
pub fn mc_dirichlet_oracle_checks(
    pairs: usize,
    samples: usize,
    seed: u64,
    sigma_threshold: f64,
) -> Result<Vec<OracleCheck>> {
    use crate::dirichlet::{differential_entropy, dirichlet_kl, expected_entropy};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_kl = 0.0_f64;
    let mut worst_ee = 0.0_f64;
    let mut worst_de = 0.0_f64;
    for i in 0..pairs {
        let k = rng.random_range(2..=6);
        let mut draw = |rng: &mut ChaCha8Rng| -> Result<DirichletParams> {
            DirichletParams::new(
                (0..k)
                    .map(|_| 10f64.powf(rng.random_range(-1.0..2.0)))
                    .collect(),
            )
        };
        let a = draw(&mut rng)?;
        let b = draw(&mut rng)?;
        let (kl, ee, de) = mc_dirichlet_suite(&a, &b, samples, seed ^ (i as u64) << 17)?;
        worst_kl = worst_kl.max(kl.sigmas_from(dirichlet_kl(&a, &b)?));
        worst_ee = worst_ee.max(ee.sigmas_from(expected_entropy(&a)));
        worst_de = worst_de.max(de.sigmas_from(differential_entropy(&a)));
    }
    Ok(vec![
        OracleCheck::new("dirichlet_kl_vs_mc", worst_kl, sigma_threshold),
        OracleCheck::new("expected_entropy_vs_mc", worst_ee, sigma_threshold),
        OracleCheck::new("differential_entropy_vs_mc", worst_de, sigma_threshold),
    ])
}

/// Finite-difference checks of every loss head (NLL, forward KL, reverse KL,
/// joint, and the adaptive reverse-KL attack loss) on `models` random small
/// networks. Reports the worst relative error per loss.
pub fn gradient_oracle_checks(
    models: usize,
    seed: u64,
    tolerance: f64,
) -> Result<Vec<OracleCheck>> {
    use crate::graph::finite_diff_check;
    use crate::graph::Mode;
    use crate::priornet::{
        target_alpha, Divergence, MlpSpec, Model, ModelKind, TargetConcentration, TargetDomain,
    };
    use crate::tensor::Tensor;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0_f64; 5];
    for i in 0..models {
        let din = rng.random_range(2..=4);
        let hidden = rng.random_range(3..=6);
        let k = rng.random_range(2..=4);
        let batch = rng.random_range(1..=3);
        let model = Model::build(
            ModelKind::PriorNet,
            MlpSpec::new(din, vec![hidden], k),
            seed ^ ((i as u64) << 9),
        )?;
        let mut rand_x = |rows: usize, rng: &mut ChaCha8Rng| -> Result<Tensor> {
            Tensor::matrix(
                rows,
                din,
                (0..rows * din)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
        };
        let x = rand_x(batch, &mut rng)?;
        let x_ood = rand_x(batch, &mut rng)?;
        let labels = Tensor::from_vec(
            (0..batch)
                .map(|_| rng.random_range(0..k) as f64)
                .collect(),
        );
        let tc = TargetConcentration::new(
            10f64.powf(rng.random_range(0.0..2.0)),
            1.0,
            k,
        )?;
        let make_targets = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
            let rows = (0..batch)
                .map(|_| target_alpha(rng.random_range(0..k), &tc, TargetDomain::In))
                .collect::<Result<Vec<_>>>()?;
            Model::target_rows(&rows)
        };
        let t_in = make_targets(&mut rng)?;
        let t_ood = make_targets(&mut rng)?;
        let gamma = Tensor::scalar(rng.random_range(0.1..5.0));
        let h = model.heads();

        let checks: [(usize, crate::graph::NodeId, Vec<(&str, Tensor)>); 5] = [
            (0, h.nll, vec![("x", x.clone()), ("labels", labels.clone())]),
            (
                1,
                model.kl_head(Divergence::Forward),
                vec![("x", x.clone()), ("target_alpha", t_in.clone())],
            ),
            (
                2,
                model.kl_head(Divergence::Reverse),
                vec![("x", x.clone()), ("target_alpha", t_in.clone())],
            ),
            (
                3,
                model.joint_head(Divergence::Reverse),
                vec![
                    ("x", x.clone()),
                    ("target_alpha", t_in.clone()),
                    ("x_ood", x_ood.clone()),
                    ("target_ood", t_ood.clone()),
                    ("gamma", gamma.clone()),
                ],
            ),
            // the adaptive attack loss: reverse KL toward a confident
            // in-domain target, differentiated with respect to the input
            (
                4,
                h.reverse_kl,
                vec![("x", x.clone()), ("target_alpha", make_targets(&mut rng)?)],
            ),
        ];
        for (slot, head, bindings) in checks {
            let err = finite_diff_check(model.graph(), &bindings, head, 1e-5, Mode::Eval)?;
            worst[slot] = worst[slot].max(err);
        }
    }
    let names = [
        "grad_nll_vs_fd",
        "grad_forward_kl_vs_fd",
        "grad_reverse_kl_vs_fd",
        "grad_joint_vs_fd",
        "grad_adaptive_attack_vs_fd",
    ];
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| OracleCheck::new(n, w, tolerance))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirichlet::{
        differential_entropy, dirichlet_kl, expected_entropy, mutual_information,
    };

    const N: usize = 200_000;

    fn dir(alpha: &[f64]) -> DirichletParams {
        DirichletParams::new(alpha.to_vec()).unwrap()
    }

    #[test]
    fn sampler_moments_match_dirichlet_mean() {
        // E[pi_k] = alpha_k / alpha0
        let p = dir(&[2.0, 5.0, 0.5]);
        let gammas = gammas_for(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pi = vec![0.0; 3];
        let mut acc = [Welford::default(), Welford::default(), Welford::default()];
        for _ in 0..N {
            sample_dirichlet(&gammas, &mut rng, &mut pi);
            for (w, &x) in acc.iter_mut().zip(&pi) {
                w.push(x);
            }
        }
        for (w, want) in acc.iter().zip(p.mean()) {
            let est = w.estimate();
            assert!(
                est.sigmas_from(want) < 4.0,
                "mean {} vs {want} ({} SE)",
                est.mean,
                est.sigmas_from(want)
            );
        }
    }

    #[test]
    fn kl_matches_mc_symmetric_pair() {
        let a = dir(&[2.0, 2.0]);
        let b = dir(&[1.0, 1.0]);
        let closed = dirichlet_kl(&a, &b).unwrap();
        let est = mc_dirichlet_kl(&a, &b, 1_000_000, 1).unwrap();
        assert!(
            est.sigmas_from(closed) < 3.0,
            "closed {closed} vs MC {} +- {}",
            est.mean,
            est.std_error
        );
    }

    #[test]
    fn kl_matches_mc_confident_target_case() {
        // beta_in = 1e2 one-hot target vs flat, K = 10
        let mut alpha = vec![1.0; 10];
        alpha[0] = 101.0;
        let a = dir(&alpha);
        let b = dir(&vec![1.0; 10]);
        let closed = dirichlet_kl(&a, &b).unwrap();
        let est = mc_dirichlet_kl(&a, &b, 1_000_000, 2).unwrap();
        assert!(
            est.sigmas_from(closed) < 3.0,
            "closed {closed} vs MC {} +- {}",
            est.mean,
            est.std_error
        );
    }

    #[test]
    fn expected_entropy_matches_mc_flat() {
        let a = dir(&[1.0, 1.0]);
        let closed = expected_entropy(&a);
        let est = mc_expected_entropy(&a, 1_000_000, 3).unwrap();
        assert!(est.sigmas_from(closed) < 3.0);

        // ln 2 - E[H] cross-check for the mutual information example
        let mi = mutual_information(&a);
        assert!((mi - (2f64.ln() - closed)).abs() < 1e-12);
    }

    #[test]
    fn differential_entropy_matches_mc() {
        let a = dir(&[2.0, 2.0]);
        let closed = differential_entropy(&a);
        let est = mc_differential_entropy(&a, 1_000_000, 4).unwrap();
        assert!(
            est.sigmas_from(closed) < 3.0,
            "closed {closed} vs MC {} +- {}",
            est.mean,
            est.std_error
        );
    }

    #[test]
    fn small_shape_sampling_stays_positive() {
        let a = dir(&[0.1, 0.1, 0.1]);
        let gammas = gammas_for(&a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pi = vec![0.0; 3];
        for _ in 0..50_000 {
            sample_dirichlet(&gammas, &mut rng, &mut pi);
            assert!(pi.iter().all(|&x| x > 0.0));
            assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
