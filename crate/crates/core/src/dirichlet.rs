//! Closed-form Dirichlet quantities: KL divergence, entropy decomposition,
//! and the uncertainty measures used for attack/OOD detection.
//!
//! Every non-trivial closed form here has a Monte-Carlo counterpart in
//! [`crate::oracle`]; the two are held to agree within 3 standard errors.

use crate::error::{Error, Result};
use crate::special::{digamma_unchecked, ln_gamma_unchecked};

/// Concentration parameters of a Dirichlet distribution over K classes.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletParams {
    alpha: Vec<f64>,
    alpha0: f64,
}

impl DirichletParams {
    /// K >= 2 and every concentration strictly positive and finite.
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::Dimension(format!(
                "Dirichlet needs at least 2 classes, got {}",
                alpha.len()
            )));
        }
        if alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::Domain(
                "all Dirichlet concentrations must be finite and > 0".into(),
            ));
        }
        let alpha0 = alpha.iter().sum();
        Ok(Self { alpha, alpha0 })
    }

    /// Build with an externally supplied precision, which must agree with
    /// sum(alpha) to 1e-12 relative.
    pub fn with_precision(alpha: Vec<f64>, alpha0: f64) -> Result<Self> {
        let p = Self::new(alpha)?;
        if (p.alpha0 - alpha0).abs() > 1e-12 * p.alpha0.abs() {
            return Err(Error::Domain(format!(
                "alpha0 {alpha0} inconsistent with sum(alpha) = {}",
                p.alpha0
            )));
        }
        Ok(p)
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    /// Expected class probabilities alpha_k / alpha0.
    pub fn mean(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| a / self.alpha0).collect()
    }
}

fn check_dims(a: &DirichletParams, b: &DirichletParams) -> Result<()> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::Dimension(format!(
            "Dirichlet dimension mismatch: {} vs {}",
            a.num_classes(),
            b.num_classes()
        )));
    }
    Ok(())
}

/// KL(Dir(a) || Dir(b)) in closed form:
/// lnG(a0) - sum lnG(ak) - lnG(b0) + sum lnG(bk) + sum (ak-bk)(psi(ak)-psi(a0)).
/// Non-negative; exactly 0 when a == b.
pub fn dirichlet_kl(a: &DirichletParams, b: &DirichletParams) -> Result<f64> {
    check_dims(a, b)?;
    let mut kl = ln_gamma_unchecked(a.alpha0) - ln_gamma_unchecked(b.alpha0);
    let dg_a0 = digamma_unchecked(a.alpha0);
    for (&ak, &bk) in a.alpha.iter().zip(&b.alpha) {
        kl += ln_gamma_unchecked(bk) - ln_gamma_unchecked(ak);
        kl += (ak - bk) * (digamma_unchecked(ak) - dg_a0);
    }
    Ok(kl.max(0.0))
}

/// Entropy of the expected categorical, H[E[pi]]; lies in [0, ln K].
pub fn predictive_entropy(p: &DirichletParams) -> f64 {
    -p.alpha
        .iter()
        .map(|a| {
            let q = a / p.alpha0;
            if q > 0.0 {
                q * q.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Expected entropy of the categorical, E[H[pi]]:
/// -sum (ak/a0)(psi(ak+1) - psi(a0+1)); lies in [0, ln K].
pub fn expected_entropy(p: &DirichletParams) -> f64 {
    let dg0 = digamma_unchecked(p.alpha0 + 1.0);
    -p.alpha
        .iter()
        .map(|&a| (a / p.alpha0) * (digamma_unchecked(a + 1.0) - dg0))
        .sum::<f64>()
}

/// Knowledge uncertainty: predictive entropy minus expected entropy.
/// Computed literally as the difference so the decomposition identity is
/// exact; non-negative up to rounding.
pub fn mutual_information(p: &DirichletParams) -> f64 {
    predictive_entropy(p) - expected_entropy(p)
}

/// Differential entropy of the Dirichlet density:
/// sum lnG(ak) - lnG(a0) - sum (ak-1)(psi(ak)-psi(a0)).
pub fn differential_entropy(p: &DirichletParams) -> f64 {
    let dg0 = digamma_unchecked(p.alpha0);
    let mut h = -ln_gamma_unchecked(p.alpha0);
    for &a in &p.alpha {
        h += ln_gamma_unchecked(a);
        h -= (a - 1.0) * (digamma_unchecked(a) - dg0);
    }
    h
}

/// Largest expected class probability, max_k alpha_k / alpha0.
pub fn max_prob(p: &DirichletParams) -> f64 {
    p.alpha.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a)) / p.alpha0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dir(alpha: &[f64]) -> DirichletParams {
        DirichletParams::new(alpha.to_vec()).unwrap()
    }

    #[test]
    fn invariants_enforced() {
        assert!(DirichletParams::new(vec![1.0]).is_err());
        assert!(DirichletParams::new(vec![1.0, 0.0]).is_err());
        assert!(DirichletParams::new(vec![1.0, -2.0]).is_err());
        assert!(DirichletParams::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(DirichletParams::with_precision(vec![1.0, 2.0], 3.0).is_ok());
        assert!(DirichletParams::with_precision(vec![1.0, 2.0], 3.1).is_err());
    }

    #[test]
    fn kl_self_is_exactly_zero() {
        for alpha in [vec![1.0, 1.0], vec![2.5, 0.3, 7.0], vec![101.0, 1.0, 1.0]] {
            let p = dir(&alpha);
            assert_eq!(dirichlet_kl(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn kl_dimension_mismatch() {
        let a = dir(&[1.0, 2.0]);
        let b = dir(&[1.0, 2.0, 3.0]);
        assert!(dirichlet_kl(&a, &b).is_err());
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let k = rng.random_range(2..=8);
            let draw = |rng: &mut ChaCha8Rng| {
                dir(&(0..k)
                    .map(|_| 10f64.powf(rng.random_range(-1.0..2.0)))
                    .collect::<Vec<_>>())
            };
            let a = draw(&mut rng);
            let b = draw(&mut rng);
            let kl = dirichlet_kl(&a, &b).unwrap();
            assert!(kl >= 0.0);
            if a != b {
                assert!(kl > 0.0, "distinct pair with zero KL: {a:?} {b:?}");
            }
        }
    }

    #[test]
    fn predictive_entropy_values() {
        let flat4 = dir(&[1.0, 1.0, 1.0, 1.0]);
        assert!((predictive_entropy(&flat4) - 4f64.ln()).abs() < 1e-14);

        let sharp = dir(&[1e6, 1.0]);
        assert!(predictive_entropy(&sharp) < 2e-5);

        let p = dir(&[2.0, 1.0, 1.0]);
        let want = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((predictive_entropy(&p) - want).abs() < 1e-14);
    }

    #[test]
    fn expected_entropy_concentrated_uniform() {
        // Dir([1e6, 1e6]) concentrates on pi = (0.5, 0.5)
        let p = dir(&[1e6, 1e6]);
        assert!((expected_entropy(&p) - 2f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn mutual_information_properties() {
        let sharp = dir(&[1e6, 1e6]);
        assert!(mutual_information(&sharp) < 1e-5);
        assert!(mutual_information(&sharp) >= -1e-12);

        // decomposition identity is exact by construction
        let p = dir(&[0.3, 4.0, 11.0]);
        let mi = mutual_information(&p);
        assert_eq!(mi, predictive_entropy(&p) - expected_entropy(&p));
    }

    #[test]
    fn jensen_inequality_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let k = rng.random_range(2..=10);
            let p = dir(&(0..k)
                .map(|_| 10f64.powf(rng.random_range(-1.0..2.0)))
                .collect::<Vec<_>>());
            assert!(expected_entropy(&p) <= predictive_entropy(&p) + 1e-12);
            assert!(expected_entropy(&p) >= 0.0 - 1e-12);
            assert!(predictive_entropy(&p) <= (k as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn differential_entropy_flat_is_zero() {
        // uniform density on the 1-simplex
        let p = dir(&[1.0, 1.0]);
        assert!(differential_entropy(&p).abs() < 1e-14);
    }

    #[test]
    fn differential_entropy_maximal_at_flat() {
        // h decreases when moving away from the flat Dirichlet
        let flat = dir(&[1.0, 1.0, 1.0]);
        for other in [dir(&[2.0, 2.0, 2.0]), dir(&[0.5, 0.5, 0.5]), dir(&[5.0, 1.0, 1.0])] {
            assert!(differential_entropy(&other) < differential_entropy(&flat));
        }
    }

    #[test]
    fn max_prob_values() {
        assert_eq!(max_prob(&dir(&[1.0, 1.0, 1.0, 1.0])), 0.25);
        let mut alpha = vec![1.0; 10];
        alpha[0] = 101.0;
        assert!((max_prob(&dir(&alpha)) - 101.0 / 110.0).abs() < 1e-15);
    }

    #[test]
    fn measures_permutation_invariant() {
        let a = dir(&[0.7, 3.0, 12.0, 1.1]);
        let b = dir(&[12.0, 1.1, 0.7, 3.0]);
        assert!((predictive_entropy(&a) - predictive_entropy(&b)).abs() < 1e-12);
        assert!((expected_entropy(&a) - expected_entropy(&b)).abs() < 1e-12);
        assert!((mutual_information(&a) - mutual_information(&b)).abs() < 1e-12);
        assert!((differential_entropy(&a) - differential_entropy(&b)).abs() < 1e-12);
        assert!((max_prob(&a) - max_prob(&b)).abs() < 1e-15);
    }
}
