//! Invariant suite behind the `validate` subcommand, plus the random
//! instance generators it shares with the test suites.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dg::{
    g_prime, incremental_dg_decomposition, optimal_breathing_depth, phi_tilde, psi, receive_dg_diagonal,
    receive_dg_general, zeta, SurrogateParams,
};
use crate::error::Result;
use crate::gmm::{build_default_gmm, DgCurve, GmmModel};
use crate::phy::{db_to_linear, fit_normalization, CompressionMatrix};
use crate::streams::{derive, SimRng};
use rand::SeedableRng;

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Check { name, passed, detail }
    }

    fn from_result(name: &'static str, r: Result<Check>) -> Self {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }
}

fn rng(seed: u64, tag: u64) -> SimRng {
    SimRng::seed_from_u64(derive(seed, &[tag]))
}

/// Haar-ish orthonormal matrix from the QR factor of a Gaussian matrix.
pub fn random_orthonormal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let (q, r) = (qr.q(), qr.r());
    // Fix column signs so the distribution does not depend on QR conventions.
    let mut q = q;
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Two-class model with a random non-diagonal SPD covariance whose
/// eigenvalues lie in `[0.2, 3]`.
pub fn random_spd_model<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<GmmModel> {
    let q = random_orthonormal(dim, rng);
    let lambda = DVector::from_fn(dim, |_, _| rng.gen_range(0.2..3.0));
    let cov = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
    let cov = (&cov + cov.transpose()) * 0.5;
    let mu = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    GmmModel::new(vec![mu.clone(), -mu], cov)
}

/// Curve with random separations and eigenvalues.
pub fn random_curve<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<DgCurve> {
    let sep = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let eig = (0..dim).map(|_| rng.gen_range(0.1..4.0)).collect();
    DgCurve::new(sep, eig)
}

/// Surrogate parameters over a wide range of SIR and active counts.
pub fn random_params<R: Rng + ?Sized>(curve: &DgCurve, rng: &mut R) -> Result<SurrogateParams> {
    SurrogateParams::new(
        rng.gen_range(1..=20),
        db_to_linear(rng.gen_range(-30.0..30.0)),
        rng.gen_range(0.2..5.0),
        curve.min_eigenvalue(),
        curve.dim(),
    )
}

/// Diagonal closed form against the general receive DG with eigenvector
/// compression, on random SPD models.
pub fn check_diagonal_equivalence(instances: usize, seed: u64) -> Check {
    const NAME: &str = "diagonal receive DG equals general form";
    Check::from_result(NAME, (|| {
        let mut rng = rng(seed, 1);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let d = rng.gen_range(2..=12);
            let model = random_spd_model(d, &mut rng)?;
            let pair = model.closest_pair()?;
            let curve = model.eigen_dg(pair)?;
            let params = random_params(&curve, &mut rng)?;
            let s = rng.gen_range(1..=d);
            let gain = rng.gen_range(1..=d);
            let p = CompressionMatrix::top_eigen(&model, &curve, s)?;
            let general = receive_dg_general(&p, &model, pair, &params, gain)?;
            let diag = receive_dg_diagonal(&curve, s, gain, &params)?;
            worst = worst.max((general - diag).abs() / general.abs().max(1e-300));
        }
        Ok(Check::new(NAME, worst <= 1e-8, format!("max relative error {worst:.3e}")))
    })())
}

/// More compressed dimensions never lose DG at a fixed gain, for random
/// nested full-rank compressions.
pub fn check_depth_monotonicity(instances: usize, seed: u64) -> Check {
    const NAME: &str = "receive DG nondecreasing in depth";
    Check::from_result(NAME, (|| {
        let mut rng = rng(seed, 2);
        let mut worst = f64::INFINITY;
        for _ in 0..instances {
            let d = rng.gen_range(2..=10);
            let model = random_spd_model(d, &mut rng)?;
            let pair = model.closest_pair()?;
            let curve = model.eigen_dg(pair)?;
            let params = random_params(&curve, &mut rng)?;
            let gain = rng.gen_range(1..=d);
            let basis = random_orthonormal(d, &mut rng);
            let mut prev = 0.0;
            for s in 1..=d {
                let p = CompressionMatrix::from_basis(basis.columns(0, s).into_owned())?;
                let v = receive_dg_general(&p, &model, pair, &params, gain)?;
                worst = worst.min(v - prev);
                prev = v;
            }
        }
        Ok(Check::new(NAME, worst >= -1e-9, format!("min slack {worst:.3e}")))
    })())
}

/// Longer spreading codes never lose DG at a fixed depth.
pub fn check_gain_monotonicity(instances: usize, seed: u64) -> Check {
    const NAME: &str = "receive DG nondecreasing in spreading gain";
    Check::from_result(NAME, (|| {
        let mut rng = rng(seed, 3);
        let mut worst = f64::INFINITY;
        for _ in 0..instances {
            let d = rng.gen_range(2..=30);
            let curve = random_curve(d, &mut rng)?;
            let params = random_params(&curve, &mut rng)?;
            let s = rng.gen_range(1..=d);
            for gain in 1..d {
                let a = receive_dg_diagonal(&curve, s, gain, &params)?;
                let b = receive_dg_diagonal(&curve, s, gain + 1, &params)?;
                worst = worst.min(b - a);
            }
        }
        Ok(Check::new(NAME, worst >= -1e-9, format!("min slack {worst:.3e}")))
    })())
}

/// The closed-form depth attains the integer maximum of the surrogate.
pub fn check_closed_form_optimality(instances: usize, seed: u64) -> Check {
    const NAME: &str = "closed-form depth maximizes surrogate";
    Check::from_result(NAME, (|| {
        let mut rng = rng(seed, 4);
        let mut misses = 0;
        for _ in 0..instances {
            let d = rng.gen_range(1..=60);
            let curve = random_curve(d, &mut rng)?;
            let params = random_params(&curve, &mut rng)?;
            let decision = optimal_breathing_depth(&curve, &params);
            let mut best = f64::NEG_INFINITY;
            for s in 1..=d {
                best = best.max(phi_tilde(s as f64, &curve, &params)?);
            }
            let got = phi_tilde(decision.depth as f64, &curve, &params)?;
            if got < best - 1e-12 * best.abs().max(1.0) {
                misses += 1;
            }
        }
        Ok(Check::new(NAME, misses == 0, format!("{misses} of {instances} not optimal")))
    })())
}

/// The two parts of each depth increment sum to the increment with the
/// expected signs.
pub fn check_increment_decomposition(instances: usize, seed: u64) -> Check {
    const NAME: &str = "incremental DG decomposition";
    Check::from_result(NAME, (|| {
        let mut rng = rng(seed, 5);
        let (mut err, mut comp_min, mut spread_max) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..instances {
            let d = rng.gen_range(2..=50);
            let curve = random_curve(d, &mut rng)?;
            let params = random_params(&curve, &mut rng)?;
            let s = rng.gen_range(1..d);
            let (c, sp) = incremental_dg_decomposition(&curve, s, &params)?;
            let total = receive_dg_diagonal(&curve, s + 1, d / (s + 1), &params)?
                - receive_dg_diagonal(&curve, s, d / s, &params)?;
            err = err.max((c + sp - total).abs());
            comp_min = comp_min.min(c);
            spread_max = spread_max.max(sp);
        }
        Ok(Check::new(
            NAME,
            err <= 1e-12 && comp_min >= 0.0 && spread_max <= 0.0,
            format!("sum error {err:.3e}, min compression {comp_min:.3e}, max spreading {spread_max:.3e}"),
        ))
    })())
}

/// `ζ` is nonincreasing on a fine grid for random curves.
pub fn check_zeta_monotone(instances: usize, seed: u64) -> Check {
    const NAME: &str = "zeta nonincreasing";
    Check::from_result(NAME, (|| {
        let mut rng = rng(seed, 6);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..instances {
            let d = rng.gen_range(2..=50);
            let curve = random_curve(d, &mut rng)?;
            let params = random_params(&curve, &mut rng)?;
            let mut prev = zeta(1.0, &curve, &params)?;
            for i in 1..1000 {
                let x = 1.0 + (d as f64 - 1.0) * i as f64 / 999.0;
                let z = zeta(x.min(d as f64), &curve, &params)?;
                worst = worst.max(z - prev);
                prev = z;
            }
        }
        Ok(Check::new(NAME, worst <= 1e-9, format!("max rise {worst:.3e}")))
    })())
}

/// Analytic `ψ'` against central differences of `ψ`.
pub fn check_psi_smoothness(instances: usize, seed: u64) -> Check {
    const NAME: &str = "psi derivative matches finite differences";
    Check::from_result(NAME, (|| {
        let mut rng = rng(seed, 7);
        let mut worst = 0.0f64;
        let h = 1e-5;
        for _ in 0..instances {
            let d = rng.gen_range(2..=50);
            let curve = random_curve(d, &mut rng)?;
            let t: f64 = rng.gen_range(h..d as f64 - h);
            let fd = (psi(t + h, &curve)? - psi(t - h, &curve)?) / (2.0 * h);
            // ψ' = g, and g' integrates back to g
            let g = crate::dg::g(t, &curve)?;
            let gp = g_prime(t, &curve)?;
            let fd2 = (crate::dg::g(t + h, &curve)? - crate::dg::g(t - h, &curve)?) / (2.0 * h);
            let scale = curve.gains()[0].max(1.0);
            worst = worst.max((fd - g).abs() / scale).max((fd2 - gp).abs() / scale);
        }
        Ok(Check::new(NAME, worst <= 1e-6, format!("max error {worst:.3e}")))
    })())
}

/// Integer surrogate values have a single local maximum.
pub fn check_unimodality(instances: usize, seed: u64) -> Check {
    const NAME: &str = "surrogate unimodal over integers";
    Check::from_result(NAME, (|| {
        let mut rng = rng(seed, 8);
        let mut bad = 0;
        for _ in 0..instances {
            let d = rng.gen_range(3..=60);
            let curve = random_curve(d, &mut rng)?;
            let params = random_params(&curve, &mut rng)?;
            let v: Vec<f64> = (1..=d).map(|s| phi_tilde(s as f64, &curve, &params)).collect::<Result<_>>()?;
            let tol = 1e-12 * v.iter().fold(1.0f64, |a, b| a.max(b.abs()));
            // Past the first strict fall the sequence must never rise again.
            let mut fell = false;
            for w in v.windows(2) {
                if w[1] < w[0] - tol {
                    fell = true;
                } else if fell && w[1] > w[0] + tol {
                    bad += 1;
                    break;
                }
            }
        }
        Ok(Check::new(NAME, bad == 0, format!("{bad} of {instances} multimodal")))
    })())
}

/// On the default model the closed-form depth is nondecreasing in SIR and
/// in the number of active sensors.
pub fn check_default_depth_trends() -> Check {
    const NAME: &str = "optimal depth grows with SIR and active sensors";
    Check::from_result(NAME, (|| {
        let model = build_default_gmm(50)?;
        let curve = model.eigen_dg(model.closest_pair()?)?;
        let stats = fit_normalization(&model, &CompressionMatrix::top_eigen(&model, &curve, 50)?)?;
        let depth = |k: usize, db: f64| -> Result<usize> {
            let p = SurrogateParams::new(k, db_to_linear(db), stats.variance(), model.min_eigenvalue(), 50)?;
            Ok(optimal_breathing_depth(&curve, &p).depth)
        };
        let by_sir: Vec<usize> = (-20..=20).map(|db| depth(10, db as f64)).collect::<Result<_>>()?;
        let by_k: Vec<usize> = (1..=20).map(|k| depth(k, -3.0)).collect::<Result<_>>()?;
        let ok = by_sir.windows(2).all(|w| w[1] >= w[0]) && by_k.windows(2).all(|w| w[1] >= w[0]);
        Ok(Check::new(
            NAME,
            ok,
            format!(
                "S* from {} to {} over SIR, {} to {} over |K|",
                by_sir[0],
                by_sir[by_sir.len() - 1],
                by_k[0],
                by_k[by_k.len() - 1]
            ),
        ))
    })())
}

/// Runs every check with `instances` random cases each.
pub fn run_suite(instances: usize, seed: u64) -> Vec<Check> {
    vec![
        check_diagonal_equivalence(instances, seed),
        check_depth_monotonicity(instances, seed),
        check_gain_monotonicity(instances, seed),
        check_closed_form_optimality(instances * 2, seed),
        check_increment_decomposition(instances * 10, seed),
        check_zeta_monotone(instances / 5 + 1, seed),
        check_psi_smoothness(instances, seed),
        check_unimodality(instances, seed),
        check_default_depth_trends(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_generator() {
        let mut r = rng(0, 0);
        let q = random_orthonormal(7, &mut r);
        assert!((q.transpose() * &q - DMatrix::identity(7, 7)).abs().max() < 1e-12);
    }

    #[test]
    fn suite_passes_small() {
        for c in run_suite(20, 11) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
