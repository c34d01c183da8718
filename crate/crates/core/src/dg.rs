//! Receive discriminant gain, its diagonal form and lower bound, the
//! smoothed surrogate, and the breathing-depth optimizers.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::gmm::{condition_number, DgCurve, GmmModel, LabelPair, MAX_CONDITION};
use crate::phy::{compress, CompressionMatrix};

/// Channel and normalization quantities the surrogates depend on.
///
/// `sir` may be infinite to model an interference-free channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateParams {
    pub active_count: usize,
    pub sir: f64,
    pub norm_var: f64,
    pub min_eigenvalue: f64,
    pub total_dim: usize,
}

impl SurrogateParams {
    pub fn new(active_count: usize, sir: f64, norm_var: f64, min_eigenvalue: f64, total_dim: usize) -> Result<Self> {
        if active_count == 0 || total_dim == 0 {
            return Err(Error::param("active count and dimension must be positive"));
        }
        if !(sir > 0.0) || !(norm_var > 0.0) || !norm_var.is_finite() {
            return Err(Error::param("SIR and normalization variance must be positive"));
        }
        if !(min_eigenvalue > 0.0) || !min_eigenvalue.is_finite() {
            return Err(Error::param("minimum eigenvalue must be positive"));
        }
        Ok(SurrogateParams {
            active_count,
            sir,
            norm_var,
            min_eigenvalue,
            total_dim,
        })
    }

    /// `σ²_nor / (|K| γ)`.
    pub fn sigma_hat_sq(&self) -> f64 {
        self.norm_var / (self.active_count as f64 * self.sir)
    }

    /// `σ²_nor / (D |K| λ_min γ)`.
    pub fn sigma_tilde_sq(&self) -> f64 {
        self.sigma_hat_sq() / (self.total_dim as f64 * self.min_eigenvalue)
    }

    /// Per-dimension interference variance of the despread feature at gain `g`.
    pub fn residual_variance(&self, gain: f64) -> f64 {
        self.sigma_hat_sq() / (gain * self.active_count as f64)
    }
}

/// Which rule produced a depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthMethod {
    ClosedForm,
    BruteForce,
    Fixed,
    Full,
    Random,
    /// Search over tabulated generic-classifier curves.
    Tabulated,
}

impl DepthMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DepthMethod::ClosedForm => "closed_form",
            DepthMethod::BruteForce => "brute_force",
            DepthMethod::Fixed => "fixed",
            DepthMethod::Full => "full",
            DepthMethod::Random => "random",
            DepthMethod::Tabulated => "tabulated",
        }
    }
}

/// A chosen `(S, G)` and the score that justified it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BreathingDecision {
    pub depth: usize,
    pub gain: usize,
    pub surrogate_value: f64,
    pub method: DepthMethod,
}

impl BreathingDecision {
    /// `(S, ⌊D/S⌋)`.
    pub fn with_full_band(depth: usize, total_dim: usize, surrogate_value: f64, method: DepthMethod) -> Self {
        BreathingDecision {
            depth,
            gain: total_dim / depth,
            surrogate_value,
            method,
        }
    }
}

/// `Ĉ = (1/|K|) PᵀCP + σ²_nor/(G|K|²γ) I`.
pub fn receive_covariance(
    p: &CompressionMatrix,
    model: &GmmModel,
    params: &SurrogateParams,
    gain: usize,
) -> Result<DMatrix<f64>> {
    if gain == 0 {
        return Err(Error::param("gain must be positive"));
    }
    if p.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: p.dim(),
        });
    }
    let k = params.active_count as f64;
    let s = p.depth();
    let mut c = p.basis().transpose() * model.covariance() * p.basis() / k;
    let noise = params.residual_variance(gain as f64);
    for i in 0..s {
        c[(i, i)] += noise;
    }
    // Symmetrize away rounding asymmetry.
    Ok((&c + c.transpose()) * 0.5)
}

/// Receive DG `Δᵀ P Ĉ⁻¹ Pᵀ Δ` for any compression matrix.
pub fn receive_dg_general(
    p: &CompressionMatrix,
    model: &GmmModel,
    pair: LabelPair,
    params: &SurrogateParams,
    gain: usize,
) -> Result<f64> {
    let c = receive_covariance(p, model, params, gain)?;
    let cond = condition_number(&c);
    if !(cond <= MAX_CONDITION) {
        return Err(Error::SingularCovariance(cond));
    }
    let delta = model.centroid(pair.first)? - model.centroid(pair.second)?;
    let v = compress(&delta, p)?;
    let chol = Cholesky::new(c).ok_or(Error::SingularCovariance(f64::INFINITY))?;
    let w = chol.solve(&v);
    Ok(v.dot(&w))
}

fn check_depth(curve: &DgCurve, depth: usize) -> Result<()> {
    if depth == 0 || depth > curve.dim() {
        return Err(Error::param(format!("depth {depth} not in 1..={}", curve.dim())));
    }
    Ok(())
}

/// `|K| Σ_{d≤S} W_d / (σ̂²/(Gλ_d) + 1)`.
pub fn receive_dg_diagonal(curve: &DgCurve, depth: usize, gain: usize, params: &SurrogateParams) -> Result<f64> {
    check_depth(curve, depth)?;
    if gain == 0 {
        return Err(Error::param("gain must be positive"));
    }
    Ok(diagonal_sum(curve, depth, gain as f64, params))
}

fn diagonal_sum(curve: &DgCurve, depth: usize, gain: f64, params: &SurrogateParams) -> f64 {
    let sh = params.sigma_hat_sq();
    let sum: f64 = curve.gains()[..depth]
        .iter()
        .zip(&curve.eigenvalues()[..depth])
        .map(|(w, l)| w / (sh / (gain * l) + 1.0))
        .sum();
    params.active_count as f64 * sum
}

/// Splits the increment `Ĝ(S+1,G_{S+1}) − Ĝ(S,G_S)` into the gain from
/// one more dimension and the loss from the shorter spreading code.
pub fn incremental_dg_decomposition(curve: &DgCurve, depth: usize, params: &SurrogateParams) -> Result<(f64, f64)> {
    let d = curve.dim();
    if depth == 0 || depth >= d {
        return Err(Error::param(format!("depth {depth} not in 1..{d}")));
    }
    let g_s = d / depth;
    let g_next = d / (depth + 1);
    let upper = receive_dg_diagonal(curve, depth + 1, g_next, params)?;
    let mid = receive_dg_diagonal(curve, depth, g_next, params)?;
    let lower = receive_dg_diagonal(curve, depth, g_s, params)?;
    Ok((upper - mid, mid - lower))
}

/// `|K| (Σ_{d≤S} W_d) / (σ̂²/(Gλ_min) + 1)`.
pub fn phi_lower_bound(curve: &DgCurve, depth: usize, gain: usize, params: &SurrogateParams) -> Result<f64> {
    check_depth(curve, depth)?;
    if gain == 0 {
        return Err(Error::param("gain must be positive"));
    }
    let sum: f64 = curve.gains()[..depth].iter().sum();
    let denom = params.sigma_hat_sq() / (gain as f64 * params.min_eigenvalue) + 1.0;
    Ok(params.active_count as f64 * sum / denom)
}

/// `φ̂` with the gain relaxed to the real value `D/S`; this is the
/// quantity `φ̃` approximates.
pub fn phi_lower_bound_relaxed(curve: &DgCurve, depth: usize, params: &SurrogateParams) -> Result<f64> {
    check_depth(curve, depth)?;
    let gain = curve.dim() as f64 / depth as f64;
    let sum: f64 = curve.gains()[..depth].iter().sum();
    let denom = params.sigma_hat_sq() / (gain * params.min_eigenvalue) + 1.0;
    Ok(params.active_count as f64 * sum / denom)
}

/// `W_d` for 1-based `d`, with `W_{D+1} = W_D`.
fn gain_at(w: &[f64], d: usize) -> f64 {
    w[(d - 1).min(w.len() - 1)]
}

/// Piece containing `t` and the offset within it.
fn piece(w: &[f64], t: f64) -> (usize, f64) {
    let d = ((t.floor() as usize) + 1).min(w.len());
    (d, t - (d - 1) as f64)
}

fn check_range(w: &[f64], t: f64, lo: f64) -> Result<()> {
    if w.is_empty() {
        return Err(Error::param("empty gain staircase"));
    }
    if !(t >= lo && t <= w.len() as f64) {
        return Err(Error::Domain(format!("{t} outside [{lo}, {}]", w.len())));
    }
    Ok(())
}

/// Cosine interpolation of the gain staircase on `[0, D]`.
pub fn g(t: f64, curve: &DgCurve) -> Result<f64> {
    check_range(curve.gains(), t, 0.0)?;
    Ok(g_unchecked(t, curve.gains()))
}

fn g_unchecked(t: f64, w: &[f64]) -> f64 {
    let (d, u) = piece(w, t);
    let (a, b) = (gain_at(w, d), gain_at(w, d + 1));
    0.5 * (a - b) * (PI * u).cos() + 0.5 * (a + b)
}

fn g_prime_unchecked(t: f64, w: &[f64]) -> f64 {
    let (d, u) = piece(w, t);
    let (a, b) = (gain_at(w, d), gain_at(w, d + 1));
    -0.5 * (a - b) * PI * (PI * u).sin()
}

/// Derivative of `g` (exposed for smoothness checks).
pub fn g_prime(t: f64, curve: &DgCurve) -> Result<f64> {
    check_range(curve.gains(), t, 0.0)?;
    Ok(g_prime_unchecked(t, curve.gains()))
}

/// `ψ(S) = ∫₀^S g(t) dt`, integrated piece by piece in closed form.
pub fn psi(s: f64, curve: &DgCurve) -> Result<f64> {
    check_range(curve.gains(), s, 0.0)?;
    Ok(psi_unchecked(s, curve.gains()))
}

fn psi_unchecked(s: f64, w: &[f64]) -> f64 {
    let (d, u) = piece(w, s);
    let mut total = 0.0;
    for j in 1..d {
        total += 0.5 * (gain_at(w, j) + gain_at(w, j + 1));
    }
    let (a, b) = (gain_at(w, d), gain_at(w, d + 1));
    total + 0.5 * (a - b) * (PI * u).sin() / PI + 0.5 * (a + b) * u
}

/// `φ̃(S) = |K| ψ(S) / (σ̃² S + 1)` on `[1, D]`.
pub fn phi_tilde(s: f64, curve: &DgCurve, params: &SurrogateParams) -> Result<f64> {
    phi_tilde_gains(s, curve.gains(), params)
}

/// `φ̃` for a staircase given in any order, such as the gains of randomly
/// selected dimensions in selection order.
pub fn phi_tilde_gains(s: f64, gains: &[f64], params: &SurrogateParams) -> Result<f64> {
    check_range(gains, s, 1.0)?;
    Ok(phi_tilde_unchecked(s, gains, params))
}

fn phi_tilde_unchecked(s: f64, w: &[f64], params: &SurrogateParams) -> f64 {
    params.active_count as f64 * psi_unchecked(s, w) / (params.sigma_tilde_sq() * s + 1.0)
}

/// `ζ(x) = ψ'(x)(σ̃²x + 1) − σ̃²ψ(x)`; its sign is the sign of `φ̃'`.
pub fn zeta(x: f64, curve: &DgCurve, params: &SurrogateParams) -> Result<f64> {
    check_range(curve.gains(), x, 0.0)?;
    Ok(zeta_unchecked(x, curve.gains(), params))
}

fn zeta_unchecked(x: f64, w: &[f64], params: &SurrogateParams) -> f64 {
    let st = params.sigma_tilde_sq();
    g_unchecked(x, w) * (st * x + 1.0) - st * psi_unchecked(x, w)
}

/// Maximizer of `φ̃` over the integers `1..=D`.
///
/// Bisects for the root of `ζ` when it changes sign on `[1, D]` and
/// rounds to the better neighbouring integer; otherwise picks the
/// better endpoint.
pub fn optimal_breathing_depth(curve: &DgCurve, params: &SurrogateParams) -> BreathingDecision {
    let dim = curve.dim();
    let df = dim as f64;
    let w = curve.gains();
    let value = |s: usize| phi_tilde_unchecked(s as f64, w, params);
    let decide = |s: usize| BreathingDecision::with_full_band(s, dim, value(s), DepthMethod::ClosedForm);

    let z1 = zeta_unchecked(1.0, w, params);
    let zd = zeta_unchecked(df, w, params);
    let flat_tol = 1e-12 * (1.0 + curve.gains().first().copied().unwrap_or(0.0));
    if z1.abs() <= flat_tol && zd.abs() <= flat_tol {
        return decide(dim);
    }
    if z1 * zd < 0.0 {
        let (mut lo, mut hi) = (1.0, df);
        let tol = 1e-9 * z1.abs();
        let mut root = 0.5 * (lo + hi);
        for _ in 0..200 {
            root = 0.5 * (lo + hi);
            let z = zeta_unchecked(root, w, params);
            if z.abs() <= tol || hi - lo <= 1e-6 {
                break;
            }
            if z > 0.0 {
                lo = root;
            } else {
                hi = root;
            }
        }
        let below = (root.floor() as usize).clamp(1, dim);
        let above = (root.ceil() as usize).clamp(1, dim);
        return if value(below) >= value(above) {
            decide(below)
        } else {
            decide(above)
        };
    }
    if value(1) > value(dim) {
        decide(1)
    } else {
        decide(dim)
    }
}

/// Exhaustive search over depths with `G = ⌊D/S⌋` (or over every
/// `S·G ≤ D` when `full_grid`); ties go to the smallest `S`, then the
/// largest `G`.
pub fn brute_force_depth<F: FnMut(usize, usize) -> f64>(
    mut scorer: F,
    dim: usize,
    full_grid: bool,
) -> Result<BreathingDecision> {
    if dim == 0 {
        return Err(Error::param("dimension must be positive"));
    }
    let mut best: Option<BreathingDecision> = None;
    for s in 1..=dim {
        let gains: Vec<usize> = if full_grid {
            (1..=dim / s).rev().collect()
        } else {
            vec![dim / s]
        };
        for gain in gains {
            let v = scorer(s, gain);
            if best.map_or(true, |b| v > b.surrogate_value) {
                best = Some(BreathingDecision {
                    depth: s,
                    gain,
                    surrogate_value: v,
                    method: DepthMethod::BruteForce,
                });
            }
        }
    }
    Ok(best.expect("non-empty grid"))
}
