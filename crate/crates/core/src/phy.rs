//! Transceiver chain: compression, normalization, truncated channel
//! inversion, PN spreading, over-the-air superposition, despreading,
//! denormalization and reconstruction.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gmm::{DgCurve, GmmModel};
use crate::special::exp_integral_e1;
use crate::streams::{stream_rng, sub_stream_rng, Stream};

/// How a compression matrix was built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompressionKind {
    /// Top eigenvectors ordered by discriminant gain.
    Eigen,
    /// Random coordinate selection (benchmark).
    Selection,
    /// Any matrix with orthonormal columns.
    General,
}

/// A `D×S` projection with orthonormal columns.
#[derive(Clone, Debug)]
pub struct CompressionMatrix {
    basis: DMatrix<f64>,
    selected_dims: Vec<usize>,
    coordinates: Option<Vec<usize>>,
    kind: CompressionKind,
}

impl CompressionMatrix {
    /// Keeps the eigenvectors of the `depth` largest gains.
    pub fn top_eigen(model: &GmmModel, curve: &DgCurve, depth: usize) -> Result<Self> {
        let d = model.dim();
        if curve.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: curve.dim(),
            });
        }
        check_depth(depth, d)?;
        let selected: Vec<usize> = curve.order()[..depth].to_vec();
        let basis = DMatrix::from_fn(d, depth, |i, j| model.eigenbasis()[(i, selected[j])]);
        let coordinates = model.is_diagonal().then(|| selected.clone());
        Ok(CompressionMatrix {
            basis,
            selected_dims: selected,
            coordinates,
            kind: CompressionKind::Eigen,
        })
    }

    /// Keeps the eigenvectors with the given eigen indices, in that order.
    /// Used for random dimension pruning; on a diagonal model this is a
    /// coordinate selection.
    pub fn eigen_subset(model: &GmmModel, dims: &[usize]) -> Result<Self> {
        let d = model.dim();
        if model.is_diagonal() {
            return Self::selection(d, dims);
        }
        check_depth(dims.len(), d)?;
        let mut seen = vec![false; d];
        for &i in dims {
            if i >= d || seen[i] {
                return Err(Error::param(format!("invalid or repeated eigen index {i}")));
            }
            seen[i] = true;
        }
        let basis = DMatrix::from_fn(d, dims.len(), |i, j| model.eigenbasis()[(i, dims[j])]);
        Ok(CompressionMatrix {
            basis,
            selected_dims: dims.to_vec(),
            coordinates: None,
            kind: CompressionKind::Selection,
        })
    }

    /// Selects the coordinates `dims` (in that order) of a `dim`-vector.
    pub fn selection(dim: usize, dims: &[usize]) -> Result<Self> {
        check_depth(dims.len(), dim)?;
        let mut seen = vec![false; dim];
        for &i in dims {
            if i >= dim || seen[i] {
                return Err(Error::param(format!("invalid or repeated coordinate {i}")));
            }
            seen[i] = true;
        }
        let basis = DMatrix::from_fn(dim, dims.len(), |i, j| if dims[j] == i { 1.0 } else { 0.0 });
        Ok(CompressionMatrix {
            basis,
            selected_dims: dims.to_vec(),
            coordinates: Some(dims.to_vec()),
            kind: CompressionKind::Selection,
        })
    }

    /// Wraps an arbitrary matrix with orthonormal columns.
    pub fn from_basis(basis: DMatrix<f64>) -> Result<Self> {
        check_depth(basis.ncols(), basis.nrows())?;
        let gram = basis.transpose() * &basis;
        let err = (gram - DMatrix::identity(basis.ncols(), basis.ncols())).amax();
        if err > 1e-10 {
            return Err(Error::param(format!("columns not orthonormal (error {err:.2e})")));
        }
        Ok(CompressionMatrix {
            selected_dims: (0..basis.ncols()).collect(),
            basis,
            coordinates: None,
            kind: CompressionKind::General,
        })
    }

    pub fn depth(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn selected_dims(&self) -> &[usize] {
        &self.selected_dims
    }

    pub fn kind(&self) -> CompressionKind {
        self.kind
    }
}

fn check_depth(depth: usize, dim: usize) -> Result<()> {
    if depth == 0 || depth > dim {
        return Err(Error::param(format!("depth {depth} not in 1..={dim}")));
    }
    Ok(())
}

/// `Pᵀx`.
pub fn compress(x: &DVector<f64>, p: &CompressionMatrix) -> Result<DVector<f64>> {
    if x.len() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            actual: x.len(),
        });
    }
    Ok(match &p.coordinates {
        Some(c) => DVector::from_iterator(c.len(), c.iter().map(|&i| x[i])),
        None => p.basis.tr_mul(x),
    })
}

/// `P·y`.
pub fn reconstruct(y: &DVector<f64>, p: &CompressionMatrix) -> Result<DVector<f64>> {
    if y.len() != p.depth() {
        return Err(Error::DimensionMismatch {
            expected: p.depth(),
            actual: y.len(),
        });
    }
    Ok(&p.basis * y)
}

/// Scalar mean and standard deviation applied to every compressed element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationStats {
    pub mean: f64,
    pub std: f64,
}

impl NormalizationStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !mean.is_finite() || !std.is_finite() || std <= 1e-8 * mean.abs().max(1.0) {
            return Err(Error::DegenerateNormalization(std));
        }
        Ok(NormalizationStats { mean, std })
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }
}

/// Analytic mixture statistics of `Pᵀx` under a uniform class prior.
///
/// The variance is the per-element second moment around `μ_nor`,
/// averaged over dimensions, so `(1/S)E‖x̂_nor‖² = 1` exactly.
pub fn fit_normalization(model: &GmmModel, p: &CompressionMatrix) -> Result<NormalizationStats> {
    if p.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: p.dim(),
        });
    }
    let s = p.depth() as f64;
    let l = model.num_classes() as f64;
    let projected: Vec<DVector<f64>> = model
        .centroids()
        .iter()
        .map(|m| compress(m, p))
        .collect::<Result<_>>()?;
    let mean = projected.iter().map(|m| m.sum()).sum::<f64>() / (l * s);
    let within: f64 = match &p.coordinates {
        Some(c) => c.iter().map(|&i| model.covariance()[(i, i)]).sum(),
        None => (p.basis.transpose() * model.covariance() * &p.basis).trace(),
    };
    let between: f64 = projected
        .iter()
        .map(|m| m.iter().map(|v| (v - mean).powi(2)).sum::<f64>())
        .sum::<f64>()
        / l;
    NormalizationStats::new(mean, ((within + between) / s).sqrt())
}

/// Empirical statistics of `Pᵀx` over a calibration batch.
pub fn fit_normalization_empirical(
    samples: &[DVector<f64>],
    p: &CompressionMatrix,
) -> Result<NormalizationStats> {
    if samples.is_empty() {
        return Err(Error::param("empty calibration batch"));
    }
    let compressed: Vec<DVector<f64>> = samples.iter().map(|x| compress(x, p)).collect::<Result<_>>()?;
    let count = (compressed.len() * p.depth()) as f64;
    let mean = compressed.iter().map(|v| v.sum()).sum::<f64>() / count;
    let var = compressed
        .iter()
        .map(|v| v.iter().map(|x| (x - mean).powi(2)).sum::<f64>())
        .sum::<f64>()
        / count;
    NormalizationStats::new(mean, var.sqrt())
}

pub fn normalize(x: &DVector<f64>, stats: &NormalizationStats) -> DVector<f64> {
    x.map(|v| (v - stats.mean) / stats.std)
}

pub fn denormalize(x: &DVector<f64>, stats: &NormalizationStats) -> DVector<f64> {
    x.map(|v| v * stats.std + stats.mean)
}

/// `exp(−h_th)`.
pub fn activation_probability(threshold: f64) -> f64 {
    (-threshold).exp()
}

/// Solves `P₀·E₁(h) = P_max` for `h` by bisection on `[1e-8, 50]`.
pub fn threshold_for_max_power(alignment: f64, max_power: f64) -> Result<f64> {
    if !(alignment > 0.0) || !(max_power > 0.0) {
        return Err(Error::param("powers must be positive"));
    }
    let target = max_power / alignment;
    let (mut lo, mut hi) = (1e-8_f64, 50.0_f64);
    if exp_integral_e1(lo)? <= target {
        return Ok(lo);
    }
    if exp_integral_e1(hi)? > target {
        return Err(Error::Domain(format!(
            "P_max/P0 = {target:.3e} needs a threshold above 50"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if exp_integral_e1(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * hi {
            break;
        }
    }
    Ok(hi)
}

/// Transmit power policy and interference level.
///
/// `interference_power` may be zero (interference-free channel, infinite
/// SIR); every other quantity is positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerPolicy {
    alignment: f64,
    interference_power: f64,
    threshold: f64,
    max_power: f64,
}

impl PowerPolicy {
    pub fn new(alignment: f64, interference_power: f64, threshold: f64, max_power: f64) -> Result<Self> {
        if !(alignment > 0.0) || !alignment.is_finite() {
            return Err(Error::param("alignment factor P0 must be positive"));
        }
        if !(interference_power >= 0.0) || !interference_power.is_finite() {
            return Err(Error::param("interference power must be nonnegative"));
        }
        if !(threshold >= 0.0) || !threshold.is_finite() {
            return Err(Error::param("threshold must be nonnegative"));
        }
        if !(max_power > 0.0) {
            return Err(Error::param("max power must be positive"));
        }
        let needed = if threshold == 0.0 {
            f64::INFINITY
        } else {
            alignment * exp_integral_e1(threshold)?
        };
        if needed > max_power * (1.0 + 1e-12) {
            return Err(Error::param(format!(
                "average power {needed:.4e} exceeds P_max {max_power:.4e}"
            )));
        }
        Ok(PowerPolicy {
            alignment,
            interference_power,
            threshold,
            max_power,
        })
    }

    /// Policy whose power budget is exactly the average power of the
    /// threshold (unbounded at `h_th = 0`).
    pub fn from_threshold(alignment: f64, interference_power: f64, threshold: f64) -> Result<Self> {
        let max_power = if threshold > 0.0 {
            alignment * exp_integral_e1(threshold)?
        } else {
            f64::INFINITY
        };
        Self::new(alignment, interference_power, threshold, max_power)
    }

    /// Policy with the threshold chosen to meet `max_power`.
    pub fn from_max_power(alignment: f64, interference_power: f64, max_power: f64) -> Result<Self> {
        let threshold = threshold_for_max_power(alignment, max_power)?;
        let max_power = max_power.max(alignment * exp_integral_e1(threshold)?);
        Self::new(alignment, interference_power, threshold, max_power)
    }

    /// Policy at a given SIR in dB with `P_I = P₀ / 10^(dB/10)`.
    pub fn from_sir_db(alignment: f64, sir_db: f64, threshold: f64) -> Result<Self> {
        Self::from_threshold(alignment, alignment / db_to_linear(sir_db), threshold)
    }

    pub fn alignment(&self) -> f64 {
        self.alignment
    }

    pub fn interference_power(&self) -> f64 {
        self.interference_power
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn max_power(&self) -> f64 {
        self.max_power
    }

    /// `P₀/P_I` (infinite without interference).
    pub fn sir(&self) -> f64 {
        self.alignment / self.interference_power
    }

    pub fn activation_probability(&self) -> f64 {
        activation_probability(self.threshold)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Fades and activity of the sensors in one round.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRound {
    pub fades: Vec<Complex64>,
    pub active: Vec<usize>,
    pub round_seed: u64,
}

impl ChannelRound {
    /// Synthetic round with `count` sensors, all active with unit fades.
    pub fn all_active(count: usize) -> Self {
        ChannelRound {
            fades: vec![Complex64::new(1.0, 0.0); count],
            active: (0..count).collect(),
            round_seed: 0,
        }
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.active.binary_search(&k).is_ok()
    }

    /// Truncated-inversion precoder `√P₀ h*/|h|²`, zero when silent.
    pub fn precoder(&self, k: usize, policy: &PowerPolicy) -> Complex64 {
        if !self.is_active(k) {
            return Complex64::new(0.0, 0.0);
        }
        let h = self.fades[k];
        h.conj() * (policy.alignment().sqrt() / h.norm_sqr())
    }

    /// `|p_k|²` for sensor `k`.
    pub fn transmit_power(&self, k: usize, policy: &PowerPolicy) -> f64 {
        self.precoder(k, policy).norm_sqr()
    }
}

/// Draws `CN(0,1)` fades for `num_sensors` and activates those with
/// `|h|² ≥ h_th`. Randomness comes from the fades stream of `round_seed`.
pub fn draw_round(num_sensors: usize, policy: &PowerPolicy, round_seed: u64) -> Result<ChannelRound> {
    if num_sensors == 0 {
        return Err(Error::param("need at least one sensor"));
    }
    let mut rng = stream_rng(round_seed, Stream::Fades);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let fades: Vec<Complex64> = (0..num_sensors)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * scale, im * scale)
        })
        .collect();
    let active = fades
        .iter()
        .enumerate()
        .filter(|(_, h)| h.norm_sqr() >= policy.threshold())
        .map(|(k, _)| k)
        .collect();
    Ok(ChannelRound {
        fades,
        active,
        round_seed,
    })
}

/// A ±1 chip sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PnSequence {
    chips: Vec<f64>,
}

impl PnSequence {
    /// `gain` fair Bernoulli chips. Longer sequences drawn from the same
    /// stream extend shorter ones.
    pub fn random<R: Rng + ?Sized>(gain: usize, rng: &mut R) -> Result<Self> {
        if gain == 0 {
            return Err(Error::param("processing gain must be positive"));
        }
        let chips = (0..gain)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        Ok(PnSequence { chips })
    }

    pub fn from_chips(chips: Vec<f64>) -> Result<Self> {
        if chips.is_empty() || chips.iter().any(|&c| c != 1.0 && c != -1.0) {
            return Err(Error::param("chips must be a non-empty ±1 sequence"));
        }
        Ok(PnSequence { chips })
    }

    pub fn gain(&self) -> usize {
        self.chips.len()
    }

    pub fn chips(&self) -> &[f64] {
        &self.chips
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.chips)
    }
}

/// Outer product `x̂_nor fᵀ`.
pub fn spread(x: &DVector<f64>, f: &PnSequence) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), f.gain(), |s, m| x[s] * f.chips[m])
}

/// Unit-variance chip interference.
pub trait InterferenceSource {
    fn draw_block(&mut self, rows: usize, cols: usize) -> DMatrix<f64>;
}

/// Fresh i.i.d. draws from a generator, row by row.
pub struct FreshInterference<R>(pub R);

impl<R: Rng> InterferenceSource for FreshInterference<R> {
    fn draw_block(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for s in 0..rows {
            for c in 0..cols {
                m[(s, c)] = self.0.sample(StandardNormal);
            }
        }
        m
    }
}

/// Interference addressed by `(row, chip)` within a round: row `s` comes
/// from its own sub-stream, so blocks of different shapes drawn for the
/// same round share their common entries.
#[derive(Clone, Copy, Debug)]
pub struct SeededInterference {
    pub seed: u64,
}

impl InterferenceSource for SeededInterference {
    fn draw_block(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for s in 0..rows {
            let mut rng = sub_stream_rng(self.seed, Stream::Interference, s as u64);
            for c in 0..cols {
                m[(s, c)] = rng.sample(StandardNormal);
            }
        }
        m
    }
}

/// `Y = Σ_k Re(p_k h_k) X̃_k + √P_I Z` over the active sensors. `blocks`
/// holds one chip block per active sensor, in the order of `round.active`.
pub fn aircomp_round(
    blocks: &[DMatrix<f64>],
    round: &ChannelRound,
    policy: &PowerPolicy,
    interference: &mut dyn InterferenceSource,
) -> Result<DMatrix<f64>> {
    if round.active.is_empty() {
        return Err(Error::Outage);
    }
    if blocks.len() != round.active.len() {
        return Err(Error::DimensionMismatch {
            expected: round.active.len(),
            actual: blocks.len(),
        });
    }
    let (rows, cols) = blocks[0].shape();
    let mut y = DMatrix::<f64>::zeros(rows, cols);
    for (block, &k) in blocks.iter().zip(&round.active) {
        if block.shape() != (rows, cols) {
            return Err(Error::param("chip blocks differ in shape"));
        }
        let gain = (round.precoder(k, policy) * round.fades[k]).re;
        y += block * gain;
    }
    if policy.interference_power() > 0.0 {
        let z = interference.draw_block(rows, cols);
        y += z * policy.interference_power().sqrt();
    }
    Ok(y)
}

/// Despread and denormalized feature at the server.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceivedFeature {
    pub despread: DVector<f64>,
    pub reconstructed: Option<DVector<f64>>,
    pub active_count: usize,
    pub effective_interference_variance: f64,
}

impl ReceivedFeature {
    /// Attaches `P·ŷ`.
    pub fn with_reconstruction(mut self, p: &CompressionMatrix) -> Result<Self> {
        self.reconstructed = Some(reconstruct(&self.despread, p)?);
        Ok(self)
    }
}

/// `ŷ = σ_nor/(|K|√P₀) · (1/G) Y f + μ_nor`.
pub fn despread_denormalize(
    y: &DMatrix<f64>,
    f: &PnSequence,
    stats: &NormalizationStats,
    round: &ChannelRound,
    policy: &PowerPolicy,
) -> Result<ReceivedFeature> {
    let k = round.active_count();
    if k == 0 {
        return Err(Error::Outage);
    }
    if y.ncols() != f.gain() {
        return Err(Error::DimensionMismatch {
            expected: f.gain(),
            actual: y.ncols(),
        });
    }
    let g = f.gain() as f64;
    let kf = k as f64;
    let scale = stats.std / (kf * policy.alignment().sqrt() * g);
    let despread = (y * f.as_vector()).map(|v| v * scale + stats.mean);
    Ok(ReceivedFeature {
        despread,
        reconstructed: None,
        active_count: k,
        effective_interference_variance: stats.variance() / (g * kf * kf * policy.sir()),
    })
}

/// One row of a per-round trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundTrace {
    pub round_id: u64,
    pub depth: usize,
    pub gain: usize,
    pub active_count: usize,
    pub true_label: usize,
    pub predicted_label: usize,
}

/// Writes traces as CSV with header
/// `round_id,S,G,active_count,true_label,predicted_label`.
pub fn write_traces<W: Write>(writer: W, traces: &[RoundTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["round_id", "S", "G", "active_count", "true_label", "predicted_label"])?;
    for t in traces {
        w.write_record([
            t.round_id.to_string(),
            t.depth.to_string(),
            t.gain.to_string(),
            t.active_count.to_string(),
            t.true_label.to_string(),
            t.predicted_label.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<traces>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::build_default_gmm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_orthonormal(d: usize, s: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, s, |_, _| r.sample::<f64, _>(StandardNormal));
        a.qr().q().columns(0, s).into_owned()
    }

    #[test]
    fn compress_examples() {
        let mut r = rng(1);
        let p = CompressionMatrix::from_basis(DMatrix::identity(4, 4)).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(compress(&x, &p).unwrap(), x);
        let q = CompressionMatrix::from_basis(random_orthonormal(6, 3, &mut r)).unwrap();
        let col = q.basis().column(1).into_owned();
        let e = compress(&col, &q).unwrap();
        assert!((e - DVector::from_vec(vec![0.0, 1.0, 0.0])).amax() < 1e-12);
        for _ in 0..20 {
            let x = DVector::from_fn(6, |_, _| r.sample::<f64, _>(StandardNormal));
            assert!(compress(&x, &q).unwrap().norm() <= x.norm() + 1e-12);
        }
        assert!(compress(&DVector::zeros(5), &q).is_err());
    }

    #[test]
    fn selection_matrix_shape() {
        let p = CompressionMatrix::selection(5, &[3, 0]).unwrap();
        let b = p.basis();
        for j in 0..2 {
            assert_eq!(b.column(j).sum(), 1.0);
        }
        for i in 0..5 {
            assert!(b.row(i).sum() <= 1.0);
        }
        assert!(CompressionMatrix::selection(5, &[1, 1]).is_err());
        assert!(CompressionMatrix::selection(5, &[]).is_err());
        let x = DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(compress(&x, &p).unwrap().as_slice(), &[3.0, 0.0]);
    }

    #[test]
    fn reconstruct_examples() {
        let mut r = rng(2);
        let q = CompressionMatrix::from_basis(random_orthonormal(5, 2, &mut r)).unwrap();
        let y = DVector::from_vec(vec![0.3, -1.1]);
        let back = compress(&reconstruct(&y, &q).unwrap(), &q).unwrap();
        assert!((back - &y).amax() < 1e-12);

        let m = build_default_gmm(8).unwrap();
        let curve = m.eigen_dg(m.closest_pair().unwrap()).unwrap();
        let p = CompressionMatrix::top_eigen(&m, &curve, 3).unwrap();
        let x = DVector::from_fn(8, |i, _| i as f64 + 0.5);
        let xr = reconstruct(&compress(&x, &p).unwrap(), &p).unwrap();
        let dropped: f64 = (0..8)
            .filter(|i| !p.selected_dims().contains(i))
            .map(|i| x[i] * x[i])
            .sum();
        assert!(((x - xr).norm_squared() - dropped).abs() < 1e-12);

        let full = CompressionMatrix::top_eigen(&m, &curve, 8).unwrap();
        let z = DVector::from_fn(8, |i, _| (i as f64).sin());
        assert!((reconstruct(&compress(&z, &full).unwrap(), &full).unwrap() - z).amax() < 1e-15);
    }

    #[test]
    fn normalization_examples() {
        let m = build_default_gmm(50).unwrap();
        let curve = m.eigen_dg(m.closest_pair().unwrap()).unwrap();
        let p = CompressionMatrix::top_eigen(&m, &curve, 50).unwrap();
        let stats = fit_normalization(&m, &p).unwrap();
        assert_eq!(stats.mean, 0.0);

        let mut r = rng(3);
        let n = 100_000;
        let mut acc = 0.0;
        for i in 0..n {
            let x = m.sample_view(i % 2, &mut r).unwrap();
            acc += normalize(&compress(&x, &p).unwrap(), &stats).norm_squared() / 50.0;
        }
        assert!((acc / n as f64 - 1.0).abs() < 0.02);

        let c = 1.7;
        let single = GmmModel::from_diagonal(vec![DVector::from_element(3, c)], vec![1e-30; 3]).unwrap();
        let p3 = CompressionMatrix::selection(3, &[0, 1, 2]).unwrap();
        assert!(matches!(
            fit_normalization(&single, &p3),
            Err(Error::DegenerateNormalization(_))
        ));
    }

    #[test]
    fn activation_examples() {
        assert!((activation_probability(0.1054) - 0.9).abs() < 1e-4);
        assert_eq!(activation_probability(0.0), 1.0);
        assert!((activation_probability(2f64.ln()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn threshold_bisection_meets_budget() {
        let h = threshold_for_max_power(1.0, 1.0).unwrap();
        assert!((exp_integral_e1(h).unwrap() - 1.0).abs() < 1e-10);
        let pol = PowerPolicy::from_max_power(2.0, 1.0, 3.0).unwrap();
        assert!(2.0 * exp_integral_e1(pol.threshold()).unwrap() <= 3.0 * (1.0 + 1e-9));
        assert!(PowerPolicy::new(1.0, 1.0, 0.1, 0.5).is_err());
        assert!(PowerPolicy::new(0.0, 1.0, 0.1, 5.0).is_err());
    }

    #[test]
    fn draw_round_examples() {
        let pol = PowerPolicy::from_threshold(1.0, 1.0, 0.0).unwrap();
        let round = draw_round(6, &pol, 5).unwrap();
        assert_eq!(round.active, (0..6).collect::<Vec<_>>());

        let pol = PowerPolicy::from_threshold(2.5, 1.0, 0.4).unwrap();
        let n = 100_000;
        let mut hits = 0usize;
        for i in 0..n {
            let round = draw_round(1, &pol, i).unwrap();
            hits += round.active_count();
            for &k in &round.active {
                let ph = round.precoder(k, &pol) * round.fades[k];
                assert!((ph.re - 2.5f64.sqrt()).abs() < 1e-14 && ph.im.abs() < 1e-14);
            }
        }
        let p = (-0.4f64).exp();
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() < 3.0 * sd);
    }

    #[test]
    fn average_power_matches_exponential_integral() {
        let pol = PowerPolicy::from_threshold(1.0, 1.0, 0.1054).unwrap();
        let n = 100_000u64;
        let powers: Vec<f64> = (0..n)
            .map(|i| draw_round(1, &pol, 1000 + i).unwrap().transmit_power(0, &pol))
            .collect();
        let mean = powers.iter().sum::<f64>() / n as f64;
        let var = powers.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n as f64;
        let margin = 3.0 * (var / n as f64).sqrt();
        assert!(mean <= pol.max_power() + margin);
        assert!((mean - exp_integral_e1(0.1054).unwrap()).abs() <= margin);
    }

    #[test]
    fn pn_and_spread_examples() {
        let f = PnSequence::random(16, &mut rng(4)).unwrap();
        let ff: f64 = f.chips().iter().map(|c| c * c).sum();
        assert_eq!(ff / 16.0, 1.0);
        let longer = PnSequence::random(32, &mut rng(4)).unwrap();
        assert_eq!(&longer.chips()[..16], f.chips());
        assert!(PnSequence::from_chips(vec![1.0, 0.5]).is_err());

        let x = DVector::from_vec(vec![0.5, -2.0, 1.5]);
        let one = PnSequence::from_chips(vec![1.0]).unwrap();
        assert_eq!(spread(&x, &one).column(0).into_owned(), x);

        let x_t = spread(&x, &f);
        for s in 0..3 {
            for m in 0..16 {
                assert_eq!(x_t[(s, m)], x[s] * f.chips()[m]);
            }
        }
        let back = &x_t * f.as_vector() / 16.0;
        assert!((back - x).amax() < 1e-15);
    }

    #[test]
    fn aircomp_examples() {
        let f = PnSequence::random(4, &mut rng(5)).unwrap();
        let x = DVector::from_vec(vec![1.0, -0.5]);
        let block = spread(&x, &f);
        let clean = PowerPolicy::from_threshold(3.0, 0.0, 0.0).unwrap();
        let round = ChannelRound::all_active(1);
        let mut src = FreshInterference(rng(6));
        let y = aircomp_round(&[block.clone()], &round, &clean, &mut src).unwrap();
        assert!((y - &block * 3f64.sqrt()).amax() < 1e-14);

        let noisy = PowerPolicy::from_threshold(1.0, 0.7, 0.0).unwrap();
        let two = ChannelRound::all_active(2);
        let y = aircomp_round(&[block.clone(), -block.clone()], &two, &noisy, &mut SeededInterference { seed: 9 })
            .unwrap();
        let z = SeededInterference { seed: 9 }.draw_block(2, 4) * 0.7f64.sqrt();
        assert!((y - z).amax() < 1e-14);

        let empty = ChannelRound {
            fades: vec![Complex64::new(0.01, 0.0)],
            active: vec![],
            round_seed: 0,
        };
        assert!(matches!(
            aircomp_round(&[], &empty, &noisy, &mut src),
            Err(Error::Outage)
        ));
    }

    #[test]
    fn interference_variance_per_entry() {
        let pol = PowerPolicy::from_threshold(1.0, 0.25, 0.0).unwrap();
        let round = ChannelRound::all_active(1);
        let block = DMatrix::from_element(1, 1, 0.3);
        let mut src = FreshInterference(rng(7));
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let y = aircomp_round(&[block.clone()], &round, &pol, &mut src).unwrap();
            acc += (y[(0, 0)] - 0.3).powi(2);
        }
        assert!((acc / n as f64 / 0.25 - 1.0).abs() < 0.03);
    }

    #[test]
    fn seeded_interference_is_nested() {
        let big = SeededInterference { seed: 3 }.draw_block(5, 10);
        let small = SeededInterference { seed: 3 }.draw_block(2, 4);
        assert_eq!(big.view((0, 0), (2, 4)).into_owned(), small);
    }

    #[test]
    fn noiseless_chain_returns_view_average() {
        let m = build_default_gmm(12).unwrap();
        let curve = m.eigen_dg(m.closest_pair().unwrap()).unwrap();
        let mut r = rng(8);
        let pol = PowerPolicy::from_threshold(2.0, 0.0, 0.0).unwrap();
        for s in [1, 3, 12] {
            let p = CompressionMatrix::top_eigen(&m, &curve, s).unwrap();
            let stats = fit_normalization(&m, &p).unwrap();
            let g = 12 / s;
            let f = PnSequence::random(g, &mut r).unwrap();
            let views = m.sample_views(1, 3, &mut r).unwrap();
            let round = ChannelRound::all_active(3);
            let blocks: Vec<_> = views
                .iter()
                .map(|v| spread(&normalize(&compress(v, &p).unwrap(), &stats), &f))
                .collect();
            let y = aircomp_round(&blocks, &round, &pol, &mut FreshInterference(rng(0))).unwrap();
            let rx = despread_denormalize(&y, &f, &stats, &round, &pol)
                .unwrap()
                .with_reconstruction(&p)
                .unwrap();
            let avg = views.iter().fold(DVector::zeros(s), |a, v| a + compress(v, &p).unwrap()) / 3.0;
            assert!((&rx.despread - avg).amax() < 1e-9);
            assert_eq!(rx.reconstructed.unwrap(), p.basis() * &rx.despread);
            assert_eq!(rx.effective_interference_variance, 0.0);
        }
    }

    fn residual_variance(g: usize, seed: u64) -> f64 {
        let stats = NormalizationStats::new(0.2, 1.3).unwrap();
        let pol = PowerPolicy::from_threshold(1.0, 2.0, 0.0).unwrap();
        let round = ChannelRound::all_active(2);
        let mut r = rng(seed);
        let x = DVector::from_vec(vec![0.4, -0.1]);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let f = PnSequence::random(g, &mut r).unwrap();
            let blocks = vec![spread(&x, &f); 2];
            let y = aircomp_round(&blocks, &round, &pol, &mut FreshInterference(&mut r)).unwrap();
            let rx = despread_denormalize(&y, &f, &stats, &round, &pol).unwrap();
            let clean = denormalize(&x, &stats);
            acc += (&rx.despread - clean).norm_squared() / 2.0;
        }
        acc / n as f64
    }

    #[test]
    fn despread_residual_variance_and_gain_law() {
        let expected = |g: f64| 1.3f64.powi(2) / (g * 4.0 * 0.5);
        let v2 = residual_variance(2, 10);
        let v4 = residual_variance(4, 11);
        assert!((v2 / expected(2.0) - 1.0).abs() < 0.03);
        assert!((v4 / expected(4.0) - 1.0).abs() < 0.03);
        assert!((v2 / v4 - 2.0).abs() / 2.0 < 0.05);
    }

    #[test]
    fn despread_requires_active_sensor() {
        let stats = NormalizationStats::new(0.0, 1.0).unwrap();
        let pol = PowerPolicy::from_threshold(1.0, 1.0, 0.0).unwrap();
        let f = PnSequence::from_chips(vec![1.0]).unwrap();
        let empty = ChannelRound {
            fades: vec![],
            active: vec![],
            round_seed: 0,
        };
        assert!(matches!(
            despread_denormalize(&DMatrix::zeros(1, 1), &f, &stats, &empty, &pol),
            Err(Error::Outage)
        ));
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        let t = RoundTrace {
            round_id: 3,
            depth: 5,
            gain: 10,
            active_count: 2,
            true_label: 1,
            predicted_label: 0,
        };
        write_traces(&mut buf, &[t]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "round_id,S,G,active_count,true_label,predicted_label\n3,5,10,2,1,0\n"
        );
    }
}
