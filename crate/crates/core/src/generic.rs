//! Breathing control for classifiers without a closed-form gain: feature
//! importance, the accuracy-to-gain mapping, Monte Carlo compression and
//! spreading curves, and the tabulated depth search.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dg::{BreathingDecision, DepthMethod};
use crate::error::{Error, Result};
use crate::gmm::{GmmModel, MahalanobisClassifier};
use crate::special::{q_function, q_inverse};
use crate::streams::{derive, stream_rng, Stream};

/// A classifier on fused `D`-dimensional features together with a source
/// of labeled multi-view training samples.
pub trait ClassifierOracle: Sync {
    fn num_classes(&self) -> usize;
    fn dim(&self) -> usize;
    fn classify(&self, fused: &DVector<f64>) -> usize;
    fn sample_views(&self, label: usize, num_views: usize, rng: &mut dyn RngCore) -> Vec<DVector<f64>>;
}

/// Nearest-centroid rule under the model covariance.
#[derive(Clone, Debug)]
pub struct MahalanobisOracle {
    model: GmmModel,
    classifier: MahalanobisClassifier,
}

impl MahalanobisOracle {
    pub fn new(model: GmmModel) -> Result<Self> {
        let classifier = MahalanobisClassifier::new(model.centroids(), model.covariance())?;
        Ok(MahalanobisOracle { model, classifier })
    }

    pub fn model(&self) -> &GmmModel {
        &self.model
    }
}

impl ClassifierOracle for MahalanobisOracle {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn classify(&self, fused: &DVector<f64>) -> usize {
        self.classifier.classify(fused).expect("fused feature has model dimension")
    }

    fn sample_views(&self, label: usize, num_views: usize, rng: &mut dyn RngCore) -> Vec<DVector<f64>> {
        self.model
            .sample_views(label, num_views, rng)
            .expect("oracle labels are in range")
    }
}

/// The views of one object.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub label: usize,
    pub views: Vec<DVector<f64>>,
}

/// Draws `per_class` objects of every class with `num_views` views each.
pub fn collect_training_batches(
    oracle: &dyn ClassifierOracle,
    per_class: usize,
    num_views: usize,
    seed: u64,
) -> Vec<LabeledBatch> {
    let mut rng = stream_rng(seed, Stream::Views);
    (0..oracle.num_classes())
        .flat_map(|label| (0..per_class).map(move |_| label))
        .map(|label| LabeledBatch {
            label,
            views: oracle.sample_views(label, num_views, &mut rng),
        })
        .collect()
}

/// Per-dimension importance and the ranking it induces.
#[derive(Clone, Debug)]
pub struct ImportanceProfile {
    pub importance: Vec<f64>,
    pub class_means: Vec<DVector<f64>>,
    pub ranking: Vec<usize>,
}

impl ImportanceProfile {
    /// Writes rows `(d, I_d)` with 1-based `d`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["d", "I_d"])?;
        for (i, v) in self.importance.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{v:.10e}")])?;
        }
        w.flush().map_err(|e| Error::io("<importance>", e))?;
        Ok(())
    }
}

/// Mean pairwise absolute gap between class means, per dimension.
pub fn feature_importance(batches: &[LabeledBatch], num_classes: usize) -> Result<ImportanceProfile> {
    if num_classes < 2 {
        return Err(Error::param("importance needs at least two classes"));
    }
    let dim = batches
        .iter()
        .flat_map(|b| b.views.first())
        .map(|v| v.len())
        .next()
        .ok_or_else(|| Error::param("no training views"))?;
    let mut sums = vec![DVector::<f64>::zeros(dim); num_classes];
    let mut counts = vec![0usize; num_classes];
    for b in batches {
        if b.label >= num_classes {
            return Err(Error::InvalidLabel {
                label: b.label,
                classes: num_classes,
            });
        }
        for v in &b.views {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            sums[b.label] += v;
            counts[b.label] += 1;
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::param(format!("no samples for class {missing}")));
    }
    let class_means: Vec<DVector<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect();
    let pairs = (num_classes * (num_classes - 1) / 2) as f64;
    let importance: Vec<f64> = (0..dim)
        .map(|d| {
            let mut acc = 0.0;
            for a in 0..num_classes {
                for b in a + 1..num_classes {
                    acc += (class_means[a][d] - class_means[b][d]).abs();
                }
            }
            acc / pairs
        })
        .collect();
    let mut ranking: Vec<usize> = (0..dim).collect();
    ranking.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    Ok(ImportanceProfile {
        importance,
        class_means,
        ranking,
    })
}

/// Hyperparameters of the accuracy-to-gain mapping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DgMapping {
    pub alpha: f64,
    pub beta: f64,
}

impl DgMapping {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::param("alpha and beta must be positive"));
        }
        Ok(DgMapping { alpha, beta })
    }

    /// `α = 1/(L−1)`, `β = 2`.
    pub fn for_classes(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::param("mapping needs at least two classes"));
        }
        Self::new(1.0 / (num_classes as f64 - 1.0), 2.0)
    }

    pub fn to_dg(&self, accuracy: f64) -> Result<f64> {
        accuracy_to_dg(accuracy, self.alpha, self.beta)
    }

    pub fn to_accuracy(&self, dg: f64) -> f64 {
        dg_to_accuracy(dg, self.alpha, self.beta)
    }
}

/// `β·Q⁻¹(α(1 − A))`.
pub fn accuracy_to_dg(accuracy: f64, alpha: f64, beta: f64) -> Result<f64> {
    let arg = alpha * (1.0 - accuracy);
    if !(arg > 0.0 && arg < 1.0) {
        return Err(Error::Domain(format!(
            "alpha*(1-A) = {arg} not in (0,1) for A = {accuracy}"
        )));
    }
    Ok(beta * q_inverse(arg)?)
}

/// `1 − Q(G/β)/α`.
pub fn dg_to_accuracy(dg: f64, alpha: f64, beta: f64) -> f64 {
    1.0 - q_function(dg / beta) / alpha
}

/// Per-dimension variance emulating the despread interference at gain `G`.
pub fn emulated_interference_variance(norm_var: f64, active_count: usize, gain: usize, sir: f64) -> f64 {
    let k = active_count as f64;
    norm_var / (k * k * gain as f64 * sir)
}

/// `x + √variance · z` with `z` standard normal.
pub fn emulate_interference<R: Rng + ?Sized>(x: &DVector<f64>, variance: f64, rng: &mut R) -> DVector<f64> {
    let sd = variance.sqrt();
    x.map(|v| {
        let z: f64 = rng.sample(StandardNormal);
        v + sd * z
    })
}

/// Monte Carlo accuracies along a grid and their mapped gains.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveEstimate {
    pub grid: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub dg: Vec<f64>,
    pub stderr: Vec<f64>,
    pub trials: usize,
}

impl CurveEstimate {
    fn from_counts(grid: Vec<usize>, correct: &[u64], trials: usize, mapping: DgMapping) -> Result<Self> {
        let n = trials as f64;
        let mut accuracy = Vec::with_capacity(grid.len());
        let mut dg = Vec::with_capacity(grid.len());
        let mut stderr = Vec::with_capacity(grid.len());
        for &c in correct {
            // Shrink toward 1/2 so that perfect scores stay mappable.
            let a = (c as f64 + 0.5) / (n + 1.0);
            let g = mapping.to_dg(a)?;
            let x = g / mapping.beta;
            let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let se_a = (a * (1.0 - a) / n).sqrt();
            accuracy.push(a);
            dg.push(g);
            stderr.push(mapping.beta * mapping.alpha * se_a / density.max(1e-300));
        }
        Ok(CurveEstimate {
            grid,
            accuracy,
            dg,
            stderr,
            trials,
        })
    }
}

struct Trial {
    label: usize,
    fused: DVector<f64>,
    noise_seed: u64,
}

fn draw_trial(oracle: &dyn ClassifierOracle, active: usize, seed: u64, t: usize) -> Trial {
    let ts = derive(seed, &[t as u64]);
    let label = stream_rng(ts, Stream::Label).gen_range(0..oracle.num_classes());
    let views = oracle.sample_views(label, active, &mut stream_rng(ts, Stream::Views));
    let fused = views.iter().fold(DVector::zeros(oracle.dim()), |a, v| a + v) / active as f64;
    Trial {
        label,
        fused,
        noise_seed: ts,
    }
}

fn count_correct<F>(trials: usize, len: usize, per_trial: F) -> Vec<u64>
where
    F: Fn(usize) -> Vec<bool> + Sync + Send,
{
    (0..trials)
        .into_par_iter()
        .map(&per_trial)
        .fold(
            || vec![0u64; len],
            |mut acc, hits| {
                for (a, h) in acc.iter_mut().zip(hits) {
                    *a += h as u64;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; len],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        )
}

/// Emulated-interference accuracy of the oracle at each gain in `grid`,
/// mapped to gains. Every grid point reuses the same trials and the same
/// standard-normal noise, scaled per gain.
#[allow(clippy::too_many_arguments)]
pub fn estimate_spread_dg_curve(
    oracle: &dyn ClassifierOracle,
    active_count: usize,
    sir: f64,
    norm_var: f64,
    grid: &[usize],
    trials: usize,
    mapping: DgMapping,
    seed: u64,
) -> Result<CurveEstimate> {
    if trials == 0 || active_count == 0 {
        return Err(Error::param("trials and active count must be positive"));
    }
    if grid.is_empty() || grid.contains(&0) {
        return Err(Error::param("gain grid must be non-empty and positive"));
    }
    let variances: Vec<f64> = grid
        .iter()
        .map(|&g| emulated_interference_variance(norm_var, active_count, g, sir))
        .collect();
    let correct = count_correct(trials, grid.len(), |t| {
        let trial = draw_trial(oracle, active_count, seed, t);
        variances
            .iter()
            .map(|&v| {
                let mut rng = stream_rng(trial.noise_seed, Stream::Noise);
                let noisy = emulate_interference(&trial.fused, v, &mut rng);
                oracle.classify(&noisy) == trial.label
            })
            .collect()
    });
    CurveEstimate::from_counts(grid.to_vec(), &correct, trials, mapping)
}

/// Interference-free accuracy when only the top-`S` ranked dimensions are
/// kept (the rest zeroed), mapped to gains.
pub fn estimate_compression_dg_curve(
    oracle: &dyn ClassifierOracle,
    profile: &ImportanceProfile,
    active_count: usize,
    grid: &[usize],
    trials: usize,
    mapping: DgMapping,
    seed: u64,
) -> Result<CurveEstimate> {
    let dim = oracle.dim();
    if trials == 0 || active_count == 0 {
        return Err(Error::param("trials and active count must be positive"));
    }
    if profile.ranking.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: profile.ranking.len(),
        });
    }
    if grid.is_empty() || grid.iter().any(|&s| s == 0 || s > dim) {
        return Err(Error::param(format!("depth grid must lie in 1..={dim}")));
    }
    let correct = count_correct(trials, grid.len(), |t| {
        let trial = draw_trial(oracle, active_count, seed, t);
        grid.iter()
            .map(|&s| {
                let mut masked = DVector::zeros(dim);
                for &d in &profile.ranking[..s] {
                    masked[d] = trial.fused[d];
                }
                oracle.classify(&masked) == trial.label
            })
            .collect()
    });
    CurveEstimate::from_counts(grid.to_vec(), &correct, trials, mapping)
}

/// Least-squares nondecreasing fit (pool adjacent violators).
pub fn isotonic_nondecreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, n2) = blocks[blocks.len() - 1];
            let (m1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            let n = n1 + n2;
            blocks.push(((m1 * n1 as f64 + m2 * n2 as f64) / n as f64, n));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, n)| std::iter::repeat(m).take(n))
        .collect()
}

/// Gains `{1, 2, 4, …} ∪ {D} ∪ {⌊D/S⌋ : S = 1..D}`, sorted.
pub fn spread_grid(dim: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = std::iter::successors(Some(1usize), |g| Some(g * 2))
        .take_while(|&g| g <= dim)
        .chain((1..=dim).map(|s| dim / s))
        .collect();
    grid.sort_unstable();
    grid.dedup();
    grid
}

/// Monotone compression and spreading tables.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnDgTables {
    comp: Vec<f64>,
    comp_stderr: Vec<f64>,
    spread_grid: Vec<usize>,
    spread: Vec<f64>,
    spread_stderr: Vec<f64>,
    mapping: DgMapping,
}

impl CnnDgTables {
    /// Builds tables from raw curves; `comp[i]` belongs to `S = i + 1` and
    /// the spread grid must be strictly increasing from 1 to `D`. Both
    /// curves are made nondecreasing by isotonic regression.
    pub fn new(
        comp: Vec<f64>,
        comp_stderr: Vec<f64>,
        spread_grid: Vec<usize>,
        spread: Vec<f64>,
        spread_stderr: Vec<f64>,
        mapping: DgMapping,
    ) -> Result<Self> {
        let dim = comp.len();
        if dim == 0 || comp_stderr.len() != dim {
            return Err(Error::param("compression table must cover S = 1..D"));
        }
        if spread_grid.len() != spread.len() || spread_stderr.len() != spread.len() {
            return Err(Error::param("spread table columns differ in length"));
        }
        if spread_grid.first() != Some(&1) || spread_grid.last() != Some(&dim) {
            return Err(Error::param(format!("spread grid must span 1..={dim}")));
        }
        if spread_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("spread grid must be strictly increasing"));
        }
        if comp.iter().chain(&spread).any(|v| !v.is_finite()) {
            return Err(Error::param("table values must be finite"));
        }
        Ok(CnnDgTables {
            comp: isotonic_nondecreasing(&comp),
            comp_stderr,
            spread_grid,
            spread: isotonic_nondecreasing(&spread),
            spread_stderr,
            mapping,
        })
    }

    /// Tables from Monte Carlo estimates over `S = 1..D` and a gain grid.
    pub fn from_estimates(comp: &CurveEstimate, spread: &CurveEstimate, mapping: DgMapping) -> Result<Self> {
        if comp.grid.iter().enumerate().any(|(i, &s)| s != i + 1) {
            return Err(Error::param("compression estimate must cover S = 1..D in order"));
        }
        Self::new(
            comp.dg.clone(),
            comp.stderr.clone(),
            spread.grid.clone(),
            spread.dg.clone(),
            spread.stderr.clone(),
            mapping,
        )
    }

    pub fn dim(&self) -> usize {
        self.comp.len()
    }

    pub fn mapping(&self) -> DgMapping {
        self.mapping
    }

    pub fn comp_curve(&self) -> &[f64] {
        &self.comp
    }

    pub fn spread_grid(&self) -> &[usize] {
        &self.spread_grid
    }

    pub fn spread_curve(&self) -> &[f64] {
        &self.spread
    }

    /// Spreading gain at `G`, linearly interpolated on the grid.
    pub fn spread_at(&self, gain: f64) -> f64 {
        let grid = &self.spread_grid;
        let last = grid.len() - 1;
        if gain <= grid[0] as f64 {
            return self.spread[0];
        }
        if gain >= grid[last] as f64 {
            return self.spread[last];
        }
        let hi = grid.partition_point(|&g| (g as f64) < gain);
        if grid[hi] as f64 == gain {
            return self.spread[hi];
        }
        let (g0, g1) = (grid[hi - 1] as f64, grid[hi] as f64);
        let w = (gain - g0) / (g1 - g0);
        self.spread[hi - 1] * (1.0 - w) + self.spread[hi] * w
    }

    pub fn write_comp_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["S", "G_comp", "stderr"])?;
        for (i, (v, e)) in self.comp.iter().zip(&self.comp_stderr).enumerate() {
            w.write_record([(i + 1).to_string(), format!("{v:.10e}"), format!("{e:.10e}")])?;
        }
        w.flush().map_err(|e| Error::io("<comp table>", e))?;
        Ok(())
    }

    pub fn write_spread_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["G", "G_spre", "stderr"])?;
        for ((g, v), e) in self.spread_grid.iter().zip(&self.spread).zip(&self.spread_stderr) {
            w.write_record([g.to_string(), format!("{v:.10e}"), format!("{e:.10e}")])?;
        }
        w.flush().map_err(|e| Error::io("<spread table>", e))?;
        Ok(())
    }

    /// Reads tables written by the two CSV writers.
    pub fn read_csv<R1: Read, R2: Read>(comp: R1, spread: R2, mapping: DgMapping) -> Result<Self> {
        let comp_rows = read_triples(comp)?;
        let spread_rows = read_triples(spread)?;
        if comp_rows.iter().enumerate().any(|(i, r)| r.0 != (i + 1) as f64) {
            return Err(Error::param("compression table must list S = 1..D in order"));
        }
        Self::new(
            comp_rows.iter().map(|r| r.1).collect(),
            comp_rows.iter().map(|r| r.2).collect(),
            spread_rows.iter().map(|r| r.0 as usize).collect(),
            spread_rows.iter().map(|r| r.1).collect(),
            spread_rows.iter().map(|r| r.2).collect(),
            mapping,
        )
    }
}

fn read_triples<R: Read>(reader: R) -> Result<Vec<(f64, f64, f64)>> {
    let mut r = csv::Reader::from_reader(reader);
    r.records()
        .map(|rec| {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::param("table row has fewer than 3 fields"))?
                    .trim()
                    .parse()
                    .map_err(|e| Error::param(format!("table value: {e}")))
            };
            Ok((f(0)?, f(1)?, f(2)?))
        })
        .collect()
}

/// `G^comp(S) + G^spre(⌊D/S⌋)`.
pub fn combined_surrogate(tables: &CnnDgTables, depth: usize) -> Result<f64> {
    let dim = tables.dim();
    if depth == 0 || depth > dim {
        return Err(Error::param(format!("depth {depth} not in 1..={dim}")));
    }
    Ok(tables.comp[depth - 1] + tables.spread_at((dim / depth) as f64))
}

/// Integer argmax of the combined surrogate, ties to the smallest `S`.
///
/// When the sequence rises strictly and then never rises again, the
/// peak is located by bisection on the sign of the forward difference;
/// otherwise every depth is scanned.
pub fn optimal_depth_generic(tables: &CnnDgTables) -> BreathingDecision {
    let dim = tables.dim();
    let f = |s: usize| combined_surrogate(tables, s).expect("depth in range");
    let values: Vec<f64> = (1..=dim).map(f).collect();
    let rises: Vec<bool> = values.windows(2).map(|w| w[1] > w[0]).collect();
    let unimodal = rises.windows(2).all(|w| w[0] || !w[1]);
    let best = if unimodal {
        // First depth whose successor does not rise.
        let (mut lo, mut hi) = (1usize, dim);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if f(mid + 1) > f(mid) {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    } else {
        let mut best = 1;
        for s in 2..=dim {
            if values[s - 1] > values[best - 1] {
                best = s;
            }
        }
        best
    };
    BreathingDecision::with_full_band(best, dim, values[best - 1], DepthMethod::Tabulated)
}
