//! Monte Carlo experiments: scheme comparison sweeps, the depth tradeoff
//! scan, optimal-depth tables and generic-classifier curves.
//!
//! Every random draw is addressed by `(master seed, sweep point, round,
//! stream)`, so all schemes at a sweep point see the same labels, views,
//! fades, interference and PN chips (common random numbers).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::config::{Axis, ExperimentConfig, SchemeSpec};
use crate::dg::{
    brute_force_depth, optimal_breathing_depth, phi_lower_bound, phi_tilde, phi_tilde_gains,
    receive_covariance, receive_dg_diagonal, BreathingDecision, SurrogateParams,
};
use crate::error::{Error, Result};
use crate::generic::{
    collect_training_batches, estimate_compression_dg_curve, estimate_spread_dg_curve, feature_importance,
    optimal_depth_generic, spread_grid, CnnDgTables, CurveEstimate, DgMapping, ImportanceProfile,
    MahalanobisOracle,
};
use crate::gmm::{DgCurve, GmmModel, LabelPair, MahalanobisClassifier};
use crate::phy::{
    aircomp_round, compress, db_to_linear, despread_denormalize, draw_round, fit_normalization,
    fit_normalization_empirical, normalize, spread, ChannelRound, CompressionMatrix, NormalizationStats,
    PnSequence, PowerPolicy, RoundTrace, SeededInterference,
};
use crate::streams::{derive, round_seed, stream_rng, Stream};

const CALIBRATION_TAG: u64 = 0xca11_b2a7_e000_0001;
const TRADEOFF_TAG: u64 = 0x7ade_0ff0_0000_0002;
const Z95: f64 = 1.959_963_984_540_054;

/// A validated experiment with its model and derived quantities.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    model: GmmModel,
    pair: LabelPair,
    curve: DgCurve,
    stats: NormalizationStats,
}

impl Experiment {
    /// Loads the model named by the config; relative model paths resolve
    /// against `base_dir`.
    pub fn new(config: ExperimentConfig, base_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let model = config.model.load(base_dir)?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: ExperimentConfig, model: GmmModel) -> Result<Self> {
        config.validate()?;
        let d = model.dim();
        for s in &config.schemes {
            if let SchemeSpec::FixedDepth(depth) = s {
                if *depth > d {
                    return Err(Error::param(format!("{s}: depth exceeds D = {d}")));
                }
            }
        }
        let pair = model.closest_pair()?;
        let curve = model.eigen_dg(pair)?;
        let full = CompressionMatrix::top_eigen(&model, &curve, d)?;
        // One set of statistics for every depth keeps the surrogate's
        // σ²_nor consistent with the simulated chain.
        let stats = fit_normalization(&model, &full)?;
        Ok(Experiment {
            config,
            model,
            pair,
            curve,
            stats,
        })
    }

    pub fn model(&self) -> &GmmModel {
        &self.model
    }

    pub fn pair(&self) -> LabelPair {
        self.pair
    }

    pub fn curve(&self) -> &DgCurve {
        &self.curve
    }

    pub fn stats(&self) -> NormalizationStats {
        self.stats
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Surrogate parameters for `active` sensors at linear SIR `sir`.
    pub fn params(&self, active: usize, sir: f64) -> Result<SurrogateParams> {
        SurrogateParams::new(active, sir, self.stats.variance(), self.model.min_eigenvalue(), self.dim())
    }

    /// Channel settings at one value of `axis`.
    pub fn point_settings(&self, axis: Axis, value: f64) -> Result<PointSettings> {
        let mut channel = self.config.channel.clone();
        let mut fixed_depth = None;
        match axis {
            Axis::Sir => {
                channel.sir_db = Some(value);
                channel.interference_power = None;
            }
            Axis::Sensors => {
                if !(value >= 1.0) || value.fract() != 0.0 {
                    return Err(Error::param(format!("sensor count {value} is not a positive integer")));
                }
                channel.sensors = value as usize;
            }
            Axis::Activation => {
                if !(value > 0.0 && value <= 1.0) {
                    return Err(Error::param(format!("activation probability {value} not in (0, 1]")));
                }
                channel.activation_probability = Some(value);
                channel.threshold = None;
                channel.max_power = None;
            }
            Axis::Depth => {
                if !(value >= 1.0) || value.fract() != 0.0 || value as usize > self.dim() {
                    return Err(Error::param(format!("depth {value} not in 1..={}", self.dim())));
                }
                fixed_depth = Some(value as usize);
            }
        }
        channel.validate()?;
        Ok(PointSettings {
            sensors: channel.sensors,
            policy: channel.policy()?,
            fixed_depth,
        })
    }

    /// Settings of the config's channel section without a sweep.
    pub fn base_settings(&self) -> Result<PointSettings> {
        Ok(PointSettings {
            sensors: self.config.channel.sensors,
            policy: self.config.channel.policy()?,
            fixed_depth: None,
        })
    }
}

/// Channel settings of one sweep point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointSettings {
    pub sensors: usize,
    pub policy: PowerPolicy,
    pub fixed_depth: Option<usize>,
}

/// Compression, gain and matched receiver for one transmission.
#[derive(Clone, Debug)]
pub struct LinearPlan {
    pub compression: CompressionMatrix,
    pub gain: usize,
    classifier: MahalanobisClassifier,
}

/// What happened in one round under one scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundOutcome {
    pub round: u64,
    pub true_label: usize,
    pub predicted: usize,
    /// Zero on outage.
    pub depth: usize,
    pub gain: usize,
    pub active_count: usize,
    pub outage: bool,
}

impl RoundOutcome {
    pub fn correct(&self) -> bool {
        self.true_label == self.predicted
    }

    pub fn trace(&self) -> RoundTrace {
        RoundTrace {
            round_id: self.round,
            depth: self.depth,
            gain: self.gain,
            active_count: self.active_count,
            true_label: self.true_label,
            predicted_label: self.predicted,
        }
    }
}

struct RoundDraw {
    seed: u64,
    label: usize,
    views: Vec<DVector<f64>>,
    channel: ChannelRound,
}

/// Simulator for one sweep point.
pub struct PointSimulator<'a> {
    exp: &'a Experiment,
    settings: PointSettings,
    point: u64,
    plans: Mutex<HashMap<(usize, usize, usize), Arc<LinearPlan>>>,
    brute: Vec<OnceLock<std::result::Result<(usize, usize), String>>>,
}

impl<'a> PointSimulator<'a> {
    pub fn new(exp: &'a Experiment, point: u64, settings: PointSettings) -> Self {
        PointSimulator {
            exp,
            settings,
            point,
            plans: Mutex::new(HashMap::new()),
            brute: (0..settings.sensors).map(|_| OnceLock::new()).collect(),
        }
    }

    pub fn settings(&self) -> &PointSettings {
        &self.settings
    }

    fn params(&self, active: usize) -> Result<SurrogateParams> {
        self.exp.params(active, self.settings.policy.sir())
    }

    fn build_plan(&self, compression: CompressionMatrix, gain: usize, active: usize) -> Result<LinearPlan> {
        let centroids: Vec<DVector<f64>> = self
            .exp
            .model
            .centroids()
            .iter()
            .map(|m| compress(m, &compression))
            .collect::<Result<_>>()?;
        let cov: DMatrix<f64> = receive_covariance(&compression, &self.exp.model, &self.params(active)?, gain)?;
        let classifier = MahalanobisClassifier::new(&centroids, &cov)?;
        Ok(LinearPlan {
            compression,
            gain,
            classifier,
        })
    }

    /// Top-eigenvector plan, cached per `(S, G, |K|)`.
    pub fn eigen_plan(&self, depth: usize, gain: usize, active: usize) -> Result<Arc<LinearPlan>> {
        let key = (depth, gain, active);
        if let Some(p) = self.plans.lock().expect("plan cache").get(&key) {
            return Ok(p.clone());
        }
        let p = CompressionMatrix::top_eigen(&self.exp.model, &self.exp.curve, depth)?;
        let plan = Arc::new(self.build_plan(p, gain, active)?);
        self.plans
            .lock()
            .expect("plan cache")
            .entry(key)
            .or_insert(plan.clone());
        Ok(plan)
    }

    fn draw(&self, seed: u64, sensors: usize, channel: ChannelRound) -> Result<RoundDraw> {
        let l = self.exp.model.num_classes();
        let label = stream_rng(seed, Stream::Label).gen_range(0..l);
        let views = self
            .exp
            .model
            .sample_views(label, sensors, &mut stream_rng(seed, Stream::Views))?;
        Ok(RoundDraw {
            seed,
            label,
            views,
            channel,
        })
    }

    fn draw_round(&self, round: u64) -> Result<RoundDraw> {
        let seed = round_seed(self.exp.config.seed, self.point, round);
        let channel = draw_round(self.settings.sensors, &self.settings.policy, seed)?;
        self.draw(seed, self.settings.sensors, channel)
    }

    fn transmit(&self, plan: &LinearPlan, draw: &RoundDraw) -> Result<usize> {
        let stats = &self.exp.stats;
        let f = PnSequence::random(plan.gain, &mut stream_rng(draw.seed, Stream::Pn))?;
        let blocks: Vec<DMatrix<f64>> = draw
            .channel
            .active
            .iter()
            .map(|&k| Ok(spread(&normalize(&compress(&draw.views[k], &plan.compression)?, stats), &f)))
            .collect::<Result<_>>()?;
        let y = aircomp_round(
            &blocks,
            &draw.channel,
            &self.settings.policy,
            &mut SeededInterference { seed: draw.seed },
        )?;
        let rx = despread_denormalize(&y, &f, stats, &draw.channel, &self.settings.policy)?;
        plan.classifier.classify(&rx.despread)
    }

    /// Depth and gain maximizing calibrated accuracy with `active` sensors.
    pub fn brute_force_choice(&self, active: usize) -> Result<(usize, usize)> {
        let slot = self
            .brute
            .get(active.wrapping_sub(1))
            .ok_or_else(|| Error::param(format!("active count {active} out of range")))?;
        slot.get_or_init(|| self.calibrate(active).map_err(|e| e.to_string()))
            .clone()
            .map_err(Error::InvalidParameter)
    }

    fn calibrate(&self, active: usize) -> Result<(usize, usize)> {
        let d = self.exp.dim();
        let bf = &self.exp.config.brute_force;
        let candidates: Vec<(usize, usize)> = (1..=d)
            .flat_map(|s| {
                let gains: Vec<usize> = if bf.full_grid {
                    (1..=d / s).rev().collect()
                } else {
                    vec![d / s]
                };
                gains.into_iter().map(move |g| (s, g))
            })
            .collect();
        let plans: Vec<Arc<LinearPlan>> = candidates
            .iter()
            .map(|&(s, g)| self.eigen_plan(s, g, active))
            .collect::<Result<_>>()?;
        let master = derive(self.exp.config.seed, &[self.point, CALIBRATION_TAG, active as u64]);
        let counts = (0..bf.calibration_rounds as u64)
            .into_par_iter()
            .map(|r| -> Result<Vec<u64>> {
                let seed = derive(master, &[r]);
                let draw = self.draw(seed, active, ChannelRound::all_active(active))?;
                plans
                    .iter()
                    .map(|p| Ok((self.transmit(p, &draw)? == draw.label) as u64))
                    .collect()
            })
            .try_reduce(
                || vec![0u64; candidates.len()],
                |mut a, b| {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                    Ok(a)
                },
            )?;
        let score: HashMap<(usize, usize), u64> = candidates.iter().copied().zip(counts).collect();
        let best = brute_force_depth(|s, g| score[&(s, g)] as f64, d, bf.full_grid)?;
        Ok((best.depth, best.gain))
    }

    /// Depth chosen by `scheme` for this round, with its plan.
    fn plan_for(&self, scheme: SchemeSpec, active: usize, seed: u64) -> Result<Arc<LinearPlan>> {
        let d = self.exp.dim();
        match scheme {
            SchemeSpec::AirBreath => {
                let s = optimal_breathing_depth(&self.exp.curve, &self.params(active)?).depth;
                self.eigen_plan(s, d / s, active)
            }
            SchemeSpec::NoAirBreathing => self.eigen_plan(d, 1, active),
            SchemeSpec::FixedDepth(s) => {
                if s == 0 || s > d {
                    return Err(Error::param(format!("fixed depth {s} not in 1..={d}")));
                }
                self.eigen_plan(s, d / s, active)
            }
            SchemeSpec::BruteForce => {
                let (s, g) = self.brute_force_choice(active)?;
                self.eigen_plan(s, g, active)
            }
            SchemeSpec::RandomAirBreathing => {
                let (dims, s) = self.random_selection(active, seed)?;
                let p = CompressionMatrix::eigen_subset(&self.exp.model, &dims[..s])?;
                Ok(Arc::new(self.build_plan(p, d / s, active)?))
            }
        }
    }

    /// Random eigen-index order and the depth scanned on its gains.
    fn random_selection(&self, active: usize, seed: u64) -> Result<(Vec<usize>, usize)> {
        let d = self.exp.dim();
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut stream_rng(seed, Stream::Selection));
        let mut by_index = vec![0.0; d];
        for (pos, &idx) in self.exp.curve.order().iter().enumerate() {
            by_index[idx] = self.exp.curve.gains()[pos];
        }
        let gains: Vec<f64> = order.iter().map(|&i| by_index[i]).collect();
        let params = self.params(active)?;
        let mut best = (1usize, f64::NEG_INFINITY);
        for s in 1..=d {
            let v = phi_tilde_gains(s as f64, &gains, &params)?;
            if v > best.1 {
                best = (s, v);
            }
        }
        Ok((order, best.0))
    }

    /// One round of `scheme`. With no active sensor the prediction is a
    /// uniform guess shared by all schemes.
    pub fn run_round(&self, scheme: SchemeSpec, round: u64) -> Result<RoundOutcome> {
        let draw = self.draw_round(round)?;
        let active = draw.channel.active_count();
        if active == 0 {
            let l = self.exp.model.num_classes();
            let guess = stream_rng(draw.seed, Stream::Guess).gen_range(0..l);
            return Ok(RoundOutcome {
                round,
                true_label: draw.label,
                predicted: guess,
                depth: 0,
                gain: 0,
                active_count: 0,
                outage: true,
            });
        }
        let plan = self.plan_for(scheme, active, draw.seed)?;
        let predicted = self.transmit(&plan, &draw)?;
        Ok(RoundOutcome {
            round,
            true_label: draw.label,
            predicted,
            depth: plan.compression.depth(),
            gain: plan.gain,
            active_count: active,
            outage: false,
        })
    }

    /// `rounds` rounds of `scheme`, in round order.
    pub fn run_scheme(&self, scheme: SchemeSpec, rounds: usize) -> Result<Vec<RoundOutcome>> {
        (0..rounds as u64)
            .into_par_iter()
            .map(|r| self.run_round(scheme, r))
            .collect()
    }
}

/// Wilson score interval at 95%.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0).min(p), (centre + half).min(1.0).max(p))
}

/// Mean of `a − b` over paired rounds with a 95% normal interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedDifference {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn paired_difference(a: &[bool], b: &[bool]) -> PairedDifference {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x as i32 as f64 - y as i32 as f64).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = if a.len() > 1 {
        d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let half = Z95 * (var / n).sqrt();
    PairedDifference {
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
    }
}

/// Summary of one scheme at one sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub experiment: String,
    pub scheme: String,
    pub axis: String,
    pub axis_value: f64,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mean_depth: f64,
    pub mean_active: f64,
    pub outage_rate: f64,
    pub rounds: usize,
    pub seed: u64,
}

impl AccuracyRow {
    /// Half-width of the 95% interval under the normal approximation.
    pub fn half_width(&self) -> f64 {
        Z95 * (self.accuracy * (1.0 - self.accuracy) / self.rounds as f64).sqrt()
    }
}

fn summarize(
    exp: &Experiment,
    scheme: SchemeSpec,
    axis: Axis,
    value: f64,
    outcomes: &[RoundOutcome],
) -> AccuracyRow {
    let n = outcomes.len();
    let correct = outcomes.iter().filter(|o| o.correct()).count();
    let served: Vec<&RoundOutcome> = outcomes.iter().filter(|o| !o.outage).collect();
    let mean_depth = if served.is_empty() {
        0.0
    } else {
        served.iter().map(|o| o.depth as f64).sum::<f64>() / served.len() as f64
    };
    let (lo, hi) = wilson_interval(correct, n);
    AccuracyRow {
        experiment: exp.config.name.clone(),
        scheme: scheme.name(),
        axis: axis.as_str().into(),
        axis_value: value,
        accuracy: correct as f64 / n as f64,
        ci_low: lo,
        ci_high: hi,
        mean_depth,
        mean_active: outcomes.iter().map(|o| o.active_count as f64).sum::<f64>() / n as f64,
        outage_rate: (n - served.len()) as f64 / n as f64,
        rounds: n,
        seed: exp.config.seed,
    }
}

/// Rows of a sweep plus per-round correctness for paired comparisons.
#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<AccuracyRow>,
    pub correct: Vec<Vec<bool>>,
    /// Per-round outcomes aligned with `rows`.
    pub outcomes: Vec<Vec<RoundOutcome>>,
}

impl SweepReport {
    pub fn find(&self, scheme: &str, axis_value: f64) -> Option<(&AccuracyRow, &[bool])> {
        self.rows
            .iter()
            .zip(&self.correct)
            .find(|(r, _)| r.scheme == scheme && r.axis_value == axis_value)
            .map(|(r, c)| (r, c.as_slice()))
    }

    /// Scheme with the highest accuracy averaged over sweep points.
    pub fn best_scheme(&self) -> Option<(String, f64, f64)> {
        let mut acc: Vec<(String, f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match acc.iter_mut().find(|a| a.0 == r.scheme) {
                Some(a) => {
                    a.1 += r.accuracy;
                    a.2 += r.mean_depth;
                    a.3 += 1;
                }
                None => acc.push((r.scheme.clone(), r.accuracy, r.mean_depth, 1)),
            }
        }
        acc.into_iter()
            .map(|(s, a, d, n)| (s, a / n as f64, d / n as f64))
            .fold(None, |best: Option<(String, f64, f64)>, x| match best {
                Some(b) if b.1 >= x.1 => Some(b),
                _ => Some(x),
            })
    }
}

/// Values of `axis` taken from the config when it sweeps that axis.
pub fn sweep_values(config: &ExperimentConfig, axis: Axis) -> Result<Vec<f64>> {
    match &config.sweep {
        Some(s) if s.axis != axis => Err(Error::param(format!(
            "config sweeps '{}' but '{}' was requested",
            s.axis.as_str(),
            axis.as_str()
        ))),
        Some(s) => Ok(s.values.clone().unwrap_or_else(|| axis.default_values())),
        None => Ok(axis.default_values()),
    }
}

/// Runs every scheme at every point of the config's sweep.
pub fn run_sweep(exp: &Experiment) -> Result<SweepReport> {
    let axis = exp
        .config
        .sweep
        .as_ref()
        .map(|s| s.axis)
        .ok_or_else(|| Error::param("config has no [sweep] section"))?;
    let values = sweep_values(&exp.config, axis)?;
    run_sweep_axis(exp, axis, &values)
}

/// Runs every scheme at each value of `axis`. On the depth axis the fixed
/// scheme takes the swept depth.
pub fn run_sweep_axis(exp: &Experiment, axis: Axis, values: &[f64]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::param("empty sweep grid"));
    }
    let mut rows = Vec::new();
    let mut correct = Vec::new();
    let mut all = Vec::new();
    for (i, &value) in values.iter().enumerate() {
        let settings = exp.point_settings(axis, value)?;
        let sim = PointSimulator::new(exp, i as u64, settings);
        let schemes: Vec<SchemeSpec> = match settings.fixed_depth {
            Some(s) => std::iter::once(SchemeSpec::FixedDepth(s))
                .chain(exp.config.schemes.iter().copied().filter(|x| !matches!(x, SchemeSpec::FixedDepth(_))))
                .collect(),
            None => exp.config.schemes.clone(),
        };
        for scheme in schemes {
            let outcomes = sim.run_scheme(scheme, exp.config.rounds)?;
            rows.push(summarize(exp, scheme, axis, value, &outcomes));
            correct.push(outcomes.iter().map(|o| o.correct()).collect());
            all.push(outcomes);
        }
    }
    Ok(SweepReport {
        rows,
        correct,
        outcomes: all,
    })
}

/// Header of the results CSV.
pub const RESULTS_HEADER: [&str; 10] = [
    "experiment",
    "scheme",
    "axis",
    "axis_value",
    "accuracy",
    "ci_low",
    "ci_high",
    "mean_depth",
    "outage_rate",
    "seed",
];

pub fn write_results_csv<W: Write>(writer: W, rows: &[AccuracyRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.scheme.clone(),
            r.axis.clone(),
            format!("{}", r.axis_value),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.ci_low),
            format!("{:.6}", r.ci_high),
            format!("{:.4}", r.mean_depth),
            format!("{:.6}", r.outage_rate),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<results>", e))?;
    Ok(())
}

/// One depth of the tradeoff scan.
#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffRow {
    pub sir_db: f64,
    pub depth: usize,
    pub gain: usize,
    pub correct: usize,
    pub rounds: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub receive_dg: f64,
    pub phi_hat: f64,
    pub phi_tilde: f64,
}

/// Accuracy and gains for every depth `S = 1..D` with `G = ⌊D/S⌋`, a
/// fixed number of active sensors, and common random numbers across
/// depths.
pub fn tradeoff_scan(exp: &Experiment, sir_db: f64, active: usize, rounds: usize) -> Result<Vec<TradeoffRow>> {
    if rounds == 0 || active == 0 {
        return Err(Error::param("rounds and active sensors must be positive"));
    }
    let d = exp.dim();
    let p0 = exp.config.channel.alignment_power;
    let policy = PowerPolicy::from_sir_db(p0, sir_db, 0.0)?;
    let settings = PointSettings {
        sensors: active,
        policy,
        fixed_depth: None,
    };
    let sim = PointSimulator::new(exp, TRADEOFF_TAG, settings);
    let plans: Vec<Arc<LinearPlan>> = (1..=d).map(|s| sim.eigen_plan(s, d / s, active)).collect::<Result<_>>()?;
    let master = derive(exp.config.seed, &[TRADEOFF_TAG, sir_db.to_bits(), active as u64]);
    let counts = (0..rounds as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<u64>> {
            let draw = sim.draw(derive(master, &[r]), active, ChannelRound::all_active(active))?;
            plans
                .iter()
                .map(|p| Ok((sim.transmit(p, &draw)? == draw.label) as u64))
                .collect()
        })
        .try_reduce(
            || vec![0u64; d],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    let params = exp.params(active, db_to_linear(sir_db))?;
    (1..=d)
        .map(|s| {
            let g = d / s;
            let c = counts[s - 1] as usize;
            let (lo, hi) = wilson_interval(c, rounds);
            Ok(TradeoffRow {
                sir_db,
                depth: s,
                gain: g,
                correct: c,
                rounds,
                accuracy: c as f64 / rounds as f64,
                ci_low: lo,
                ci_high: hi,
                receive_dg: receive_dg_diagonal(&exp.curve, s, g, &params)?,
                phi_hat: phi_lower_bound(&exp.curve, s, g, &params)?,
                phi_tilde: phi_tilde(s as f64, &exp.curve, &params)?,
            })
        })
        .collect()
}

pub fn write_tradeoff_csv<W: Write>(writer: W, rows: &[TradeoffRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "sir_db", "S", "G", "accuracy", "ci_low", "ci_high", "receive_dg", "phi_hat", "phi_tilde",
    ])?;
    for r in rows {
        w.write_record([
            format!("{}", r.sir_db),
            r.depth.to_string(),
            r.gain.to_string(),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.ci_low),
            format!("{:.6}", r.ci_high),
            format!("{:.8}", r.receive_dg),
            format!("{:.8}", r.phi_hat),
            format!("{:.8}", r.phi_tilde),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<tradeoff>", e))?;
    Ok(())
}

/// Closed-form depth at one channel condition.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthRow {
    pub axis: &'static str,
    pub axis_value: f64,
    pub active_count: usize,
    pub sir_db: f64,
    pub decision: BreathingDecision,
}

/// Optimal depth over an SIR grid at `active` sensors and over an
/// active-count grid at `sir_db`.
pub fn optimal_depth_table(
    exp: &Experiment,
    sir_grid: &[f64],
    active: usize,
    active_grid: &[usize],
    sir_db: f64,
) -> Result<Vec<DepthRow>> {
    let mut rows = Vec::new();
    for &db in sir_grid {
        let decision = optimal_breathing_depth(&exp.curve, &exp.params(active, db_to_linear(db))?);
        rows.push(DepthRow {
            axis: "sir",
            axis_value: db,
            active_count: active,
            sir_db: db,
            decision,
        });
    }
    for &k in active_grid {
        let decision = optimal_breathing_depth(&exp.curve, &exp.params(k, db_to_linear(sir_db))?);
        rows.push(DepthRow {
            axis: "active",
            axis_value: k as f64,
            active_count: k,
            sir_db,
            decision,
        });
    }
    Ok(rows)
}

pub fn write_depth_csv<W: Write>(writer: W, rows: &[DepthRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["axis", "axis_value", "active_count", "sir_db", "S", "G", "phi_tilde"])?;
    for r in rows {
        w.write_record([
            r.axis.to_string(),
            format!("{}", r.axis_value),
            r.active_count.to_string(),
            format!("{}", r.sir_db),
            r.decision.depth.to_string(),
            r.decision.gain.to_string(),
            format!("{:.8}", r.decision.surrogate_value),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<optimal depth>", e))?;
    Ok(())
}

/// Output of the generic-classifier pipeline.
#[derive(Clone, Debug)]
pub struct GenericCurves {
    pub profile: ImportanceProfile,
    pub comp: CurveEstimate,
    pub spread: CurveEstimate,
    pub tables: CnnDgTables,
    pub decision: BreathingDecision,
    pub norm_var: f64,
}

/// Importance profile, both Monte Carlo curves, the tables and the
/// tabulated depth for the Mahalanobis oracle on the experiment model.
/// `norm_var` defaults to the empirical variance of the training views.
pub fn generic_curves(
    exp: &Experiment,
    active: usize,
    sir_db: f64,
    norm_var: Option<f64>,
) -> Result<GenericCurves> {
    let cfg = &exp.config.generic;
    let d = exp.dim();
    let l = exp.model.num_classes();
    let oracle = MahalanobisOracle::new(exp.model.clone())?;
    let mapping = DgMapping::new(
        cfg.alpha.unwrap_or(1.0 / (l as f64 - 1.0)),
        cfg.beta.unwrap_or(2.0),
    )?;
    let seed = exp.config.seed;
    let batches = collect_training_batches(&oracle, cfg.training_objects, active, derive(seed, &[0x7a1e]));
    let profile = feature_importance(&batches, l)?;
    let norm_var = match norm_var {
        Some(v) => v,
        None => {
            let views: Vec<DVector<f64>> = batches.iter().flat_map(|b| b.views.iter().cloned()).collect();
            let all: Vec<usize> = (0..d).collect();
            fit_normalization_empirical(&views, &CompressionMatrix::selection(d, &all)?)?.variance()
        }
    };
    let trial_seed = derive(seed, &[0x7e57]);
    let depths: Vec<usize> = (1..=d).collect();
    let comp = estimate_compression_dg_curve(&oracle, &profile, active, &depths, cfg.trials, mapping, trial_seed)?;
    let spread = estimate_spread_dg_curve(
        &oracle,
        active,
        db_to_linear(sir_db),
        norm_var,
        &spread_grid(d),
        cfg.trials,
        mapping,
        trial_seed,
    )?;
    let tables = CnnDgTables::from_estimates(&comp, &spread, mapping)?;
    let decision = optimal_depth_generic(&tables);
    Ok(GenericCurves {
        profile,
        comp,
        spread,
        tables,
        decision,
        norm_var,
    })
}
