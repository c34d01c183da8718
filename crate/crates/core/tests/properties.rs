use airbreath::config::SchemeSpec;
use airbreath::dg::{
    brute_force_depth, g, g_prime, incremental_dg_decomposition, optimal_breathing_depth, phi_lower_bound,
    phi_tilde, psi, receive_dg_diagonal, zeta, SurrogateParams,
};
use airbreath::generic::{accuracy_to_dg, dg_to_accuracy, feature_importance, isotonic_nondecreasing, LabeledBatch};
use airbreath::gmm::{DgCurve, GmmModel};
use airbreath::phy::{
    aircomp_round, compress, despread_denormalize, normalize, denormalize, spread, ChannelRound,
    CompressionMatrix, FreshInterference, NormalizationStats, PnSequence, PowerPolicy,
};
use airbreath::special::{q_function, q_inverse};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn curve_strategy(max_dim: usize) -> impl Strategy<Value = DgCurve> {
    (1..=max_dim).prop_flat_map(|d| {
        (
            prop::collection::vec(-3.0f64..3.0, d),
            prop::collection::vec(0.05f64..5.0, d),
        )
            .prop_map(|(sep, eig)| DgCurve::new(sep, eig).unwrap())
    })
}

fn params_for(curve: &DgCurve, k: usize, sir_db: f64, norm_var: f64) -> SurrogateParams {
    SurrogateParams::new(k, 10f64.powf(sir_db / 10.0), norm_var, curve.min_eigenvalue(), curve.dim()).unwrap()
}

fn setup() -> impl Strategy<Value = (DgCurve, SurrogateParams)> {
    (curve_strategy(40), 1usize..=20, -30.0f64..30.0, 0.1f64..5.0)
        .prop_map(|(c, k, db, v)| {
            let p = params_for(&c, k, db, v);
            (c, p)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn zeta_is_nonincreasing((curve, params) in setup()) {
        let d = curve.dim() as f64;
        let mut prev = zeta(1.0, &curve, &params).unwrap();
        for i in 1..=200 {
            let x = (1.0 + (d - 1.0) * i as f64 / 200.0).min(d);
            let z = zeta(x, &curve, &params).unwrap();
            prop_assert!(z <= prev + 1e-9 * (1.0 + prev.abs()));
            prev = z;
        }
    }

    #[test]
    fn closed_form_depth_is_integer_argmax((curve, params) in setup()) {
        let dec = optimal_breathing_depth(&curve, &params);
        let best = (1..=curve.dim())
            .map(|s| phi_tilde(s as f64, &curve, &params).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(dec.surrogate_value >= best - 1e-12 * best.abs().max(1.0));
        prop_assert_eq!(dec.gain, curve.dim() / dec.depth);
    }

    #[test]
    fn brute_force_on_surrogate_matches_closed_form((curve, params) in setup()) {
        let dec = optimal_breathing_depth(&curve, &params);
        let bf = brute_force_depth(|s, _| phi_tilde(s as f64, &curve, &params).unwrap(), curve.dim(), false).unwrap();
        prop_assert!((bf.surrogate_value - dec.surrogate_value).abs() <= 1e-12 * bf.surrogate_value.abs().max(1.0));
    }

    #[test]
    fn surrogate_is_unimodal_over_integers((curve, params) in setup()) {
        let v: Vec<f64> = (1..=curve.dim()).map(|s| phi_tilde(s as f64, &curve, &params).unwrap()).collect();
        let tol = 1e-12 * v.iter().fold(1.0f64, |a, b| a.max(b.abs()));
        let mut fell = false;
        for w in v.windows(2) {
            if w[1] < w[0] - tol {
                fell = true;
            } else {
                prop_assert!(!(fell && w[1] > w[0] + tol), "rises after falling: {:?}", v);
            }
        }
    }

    #[test]
    fn psi_increments_average_neighbouring_gains(curve in curve_strategy(40)) {
        let w = curve.gains();
        let d = w.len();
        for s in 1..=d {
            let next = if s < d { w[s] } else { w[d - 1] };
            let inc = psi(s as f64, &curve).unwrap() - psi(s as f64 - 1.0, &curve).unwrap();
            prop_assert!((inc - 0.5 * (w[s - 1] + next)).abs() <= 1e-12 * (1.0 + w[0]));
        }
    }

    #[test]
    fn g_is_continuous_at_knots(curve in curve_strategy(40)) {
        let d = curve.dim();
        for k in 1..d {
            let left = g(k as f64 - 1e-9, &curve).unwrap();
            let right = g(k as f64, &curve).unwrap();
            prop_assert!((left - right).abs() <= 1e-7 * (1.0 + curve.gains()[0]));
            prop_assert!((right - curve.gains()[k]).abs() <= 1e-12 * (1.0 + curve.gains()[0]));
        }
    }

    #[test]
    fn psi_derivative_matches_finite_differences(curve in curve_strategy(40), u in 0.01f64..0.99) {
        let d = curve.dim() as f64;
        let t = u * d;
        let h = 1e-5;
        prop_assume!(t > h && t < d - h);
        let fd = (psi(t + h, &curve).unwrap() - psi(t - h, &curve).unwrap()) / (2.0 * h);
        prop_assert!((fd - g(t, &curve).unwrap()).abs() <= 1e-6 * (1.0 + curve.gains()[0]));
        let fd2 = (g(t + h, &curve).unwrap() - g(t - h, &curve).unwrap()) / (2.0 * h);
        prop_assert!((fd2 - g_prime(t, &curve).unwrap()).abs() <= 1e-5 * (1.0 + curve.gains()[0]));
    }

    #[test]
    fn lower_bound_and_gain_monotonicity((curve, params) in setup(), s_frac in 0.0f64..1.0) {
        let d = curve.dim();
        let s = ((s_frac * d as f64) as usize).clamp(1, d);
        for gain in 1..=d {
            let exact = receive_dg_diagonal(&curve, s, gain, &params).unwrap();
            prop_assert!(phi_lower_bound(&curve, s, gain, &params).unwrap() <= exact * (1.0 + 1e-12));
            if gain > 1 {
                prop_assert!(exact >= receive_dg_diagonal(&curve, s, gain - 1, &params).unwrap() - 1e-9);
            }
        }
    }

    #[test]
    fn decomposition_telescopes((curve, params) in setup(), s_frac in 0.0f64..1.0) {
        let d = curve.dim();
        prop_assume!(d >= 2);
        let s = ((s_frac * (d - 1) as f64) as usize).clamp(1, d - 1);
        let (c, sp) = incremental_dg_decomposition(&curve, s, &params).unwrap();
        let total = receive_dg_diagonal(&curve, s + 1, d / (s + 1), &params).unwrap()
            - receive_dg_diagonal(&curve, s, d / s, &params).unwrap();
        prop_assert!((c + sp - total).abs() <= 1e-12);
        prop_assert!(c >= 0.0);
        prop_assert!(sp <= 0.0);
    }

    #[test]
    fn accuracy_dg_mapping_round_trips(a in 0.01f64..0.999, classes in 2usize..30, beta in 0.1f64..5.0) {
        let alpha = 1.0 / (classes as f64 - 1.0);
        let dg = accuracy_to_dg(a, alpha, beta).unwrap();
        prop_assert!((dg_to_accuracy(dg, alpha, beta) - a).abs() <= 1e-9);
    }

    #[test]
    fn q_inverse_residual_is_small(x in -8.0f64..8.0) {
        let p = q_function(x);
        prop_assert!((q_function(q_inverse(p).unwrap()) - p).abs() <= 1e-10 * p.min(1.0 - p) + 4.0 * f64::EPSILON * p);
        // Far left, Q(x) rounds toward one and x is no longer recoverable.
        if x >= -1.0 {
            prop_assert!((q_inverse(p).unwrap() - x).abs() <= 1e-8 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn isotonic_fit_is_monotone_and_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..60)) {
        let fit = isotonic_nondecreasing(&v);
        prop_assert!(fit.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        let again = isotonic_nondecreasing(&fit);
        for (a, b) in fit.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        // Sum is preserved by pooling.
        prop_assert!((fit.iter().sum::<f64>() - v.iter().sum::<f64>()).abs() <= 1e-9);
    }

    #[test]
    fn importance_is_permutation_equivariant(seed in any::<u64>(), d in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = DVector::from_fn(d, |i, _| 1.0 / (i + 1) as f64);
        let model = GmmModel::from_diagonal(vec![mu.clone(), -mu], vec![1.0; d]).unwrap();
        let batches: Vec<LabeledBatch> = (0..20)
            .map(|i| LabeledBatch { label: i % 2, views: model.sample_views(i % 2, 3, &mut rng).unwrap() })
            .collect();
        let mut perm: Vec<usize> = (0..d).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let permuted: Vec<LabeledBatch> = batches
            .iter()
            .map(|b| LabeledBatch {
                label: b.label,
                views: b.views.iter().map(|v| DVector::from_fn(d, |i, _| v[perm[i]])).collect(),
            })
            .collect();
        let a = feature_importance(&batches, 2).unwrap();
        let b = feature_importance(&permuted, 2).unwrap();
        for i in 0..d {
            prop_assert!((b.importance[i] - a.importance[perm[i]]).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalization_round_trips(v in prop::collection::vec(-100.0f64..100.0, 1..20), mean in -5.0f64..5.0, std in 0.1f64..10.0) {
        let x = DVector::from_vec(v);
        let stats = NormalizationStats::new(mean, std).unwrap();
        let back = denormalize(&normalize(&x, &stats), &stats);
        prop_assert!((back - &x).amax() <= 1e-10 * (1.0 + x.amax()));
    }

    #[test]
    fn clean_channel_delivers_mean_compressed_view(seed in any::<u64>(), k in 1usize..6, gain in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        let p = CompressionMatrix::selection(d, &[4, 0, 2]).unwrap();
        let stats = NormalizationStats::new(0.3, 1.7).unwrap();
        let views: Vec<DVector<f64>> = (0..k).map(|_| DVector::from_fn(d, |_, _| rand::Rng::gen_range(&mut rng, -3.0..3.0))).collect();
        let f = PnSequence::random(gain, &mut rng).unwrap();
        let policy = PowerPolicy::from_threshold(2.0, 0.0, 0.0).unwrap();
        let round = ChannelRound::all_active(k);
        let blocks: Vec<_> = views.iter().map(|x| spread(&normalize(&compress(x, &p).unwrap(), &stats), &f)).collect();
        let y = aircomp_round(&blocks, &round, &policy, &mut FreshInterference(rng.clone())).unwrap();
        let rx = despread_denormalize(&y, &f, &stats, &round, &policy).unwrap();
        let expected = views.iter().map(|x| compress(x, &p).unwrap()).fold(DVector::zeros(3), |a, b| a + b) / k as f64;
        prop_assert!((rx.despread - expected).amax() <= 1e-10);
    }

    #[test]
    fn scheme_names_round_trip(s in 1usize..200, pick in 0usize..5) {
        let scheme = [
            SchemeSpec::AirBreath,
            SchemeSpec::BruteForce,
            SchemeSpec::NoAirBreathing,
            SchemeSpec::FixedDepth(s),
            SchemeSpec::RandomAirBreathing,
        ][pick];
        prop_assert_eq!(scheme.name().parse::<SchemeSpec>().unwrap(), scheme);
    }
}
