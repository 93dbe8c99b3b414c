use epifnp::data::{eval_points, season_label, parse_season_label, Epiweek};
use epifnp::graph::{edge_probabilities, relaxed_value};
use epifnp::inference::PredictiveDistribution;
use epifnp::metrics::{calibration_curve, calibration_score, log_score_one, EvaluationRecord};
use epifnp::tape::Tape;
use epifnp::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn dist_with(draws: Vec<f64>) -> PredictiveDistribution {
    let n = draws.len();
    PredictiveDistribution {
        means: draws.clone(),
        log_vars: vec![0.0; n],
        draws,
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(t in (1usize..5, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c))) {
        let s = t.softmax_last();
        for r in 0..s.rows() {
            let row = s.row_slice(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn kernel_in_unit_interval(
        a in matrix(3, 4),
        b in matrix(2, 4),
        log_gamma in -4.0f64..1.0,
    ) {
        let tape = Tape::new();
        let g = tape.constant(Tensor::scalar(log_gamma.exp()).unwrap()).unwrap();
        let ra = tape.constant(a.clone()).unwrap();
        let rb = tape.constant(b).unwrap();
        let p = edge_probabilities(&g, &ra, &rb).unwrap().tensor();
        prop_assert_eq!(p.shape(), &[3, 2]);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let selfp = edge_probabilities(&g, &ra, &ra).unwrap().tensor();
        for i in 0..3 {
            prop_assert_eq!(selfp.get(i, i), 1.0);
        }
    }

    #[test]
    fn relaxed_edges_monotone_in_noise(p in 0.01f64..0.99, n1 in -5.0f64..5.0, n2 in -5.0f64..5.0) {
        let (lo, hi) = if n1 < n2 { (n1, n2) } else { (n2, n1) };
        let a = relaxed_value(p, 0.3, lo);
        let b = relaxed_value(p, 0.3, hi);
        prop_assert!(a <= b);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
    }

    #[test]
    fn intervals_nest_and_contain_median(draws in prop::collection::vec(-10.0f64..10.0, 1..200)) {
        let d = dist_with(draws);
        let levels: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        let iv = d.intervals(&levels).unwrap();
        let med = d.interval(1e-9).unwrap().lower;
        for w in iv.windows(2) {
            prop_assert!(w[1].lower <= w[0].lower && w[0].upper <= w[1].upper);
        }
        prop_assert!(iv.iter().all(|i| i.lower <= med + 1e-9 && med <= i.upper + 1e-9));
    }

    #[test]
    fn mixture_cdf_is_a_cdf(
        means in prop::collection::vec(-3.0f64..3.0, 1..8),
        ys in prop::collection::vec(-10.0f64..10.0, 2..10),
    ) {
        let d = dist_with(means);
        let mut ys = ys;
        ys.sort_by(f64::total_cmp);
        let cdf: Vec<f64> = ys.iter().map(|&y| d.cdf(y)).collect();
        prop_assert!(cdf.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(cdf.iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn calibration_curve_monotone_and_score_bounded(
        truths in prop::collection::vec(-3.0f64..3.0, 1..20),
        seed_draws in prop::collection::vec(-2.0f64..2.0, 10..40),
    ) {
        let records: Vec<EvaluationRecord> = truths
            .iter()
            .enumerate()
            .map(|(i, &t)| EvaluationRecord {
                season: "s".into(),
                week: i,
                horizon: 1,
                truth: t,
                distribution: dist_with(seed_draws.clone()),
            })
            .collect();
        let curve = calibration_curve(&records).unwrap();
        prop_assert!(curve.coverage.windows(2).all(|w| w[0] <= w[1]));
        let cs = calibration_score(&curve).unwrap();
        prop_assert!((0.0..=0.505 + 1e-12).contains(&cs));
    }

    #[test]
    fn log_score_nonnegative_and_capped(mean in -3.0f64..3.0, y in -50.0f64..50.0) {
        let d = PredictiveDistribution { means: vec![mean], log_vars: vec![0.0], draws: vec![mean] };
        let ls = log_score_one(&d, y);
        prop_assert!((0.0..=10.0).contains(&ls));
    }

    #[test]
    fn epiweeks_advance_strictly(year in 1990i32..2040, week in 1u32..=52) {
        let w = Epiweek::new(year, week).unwrap();
        let n = w.next();
        prop_assert!(n > w);
        prop_assert!(n.year == year || (n.year == year + 1 && n.week == 1));
    }

    #[test]
    fn season_labels_round_trip(year in 1950i32..2090) {
        prop_assert_eq!(parse_season_label(&season_label(year)).unwrap(), year);
    }

    #[test]
    fn eval_points_respect_horizon(len in 1usize..60, k in 1usize..6, first in 0usize..40) {
        for p in eval_points(len, k, first) {
            prop_assert!(p.prefix_len >= 1);
            prop_assert_eq!(p.prefix_len + k - 1, p.target_index);
            prop_assert!(p.target_index < len && p.target_index >= first);
        }
    }
}
