use evade_core::{hns, iqm, paired_t_test, reproduce_paper_metrics, ScoreTables};
use proptest::prelude::*;

proptest! {
    #[test]
    fn hns_is_invariant_to_affine_rescaling(score in -1e3..1e3f64, random in -1e3..1e3f64, gap in 1.0..1e3f64, a in 0.1..10.0f64, b in -100.0..100.0f64) {
        let human = random + gap;
        let base = hns(score, random, human).unwrap();
        let scaled = hns(a * score + b, a * random + b, a * human + b).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9 * base.abs().max(1.0));
    }

    #[test]
    fn iqm_ignores_extreme_tails(mut values in prop::collection::vec(-10.0..10.0f64, 8..40), outlier in 1e3..1e9f64) {
        values.sort_by(f64::total_cmp);
        let before = iqm(&values).unwrap();
        let n = values.len();
        values[n - 1] = outlier;
        values[0] = -outlier;
        prop_assert!((iqm(&values).unwrap() - before).abs() < 1e-9);
    }
}

#[test]
fn hns_endpoints() {
    assert_eq!(hns(10.0, 10.0, 30.0).unwrap(), 0.0);
    assert_eq!(hns(30.0, 10.0, 30.0).unwrap(), 1.0);
    assert!(hns(1.0, 5.0, 5.0).is_err());
}

#[test]
fn paired_t_test_textbook_example() {
    // Differences 1,2,3,4,5: mean 3, sd sqrt(2.5), t = 3 / (sqrt(2.5)/sqrt(5)).
    let a = [2.0, 4.0, 6.0, 8.0, 10.0];
    let b = [1.0, 2.0, 3.0, 4.0, 5.0];
    let t = paired_t_test(&a, &b).unwrap();
    assert!((t.t - 4.242640687119285).abs() < 1e-12);
    assert_eq!(t.df, 4);
    // Closed-form Student-t CDF for 4 degrees of freedom.
    let u = 1.0 + t.t * t.t / 4.0;
    let cdf = 0.5 + 0.375 * (t.t / u.sqrt()) * (1.0 - t.t * t.t / (12.0 * u));
    assert!((t.p_one_tailed - (1.0 - cdf)).abs() < 1e-12, "{}", t.p_one_tailed);
    assert!(paired_t_test(&a, &a).is_err());
    assert!(paired_t_test(&a[..1], &b[..1]).is_err());
}

#[test]
fn bundled_tables_reproduce_every_aggregate() {
    let report = reproduce_paper_metrics(&ScoreTables::bundled().unwrap()).unwrap();
    for c in &report.checks {
        assert!(c.pass(), "{} = {} misses {:?}", c.name, c.value, c.target);
    }
    assert_eq!(report.check("simple30 wins vs evade").unwrap().value, 3.0);
    assert_eq!(report.check("simple30 losses vs evade").unwrap().value, 23.0);
}

#[test]
fn missing_tables_are_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(ScoreTables::load(dir.path()).is_err());
}
