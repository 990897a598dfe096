use proptest::prelude::*;
use rqr_core::data::{
    conditional_quantile_oracle, gen_synthetic, load_csv, split, write_csv, CsvOptions, Dataset,
    SyntheticSpec,
};
use rqr_core::eval::{build_report, empirical_coverage, frobenius_distance, EvalReport};
use rqr_core::losses::QuantileLevel;
use rqr_core::net;
use rqr_core::trainers::{fit_reference, train, Method, TrainConfig};

fn level(a: f64) -> QuantileLevel {
    QuantileLevel::new(a).unwrap()
}

#[test]
fn binned_sample_quantiles_follow_the_oracle() {
    let spec = SyntheticSpec {
        n: 100_000,
        outlier_fraction: 0.0,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap();
    let bins = 20;
    let width = (spec.x_high - spec.x_low) / bins as f64;
    for b in 0..bins {
        let lo = spec.x_low + b as f64 * width;
        let rows: Vec<usize> = (0..data.len())
            .filter(|&i| (lo..lo + width).contains(&data.row(i)[0]))
            .collect();
        for alpha in [0.25, 0.5, 0.75] {
            // offsets from the oracle curve; their α-quantile should be 0
            let mut d: Vec<f64> = rows
                .iter()
                .map(|&i| {
                    data.responses()[i]
                        - conditional_quantile_oracle(&spec, data.row(i)[0], level(alpha))
                })
                .collect();
            d.sort_by(f64::total_cmp);
            let q = d[((d.len() - 1) as f64 * alpha).round() as usize];
            assert!(q.abs() < 0.05, "bin {b} α={alpha}: {q}");
        }
    }
}

#[test]
fn oracle_coverage_is_binomially_tight() {
    let spec = SyntheticSpec {
        n: 20_000,
        outlier_fraction: 0.0,
        seed: 9,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap();
    let mut last = 0.0;
    for alpha in [0.25, 0.5, 0.75] {
        let oracle = |x: &[f64]| conditional_quantile_oracle(&spec, x[0], level(alpha));
        let c = empirical_coverage(&oracle, &data).unwrap();
        assert!((c - alpha).abs() <= 0.01, "α={alpha}: {c}");
        assert!(c >= last);
        last = c;
    }
}

#[test]
fn csv_round_trip_is_bit_identical() {
    let spec = SyntheticSpec {
        n: 500,
        outlier_fraction: 0.02,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    write_csv(&data, &path).unwrap();
    let back = load_csv(&path, &CsvOptions::default()).unwrap();
    assert_eq!(back.features(), data.features());
    assert_eq!(back.responses(), data.responses());
    assert_eq!(back.inlier_mask(), data.inlier_mask());
    let again = dir.path().join("e.csv");
    write_csv(&back, &again).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn split_carries_masks() {
    let data = gen_synthetic(&SyntheticSpec {
        n: 100,
        outlier_fraction: 0.1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (train, val) = split(&data, 0.2, 4).unwrap();
    assert_eq!((train.len(), val.len()), (80, 20));
    let outliers = |d: &Dataset| d.inlier_mask().unwrap().iter().filter(|m| !**m).count();
    assert_eq!(outliers(&train) + outliers(&val), 10);
}

proptest! {
    #[test]
    fn frobenius_is_a_metric(
        xs in prop::collection::vec(-5.0f64..5.0, 1..30),
        c in prop::array::uniform3(prop::array::uniform2(-3.0f64..3.0)),
    ) {
        let pts = Dataset::new("p", xs.clone(), 1, vec![0.0; xs.len()]).unwrap();
        let f: Vec<_> = c.iter().map(|&[a, b]| move |x: &[f64]| a * x[0] + b + (x[0] * a).sin()).collect();
        let d = |i: usize, j: usize| frobenius_distance(&f[i], &f[j], &pts).unwrap();
        prop_assert_eq!(d(0, 1), d(1, 0));
        prop_assert!(d(0, 2) <= d(0, 1) + d(1, 2) + 1e-12);
        prop_assert_eq!(d(0, 0), 0.0);
    }
}

fn small_report() -> (EvalReport, EvalReport) {
    let spec = SyntheticSpec {
        n: 200,
        outlier_fraction: 0.05,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec).unwrap();
    let arch = net::relu_mlp(1, 8);
    let mut cfg = TrainConfig::new(
        &[0.25, 0.5, 0.75],
        Method::BetaQr {
            beta: 1.0,
            sigma: 1.0,
        },
    )
    .unwrap();
    cfg.epochs = 10;
    cfg.batch_size = Some(32);
    let fit = train(&data, &arch, &cfg).unwrap();
    let reference = fit_reference(&data, &arch, &cfg).unwrap();
    let a = build_report(&[fit.clone()], &reference, &data).unwrap();
    let b = build_report(&[fit], &reference, &data).unwrap();
    let own = build_report(&[reference.clone()], &reference, &data).unwrap();
    assert!(own.records.iter().all(|r| r.frobenius_to_reference == 0.0));
    (a, b)
}

#[test]
fn report_is_deterministic_and_serialisable() {
    let (a, b) = small_report();
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 3);
    assert!(a.records.iter().all(|r| (0.0..=1.0).contains(&r.coverage)));
    assert!(a.records.iter().filter(|r| r.median_mse.is_some()).count() == 1);
    let text = serde_json::to_string(&a).unwrap();
    let back: EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, a);
}
