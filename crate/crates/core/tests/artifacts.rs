use drem_mrac::drem::DremConfig;
use drem_mrac::experiment::{load_config, read_trace_csv, write_trace_csv};
use drem_mrac::sim::{run, Precision, RunInfo, SimConfig, SimTrace};
use proptest::prelude::*;

fn info() -> RunInfo {
    RunInfo {
        integrator: "rk4",
        dt: 1e-3,
        t_final: 1.0,
        steps: 1000,
        precision: Precision::F64,
        law: "proposed".into(),
        x0_known: false,
        regressor_scale: 1.0,
    }
}

fn bits(t: &SimTrace) -> Vec<u64> {
    t.raw().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn simulated_trace_round_trips() {
    let cfg = load_config("builtin:benchmark").unwrap();
    let (p, r) = cfg.models().unwrap();
    let sim = SimConfig {
        dt: 1e-3,
        t_final: 0.5,
        drem: DremConfig::new(10.0, 1e4).unwrap(),
        ..SimConfig::default()
    };
    let tr = run(&sim, &p, &r).unwrap();
    let mut buf = Vec::new();
    write_trace_csv(&tr, &mut buf, 17).unwrap();
    let back = read_trace_csv(buf.as_slice()).unwrap();
    assert_eq!(back.columns(), tr.columns());
    assert_eq!(bits(&back), bits(&tr));
}

#[test]
fn low_precision_is_lossy() {
    let tr = SimTrace::from_rows(
        1,
        1,
        false,
        vec![vec![0.0; 11], vec![1.0 / 3.0; 11]],
        info(),
    )
    .unwrap();
    let mut buf = Vec::new();
    write_trace_csv(&tr, &mut buf, 6).unwrap();
    let back = read_trace_csv(buf.as_slice()).unwrap();
    assert_ne!(bits(&back), bits(&tr));
    assert!((back.t(1) - 1.0 / 3.0).abs() < 1e-6);
}

#[test]
fn header_without_oracle_columns() {
    let tr =
        SimTrace::from_rows(2, 1, false, vec![vec![0.5; 1 + 4 + 1 + 4 + 3 + 1]], info()).unwrap();
    let cols = tr.columns();
    assert!(!cols
        .iter()
        .any(|c| c == "thetatilde_norm" || c == "xi_norm"));
    let mut buf = Vec::new();
    write_trace_csv(&tr, &mut buf, 17).unwrap();
    let back = read_trace_csv(buf.as_slice()).unwrap();
    assert!(!back.has_oracle());
    assert_eq!((back.n(), back.m()), (2, 1));
}

fn value() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => any::<f64>().prop_filter("finite", |v| v.is_finite()),
        1 => Just(f64::NAN),
        1 => prop_oneof![Just(f64::INFINITY), Just(f64::NEG_INFINITY), Just(f64::MIN_POSITIVE / 8.0), Just(-0.0)],
    ]
}

proptest! {
    #[test]
    fn csv_round_trip_is_exact(n in 1usize..4, m in 1usize..3, oracle in any::<bool>(), seed in proptest::collection::vec(value(), 1..400)) {
        let width = 1 + 2 * n + m + 4 + (n + m) * m + if oracle { 2 } else { 0 } + 1;
        let rows: Vec<Vec<f64>> = seed.chunks(width).filter(|c| c.len() == width).map(|c| c.to_vec()).collect();
        prop_assume!(!rows.is_empty());
        let tr = SimTrace::from_rows(n, m, oracle, rows, info()).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&tr, &mut buf, 17).unwrap();
        let back = read_trace_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(bits(&back).len(), bits(&tr).len());
        for (a, b) in back.raw().iter().zip(tr.raw()) {
            prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()), "{} vs {}", a, b);
        }
    }
}
