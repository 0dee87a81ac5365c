use std::path::Path;
use std::process::Command;

use proptest::prelude::*;

use dlj_core::experiments::config::{
    AdaptiveSpec, ExperimentConfig, ExperimentKind, GraphSpec, InputSpec, MatrixSpec, ThetaSpec,
};
use dlj_core::experiments::{parse_config, serialize_config};
use dlj_core::objective::ObjectiveKind;
use dlj_core::SolverConfig;

const STATIC: &str = include_str!("../configs/static.json");

fn dlj(args: &[&str], config: &Path, out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dlj"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn bundled_configs_parse() {
    for name in ["static", "dynamic", "dkf", "oracle_check"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(format!("{name}.json"));
        let text = std::fs::read_to_string(path).unwrap();
        let cfg = parse_config(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(parse_config(&serialize_config(&cfg)).unwrap(), cfg);
    }
}

#[test]
fn static_run_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, STATIC).unwrap();
    let out = dir.path().join("out");
    let o = dlj(&["--seed", "42", "--oracle-every", "1"], &cfg, &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(summary["seed"], 42);
    assert_eq!(summary["experiment"], "static");
    assert!(summary["K_measured"].as_u64().unwrap() <= 3);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "k,node,eig_index,q_node,q_star,abs_err,f_node,f_star");
    assert_eq!(csv.lines().count(), 1 + 6 * 10 * 2);
    assert!(out.join("summary.json").exists());
}

#[test]
fn quiet_prints_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, STATIC).unwrap();
    let o = dlj(&["--quiet"], &cfg, &dir.path().join("out"));
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(STATIC).unwrap();
    v["theta_bar"] = serde_json::json!(0.5);
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, v.to_string()).unwrap();
    let o = dlj(&[], &cfg, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("theta_bar"));

    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(dlj(&[], &cfg, &dir.path().join("out")).status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, STATIC).unwrap();
    // The output directory cannot be created under a regular file.
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let o = dlj(&["--quiet"], &cfg, &blocker.join("out"));
    assert_eq!(o.status.code(), Some(2));
}

fn spd_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (0.1f64..10.0, 0.1f64..10.0, -1.0f64..1.0).prop_map(|(a, b, r)| {
        let off = r * (a * b).sqrt() * 0.9;
        vec![vec![a, off], vec![off, b]]
    })
}

fn input_spec() -> impl Strategy<Value = InputSpec> {
    prop_oneof![
        (spd_rows(), any::<bool>()).prop_map(|(m, inv)| InputSpec::Static {
            matrix: if inv {
                MatrixSpec { p: None, p_inv: Some(m) }
            } else {
                MatrixSpec { p: Some(m), p_inv: None }
            },
        }),
        (spd_rows(), 0.0f64..0.5, 0.0f64..0.1, proptest::option::of(1.0f64..2.0)).prop_map(|(m, a, b, omega)| {
            InputSpec::Oscillatory {
                matrix: MatrixSpec { p: None, p_inv: Some(m) },
                a,
                b,
                omega,
                omega_range: [1.0, 2.0],
                plane: [0, 1],
            }
        }),
    ]
}

fn config_strategy() -> impl Strategy<Value = ExperimentConfig> {
    (
        2usize..6,
        any::<u64>(),
        prop_oneof![
            (1.0f64..3.0).prop_map(|t| Some(ThetaSpec::Fixed(t))),
            (0.1f64..3.0).prop_map(|k| Some(ThetaSpec::Adaptive { adaptive: AdaptiveSpec { kappa: k } })),
            Just(None),
        ],
        any::<bool>(),
        1usize..50,
        proptest::collection::vec(input_spec(), 6),
        (1usize..5000, 1e-12f64..1e-3),
    )
        .prop_map(|(n, seed, theta, neg, rounds, inputs, (max_iters, gap_tol))| ExperimentConfig {
            experiment: if neg { ExperimentKind::Static } else { ExperimentKind::Dynamic },
            seed,
            objective: if neg { ObjectiveKind::NegLogDet } else { ObjectiveKind::TraceInverse },
            theta_bar: theta,
            rounds,
            solver: SolverConfig { max_iters, gap_tol, line_search_shrink: 0.5 },
            graph: Some(GraphSpec::Explicit {
                n_nodes: n,
                edges: (1..n).map(|i| [i, i + 1]).collect(),
            }),
            inputs: inputs[..n].to_vec(),
            oracle_every: 1,
            tolerance: 1e-5,
            dkf: None,
            oracle_check: None,
            output: "out".into(),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trip(cfg in config_strategy()) {
        let text = serialize_config(&cfg);
        prop_assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}
