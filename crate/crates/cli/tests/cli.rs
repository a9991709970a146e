use std::fs;
use std::path::Path;
use std::process::Command;

use cglb_cli::commands::{self, TrainSummary};
use cglb_cli::data::SyntheticKind;
use cglb_cli::Config;
use cglb_core::optimizer::TraceRecord;
use cglb_core::training::{ModelKind, ModelState, TrainedModel};

fn sine_config(dir: &Path, seed: u64) -> Config {
    let mut cfg = Config {
        seed,
        ..Default::default()
    };
    cfg.data.synthetic.kind = SyntheticKind::Sine;
    cfg.data.synthetic.n = 300;
    cfg.model.kind = ModelKind::Cglb;
    cfg.model.m = 16;
    cfg.optimizer.max_steps = 150;
    cfg.output.dir = dir.to_path_buf();
    cfg
}

fn read_trace(dir: &Path) -> Vec<TraceRecord> {
    fs::read_to_string(dir.join(commands::TRACE_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn sine_cglb_ascends_and_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = sine_config(tmp.path(), 3);
    let s = commands::run_train(&cfg).unwrap();
    assert_eq!(s.n_train, 200);
    assert!(s.final_objective >= s.initial_objective);
    for f in [
        commands::TRACE_FILE,
        commands::SUMMARY_FILE,
        commands::MODEL_FILE,
        commands::CONFIG_ECHO_FILE,
    ] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let trace = read_trace(tmp.path());
    assert_eq!(trace.len(), s.steps + 1);
    assert_eq!(trace.last().unwrap().objective, s.final_objective);
    let on_disk: TrainSummary =
        serde_json::from_str(&fs::read_to_string(tmp.path().join(commands::SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, s);
    // a sparse lower bound never exceeds the exact objective
    assert!(s.final_objective <= s.exact_lml.unwrap() + 1e-8);
}

#[test]
fn same_seed_gives_identical_trace() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    commands::run_train(&sine_config(a.path(), 5)).unwrap();
    commands::run_train(&sine_config(b.path(), 5)).unwrap();
    let (ta, tb) = (read_trace(a.path()), read_trace(b.path()));
    assert_eq!(ta.len(), tb.len());
    for (x, y) in ta.iter().zip(&tb) {
        assert_eq!(x.objective.to_bits(), y.objective.to_bits());
        assert_eq!(x.cg_iters, y.cg_iters);
        assert_eq!(x.params, y.params);
    }
}

#[test]
fn cg_iterations_fall_off_after_early_steps() {
    let tmp = tempfile::tempdir().unwrap();
    commands::run_train(&sine_config(tmp.path(), 7)).unwrap();
    let trace = read_trace(tmp.path());
    let q = trace.len() / 4;
    assert!(q >= 2, "trace too short: {}", trace.len());
    let first: usize = trace[..q].iter().map(|r| r.cg_iters).sum();
    let last: usize = trace[trace.len() - q..].iter().map(|r| r.cg_iters).sum();
    assert!(last <= first, "first quarter {first}, last quarter {last}");
}

#[test]
fn raw_rmse_matches_unstandardised_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = sine_config(tmp.path(), 11);
    cfg.optimizer.max_steps = 40;
    let s = commands::run_train(&cfg).unwrap();

    let split = commands::prepare_data(&cfg).unwrap();
    let state: ModelState =
        serde_json::from_str(&fs::read_to_string(tmp.path().join(commands::MODEL_FILE)).unwrap()).unwrap();
    let model = TrainedModel::from_state(&state, split.train.x.clone(), split.train.y.clone()).unwrap();
    let pred = model.predict(&split.test.x).unwrap();
    let mean_raw = split.stats.unscale_y(&pred.mean);
    let y_raw = split.stats.unscale_y(&split.test.y);
    let raw = ((&mean_raw - &y_raw).norm_squared() / y_raw.len() as f64).sqrt();
    assert!(
        (s.metrics.rmse_raw - raw).abs() <= 1e-10,
        "{} vs {raw}",
        s.metrics.rmse_raw
    );

    let ev = commands::run_evaluate(&cfg, None).unwrap();
    assert!((ev.rmse - s.metrics.rmse).abs() <= 1e-12);
    assert!((ev.nlpd - s.metrics.nlpd).abs() <= 1e-12);
    assert!((ev.rmse_raw - s.metrics.rmse_raw).abs() <= 1e-10);
}

#[test]
fn every_model_kind_trains_and_predicts() {
    for kind in [ModelKind::Exact, ModelKind::Sgpr, ModelKind::Cglb, ModelKind::Iterative] {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = sine_config(tmp.path(), 2);
        cfg.data.synthetic.n = 120;
        cfg.model.kind = kind;
        cfg.optimizer.max_steps = 30;
        let s = commands::run_train(&cfg).unwrap();
        assert!(s.metrics.rmse.is_finite() && s.metrics.nlpd.is_finite(), "{kind:?}");
        assert!(s.metrics.rmse < 1.0, "{kind:?} rmse {}", s.metrics.rmse);
        assert_eq!(s.m.is_some(), kind.is_sparse());
        commands::run_evaluate(&cfg, None).unwrap();
    }
}

#[test]
fn echoed_config_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = sine_config(tmp.path(), 13);
    cfg.optimizer.max_steps = 50;
    commands::run_train(&cfg).unwrap();
    let model_a = fs::read(tmp.path().join(commands::MODEL_FILE)).unwrap();
    let trace_a = read_trace(tmp.path());

    let echoed = Config::load(&tmp.path().join(commands::CONFIG_ECHO_FILE)).unwrap();
    assert_eq!(echoed, cfg);
    commands::run_train(&echoed).unwrap();
    assert_eq!(fs::read(tmp.path().join(commands::MODEL_FILE)).unwrap(), model_a);
    let trace_b = read_trace(tmp.path());
    assert_eq!(trace_a.len(), trace_b.len());
    for (a, b) in trace_a.iter().zip(&trace_b) {
        assert_eq!(
            (a.step, a.objective.to_bits(), a.cg_iters, &a.params),
            (b.step, b.objective.to_bits(), b.cg_iters, &b.params)
        );
    }
}

#[test]
fn multiple_seeds_write_separate_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = sine_config(tmp.path(), 20);
    cfg.data.synthetic.n = 90;
    cfg.optimizer.max_steps = 10;
    let runs = commands::run_train_seeds(&cfg, 3, 2).unwrap();
    assert_eq!(runs.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![20, 21, 22]);
    for s in &runs {
        let dir = tmp.path().join(format!("seed_{}", s.seed));
        assert!(dir.join(commands::SUMMARY_FILE).exists());
        let single = commands::run_train(&Config {
            output: cglb_cli::config::OutputConfig {
                dir: tmp.path().join("single"),
            },
            seed: s.seed,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(single.final_objective.to_bits(), s.final_objective.to_bits());
    }
}

fn bounds_config(dir: &Path, seed: u64) -> Config {
    let mut cfg = Config {
        seed,
        ..Default::default()
    };
    cfg.data.synthetic.n = 90;
    cfg.data.synthetic.kind = SyntheticKind::GpDraw;
    cfg.data.synthetic.d = 2;
    cfg.model.m = 8;
    cfg.compare.draws = 4;
    cfg.output.dir = dir.to_path_buf();
    cfg
}

#[test]
fn compare_bounds_rows_satisfy_ordering() {
    let tmp = tempfile::tempdir().unwrap();
    let rows = commands::run_compare_bounds(&bounds_config(tmp.path(), 1)).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0].n, 60);
    for r in &rows {
        assert!(r.ordering_ok, "{r:?}");
    }
    for r in rows.iter().filter(|r| r.inducing == "full") {
        for v in [r.logdet_lower_top, r.logdet_waterfill, r.logdet_amgm, r.logdet_trace] {
            assert!((v - r.logdet_exact).abs() <= 1e-6, "{r:?}");
        }
    }
    let text = fs::read_to_string(tmp.path().join(commands::BOUNDS_FILE)).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().unwrap().clone();
    assert!(header.iter().any(|h| h == "ordering_ok"));
    assert_eq!(rdr.records().count(), 8);
}

#[test]
fn compare_bounds_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    commands::run_compare_bounds(&bounds_config(a.path(), 4)).unwrap();
    commands::run_compare_bounds(&bounds_config(b.path(), 4)).unwrap();
    assert_eq!(
        fs::read(a.path().join(commands::BOUNDS_FILE)).unwrap(),
        fs::read(b.path().join(commands::BOUNDS_FILE)).unwrap()
    );
}

#[test]
fn gradient_check_command_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = bounds_config(tmp.path(), 6);
    cfg.gradcheck.draws = 2;
    let rows = commands::run_check_gradients(&cfg).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.pass), "{rows:?}");
}

fn cglb(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cglb")).args(args).output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out_s = out.to_str().unwrap();

    let ok = cglb(&["--out", out_s, "train", "--m", "8", "--max-steps", "5"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let summary: TrainSummary = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(summary.m, Some(8));
    assert!(cglb(&["--out", out_s, "evaluate"]).status.success());

    let bad_cfg = tmp.path().join("bad.toml");
    fs::write(&bad_cfg, "[model]\nnot_a_key = 1\n").unwrap();
    assert_eq!(
        cglb(&["--config", bad_cfg.to_str().unwrap(), "train"]).status.code(),
        Some(2)
    );

    let missing = tmp.path().join("missing.csv");
    let csv_cfg = tmp.path().join("csv.toml");
    fs::write(
        &csv_cfg,
        format!("[data]\nsource = \"csv\"\npath = {:?}\n", missing.to_str().unwrap()),
    )
    .unwrap();
    assert_eq!(
        cglb(&["--config", csv_cfg.to_str().unwrap(), "--out", out_s, "train"])
            .status
            .code(),
        Some(2)
    );

    // a strict tolerance no finite-difference check can meet
    let strict = tmp.path().join("strict.toml");
    fs::write(
        &strict,
        "[data.synthetic]\nn = 60\n[model]\nm = 4\n[gradcheck]\ndraws = 1\ntolerance = 1e-300\n",
    )
    .unwrap();
    assert_eq!(
        cglb(&["--config", strict.to_str().unwrap(), "check-gradients"])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn csv_input_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("data.csv");
    let mut text = String::from("a,b,target\n");
    for i in 0..60 {
        let a = i as f64 * 0.1;
        let b = (i % 7) as f64;
        text.push_str(&format!("{a},{b},{}\n", a.sin() + 0.1 * b));
    }
    fs::write(&path, text).unwrap();
    let mut cfg = Config::default();
    cfg.data.source = cglb_cli::config::DataSource::Csv;
    cfg.data.path = Some(path);
    cfg.data.target = "target".into();
    cfg.model.m = 8;
    cfg.optimizer.max_steps = 30;
    cfg.output.dir = tmp.path().join("out");
    let s = commands::run_train(&cfg).unwrap();
    assert_eq!((s.n_train, s.n_test, s.d), (40, 20, 2));
    assert!(s.metrics.rmse < 0.5, "{}", s.metrics.rmse);
}
