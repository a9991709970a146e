//! The four subcommands, independent of argument parsing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cglb_core::bounds::{logdet_lower_top, logdet_upper_amgm, logdet_upper_trace, logdet_upper_waterfill, quad_bounds};
use cglb_core::kernels::{kernel_matrix_sym, HyperParams};
use cglb_core::linalg::{cholesky, JitterPolicy};
use cglb_core::models::{cglb_at, cglb_objective, elbo, exact_lml, exact_lml_value, pack, unpack};
use cglb_core::nystrom::{greedy_select, NystromFactor};
use cglb_core::optimizer::{check_grad, Termination};
use cglb_core::pcg::{default_max_iters, pcg_solve, VCache};
use cglb_core::training::{evaluate, rmse, train, ModelKind, ModelState, TrainedModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, DataSource};
use crate::data::{load_csv, split_standardize, synthetic, Split};
use crate::error::CliError;

pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const BOUNDS_FILE: &str = "bounds.csv";

/// Largest training set for which the exact LML at the fitted
/// hyperparameters is added to the summary.
const SUMMARY_EXACT_CAP: usize = 5000;

/// Loads or generates the dataset and returns the standardised split.
pub fn prepare_data(cfg: &Config) -> Result<Split, CliError> {
    let ds = match cfg.data.source {
        DataSource::Csv => {
            let path = cfg
                .data
                .path
                .as_ref()
                .ok_or_else(|| CliError::Config("data.path missing".into()))?;
            load_csv(path, &cfg.data.target)?
        }
        DataSource::Synthetic => synthetic(&cfg.data.synthetic, cfg.seed)?,
    };
    let split = split_standardize(&ds, cfg.data.split_fraction, cfg.seed)?;
    if split.train.len() < 2 || split.test.is_empty() {
        return Err(CliError::Config("split leaves too few points".into()));
    }
    Ok(split)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn echo_config(cfg: &Config) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output.dir)?;
    fs::write(cfg.output.dir.join(CONFIG_ECHO_FILE), cfg.to_toml())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub nlpd: f64,
    /// RMSE in the original target units, `rmse · std(y_train)`.
    pub rmse_raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise: f64,
    pub mean: f64,
}

impl From<&HyperParams> for Hyperparameters {
    fn from(t: &HyperParams) -> Self {
        Hyperparameters {
            variance: t.variance(),
            lengthscales: t.lengthscales(),
            noise: t.noise(),
            mean: t.mean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub kind: ModelKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
    pub m: Option<usize>,
    pub metrics: MetricsReport,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Exact log marginal likelihood at the fitted hyperparameters.
    pub exact_lml: Option<f64>,
    pub termination: Termination,
    pub steps: usize,
    pub evaluations: usize,
    pub total_cg_iters: usize,
    pub elapsed_s: f64,
    pub hyperparameters: Hyperparameters,
    pub inducing_degenerate: bool,
    pub warnings: Vec<String>,
}

/// Trains one model, writing the config echo, trace, model and summary
/// into `cfg.output.dir`.
pub fn run_train(cfg: &Config) -> Result<TrainSummary, CliError> {
    echo_config(cfg)?;
    let split = prepare_data(cfg)?;
    let dir = &cfg.output.dir;
    let mut trace = BufWriter::new(File::create(dir.join(TRACE_FILE))?);
    let mut write_error: Option<std::io::Error> = None;
    let outcome = train(
        &cfg.model,
        &cfg.optimizer,
        &split.train.x,
        &split.train.y,
        cfg.seed,
        |rec| {
            if write_error.is_some() {
                return;
            }
            let res = serde_json::to_writer(&mut trace, rec)
                .map_err(std::io::Error::other)
                .and_then(|_| trace.write_all(b"\n"))
                .and_then(|_| trace.flush());
            if let Err(e) = res {
                write_error = Some(e);
            }
        },
    );
    trace.flush()?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    let outcome = outcome?;
    let model = &outcome.model;

    let pred = model.predict(&split.test.x)?;
    let m = evaluate(&pred, &split.test.y)?;
    let exact = (split.train.len() <= SUMMARY_EXACT_CAP)
        .then(|| exact_lml_value(&model.theta, &split.train.x, &split.train.y))
        .transpose()?;
    let last = outcome.optim.trace.records.last();
    let summary = TrainSummary {
        kind: cfg.model.kind,
        seed: cfg.seed,
        n_train: split.train.len(),
        n_test: split.test.len(),
        d: split.train.dim(),
        m: model.z.as_ref().map(|z| z.nrows()),
        metrics: MetricsReport {
            rmse: m.rmse,
            nlpd: m.nlpd,
            rmse_raw: m.rmse * split.stats.y_std,
        },
        initial_objective: outcome.initial_objective,
        final_objective: outcome.optim.value,
        exact_lml: exact,
        termination: outcome.optim.termination,
        steps: outcome.optim.trace.len().saturating_sub(1),
        evaluations: outcome.optim.evaluations,
        total_cg_iters: outcome.optim.trace.records.iter().map(|r| r.cg_iters).sum(),
        elapsed_s: last.map(|r| r.elapsed_s).unwrap_or(0.0),
        hyperparameters: (&model.theta).into(),
        inducing_degenerate: outcome.inducing_degenerate,
        warnings: split.warnings.clone(),
    };
    write_json(&dir.join(MODEL_FILE), &model.state())?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Runs `count` trainings with seeds `cfg.seed, cfg.seed + 1, …`, each in
/// `<dir>/seed_<s>`, on up to `jobs` worker threads.
pub fn run_train_seeds(cfg: &Config, count: usize, jobs: usize) -> Result<Vec<TrainSummary>, CliError> {
    let configs: Vec<Config> = (0..count as u64)
        .map(|k| {
            let mut c = cfg.clone();
            c.seed = cfg.seed + k;
            c.output.dir = cfg.output.dir.join(format!("seed_{}", c.seed));
            c
        })
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrainSummary, CliError>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, count.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let r = run_train(&configs[i]);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every index visited"))
        .collect()
}

/// Reloads a saved model, predicts the held-out split and reports metrics.
pub fn run_evaluate(cfg: &Config, model_path: Option<&Path>) -> Result<MetricsReport, CliError> {
    let path: PathBuf = model_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output.dir.join(MODEL_FILE));
    let text =
        fs::read_to_string(&path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let state: ModelState = serde_json::from_str(&text)?;
    let split = prepare_data(cfg)?;
    let model = TrainedModel::from_state(&state, split.train.x.clone(), split.train.y.clone())?;
    let pred = model.predict(&split.test.x)?;
    let m = evaluate(&pred, &split.test.y)?;
    let raw = rmse(
        &split.stats.unscale_y(&pred.mean),
        &split.stats.unscale_y(&split.test.y),
    );
    let report = MetricsReport {
        rmse: m.rmse,
        nlpd: m.nlpd,
        rmse_raw: raw,
    };
    fs::create_dir_all(&cfg.output.dir)?;
    write_json(&cfg.output.dir.join(EVALUATION_FILE), &report)?;
    Ok(report)
}

/// Random hyperparameters for bound comparisons and gradient checks.
fn draw_theta(rng: &mut ChaCha8Rng, d: usize, kind: ModelKind) -> Result<HyperParams, CliError> {
    let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
    let log_noise: f64 = rng.random_range((1e-3f64).ln()..(0.5f64).ln());
    Ok(HyperParams::from_constrained(
        rng.random_range(0.5..2.0),
        &ls,
        log_noise.exp(),
        rng.random_range(-0.2..0.2),
        kind.floors(),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub draw: usize,
    pub inducing: String,
    pub n: usize,
    pub m: usize,
    pub variance: f64,
    pub noise: f64,
    pub lengthscales: Vec<f64>,
    pub logdet_exact: f64,
    pub logdet_lower_top: f64,
    pub logdet_waterfill: f64,
    pub logdet_amgm: f64,
    pub logdet_trace: f64,
    pub quad_exact: f64,
    pub quad_lower: f64,
    pub quad_upper: f64,
    pub cg_iters: usize,
    pub elbo: f64,
    pub cglb: f64,
    pub lml: f64,
    /// Every ordering among the columns holds within round-off.
    pub ordering_ok: bool,
}

fn le(a: f64, b: f64) -> bool {
    a <= b + 1e-8 * (1.0 + a.abs().max(b.abs()))
}

fn bound_row(
    draw: usize,
    label: &str,
    theta: &HyperParams,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    eps: f64,
) -> Result<BoundRow, CliError> {
    let n = x.nrows();
    let f = NystromFactor::build(x, z, theta)?;
    let mut k = kernel_matrix_sym(&theta.kernel(), x)?;
    k.add_diagonal(theta.noise());
    let chol = cholesky(&k, &JitterPolicy::none())?;
    let khat = k.into_matrix();
    let yc = y.add_scalar(-theta.mean());
    let quad_exact = yc.dot(&chol.solve_vec(&yc)?);
    let logdet_exact = chol.logdet();

    let st = pcg_solve(
        |v| &khat * v,
        |r| f.solve_q(r),
        &yc,
        &DVector::zeros(n),
        eps,
        default_max_iters(n),
    )?;
    let q = quad_bounds(&f, &yc, &st.v, &st.r)?;
    let c = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let row = BoundRow {
        draw,
        inducing: label.to_string(),
        n,
        m: z.nrows(),
        variance: theta.variance(),
        noise: theta.noise(),
        lengthscales: theta.lengthscales(),
        logdet_exact,
        logdet_lower_top: logdet_lower_top(&f)?,
        logdet_waterfill: logdet_upper_waterfill(&f)?,
        logdet_amgm: logdet_upper_amgm(&f),
        logdet_trace: logdet_upper_trace(&f),
        quad_exact,
        quad_lower: q.lower,
        quad_upper: q.upper,
        cg_iters: st.iters,
        elbo: elbo(theta, z, x, y)?.value,
        cglb: cglb_at(theta, z, x, y, &st.v)?.value,
        lml: c - 0.5 * quad_exact - 0.5 * logdet_exact,
        ordering_ok: false,
    };
    let ok = le(row.logdet_lower_top, row.logdet_exact)
        && le(row.logdet_exact, row.logdet_waterfill)
        && le(row.logdet_waterfill, row.logdet_amgm)
        && le(row.logdet_amgm, row.logdet_trace)
        && le(row.quad_lower, row.quad_exact)
        && le(row.quad_exact, row.quad_upper)
        && le(row.cglb, row.lml)
        && le(row.elbo, row.lml);
    Ok(BoundRow { ordering_ok: ok, ..row })
}

/// One row per hyperparameter draw (and per full-inducing variant) with
/// every log-determinant bound, the quadratic sandwich at the CG solution,
/// and the assembled objectives. Written to `bounds.csv`.
pub fn run_compare_bounds(cfg: &Config) -> Result<Vec<BoundRow>, CliError> {
    echo_config(cfg)?;
    let split = prepare_data(cfg)?;
    let (x, y) = (&split.train.x, &split.train.y);
    let n = x.nrows();
    if n > cfg.compare.max_n {
        return Err(CliError::Config(format!(
            "training split has {n} points, above compare.max_n = {}",
            cfg.compare.max_n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_b0d5);
    let mut rows = Vec::new();
    for draw in 0..cfg.compare.draws {
        let theta = draw_theta(&mut rng, x.ncols(), ModelKind::Cglb)?;
        let z = greedy_select(x, &theta, cfg.model.m.min(n), rng.random_range(0..n))?.z;
        rows.push(bound_row(draw, "greedy", &theta, &z, x, y, cfg.model.eps_train)?);
        if cfg.compare.include_full_inducing {
            rows.push(bound_row(draw, "full", &theta, x, x, y, cfg.model.eps_train)?);
        }
    }
    write_bounds_csv(&cfg.output.dir.join(BOUNDS_FILE), &rows, x.ncols())?;
    Ok(rows)
}

fn write_bounds_csv(path: &Path, rows: &[BoundRow], d: usize) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Io(e.into()))?;
    let mut header: Vec<String> = ["draw", "inducing", "n", "m", "variance", "noise"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..d).map(|j| format!("lengthscale_{j}")));
    header.extend(
        [
            "logdet_exact",
            "logdet_lower_top",
            "logdet_waterfill",
            "logdet_amgm",
            "logdet_trace",
            "quad_exact",
            "quad_lower",
            "quad_upper",
            "cg_iters",
            "elbo",
            "cglb",
            "lml",
            "ordering_ok",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    let csv_err = |e: csv::Error| CliError::Io(e.into());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.draw.to_string(),
            r.inducing.clone(),
            r.n.to_string(),
            r.m.to_string(),
            r.variance.to_string(),
            r.noise.to_string(),
        ];
        rec.extend(r.lengthscales.iter().map(|l| l.to_string()));
        rec.extend(
            [
                r.logdet_exact,
                r.logdet_lower_top,
                r.logdet_waterfill,
                r.logdet_amgm,
                r.logdet_trace,
                r.quad_exact,
                r.quad_lower,
                r.quad_upper,
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        rec.push(r.cg_iters.to_string());
        rec.extend([r.elbo, r.cglb, r.lml].iter().map(|v| v.to_string()));
        rec.push(r.ordering_ok.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub draw: usize,
    pub model: ModelKind,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Directional finite-difference checks of the exact, ELBO and CGLB
/// (frozen `v`) gradients at random hyperparameters and greedy inducing
/// inputs. Fails if any error exceeds the configured tolerance.
pub fn run_check_gradients(cfg: &Config) -> Result<Vec<GradCheckRow>, CliError> {
    let split = prepare_data(cfg)?;
    let (x, y) = (&split.train.x, &split.train.y);
    let (n, d) = (x.nrows(), x.ncols());
    let gc = &cfg.gradcheck;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x06ad_c4ec);
    let mut rows = Vec::new();
    for draw in 0..gc.draws {
        let theta = draw_theta(&mut rng, d, ModelKind::Cglb)?;
        let floors = theta.floors();
        let z = greedy_select(x, &theta, cfg.model.m.min(n), rng.random_range(0..n))?.z;
        let dir_seed = rng.random::<u64>();

        let exact = check_grad(
            |p| {
                let t = HyperParams::from_unconstrained(p, floors)?;
                let o = exact_lml(&t, x, y)?;
                Ok((o.value, o.grad))
            },
            &theta.to_unconstrained(),
            gc.step,
            dir_seed,
        )?;
        let p0 = pack(&theta, Some(&z));
        let sparse = |p: &[f64]| -> cglb_core::Result<(HyperParams, DMatrix<f64>)> {
            let (t, z) = unpack(p, d, floors)?;
            Ok((t, z.expect("packed with inducing inputs")))
        };
        let sgpr = check_grad(
            |p| {
                let (t, z) = sparse(p)?;
                let o = elbo(&t, &z, x, y)?;
                Ok((o.value, o.grad))
            },
            &p0,
            gc.step,
            dir_seed,
        )?;
        let mut cache = VCache::new();
        cglb_objective(&theta, &z, x, y, &mut cache, cfg.model.eps_train)?;
        let v = cache.last_v().expect("stored").clone();
        let cglb = check_grad(
            |p| {
                let (t, z) = sparse(p)?;
                let o = cglb_at(&t, &z, x, y, &v)?;
                Ok((o.value, o.grad))
            },
            &p0,
            gc.step,
            dir_seed,
        )?;
        for (model, err) in [
            (ModelKind::Exact, exact),
            (ModelKind::Sgpr, sgpr),
            (ModelKind::Cglb, cglb),
        ] {
            rows.push(GradCheckRow {
                draw,
                model,
                max_rel_error: err,
                pass: err <= gc.tolerance,
            });
        }
    }
    Ok(rows)
}
