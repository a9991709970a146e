//! End-to-end fitting: initialisation, optimisation, and prediction for each
//! model kind.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};
use crate::kernels::{Floors, HyperParams};
use crate::models::{
    cglb_objective, cglb_predict, cglb_predictive_v, elbo, exact_lml, exact_predict, iterative_with_probes, pack,
    rademacher_probes, sgpr_predict, unpack, Objective, Prediction, VARIANCE_FLOOR,
};
use crate::nystrom::greedy_select;
use crate::optimizer::{maximize_observed, Evaluation, OptimResult, OptimizerConfig, TraceRecord};
use crate::pcg::{VCache, EPS_PREDICT, EPS_TRAIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Exact,
    Sgpr,
    Cglb,
    Iterative,
}

impl ModelKind {
    pub fn is_sparse(self) -> bool {
        matches!(self, ModelKind::Sgpr | ModelKind::Cglb)
    }

    /// Lower bounds on the positive hyperparameters.
    pub fn floors(self) -> Floors {
        match self {
            ModelKind::Iterative => Floors::uniform(1e-4),
            _ => Floors::uniform(1e-6),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Number of inducing points for the sparse models.
    pub m: usize,
    /// Whether the inducing inputs are optimised along with the
    /// hyperparameters.
    pub train_inducing: bool,
    pub eps_train: f64,
    pub eps_predict: f64,
    /// Probe count for the iterative baseline; probes are drawn once per run.
    pub probes: usize,
    pub cg_tol: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Cglb,
            m: 16,
            train_inducing: true,
            eps_train: EPS_TRAIN,
            eps_predict: EPS_PREDICT,
            probes: 16,
            cg_tol: 1e-2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind.is_sparse() && self.m == 0 {
            return Err(GpError::InvalidArgument("m must be at least 1".into()));
        }
        if !(self.eps_train > 0.0 && self.eps_predict > 0.0) {
            return Err(GpError::InvalidArgument("CG tolerances must be positive".into()));
        }
        if self.kind == ModelKind::Iterative && (self.probes == 0 || !(self.cg_tol > 0.0)) {
            return Err(GpError::InvalidArgument(
                "iterative model needs probes >= 1 and cg_tol > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Fitted parameters plus the training data needed for prediction.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub theta: HyperParams,
    pub z: Option<DMatrix<f64>>,
    /// CG solution at the prediction tolerance (CGLB only).
    pub v: Option<DVector<f64>>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Serializable snapshot of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelState {
    pub kind: ModelKind,
    pub variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise: f64,
    pub mean: f64,
    /// Unconstrained parameters in the flat layout; authoritative on reload.
    pub raw: Vec<f64>,
    pub z: Option<Vec<Vec<f64>>>,
    pub v: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub optim: OptimResult,
    pub initial_objective: f64,
    pub inducing_degenerate: bool,
}

/// Fits a model of the configured kind to `(x, y)`.
///
/// `observer` sees every trace record as it is produced, so callers can
/// stream the trace and keep it if optimisation later fails.
pub fn train<O>(
    cfg: &ModelConfig,
    opt: &OptimizerConfig,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    seed: u64,
    observer: O,
) -> Result<TrainOutcome>
where
    O: FnMut(&TraceRecord),
{
    cfg.validate()?;
    check_dim(x.nrows(), y.len(), "targets")?;
    let n = x.nrows();
    let d = x.ncols();
    if n == 0 || d == 0 {
        return Err(GpError::InvalidArgument("empty training set".into()));
    }
    let floors = cfg.kind.floors();
    let theta0 = HyperParams::initial(d, floors);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut degenerate = false;
    let z0 = if cfg.kind.is_sparse() {
        let set = greedy_select(x, &theta0, cfg.m.min(n), rng.random_range(0..n))?;
        degenerate = set.degenerate;
        Some(set.z)
    } else {
        None
    };
    let train_z = cfg.kind.is_sparse() && cfg.train_inducing;
    let fixed_z = z0.clone();
    let p0 = pack(&theta0, if train_z { z0.as_ref() } else { None });

    let unpack_all = |p: &[f64]| -> Result<(HyperParams, Option<DMatrix<f64>>)> {
        let (t, z) = unpack(p, d, floors)?;
        Ok((t, if train_z { z } else { fixed_z.clone() }))
    };
    let trim = |o: Objective| -> Evaluation {
        let nt = d + 3;
        let mut grad = o.grad;
        if !train_z {
            grad.truncate(nt);
        }
        Evaluation {
            value: o.value,
            grad,
            cg_iters: o.diagnostics.cg_iters,
        }
    };

    let mut cache = VCache::new();
    let probes = (cfg.kind == ModelKind::Iterative).then(|| rademacher_probes(n, cfg.probes, &mut rng));
    let mut objective = |p: &[f64]| -> Result<Evaluation> {
        let (t, z) = unpack_all(p)?;
        let o = match cfg.kind {
            ModelKind::Exact => exact_lml(&t, x, y)?,
            ModelKind::Sgpr => elbo(&t, z.as_ref().expect("sparse"), x, y)?,
            ModelKind::Cglb => cglb_objective(&t, z.as_ref().expect("sparse"), x, y, &mut cache, cfg.eps_train)?,
            ModelKind::Iterative => iterative_with_probes(&t, x, y, probes.as_deref().expect("drawn"), cfg.cg_tol)?,
        };
        Ok(trim(o))
    };

    let optim = maximize_observed(&mut objective, &p0, opt, observer)?;
    let initial_objective = optim.trace.records.first().map(|r| r.objective).unwrap_or(f64::NAN);
    let (theta, z) = unpack_all(&optim.x)?;
    let v = if cfg.kind == ModelKind::Cglb {
        let z = z.as_ref().expect("sparse");
        Some(cglb_predictive_v(&theta, z, x, y, cache.last_v(), cfg.eps_predict)?.v)
    } else {
        None
    };

    Ok(TrainOutcome {
        model: TrainedModel {
            kind: cfg.kind,
            theta,
            z,
            v,
            x: x.clone(),
            y: y.clone(),
        },
        optim,
        initial_objective,
        inducing_degenerate: degenerate,
    })
}

impl TrainedModel {
    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<Prediction> {
        match self.kind {
            ModelKind::Exact | ModelKind::Iterative => exact_predict(&self.theta, &self.x, &self.y, xs),
            ModelKind::Sgpr => sgpr_predict(&self.theta, self.inducing()?, &self.x, &self.y, xs),
            ModelKind::Cglb => {
                let v = self
                    .v
                    .as_ref()
                    .ok_or_else(|| GpError::InvalidArgument("CGLB model without a solution vector".into()))?;
                cglb_predict(&self.theta, self.inducing()?, &self.x, &self.y, v, xs)
            }
        }
    }

    fn inducing(&self) -> Result<&DMatrix<f64>> {
        self.z
            .as_ref()
            .ok_or_else(|| GpError::InvalidArgument("sparse model without inducing inputs".into()))
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            kind: self.kind,
            variance: self.theta.variance(),
            lengthscales: self.theta.lengthscales(),
            noise: self.theta.noise(),
            mean: self.theta.mean(),
            raw: self.theta.to_unconstrained(),
            z: self
                .z
                .as_ref()
                .map(|z| (0..z.nrows()).map(|i| z.row(i).iter().copied().collect()).collect()),
            v: self.v.as_ref().map(|v| v.iter().copied().collect()),
        }
    }

    /// Rebuilds a model from a snapshot and its training data.
    pub fn from_state(state: &ModelState, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        check_dim(x.nrows(), y.len(), "targets")?;
        let theta = HyperParams::from_unconstrained(&state.raw, state.kind.floors())?;
        check_dim(theta.input_dim(), x.ncols(), "X columns")?;
        let z = match &state.z {
            Some(rows) => {
                let m = rows.len();
                let d = x.ncols();
                if rows.iter().any(|r| r.len() != d) {
                    return Err(GpError::DimensionMismatch {
                        expected: d,
                        got: rows.iter().map(|r| r.len()).find(|&l| l != d).unwrap_or(0),
                        context: "inducing input width",
                    });
                }
                Some(DMatrix::from_fn(m, d, |i, j| rows[i][j]))
            }
            None => None,
        };
        let v = match &state.v {
            Some(v) => {
                check_dim(x.nrows(), v.len(), "solution vector")?;
                Some(DVector::from_column_slice(v))
            }
            None => None,
        };
        Ok(TrainedModel {
            kind: state.kind,
            theta,
            z,
            v,
            x,
            y,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub nlpd: f64,
}

/// Root mean squared error of predictive means.
pub fn rmse(mean: &DVector<f64>, y: &DVector<f64>) -> f64 {
    ((mean - y).norm_squared() / y.len() as f64).sqrt()
}

/// Mean negative log density of `y` under independent normals with the
/// given means and (observation) variances; variances are clamped.
pub fn nlpd(mean: &DVector<f64>, variance: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let total: f64 = (0..y.len())
        .map(|i| {
            let var = variance[i].max(VARIANCE_FLOOR);
            0.5 * (ln2pi + var.ln()) + 0.5 * (y[i] - mean[i]).powi(2) / var
        })
        .sum();
    total / y.len() as f64
}

/// RMSE and NLPD of a prediction against held-out targets; NLPD uses the
/// observation variance.
pub fn evaluate(pred: &Prediction, y: &DVector<f64>) -> Result<Metrics> {
    check_dim(y.len(), pred.mean.len(), "prediction length")?;
    if y.is_empty() {
        return Err(GpError::InvalidArgument("no test targets".into()));
    }
    Ok(Metrics {
        rmse: rmse(&pred.mean, y),
        nlpd: nlpd(&pred.mean, &pred.variance_noisy(), y),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::exact_lml_value;

    fn sine(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: DMatrix<f64> = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let y = DVector::from_fn(n, |i, _| (2.0 * x[(i, 0)]).sin() + 0.1 * rng.random_range(-1.0..1.0));
        (x, y)
    }

    fn short() -> OptimizerConfig {
        OptimizerConfig {
            max_steps: 60,
            ..Default::default()
        }
    }

    #[test]
    fn cglb_training_ascends_and_is_reproducible() {
        let (x, y) = sine(200, 1);
        let cfg = ModelConfig {
            kind: ModelKind::Cglb,
            m: 16,
            ..Default::default()
        };
        let a = train(&cfg, &short(), &x, &y, 7, |_| {}).unwrap();
        assert!(a.optim.value >= a.initial_objective);
        let b = train(&cfg, &short(), &x, &y, 7, |_| {}).unwrap();
        let va: Vec<f64> = a.optim.trace.records.iter().map(|r| r.objective).collect();
        let vb: Vec<f64> = b.optim.trace.records.iter().map(|r| r.objective).collect();
        assert_eq!(va, vb);
        assert!(a.model.v.is_some());
    }

    #[test]
    fn every_kind_trains_and_predicts() {
        let (x, y) = sine(80, 2);
        let (xs, ys) = sine(40, 3);
        for kind in [ModelKind::Exact, ModelKind::Sgpr, ModelKind::Cglb, ModelKind::Iterative] {
            let cfg = ModelConfig {
                kind,
                m: 10,
                ..Default::default()
            };
            let out = train(&cfg, &short(), &x, &y, 0, |_| {}).unwrap();
            let p = out.model.predict(&xs).unwrap();
            let m = evaluate(&p, &ys).unwrap();
            assert!(m.rmse < 0.5, "{kind:?}: rmse {}", m.rmse);
            assert!(m.nlpd.is_finite());
            // exact LML improved over the initial point
            let init = exact_lml_value(&HyperParams::initial(1, kind.floors()), &x, &y).unwrap();
            assert!(exact_lml_value(&out.model.theta, &x, &y).unwrap() > init, "{kind:?}");
        }
    }

    #[test]
    fn observer_sees_every_record() {
        let (x, y) = sine(50, 4);
        let cfg = ModelConfig {
            kind: ModelKind::Sgpr,
            m: 8,
            ..Default::default()
        };
        let mut seen = Vec::new();
        let out = train(&cfg, &short(), &x, &y, 0, |r| seen.push(r.clone())).unwrap();
        assert_eq!(seen, out.optim.trace.records);
    }

    #[test]
    fn state_round_trip_predicts_identically() {
        let (x, y) = sine(60, 5);
        let cfg = ModelConfig {
            kind: ModelKind::Cglb,
            m: 8,
            ..Default::default()
        };
        let out = train(&cfg, &short(), &x, &y, 0, |_| {}).unwrap();
        let state = out.model.state();
        let back = TrainedModel::from_state(&state, x.clone(), y.clone()).unwrap();
        let xs = DMatrix::from_fn(5, 1, |i, _| i as f64 * 0.5 - 1.0);
        assert_eq!(out.model.predict(&xs).unwrap(), back.predict(&xs).unwrap());
    }

    #[test]
    fn fixed_inducing_inputs_stay_put() {
        let (x, y) = sine(60, 6);
        let cfg = ModelConfig {
            kind: ModelKind::Sgpr,
            m: 6,
            train_inducing: false,
            ..Default::default()
        };
        let out = train(&cfg, &short(), &x, &y, 0, |_| {}).unwrap();
        assert_eq!(out.optim.x.len(), 4);
        let z0 = greedy_select(&x, &HyperParams::initial(1, cfg.kind.floors()), 6, {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            rng.random_range(0..60)
        })
        .unwrap()
        .z;
        assert_eq!(out.model.z.unwrap(), z0);
    }

    #[test]
    fn perfect_unit_variance_prediction_metrics() {
        let y = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let p = Prediction {
            mean: y.clone(),
            variance: DVector::from_element(3, 0.75),
            noise: 0.25,
        };
        let m = evaluate(&p, &y).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert!((m.nlpd - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn calibrated_variance_beats_inflated() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = DVector::from_fn(500, |_, _| {
            let u: f64 = rng.random_range(-1.0..1.0);
            u * 3f64.sqrt()
        });
        let mean = DVector::zeros(500);
        let calibrated = nlpd(&mean, &DVector::from_element(500, 1.0), &y);
        let inflated = nlpd(&mean, &DVector::from_element(500, 10.0), &y);
        assert!(calibrated < inflated);
    }

    #[test]
    fn rejects_zero_inducing_points() {
        let cfg = ModelConfig {
            kind: ModelKind::Cglb,
            m: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
