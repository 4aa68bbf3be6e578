//! Sequential model-based search over the two contrast weights.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

pub const INITIAL_POINT: (f64, f64) = (5.0, 5.0);
pub const LENGTH_SCALE: f64 = 2.0;
pub const OBSERVATION_NOISE: f64 = 1e-6;
pub const CANDIDATES_PER_ITER: usize = 256;
const REFINE_STARTS: usize = 4;
const REFINE_STEPS: usize = 24;

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("invalid search box: {0}")]
    BadBox(String),
    #[error("trace file {path}: {reason}")]
    Trace { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub budget: usize,
}

impl Default for SearchBox {
    fn default() -> Self {
        Self {
            alpha_range: (0.0, 10.0),
            beta_range: (0.0, 10.0),
            budget: 30,
        }
    }
}

impl SearchBox {
    pub fn validate(&self) -> Result<(), TunerError> {
        for (name, (lo, hi)) in [("alpha", self.alpha_range), ("beta", self.beta_range)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(TunerError::BadBox(format!("{name} range [{lo}, {hi}]")));
            }
        }
        if self.budget == 0 {
            return Err(TunerError::BadBox("budget must be at least 1".into()));
        }
        Ok(())
    }

    fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.alpha_range.0, self.alpha_range.1),
            p[1].clamp(self.beta_range.0, self.beta_range.1),
        ]
    }

    fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        [u(rng, self.alpha_range), u(rng, self.beta_range)]
    }
}

/// One objective evaluation. A failed evaluation has value `-inf`, stored as
/// `null` on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub alpha: f64,
    pub beta: f64,
    #[serde(with = "crate::serde_ext::neg_inf_null")]
    pub objective_value: f64,
    pub eval_index: usize,
}

impl Trial {
    pub fn failed(&self) -> bool {
        !self.objective_value.is_finite()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    GaussianProcess,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub best: Trial,
    pub trace: Vec<Trial>,
}

/// Gaussian-process posterior with a squared-exponential kernel over
/// standardized observations.
pub struct GpSurrogate {
    xs: Vec<[f64; 2]>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    weights: DVector<f64>,
    y_mean: f64,
    y_std: f64,
    best: f64,
}

pub fn se_kernel(a: [f64; 2], b: [f64; 2], length_scale: f64) -> f64 {
    let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    (-d2 / (2.0 * length_scale * length_scale)).exp()
}

impl GpSurrogate {
    /// `None` when there are no points or the kernel matrix cannot be
    /// factored even with extra jitter.
    pub fn fit(xs: &[[f64; 2]], ys: &[f64]) -> Option<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return None;
        }
        let n = xs.len();
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(n, ys.iter().map(|v| (v - y_mean) / y_std));
        let mut noise = OBSERVATION_NOISE;
        for _ in 0..6 {
            let k = DMatrix::from_fn(n, n, |i, j| se_kernel(xs[i], xs[j], LENGTH_SCALE) + if i == j { noise } else { 0.0 });
            if let Some(chol) = k.cholesky() {
                let weights = chol.solve(&y);
                return Some(Self {
                    xs: xs.to_vec(),
                    chol,
                    weights,
                    y_mean,
                    y_std,
                    best: y.max(),
                });
            }
            noise *= 10.0;
        }
        None
    }

    /// Posterior mean and standard deviation in standardized units.
    fn predict_std(&self, x: [f64; 2]) -> (f64, f64) {
        let k = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| se_kernel(*xi, x, LENGTH_SCALE)));
        let mu = k.dot(&self.weights);
        let v = self.chol.solve(&k);
        let var = (1.0 - k.dot(&v)).max(0.0);
        (mu, var.sqrt())
    }

    /// Posterior mean and standard deviation in objective units.
    pub fn predict(&self, x: [f64; 2]) -> (f64, f64) {
        let (mu, sd) = self.predict_std(x);
        (self.y_mean + self.y_std * mu, self.y_std * sd)
    }

    /// Expected improvement over the best standardized observation.
    fn acquisition(&self, x: [f64; 2]) -> f64 {
        let (mu, sd) = self.predict_std(x);
        expected_improvement(mu, sd, self.best)
    }
}

/// Expected improvement of a Gaussian `N(mu, sd²)` over `best` (maximization).
pub fn expected_improvement(mu: f64, sd: f64, best: f64) -> f64 {
    let normal = Normal::standard();
    let gain = mu - best;
    if sd < 1e-12 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    gain * normal.cdf(z) + sd * normal.pdf(z)
}

fn propose(gp: &GpSurrogate, bx: &SearchBox, rng: &mut impl Rng) -> [f64; 2] {
    let ei = |p: [f64; 2]| gp.acquisition(p);
    let mut scored: Vec<([f64; 2], f64)> = (0..CANDIDATES_PER_ITER)
        .map(|_| {
            let p = bx.sample(rng);
            (p, ei(p))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let span = [
        (bx.alpha_range.1 - bx.alpha_range.0).max(1e-12),
        (bx.beta_range.1 - bx.beta_range.0).max(1e-12),
    ];
    let mut winner = scored[0];
    for &(start, start_ei) in scored.iter().take(REFINE_STARTS) {
        let (mut p, mut v) = (start, start_ei);
        let mut step = 0.05;
        for _ in 0..REFINE_STEPS {
            let mut moved = false;
            for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
                let q = bx.clamp([p[0] + dx * step * span[0], p[1] + dy * step * span[1]]);
                let qv = ei(q);
                if qv > v {
                    p = q;
                    v = qv;
                    moved = true;
                }
            }
            if !moved {
                step *= 0.5;
            }
        }
        if v > winner.1 {
            winner = (p, v);
        }
    }
    winner.0
}

/// Maximizes `objective` over the box. The first trial is always at (5, 5)
/// (clamped into the box). Errors and non-finite values become failed trials.
pub fn optimize<F>(mut objective: F, bx: &SearchBox, mode: SearchMode, rng: &mut impl Rng) -> Result<TuneOutcome, TunerError>
where
    F: FnMut(f64, f64) -> Result<f64, String>,
{
    bx.validate()?;
    let mut trace: Vec<Trial> = Vec::with_capacity(bx.budget);
    for i in 0..bx.budget {
        let p = if i == 0 {
            bx.clamp([INITIAL_POINT.0, INITIAL_POINT.1])
        } else {
            match mode {
                SearchMode::Random => bx.sample(rng),
                SearchMode::GaussianProcess => {
                    let ok: Vec<&Trial> = trace.iter().filter(|t| !t.failed()).collect();
                    let xs: Vec<[f64; 2]> = ok.iter().map(|t| [t.alpha, t.beta]).collect();
                    let ys: Vec<f64> = ok.iter().map(|t| t.objective_value).collect();
                    match GpSurrogate::fit(&xs, &ys) {
                        Some(gp) => propose(&gp, bx, rng),
                        None => bx.sample(rng),
                    }
                }
            }
        };
        let value = match objective(p[0], p[1]) {
            Ok(v) if v.is_finite() => v,
            Ok(v) => {
                warn!("trial {i} at ({:.4}, {:.4}) returned {v}", p[0], p[1]);
                f64::NEG_INFINITY
            }
            Err(e) => {
                warn!("trial {i} at ({:.4}, {:.4}) failed: {e}", p[0], p[1]);
                f64::NEG_INFINITY
            }
        };
        debug!("trial {i}: alpha={:.4} beta={:.4} value={value}", p[0], p[1]);
        trace.push(Trial {
            alpha: p[0],
            beta: p[1],
            objective_value: value,
            eval_index: i,
        });
    }
    let best = trace
        .iter()
        .fold(None::<&Trial>, |acc, t| match acc {
            Some(b) if b.objective_value >= t.objective_value => Some(b),
            _ => Some(t),
        })
        .cloned()
        .expect("budget >= 1");
    Ok(TuneOutcome { best, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub accuracy: f64,
    pub bleu: f64,
    pub ppl: f64,
    pub ppl_cap: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            accuracy: 1.0,
            bleu: 1.0,
            ppl: 1.0,
            ppl_cap: 500.0,
        }
    }
}

/// `w_acc·acc + w_bleu·(r_sbleu/100) − w_ppl·min(ppl/cap, 1)`.
pub fn composite_objective(accuracy: f64, r_sbleu: f64, ppl: f64, w: &ObjectiveWeights) -> f64 {
    w.accuracy * accuracy + w.bleu * (r_sbleu / 100.0) - w.ppl * (ppl / w.ppl_cap).min(1.0)
}

pub fn write_trace(path: &Path, trace: &[Trial]) -> Result<(), TunerError> {
    let err = |reason: String| TunerError::Trace {
        path: path.display().to_string(),
        reason,
    };
    let mut f = fs::File::create(path).map_err(|e| err(e.to_string()))?;
    for t in trace {
        let line = serde_json::to_string(t).map_err(|e| err(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| err(e.to_string()))?;
    }
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<Trial>, TunerError> {
    let err = |reason: String| TunerError::Trace {
        path: path.display().to_string(),
        reason,
    };
    let f = fs::File::open(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}
