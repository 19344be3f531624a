//! Random hyperparameter search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{train, Method, Splits, TrainConfig};

/// Inclusive sampling ranges. Learning rates and weight decay are sampled
/// log-uniformly, the rest uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub er_learning_rate: (f64, f64),
    pub segments: (usize, usize),
    pub temperature: (f64, f64),
    pub gs_coefficient: (f64, f64),
    pub head_learning_rate: (f64, f64),
    pub dropout: (f64, f64),
    pub weight_decay: (f64, f64),
    pub layers: (usize, usize),
    pub hidden: (usize, usize),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            er_learning_rate: (1e-4, 1e3),
            segments: (10, 50),
            temperature: (1.0, 10.0),
            gs_coefficient: (0.1, 1.0),
            head_learning_rate: (1e-4, 1e-2),
            dropout: (0.1, 0.3),
            weight_decay: (1e-9, 1e-3),
            layers: (1, 3),
            hidden: (32, 256),
        }
    }
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    let v = (rng.random_range(lo.ln()..=hi.ln())).exp();
    v.clamp(lo, hi)
}

/// Draws one configuration from `space`, keeping everything not searched
/// from `base`. The segment count is redrawn until it divides the state size.
pub fn sample_config(base: &TrainConfig, space: &SearchSpace, rng: &mut impl Rng) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.head_learning_rate = log_uniform(rng, space.head_learning_rate);
    cfg.weight_decay = log_uniform(rng, space.weight_decay);
    cfg.dropout = rng.random_range(space.dropout.0..=space.dropout.1);
    cfg.layers = rng.random_range(space.layers.0..=space.layers.1);
    cfg.hidden = rng.random_range(space.hidden.0..=space.hidden.1);
    match base.method {
        Method::Gs => {
            cfg.gs_alpha = rng.random_range(space.gs_coefficient.0..=space.gs_coefficient.1);
            cfg.gs_beta = rng.random_range(space.gs_coefficient.0..=space.gs_coefficient.1);
        }
        Method::Raw => {}
        m => {
            cfg.er_learning_rate = log_uniform(rng, space.er_learning_rate);
            if m.variant().is_some_and(|v| v.has_matrix()) {
                cfg.temperature = rng.random_range(space.temperature.0..=space.temperature.1);
                let s = cfg.state_size();
                let (lo, hi) = space.segments;
                if !(lo..=hi).any(|m| m > 0 && s % m == 0) {
                    return Err(Error::Config(format!("no segment count in [{lo},{hi}] divides {s}")));
                }
                cfg.segments = Some(loop {
                    let m = rng.random_range(lo..=hi);
                    if m > 0 && s % m == 0 {
                        break m;
                    }
                });
            }
        }
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub sampler: String,
    pub config: TrainConfig,
    pub val_metric: Option<f64>,
    pub epochs: usize,
    /// Set when training diverged.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: TrainConfig,
    pub best_val_metric: f64,
    pub trials: Vec<Trial>,
}

/// Trains `budget` sampled configurations and keeps the best by validation
/// metric. Diverged trials are logged and skipped.
pub fn random_search(
    base: &TrainConfig,
    splits: &Splits,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    mut on_trial: impl FnMut(&Trial),
) -> Result<TuneResult> {
    if budget == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(budget);
    let mut best: Option<(f64, TrainConfig)> = None;
    for trial in 0..budget {
        let config = sample_config(base, space, &mut rng)?;
        let (val_metric, epochs, error) = match train(&config, splits) {
            Ok(m) => (Some(m.best_val_metric), m.history.len(), None),
            Err(e) if e.is_numeric() => (None, 0, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        if let Some(v) = val_metric {
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, config.clone()));
            }
        }
        let t = Trial { trial, sampler: "random".into(), config, val_metric, epochs, error };
        on_trial(&t);
        trials.push(t);
    }
    let (best_val_metric, best) =
        best.ok_or_else(|| Error::NonFinite("every trial diverged".into()))?;
    Ok(TuneResult { best, best_val_metric, trials })
}
