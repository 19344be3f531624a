//! Baselines: the static GS update over bucketized features, and
//! raw standardized edge features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{EdgeEvent, FeatureStats};

/// Scalar forgetting factors and the bucket layout they apply to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsParams {
    pub alpha: f64,
    pub beta: f64,
    pub bucket_edges: Vec<Vec<f64>>,
    pub state_size: usize,
}

impl GsParams {
    pub fn new(alpha: f64, beta: f64, stats: &FeatureStats) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(0.1..=1.0).contains(&v) {
                return Err(Error::Config(format!("GS {name}={v} outside [0.1, 1]")));
            }
        }
        Ok(GsParams {
            alpha,
            beta,
            bucket_edges: stats.bucket_edges.clone(),
            state_size: stats.total_buckets(),
        })
    }
}

/// Index of the bucket holding `v`. Buckets are left-closed, so a value equal
/// to a cut point belongs to the bucket above it. Out-of-range values fall
/// into the extreme buckets.
pub fn bucket_index(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|&e| e <= v)
}

/// Positions of the ones in the concatenated per-feature one-hot vector.
pub fn bucketize(features: &[f64], bucket_edges: &[Vec<f64>]) -> Result<Vec<usize>> {
    if features.len() != bucket_edges.len() {
        return Err(Error::Shape(format!(
            "{} features for {} bucketed columns",
            features.len(),
            bucket_edges.len()
        )));
    }
    let mut offset = 0;
    let mut hot = Vec::with_capacity(features.len());
    for (&v, edges) in features.iter().zip(bucket_edges) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("feature value {v}")));
        }
        hot.push(offset + bucket_index(edges, v));
        offset += edges.len() + 1;
    }
    Ok(hot)
}

/// Dense form of [`bucketize`].
pub fn bucketize_dense(features: &[f64], bucket_edges: &[Vec<f64>]) -> Result<Vec<f64>> {
    let total: usize = bucket_edges.iter().map(|e| e.len() + 1).sum();
    let mut out = vec![0.0; total];
    for i in bucketize(features, bucket_edges)? {
        out[i] = 1.0;
    }
    Ok(out)
}

/// `S_t = β·S_{t−1} + (1−β)·((1−α)·δ(F_t) + α·S*_{t−1})`.
pub fn gs_update(params: &GsParams, s_prev: &[f64], s_star_prev: &[f64], delta: &[f64]) -> Vec<f64> {
    let (a, b) = (params.alpha, params.beta);
    s_prev
        .iter()
        .zip(s_star_prev)
        .zip(delta)
        .map(|((&s, &n), &d)| b * s + (1.0 - b) * ((1.0 - a) * d + a * n))
        .collect()
}

/// The event's own features, z-scored with train statistics.
pub fn raw_features(event: &EdgeEvent, stats: &FeatureStats) -> Vec<f64> {
    stats.standardize(&event.features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bucket_rule() {
        let edges = [0.0, 1.0, 2.0];
        assert_eq!(bucket_index(&edges, 1.5), 2);
        assert_eq!(bucket_index(&edges, -3.0), 0);
        assert_eq!(bucket_index(&edges, 1.0), 2);
        assert_eq!(bucket_index(&edges, 9.0), 3);
        let dense = bucketize_dense(&[1.5], &[edges.to_vec()]).unwrap();
        assert_eq!(dense, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(bucketize(&[f64::NAN], &[edges.to_vec()]).is_err());
    }

    #[test]
    fn update_cases() {
        let stats = FeatureStats { mean: vec![0.0], stddev: vec![1.0], bucket_edges: vec![vec![0.0]] };
        let p = |a, b| GsParams::new(a, b, &stats).unwrap();
        let prev = [0.3, 0.7];
        let star = [0.9, 0.1];
        let delta = [1.0, 0.0];
        assert_eq!(gs_update(&p(0.4, 1.0), &prev, &star, &delta), prev.to_vec());
        let q = GsParams { alpha: 0.0, beta: 0.0, ..p(0.5, 0.5) };
        assert_eq!(gs_update(&q, &prev, &star, &delta), delta.to_vec());
        assert_eq!(gs_update(&p(0.5, 0.5), &[1.0], &[0.0], &[1.0]), vec![0.75]);
        assert!(GsParams::new(0.05, 0.5, &stats).is_err());
    }

    #[test]
    fn raw_passthrough() {
        let stats = FeatureStats {
            mean: vec![0.0, 0.0, 5.0],
            stddev: vec![1.0, 1.0, 0.0],
            bucket_edges: vec![vec![], vec![], vec![]],
        };
        let e = EdgeEvent { src: 0, dst: 1, timestamp: 0.0, features: vec![0.1, -0.2, 5.0], label: None };
        assert_eq!(raw_features(&e, &stats), vec![0.1, -0.2, 0.0]);
    }

    proptest! {
        #[test]
        fn one_hot_has_one_per_feature(
            features in proptest::collection::vec(-10.0f64..10.0, 1..8),
            cuts in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 0..6), 8),
        ) {
            let edges: Vec<Vec<f64>> = cuts[..features.len()].iter().map(|c| {
                let mut c = c.clone();
                c.sort_by(f64::total_cmp);
                c.dedup();
                c
            }).collect();
            let dense = bucketize_dense(&features, &edges).unwrap();
            prop_assert_eq!(dense.iter().sum::<f64>(), features.len() as f64);
        }

        #[test]
        fn states_stay_in_unit_interval(
            a in 0.1f64..=1.0, b in 0.1f64..=1.0,
            steps in proptest::collection::vec((0usize..4, 0usize..4), 1..50),
        ) {
            let stats = FeatureStats { mean: vec![0.0], stddev: vec![1.0], bucket_edges: vec![vec![0.0, 1.0, 2.0]] };
            let p = GsParams::new(a, b, &stats).unwrap();
            let mut s = vec![vec![0.0; 4]; 2];
            for (hot, who) in steps {
                let mut delta = vec![0.0; 4];
                delta[hot] = 1.0;
                let (me, other) = (who % 2, 1 - who % 2);
                s[me] = gs_update(&p, &s[me], &s[other], &delta);
                prop_assert!(s[me].iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }
}
