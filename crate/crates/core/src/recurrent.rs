//! The embedding-recurrent component.
//!
//! Each event updates a node state elementwise:
//!
//! ```text
//! S_t = β ⊙ S_{t-1} + (1 - β) ⊙ ((1 - α) ⊙ E + α ⊙ S*_{t-1})
//! ```
//!
//! where `S*` is the neighbour's state and `E` embeds the event features. For
//! the learnable variants `E` is the concatenation of `m` softmaxes, each over
//! an `h`-row slice of `W · F / T`.
//!
//! Training is forward mode: every node carries `dS/dα`, `dS/dβ` (length `s`)
//! and `dS/dW` restricted to the rows of each element's own segment
//! (`s × h × f`). Because the update never mixes state elements, these tables
//! are exact and cost `O(s·h·f)` per update.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{NodeEntry, RtrlJacobians, StoreDims};

/// Normalization constant for the divide-by-sum ablation.
pub const SUM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Vector coefficients, learnable softmax embedding, RTRL.
    Dgs,
    /// Vector coefficients over the static bucket embedding.
    DgsV,
    /// Scalar coefficients over the static bucket embedding.
    DgsS,
    /// Divide-by-sum normalization instead of softmax.
    DgsSum,
    /// Softmax embedding trained with one-update truncated backprop.
    DgsBp,
}

impl Variant {
    pub fn has_matrix(self) -> bool {
        matches!(self, Variant::Dgs | Variant::DgsSum | Variant::DgsBp)
    }

    pub fn scalar_coefficients(self) -> bool {
        self == Variant::DgsS
    }

    /// Whether per-node Jacobian tables are carried between updates.
    pub fn uses_rtrl(self) -> bool {
        self != Variant::DgsBp
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dgs => "dgs",
            Variant::DgsV => "dgs_v",
            Variant::DgsS => "dgs_s",
            Variant::DgsSum => "dgs_sum",
            Variant::DgsBp => "dgs_bp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgsParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `s × f`, row-major. Absent for the static-embedding variants.
    pub w: Option<Vec<f64>>,
    pub temperature: f64,
    pub segments: usize,
    pub rows_per_segment: usize,
    /// Width of the embedding input (`f`, plus one with the Δt feature).
    pub input_dim: usize,
    pub learning_rate: f64,
    pub variant: Variant,
}

/// The embedded event: `values` is the concatenation of per-segment outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedEmbedding {
    pub values: Vec<f64>,
    pub rows_per_segment: usize,
    /// Per-segment `Σz + ε` for divide-by-sum embeddings, empty otherwise.
    pub denominators: Vec<f64>,
}

impl SegmentedEmbedding {
    pub fn seg_probs(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.rows_per_segment.max(1))
    }
}

/// Parameter gradients, elementwise for α and β even when they are tied.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `s × f`; empty without an embedding matrix.
    pub w: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(params: &DgsParams) -> Self {
        let s = params.state_size();
        ParamGrads {
            alpha: vec![0.0; s],
            beta: vec![0.0; s],
            w: vec![0.0; params.w.as_ref().map_or(0, Vec::len)],
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self
            .alpha
            .iter_mut()
            .chain(self.beta.iter_mut())
            .chain(self.w.iter_mut())
            .zip(other.alpha.iter().chain(&other.beta).chain(&other.w))
        {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.beta).chain(&self.w).all(|g| g.is_finite())
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains a non-finite value")))
    }
}

fn project(w: &[f64], features: &[f64], scale: f64, out: &mut [f64]) {
    let f = features.len();
    for (z, row) in out.iter_mut().zip(w.chunks_exact(f)) {
        *z = row.iter().zip(features).map(|(a, b)| a * b).sum::<f64>() * scale;
    }
}

/// `softmax(W_k F / T)` per segment, stabilized by subtracting the segment max.
pub fn embed_features(
    w: &[f64],
    features: &[f64],
    temperature: f64,
    segments: usize,
) -> Result<SegmentedEmbedding> {
    let f = features.len();
    if f == 0 || w.len() % f != 0 || segments == 0 || (w.len() / f) % segments != 0 {
        return Err(Error::Shape(format!(
            "embedding matrix of {} entries incompatible with f={f}, m={segments}",
            w.len()
        )));
    }
    check_finite(features, "features")?;
    let s = w.len() / f;
    let h = s / segments;
    let mut values = vec![0.0; s];
    project(w, features, 1.0 / temperature, &mut values);
    check_finite(&values, "embedding logits")?;
    for seg in values.chunks_exact_mut(h) {
        let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in seg.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        seg.iter_mut().for_each(|v| *v /= total);
    }
    Ok(SegmentedEmbedding { values, rows_per_segment: h, denominators: Vec::new() })
}

/// `z / (Σz + ε)` per segment with `z = W_k F`.
pub fn embed_features_sum(
    w: &[f64],
    features: &[f64],
    segments: usize,
    epsilon: f64,
) -> Result<SegmentedEmbedding> {
    let f = features.len();
    if f == 0 || w.len() % f != 0 || segments == 0 || (w.len() / f) % segments != 0 {
        return Err(Error::Shape(format!(
            "embedding matrix of {} entries incompatible with f={f}, m={segments}",
            w.len()
        )));
    }
    check_finite(features, "features")?;
    let s = w.len() / f;
    let h = s / segments;
    let mut values = vec![0.0; s];
    project(w, features, 1.0, &mut values);
    let mut denominators = Vec::with_capacity(segments);
    for seg in values.chunks_exact_mut(h) {
        let d = seg.iter().sum::<f64>() + epsilon;
        seg.iter_mut().for_each(|v| *v /= d);
        denominators.push(d);
    }
    check_finite(&values, "divide-by-sum embedding")?;
    Ok(SegmentedEmbedding { values, rows_per_segment: h, denominators })
}

/// `∂E_i/∂W[j,c] = (δ_ij p_i − p_i p_j) F_c / T` for one softmax segment,
/// laid out `[i][j][c]`.
pub fn embed_jacobian(probs: &[f64], features: &[f64], temperature: f64) -> Vec<f64> {
    let (h, f) = (probs.len(), features.len());
    let mut out = vec![0.0; h * h * f];
    for i in 0..h {
        for j in 0..h {
            let delta = if i == j { probs[i] } else { 0.0 };
            let coef = (delta - probs[i] * probs[j]) / temperature;
            let cell = &mut out[(i * h + j) * f..(i * h + j + 1) * f];
            for (o, x) in cell.iter_mut().zip(features) {
                *o = coef * x;
            }
        }
    }
    out
}

/// `S_t = β⊙S_{t−1} + (1−β)⊙((1−α)⊙E + α⊙S*_{t−1})`.
pub fn state_update(
    alpha: &[f64],
    beta: &[f64],
    s_prev: &[f64],
    s_star_prev: &[f64],
    e: &[f64],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(s_prev.len());
    for i in 0..s_prev.len() {
        let (a, b) = (alpha[i], beta[i]);
        out.push(b * s_prev[i] + (1.0 - b) * ((1.0 - a) * e[i] + a * s_star_prev[i]));
    }
    out
}

impl DgsParams {
    /// Fresh parameters for a learnable-embedding variant: α, β uniform on
    /// [0,1] and `W` Gaussian with variance `1/f`.
    pub fn new_learnable(
        variant: Variant,
        state_size: usize,
        segments: usize,
        input_dim: usize,
        temperature: f64,
        learning_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !variant.has_matrix() {
            return Err(Error::Config(format!("{} has no embedding matrix", variant.name())));
        }
        let h = validate_config(state_size, segments, None)?;
        check_hyper(temperature, learning_rate)?;
        let normal = Normal::new(0.0, (1.0 / input_dim.max(1) as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let w = (0..state_size * input_dim).map(|_| normal.sample(rng)).collect();
        Ok(DgsParams {
            alpha: (0..state_size).map(|_| rng.random::<f64>()).collect(),
            beta: (0..state_size).map(|_| rng.random::<f64>()).collect(),
            w: Some(w),
            temperature,
            segments,
            rows_per_segment: h,
            input_dim,
            learning_rate,
            variant,
        })
    }

    /// Parameters for the static bucket-embedding variants; the state size is
    /// the total bucket count.
    pub fn new_static(
        variant: Variant,
        bucket_total: usize,
        learning_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if variant.has_matrix() {
            return Err(Error::Config(format!("{} needs an embedding matrix", variant.name())));
        }
        check_hyper(1.0, learning_rate)?;
        let (alpha, beta) = if variant.scalar_coefficients() {
            (vec![0.5; bucket_total], vec![0.5; bucket_total])
        } else {
            (
                (0..bucket_total).map(|_| rng.random::<f64>()).collect(),
                (0..bucket_total).map(|_| rng.random::<f64>()).collect(),
            )
        };
        Ok(DgsParams {
            alpha,
            beta,
            w: None,
            temperature: 1.0,
            segments: 1,
            rows_per_segment: bucket_total,
            input_dim: bucket_total,
            learning_rate,
            variant,
        })
    }

    pub fn state_size(&self) -> usize {
        self.alpha.len()
    }

    /// Store dimensions for `node_count` nodes; `h = f = 0` without a matrix.
    pub fn store_dims(&self, node_count: usize) -> StoreDims {
        if self.w.is_some() {
            StoreDims {
                s: self.state_size(),
                h: self.rows_per_segment,
                f: self.input_dim,
                node_count,
            }
        } else {
            StoreDims { s: self.state_size(), h: 0, f: 0, node_count }
        }
    }

    /// Learnable embedding parameters: `2s + s·f`, `2s` or `2`.
    pub fn parameter_count(&self) -> usize {
        if self.variant.scalar_coefficients() {
            2
        } else {
            2 * self.state_size() + self.w.as_ref().map_or(0, Vec::len)
        }
    }

    /// Embeds one event. `input` is the standardized feature vector for the
    /// matrix variants and the bucket one-hot vector for the static ones.
    pub fn embed(&self, input: &[f64]) -> Result<SegmentedEmbedding> {
        match (&self.w, self.variant) {
            (Some(w), Variant::DgsSum) => embed_features_sum(w, input, self.segments, SUM_EPSILON),
            (Some(w), _) => embed_features(w, input, self.temperature, self.segments),
            (None, _) => {
                if input.len() != self.state_size() {
                    return Err(Error::Shape(format!(
                        "static embedding of width {} for state size {}",
                        input.len(),
                        self.state_size()
                    )));
                }
                check_finite(input, "bucket vector")?;
                Ok(SegmentedEmbedding {
                    values: input.to_vec(),
                    rows_per_segment: input.len(),
                    denominators: Vec::new(),
                })
            }
        }
    }

    pub fn update_state(&self, s_prev: &[f64], s_star_prev: &[f64], e: &SegmentedEmbedding) -> Vec<f64> {
        state_update(&self.alpha, &self.beta, s_prev, s_star_prev, &e.values)
    }

    /// One event's update of a node: new state and, when `own` carries
    /// Jacobians, the propagated Jacobians.
    pub fn step(
        &self,
        own: &NodeEntry,
        neighbor: &NodeEntry,
        e: &SegmentedEmbedding,
        input: &[f64],
    ) -> Result<(Vec<f64>, Option<RtrlJacobians>)> {
        let state = self.update_state(&own.state, &neighbor.state, e);
        let jac = match (&own.jac, &neighbor.jac) {
            (Some(j), Some(jn)) => {
                Some(rtrl_propagate(self, (&own.state, j), (&neighbor.state, jn), e, input)?)
            }
            _ => None,
        };
        Ok((state, jac))
    }
}

fn check_hyper(temperature: f64, learning_rate: f64) -> Result<()> {
    if !(temperature >= 1.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature {temperature} must be >= 1")));
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::Config(format!("learning rate {learning_rate} must be > 0")));
    }
    Ok(())
}

/// Propagates the forward-mode Jacobians through one update. With
/// `u_i = (1−α_i)E_i + α_i S*_i`:
///
/// ```text
/// Jα'_i = β_i Jα_i + (1−β_i)(S*_i − E_i + α_i Jα*_i)
/// Jβ'_i = S_i − u_i + β_i Jβ_i + (1−β_i) α_i Jβ*_i
/// JW'_i = β_i JW_i + (1−β_i)((1−α_i) ∂E_i/∂W + α_i JW*_i)
/// ```
///
/// The `W` part only covers the rows of element `i`'s own segment.
pub fn rtrl_propagate(
    params: &DgsParams,
    own: (&[f64], &RtrlJacobians),
    neighbor: (&[f64], &RtrlJacobians),
    e: &SegmentedEmbedding,
    features: &[f64],
) -> Result<RtrlJacobians> {
    let s = params.state_size();
    let (s_prev, j) = own;
    let (s_star, jn) = neighbor;
    let (h, f) = if params.w.is_some() {
        (params.rows_per_segment, params.input_dim)
    } else {
        (0, 0)
    };
    let jw_len = s * h * f;
    if s_prev.len() != s
        || s_star.len() != s
        || e.values.len() != s
        || j.alpha.len() != s
        || jn.alpha.len() != s
        || j.beta.len() != s
        || jn.beta.len() != s
        || j.w.len() != jw_len
        || jn.w.len() != jw_len
        || (f > 0 && features.len() != f)
    {
        return Err(Error::Shape("rtrl_propagate operands do not match the parameters".into()));
    }

    let mut out = RtrlJacobians {
        alpha: Vec::with_capacity(s),
        beta: Vec::with_capacity(s),
        w: Vec::with_capacity(jw_len),
    };
    for i in 0..s {
        let (a, b, ei) = (params.alpha[i], params.beta[i], e.values[i]);
        let u = (1.0 - a) * ei + a * s_star[i];
        out.alpha.push(b * j.alpha[i] + (1.0 - b) * (s_star[i] - ei + a * jn.alpha[i]));
        out.beta.push(s_prev[i] - u + b * j.beta[i] + (1.0 - b) * a * jn.beta[i]);
    }
    if jw_len == 0 {
        return Ok(out);
    }

    let softmax = params.variant != Variant::DgsSum;
    let inv_t = 1.0 / params.temperature;
    for i in 0..s {
        let (a, b, ei) = (params.alpha[i], params.beta[i], e.values[i]);
        let k = i / h;
        let keep = b;
        let mix = (1.0 - b) * a;
        let local = (1.0 - b) * (1.0 - a);
        for r in 0..h {
            let er = e.values[k * h + r];
            let is_self = i == k * h + r;
            // ∂E_i/∂W[row r of segment k][c] = coef · F_c
            let coef = if softmax {
                inv_t * (if is_self { ei } else { 0.0 } - ei * er)
            } else {
                (if is_self { 1.0 } else { 0.0 } - ei) / e.denominators[k]
            };
            let lc = local * coef;
            let off = (i * h + r) * f;
            let own_row = &j.w[off..off + f];
            let nb_row = &jn.w[off..off + f];
            out.w.extend(
                own_row
                    .iter()
                    .zip(nb_row)
                    .zip(features)
                    .map(|((o, n), x)| keep * o + mix * n + lc * x),
            );
        }
    }
    Ok(out)
}

/// Chain rule from `g = dL/dS` through one node's Jacobians, accumulated into
/// `grads`.
pub fn accumulate_param_grads(
    params: &DgsParams,
    g: &[f64],
    j: &RtrlJacobians,
    grads: &mut ParamGrads,
) {
    let s = params.state_size();
    for i in 0..s {
        grads.alpha[i] += g[i] * j.alpha[i];
        grads.beta[i] += g[i] * j.beta[i];
    }
    if grads.w.is_empty() || j.w.is_empty() {
        return;
    }
    let (h, f) = (params.rows_per_segment, params.input_dim);
    for (i, &gi) in g.iter().enumerate().take(s) {
        if gi == 0.0 {
            continue;
        }
        let k = i / h;
        for r in 0..h {
            let row = k * h + r;
            let src = &j.w[(i * h + r) * f..(i * h + r + 1) * f];
            let dst = &mut grads.w[row * f..(row + 1) * f];
            for (d, x) in dst.iter_mut().zip(src) {
                *d += gi * x;
            }
        }
    }
}

/// `θ ← θ − η·grad/batch_size`, then α and β clamped to [0,1]. Tied scalar
/// coefficients receive the sum of their elementwise gradients.
pub fn sgd_step(params: &mut DgsParams, grads: &ParamGrads, batch_size: usize) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFinite("embedding gradient".into()));
    }
    let scale = params.learning_rate / batch_size.max(1) as f64;
    if params.variant.scalar_coefficients() {
        let ga: f64 = grads.alpha.iter().sum();
        let gb: f64 = grads.beta.iter().sum();
        let a = (params.alpha[0] - scale * ga).clamp(0.0, 1.0);
        let b = (params.beta[0] - scale * gb).clamp(0.0, 1.0);
        params.alpha.fill(a);
        params.beta.fill(b);
    } else {
        for (p, g) in params.alpha.iter_mut().zip(&grads.alpha) {
            *p = (*p - scale * g).clamp(0.0, 1.0);
        }
        for (p, g) in params.beta.iter_mut().zip(&grads.beta) {
            *p = (*p - scale * g).clamp(0.0, 1.0);
        }
    }
    if let Some(w) = params.w.as_mut() {
        for (p, g) in w.iter_mut().zip(&grads.w) {
            *p -= scale * g;
        }
        check_finite(w, "embedding matrix")?;
    }
    Ok(())
}

/// Jacobians of a single update with its inputs detached.
pub fn local_jacobians(
    params: &DgsParams,
    s_prev: &[f64],
    s_star_prev: &[f64],
    e: &SegmentedEmbedding,
    features: &[f64],
) -> Result<RtrlJacobians> {
    let zeros = RtrlJacobians::zeros(&params.store_dims(0));
    rtrl_propagate(params, (s_prev, &zeros), (s_star_prev, &zeros), e, features)
}

/// One update scored by the truncated-backprop variant.
#[derive(Debug, Clone, Copy)]
pub struct BpTerm<'a> {
    pub s_prev: &'a [f64],
    pub s_star_prev: &'a [f64],
    pub embedding: &'a SegmentedEmbedding,
    pub features: &'a [f64],
    /// `dL/dS_t` for the updated state.
    pub g: &'a [f64],
}

/// Reverse mode through the current batch's updates only: snapshot states
/// are constants, so each term contributes `g · ∂S_t/∂θ` of its own update.
pub fn bp_forward_backward(params: &DgsParams, terms: &[BpTerm<'_>]) -> Result<ParamGrads> {
    let mut grads = ParamGrads::zeros(params);
    for t in terms {
        if t.g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let j = local_jacobians(params, t.s_prev, t.s_star_prev, t.embedding, t.features)?;
        accumulate_param_grads(params, t.g, &j, &mut grads);
    }
    Ok(grads)
}

/// Checks `m·h = s` and returns `h`. Warns when `s` differs from the usual
/// size for the task (100 for node classification, 250 for link prediction).
pub fn validate_config(
    state_size: usize,
    segments: usize,
    task: Option<crate::trainer::Task>,
) -> Result<usize> {
    if segments == 0 || state_size == 0 || state_size % segments != 0 {
        return Err(Error::Config(format!(
            "state size {state_size} is not divisible into {segments} segments"
        )));
    }
    if let Some(task) = task {
        let usual = task.default_state_size();
        if state_size != usual {
            log::warn!("state size {state_size} differs from the usual {usual} for {task:?}");
        }
    }
    Ok(state_size / segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn zero_matrix_gives_uniform_segments() {
        let e = embed_features(&[0.0; 6 * 3], &[0.3, -1.0, 2.0], 1.0, 3).unwrap();
        assert_eq!(e.values, vec![0.5; 6]);
    }

    #[test]
    fn softmax_closed_forms() {
        let e = embed_features(&[3f64.ln(), 0.0], &[1.0], 1.0, 1).unwrap();
        assert!((e.values[0] - 0.75).abs() < 1e-15 && (e.values[1] - 0.25).abs() < 1e-15);
        let e2 = embed_features(&[2.0 * 3f64.ln(), 0.0], &[1.0], 2.0, 1).unwrap();
        assert!((e2.values[0] - 0.75).abs() < 1e-15 && (e2.values[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let e = embed_features(&[800.0, -800.0], &[1.0], 1.0, 1).unwrap();
        assert_eq!(e.values, vec![1.0, 0.0]);
        assert!(embed_features(&[1.0, 1.0], &[f64::NAN], 1.0, 1).is_err());
    }

    #[test]
    fn divide_by_sum_cases() {
        let e = embed_features_sum(&[1.0, 1.0], &[1.0], 1, 1e-12).unwrap();
        assert!((e.values[0] - 0.5).abs() < 1e-11);
        let e = embed_features_sum(&[0.0, 0.0], &[1.0], 1, 1e-8).unwrap();
        assert_eq!(e.values, vec![0.0, 0.0]);
        let e = embed_features_sum(&[3.0, 1.0], &[1.0], 1, 0.0).unwrap();
        assert_eq!(e.values, vec![0.75, 0.25]);
    }

    #[test]
    fn state_update_cases() {
        let ones = [1.0; 3];
        let zeros = [0.0; 3];
        let prev = [0.2, 0.4, 0.6];
        let star = [0.9, 0.1, 0.5];
        let e = [0.3, 0.3, 0.4];
        assert_eq!(state_update(&zeros, &ones, &prev, &star, &e), prev.to_vec());
        assert_eq!(state_update(&zeros, &zeros, &prev, &star, &e), e.to_vec());
        let half = [0.5];
        assert_eq!(state_update(&half, &half, &[1.0], &[0.0], &[0.5]), vec![0.625]);
    }

    #[test]
    fn embed_jacobian_closed_form() {
        let j = embed_jacobian(&[0.5, 0.5], &[1.0], 1.0);
        // [i][j][c]: row i = 0
        assert_eq!(&j[..2], &[0.25, -0.25]);
        assert!(embed_jacobian(&[0.3, 0.7], &[0.0, 0.0], 2.0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embed_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (h, f) = (3, 4);
            let t = 1.0 + 4.0 * rng.random::<f64>();
            let w: Vec<f64> = (0..h * f).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let x: Vec<f64> = (0..f).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let p = embed_features(&w, &x, t, 1).unwrap().values;
            let jac = embed_jacobian(&p, &x, t);
            let step = 1e-6;
            for j in 0..h {
                for c in 0..f {
                    let mut wp = w.clone();
                    let mut wm = w.clone();
                    wp[j * f + c] += step;
                    wm[j * f + c] -= step;
                    let ep = embed_features(&wp, &x, t, 1).unwrap().values;
                    let em = embed_features(&wm, &x, t, 1).unwrap().values;
                    for i in 0..h {
                        let fd = (ep[i] - em[i]) / (2.0 * step);
                        let an = jac[(i * h + j) * f + c];
                        assert!(
                            (fd - an).abs() <= 1e-6 * an.abs().max(1e-4),
                            "fd {fd} vs analytic {an}"
                        );
                    }
                }
            }
        }
    }

    fn tiny_params(rng: &mut ChaCha8Rng, variant: Variant) -> DgsParams {
        DgsParams::new_learnable(variant, 6, 3, 4, 1.5, 0.1, rng).unwrap()
    }

    #[test]
    fn zero_history_alpha_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = tiny_params(&mut rng, Variant::Dgs);
        p.beta = vec![0.0; 6];
        let x = [0.5, -0.1, 0.3, 1.0];
        let e = p.embed(&x).unwrap();
        let star = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let j = local_jacobians(&p, &[0.0; 6], &star, &e, &x).unwrap();
        for i in 0..6 {
            assert!((j.alpha[i] - (star[i] - e.values[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn beta_one_freezes_jacobians() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = tiny_params(&mut rng, Variant::Dgs);
        p.beta = vec![1.0; 6];
        let dims = p.store_dims(1);
        let mut j = RtrlJacobians::zeros(&dims);
        j.alpha.iter_mut().chain(j.beta.iter_mut()).chain(j.w.iter_mut()).for_each(|v| {
            *v = rng.random::<f64>()
        });
        let jn = j.clone();
        let x = [0.5, -0.1, 0.3, 1.0];
        let e = p.embed(&x).unwrap();
        let s = [0.3; 6];
        let out = rtrl_propagate(&p, (&s, &j), (&[0.7; 6], &jn), &e, &x).unwrap();
        assert_eq!(out.alpha, j.alpha);
        assert_eq!(out.w, j.w);
        // Jβ' = S − u + Jβ when β = 1
        for i in 0..6 {
            let u = (1.0 - p.alpha[i]) * e.values[i] + p.alpha[i] * 0.7;
            assert!(close(out.beta[i], 0.3 - u + j.beta[i], 1e-12));
        }
    }

    #[test]
    fn one_hot_gradient_is_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = tiny_params(&mut rng, Variant::Dgs);
        let x = [0.5, -0.1, 0.3, 1.0];
        let e = p.embed(&x).unwrap();
        let j = local_jacobians(&p, &[0.2; 6], &[0.4; 6], &e, &x).unwrap();
        let mut g = vec![0.0; 6];
        g[1] = 1.0;
        let mut grads = ParamGrads::zeros(&p);
        accumulate_param_grads(&p, &g, &j, &mut grads);
        for i in 0..6 {
            assert_eq!(grads.alpha[i] != 0.0, i == 1);
        }
        // element 1 belongs to segment 0 (rows 0,1)
        for row in 0..6 {
            let touched = grads.w[row * 4..(row + 1) * 4].iter().any(|&v| v != 0.0);
            assert_eq!(touched, row < 2, "row {row}");
        }
        let mut zero = ParamGrads::zeros(&p);
        accumulate_param_grads(&p, &[0.0; 6], &j, &mut zero);
        assert_eq!(zero, ParamGrads::zeros(&p));
    }

    #[test]
    fn sgd_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = tiny_params(&mut rng, Variant::Dgs);
        p.alpha[0] = 0.5;
        p.alpha[1] = 0.05;
        let before = p.clone();
        let mut g = ParamGrads::zeros(&p);
        sgd_step(&mut p, &g, 1).unwrap();
        assert_eq!(p, before);
        g.alpha[0] = 1.0;
        g.alpha[1] = 1.0;
        sgd_step(&mut p, &g, 1).unwrap();
        assert!((p.alpha[0] - 0.4).abs() < 1e-15);
        assert_eq!(p.alpha[1], 0.0);
        g.beta[2] = f64::NAN;
        assert!(matches!(sgd_step(&mut p, &g, 1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn scalar_variant_sums_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = DgsParams::new_static(Variant::DgsS, 4, 0.1, &mut rng).unwrap();
        let mut g = ParamGrads::zeros(&p);
        g.alpha = vec![0.25, 0.25, 0.5, 0.0];
        sgd_step(&mut p, &g, 1).unwrap();
        assert!(p.alpha.iter().all(|&a| (a - 0.4).abs() < 1e-15));
        assert_eq!(p.parameter_count(), 2);
    }

    #[test]
    fn config_validation() {
        assert_eq!(validate_config(100, 20, None).unwrap(), 5);
        assert_eq!(validate_config(6, 3, None).unwrap(), 2);
        assert!(validate_config(100, 33, None).is_err());
    }

    #[test]
    fn bp_single_event_equals_rtrl_local_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = tiny_params(&mut rng, Variant::DgsBp);
        let x = [0.2, 0.1, -0.7, 0.4];
        let e = p.embed(&x).unwrap();
        let g: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
        let zeros = RtrlJacobians::zeros(&p.store_dims(1));
        let j = rtrl_propagate(&p, (&[0.0; 6], &zeros), (&[0.0; 6], &zeros), &e, &x).unwrap();
        let mut rtrl = ParamGrads::zeros(&p);
        accumulate_param_grads(&p, &g, &j, &mut rtrl);
        let term = BpTerm { s_prev: &[0.0; 6], s_star_prev: &[0.0; 6], embedding: &e, features: &x, g: &g };
        assert_eq!(bp_forward_backward(&p, &[term]).unwrap(), rtrl);
        let zero_g = [0.0; 6];
        let term = BpTerm { g: &zero_g, ..term };
        assert_eq!(bp_forward_backward(&p, &[term]).unwrap(), ParamGrads::zeros(&p));
    }

    #[test]
    fn parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = DgsParams::new_learnable(Variant::Dgs, 100, 20, 10, 1.0, 0.1, &mut rng).unwrap();
        assert_eq!(p.parameter_count(), 1200);
        let v = DgsParams::new_static(Variant::DgsV, 30, 0.1, &mut rng).unwrap();
        assert_eq!(v.parameter_count(), 60);
    }
}
