//! Edge-event streams: CSV parsing, temporal splits, train-split feature
//! statistics and a planted-signal generator.
//!
//! Rows are `src,dst,timestamp,label,f_1,...,f_F`. A header line is skipped
//! when its first field is not numeric. Source and destination ids live in
//! separate spaces in the public interaction datasets, so destinations are
//! shifted by the number of source ids at load time.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEvent {
    pub src: NodeId,
    pub dst: NodeId,
    pub timestamp: f64,
    pub features: Vec<f64>,
    pub label: Option<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub events: Vec<EdgeEvent>,
    pub node_count: usize,
    pub feature_dim: usize,
    /// Sorted, de-duplicated ids that may appear as a link-prediction target.
    pub destination_ids: Vec<NodeId>,
}

impl EventStream {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// A stream sharing this one's node space but holding `events`.
    pub fn with_events(&self, events: Vec<EdgeEvent>) -> EventStream {
        EventStream {
            events,
            node_count: self.node_count,
            feature_dim: self.feature_dim,
            destination_ids: self.destination_ids.clone(),
        }
    }
}

/// Per-feature statistics computed on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
    /// Strictly ascending cut points per feature.
    pub bucket_edges: Vec<Vec<f64>>,
}

impl FeatureStats {
    pub fn feature_dim(&self) -> usize {
        self.mean.len()
    }

    /// Z-scores `features` into `out`. Constant features map to 0.
    pub fn standardize_into(&self, features: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            features
                .iter()
                .zip(self.mean.iter().zip(&self.stddev))
                .map(|(&x, (&m, &sd))| if sd > 0.0 { (x - m) / sd } else { 0.0 }),
        );
    }

    pub fn standardize(&self, features: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(features.len());
        self.standardize_into(features, &mut out);
        out
    }

    pub fn bucket_counts(&self) -> Vec<usize> {
        self.bucket_edges.iter().map(|e| e.len() + 1).collect()
    }

    pub fn total_buckets(&self) -> usize {
        self.bucket_edges.iter().map(|e| e.len() + 1).sum()
    }
}

/// Parses one data row. The error carries no line number; callers that know
/// it wrap the message.
pub fn parse_event_csv(line: &str, feature_dim: usize) -> Result<EdgeEvent, String> {
    let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(',').collect();
    if fields.len() != 4 + feature_dim {
        return Err(format!(
            "expected {} fields (src,dst,timestamp,label + {} features), found {}",
            4 + feature_dim,
            feature_dim,
            fields.len()
        ));
    }
    let id = |s: &str, what: &str| -> Result<NodeId, String> {
        s.trim()
            .parse::<NodeId>()
            .map_err(|_| format!("malformed {what} id {s:?}"))
    };
    let num = |s: &str, what: &str| -> Result<f64, String> {
        let v: f64 = s
            .trim()
            .parse()
            .map_err(|_| format!("malformed {what} {s:?}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite {what} {s:?}"))
        }
    };
    let src = id(fields[0], "source")?;
    let dst = id(fields[1], "destination")?;
    let timestamp = num(fields[2], "timestamp")?;
    if timestamp < 0.0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    let label = match fields[3].trim() {
        "" => None,
        s => match s.parse::<f64>() {
            Ok(v) if v == 0.0 => Some(0),
            Ok(v) if v == 1.0 => Some(1),
            _ => return Err(format!("label must be 0 or 1, found {s:?}")),
        },
    };
    let features = fields[4..]
        .iter()
        .map(|s| num(s, "feature"))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EdgeEvent { src, dst, timestamp, features, label })
}

pub fn format_event_csv(event: &EdgeEvent) -> String {
    let mut line = format!("{},{},{},", event.src, event.dst, event.timestamp);
    if let Some(label) = event.label {
        let _ = write!(line, "{label}");
    }
    for v in &event.features {
        let _ = write!(line, ",{v}");
    }
    line
}

fn looks_like_header(line: &str) -> bool {
    let first = line.split(',').next().unwrap_or("").trim();
    first.parse::<f64>().is_err()
}

pub fn load_dataset(path: impl AsRef<Path>, feature_dim: usize) -> Result<EventStream> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, feature_dim)
}

/// Reads rows from `reader`, sorts them stably by timestamp and shifts
/// destination ids past the source id range.
pub fn read_dataset(reader: impl Read, feature_dim: usize) -> Result<EventStream> {
    if feature_dim == 0 {
        return Err(Error::Config("feature_dim must be at least 1".into()));
    }
    let mut events = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() || (idx == 0 && looks_like_header(&line)) {
            continue;
        }
        let event = parse_event_csv(&line, feature_dim)
            .map_err(|msg| Error::Parse { line: lineno, msg })?;
        events.push(event);
    }
    if events.is_empty() {
        return Err(Error::EmptyStream);
    }
    events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

    let source_count = events.iter().map(|e| e.src).max().unwrap_or(0) as usize + 1;
    let dest_count = events.iter().map(|e| e.dst).max().unwrap_or(0) as usize + 1;
    let node_count = source_count + dest_count;
    if node_count > NodeId::MAX as usize {
        return Err(Error::Invalid(format!("too many nodes: {node_count}")));
    }
    for e in &mut events {
        e.dst += source_count as NodeId;
    }
    let mut destination_ids: Vec<NodeId> = events.iter().map(|e| e.dst).collect();
    destination_ids.sort_unstable();
    destination_ids.dedup();

    Ok(EventStream { events, node_count, feature_dim, destination_ids })
}

/// Writes `stream` as CSV with a header. Destination ids are written
/// relative to the source range so that [`read_dataset`] restores them.
pub fn write_dataset(stream: &EventStream, mut writer: impl Write) -> Result<()> {
    let offset = stream.events.iter().map(|e| e.src).max().map_or(0, |m| m + 1);
    let mut header = String::from("src,dst,timestamp,label");
    for j in 0..stream.feature_dim {
        let _ = write!(header, ",f{j}");
    }
    writeln!(writer, "{header}")?;
    for e in &stream.events {
        let dst = e.dst.checked_sub(offset).ok_or_else(|| {
            Error::Invalid(format!("destination {} overlaps the source id range", e.dst))
        })?;
        writeln!(writer, "{}", format_event_csv(&EdgeEvent { dst, ..e.clone() }))?;
    }
    Ok(())
}

/// Chronological train/validation/test split. Train and validation sizes are
/// floored; the remainder goes to test.
pub fn temporal_split(
    stream: &EventStream,
    fractions: (f64, f64, f64),
) -> Result<(EventStream, EventStream, EventStream)> {
    let (tr, va, te) = fractions;
    for f in [tr, va, te] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("split fraction {f} outside (0,1)")));
        }
    }
    if ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions sum to {}, expected 1",
            tr + va + te
        )));
    }
    let n = stream.len();
    if n < 3 {
        return Err(Error::Invalid(format!("cannot split a stream of {n} events")));
    }
    // The slack absorbs products such as 0.29 * 100 = 28.999999999999996.
    let n_train = (tr * n as f64 + 1e-9).floor() as usize;
    let n_val = (va * n as f64 + 1e-9).floor() as usize;
    let n_val = n_val.min(n - n_train);
    let events = &stream.events;
    Ok((
        stream.with_events(events[..n_train].to_vec()),
        stream.with_events(events[n_train..n_train + n_val].to_vec()),
        stream.with_events(events[n_train + n_val..].to_vec()),
    ))
}

/// Linear-interpolation quantile of an ascending slice (the "type 7" rule).
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn feature_stats(train: &EventStream, buckets_per_feature: usize) -> Result<FeatureStats> {
    if train.is_empty() {
        return Err(Error::EmptyStream);
    }
    if buckets_per_feature < 2 {
        return Err(Error::Config("buckets per feature must be at least 2".into()));
    }
    let f = train.feature_dim;
    let n = train.len() as f64;
    let mut mean = vec![0.0; f];
    let mut stddev = vec![0.0; f];
    let mut bucket_edges = Vec::with_capacity(f);
    let mut column = Vec::with_capacity(train.len());
    for j in 0..f {
        column.clear();
        column.extend(train.events.iter().map(|e| e.features[j]));
        let m = column.iter().sum::<f64>() / n;
        let var = column.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        column.sort_by(f64::total_cmp);
        let (min, max) = (column[0], column[column.len() - 1]);
        mean[j] = m;
        stddev[j] = if min == max { 0.0 } else { var.sqrt() };

        let mut edges: Vec<f64> = (1..buckets_per_feature)
            .map(|k| quantile_sorted(&column, k as f64 / buckets_per_feature as f64))
            .collect();
        // A cut at the minimum would leave bucket 0 permanently empty.
        edges.retain(|&e| e > min);
        edges.dedup();
        bucket_edges.push(edges);
    }
    Ok(FeatureStats { mean, stddev, bucket_edges })
}

/// `log(1 + seconds since the node's previous event)`, 0 for a first event.
pub fn delta_t_feature(now: f64, previous: Option<f64>) -> f64 {
    previous.map_or(0.0, |p| (now - p).max(0.0).ln_1p())
}

/// Planted-signal generator settings.
///
/// Every destination carries one hidden ±1 attribute per carrier feature;
/// carrier feature `k` of an event is the destination's attribute plus
/// Gaussian noise. A source's label is 1 when the weighted sum over carriers
/// of its exponentially discounted attribute history (excluding the current
/// event) is in the top `positive_rate` fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sources: usize,
    pub destinations: usize,
    pub events: usize,
    pub feature_dim: usize,
    /// Per-carrier discount applied once per event of the source.
    pub discounts: Vec<f64>,
    pub weights: Vec<f64>,
    pub noise: f64,
    pub positive_rate: f64,
    /// Mean seconds between consecutive events.
    pub mean_gap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sources: 1000,
            destinations: 100,
            events: 20_000,
            feature_dim: 4,
            discounts: vec![0.8],
            weights: vec![1.0],
            noise: 0.3,
            positive_rate: 0.5,
            mean_gap: 1.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic stream: {m}")));
        if self.events == 0 {
            return bad("event count must be positive");
        }
        if self.sources == 0 || self.destinations == 0 {
            return bad("node counts must be positive");
        }
        if self.discounts.is_empty() || self.discounts.len() != self.weights.len() {
            return bad("discounts and weights must be non-empty and equally long");
        }
        if self.discounts.len() > self.feature_dim {
            return bad("more carrier features than feature_dim");
        }
        if self.discounts.iter().any(|d| !(0.0..1.0).contains(d)) {
            return bad("discounts must lie in [0,1)");
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return bad("positive_rate must lie in (0,1)");
        }
        if !(self.noise >= 0.0 && self.mean_gap > 0.0) {
            return bad("noise must be >= 0 and mean_gap > 0");
        }
        Ok(())
    }
}

pub fn synth_stream(config: &SynthConfig, seed: u64) -> Result<EventStream> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let carriers = config.discounts.len();
    let attributes: Vec<f64> = (0..config.destinations * carriers)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let gaps = Exp::new(1.0 / config.mean_gap).map_err(|e| Error::Config(e.to_string()))?;

    let mut history = vec![0.0; config.sources * carriers];
    let mut scores = Vec::with_capacity(config.events);
    let mut events = Vec::with_capacity(config.events);
    let mut t = 0.0;
    for _ in 0..config.events {
        let u = rng.random_range(0..config.sources);
        let d = rng.random_range(0..config.destinations);
        let attrs = &attributes[d * carriers..(d + 1) * carriers];
        let hist = &mut history[u * carriers..(u + 1) * carriers];
        scores.push(hist.iter().zip(&config.weights).map(|(h, w)| h * w).sum::<f64>());
        for k in 0..carriers {
            hist[k] = config.discounts[k] * hist[k] + attrs[k];
        }
        let features = (0..config.feature_dim)
            .map(|k| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                if k < carriers {
                    attrs[k] + config.noise * eps
                } else {
                    eps
                }
            })
            .collect();
        events.push(EdgeEvent {
            src: u as NodeId,
            dst: (config.sources + d) as NodeId,
            timestamp: t,
            features,
            label: None,
        });
        t += gaps.sample(&mut rng);
    }

    // Label the top `positive_rate` share of scores; ties broken by position.
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let positives = (config.positive_rate * events.len() as f64).round() as usize;
    for e in events.iter_mut() {
        e.label = Some(0);
    }
    for &i in &order[..positives] {
        events[i].label = Some(1);
    }

    let node_count = config.sources + config.destinations;
    Ok(EventStream {
        events,
        node_count,
        feature_dim: config.feature_dim,
        destination_ids: (config.sources as NodeId..node_count as NodeId).collect(),
    })
}

/// One line-delimited JSON record per feature.
pub fn stats_sidecar(stats: &FeatureStats) -> String {
    let mut out = String::new();
    for j in 0..stats.feature_dim() {
        let record = serde_json::json!({
            "feature": j,
            "mean": stats.mean[j],
            "stddev": stats.stddev[j],
            "edges": stats.bucket_edges[j],
        });
        out.push_str(&record.to_string());
        out.push('\n');
    }
    out
}
