//! Epoch loop, early stopping, evaluation protocols and model checkpoints.

mod engine;
mod tune;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gs::GsParams;
use crate::head::MlpParams;
use crate::ingest::{feature_stats, temporal_split, EdgeEvent, EventStream, FeatureStats, NodeId};
use crate::metrics::{mrr, recall_at_k, roc_auc, RankResult};
use crate::recurrent::{validate_config, DgsParams, Variant};
use crate::store::{Cursor, NodeStore, Precision};

pub use engine::{BatchLoss, ModelView, Scored, Scorer};
pub use tune::{random_search, sample_config, SearchSpace, Trial, TuneResult};

use engine::{new_store, Learner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    NodeClass,
    LinkPred,
}

impl Task {
    pub fn default_state_size(self) -> usize {
        match self {
            Task::NodeClass => 100,
            Task::LinkPred => 250,
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node_class" => Ok(Task::NodeClass),
            "link_pred" => Ok(Task::LinkPred),
            _ => Err(Error::Config(format!("unknown task {s:?} (node_class, link_pred)"))),
        }
    }
}

/// Representation method: one of the recurrent variants or a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Dgs,
    DgsV,
    DgsS,
    DgsSum,
    DgsBp,
    Gs,
    Raw,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Dgs,
        Method::DgsV,
        Method::DgsS,
        Method::DgsSum,
        Method::DgsBp,
        Method::Gs,
        Method::Raw,
    ];

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Dgs => Some(Variant::Dgs),
            Method::DgsV => Some(Variant::DgsV),
            Method::DgsS => Some(Variant::DgsS),
            Method::DgsSum => Some(Variant::DgsSum),
            Method::DgsBp => Some(Variant::DgsBp),
            Method::Gs | Method::Raw => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Gs => "gs",
            Method::Raw => "raw",
            m => m.variant().map(Variant::name).unwrap_or_default(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub method: Method,
    pub seed: u64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Defaults to 100 for node classification and 250 for link prediction.
    pub state_size: Option<usize>,
    /// Number of softmax segments; defaults to `s / 5`.
    pub segments: Option<usize>,
    pub temperature: f64,
    pub er_learning_rate: f64,
    pub head_learning_rate: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    /// Dense layers including the output layer.
    pub layers: usize,
    pub hidden: usize,
    pub gs_alpha: f64,
    pub gs_beta: f64,
    pub buckets: usize,
    pub pos_weight: f64,
    /// Replace `pos_weight` with the train negative/positive ratio.
    pub auto_pos_weight: bool,
    pub neg_per_pos: usize,
    pub inductive_mask_fraction: f64,
    /// Append `log(1 + Δt)` since the node's previous event to the features.
    pub delta_t: bool,
    pub threads: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::NodeClass,
            method: Method::Dgs,
            seed: 0,
            batch_size: 200,
            max_epochs: 50,
            patience: 10,
            state_size: None,
            segments: None,
            temperature: 1.0,
            er_learning_rate: 0.1,
            head_learning_rate: 1e-3,
            dropout: 0.1,
            weight_decay: 1e-6,
            layers: 2,
            hidden: 64,
            gs_alpha: 0.5,
            gs_beta: 0.5,
            buckets: 10,
            pos_weight: 1.0,
            auto_pos_weight: false,
            neg_per_pos: 1,
            inductive_mask_fraction: 0.1,
            delta_t: false,
            threads: 1,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn state_size(&self) -> usize {
        self.state_size.unwrap_or(self.task.default_state_size())
    }

    pub fn segments(&self) -> usize {
        let s = self.state_size();
        self.segments.unwrap_or(if s % 5 == 0 { s / 5 } else { s })
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        vec![self.hidden; self.layers.saturating_sub(1)]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive".into());
        }
        if !(1..=3).contains(&self.layers) {
            return bad(format!("layers {} outside [1,3]", self.layers));
        }
        if !(self.pos_weight > 0.0) {
            return bad(format!("pos_weight {} must be > 0", self.pos_weight));
        }
        if self.task == Task::LinkPred {
            if self.method == Method::Raw {
                return bad("the raw baseline has no node states to rank".into());
            }
            if self.neg_per_pos == 0 {
                return bad("neg_per_pos must be at least 1".into());
            }
            if !(0.0..1.0).contains(&self.inductive_mask_fraction) {
                return bad(format!("inductive_mask_fraction {} outside [0,1)", self.inductive_mask_fraction));
            }
        }
        if matches!(self.method, Method::Dgs | Method::DgsSum | Method::DgsBp) {
            validate_config(self.state_size(), self.segments(), Some(self.task))?;
        }
        Ok(())
    }
}

/// The representation component of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Encoder {
    Dgs(DgsParams),
    Gs(GsParams),
    Raw,
}

impl Encoder {
    pub fn init(cfg: &TrainConfig, stats: &FeatureStats, rng: &mut ChaCha8Rng) -> Result<Encoder> {
        match (cfg.method, cfg.method.variant()) {
            (Method::Raw, _) => Ok(Encoder::Raw),
            (Method::Gs, _) => Ok(Encoder::Gs(GsParams::new(cfg.gs_alpha, cfg.gs_beta, stats)?)),
            (_, Some(v)) if v.has_matrix() => {
                let f = stats.feature_dim() + usize::from(cfg.delta_t);
                Ok(Encoder::Dgs(DgsParams::new_learnable(
                    v,
                    cfg.state_size(),
                    cfg.segments(),
                    f,
                    cfg.temperature,
                    cfg.er_learning_rate,
                    rng,
                )?))
            }
            (_, Some(v)) => Ok(Encoder::Dgs(DgsParams::new_static(
                v,
                stats.total_buckets(),
                cfg.er_learning_rate,
                rng,
            )?)),
            (_, None) => unreachable!("every method other than gs and raw has a variant"),
        }
    }

    pub fn state_size(&self) -> usize {
        match self {
            Encoder::Dgs(p) => p.state_size(),
            Encoder::Gs(g) => g.state_size,
            Encoder::Raw => 0,
        }
    }

    /// Learnable embedding parameters; the baselines have none.
    pub fn parameter_count(&self) -> usize {
        match self {
            Encoder::Dgs(p) => p.parameter_count(),
            _ => 0,
        }
    }

    pub fn head_input_dim(&self, task: Task, feature_dim: usize) -> usize {
        match (self, task) {
            (Encoder::Raw, _) => feature_dim,
            (_, Task::NodeClass) => self.state_size(),
            (_, Task::LinkPred) => 2 * self.state_size(),
        }
    }

    fn tracking(&self) -> bool {
        matches!(self, Encoder::Dgs(p) if p.variant.uses_rtrl())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub er: usize,
    pub head: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Eval-mode train AUC for node classification; not computed for link
    /// prediction.
    pub train_metric: Option<f64>,
    pub val_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub head: MlpParams,
    pub stats: FeatureStats,
    pub node_count: usize,
    pub destination_ids: Vec<NodeId>,
    /// Nodes whose training events were withheld for inductive evaluation.
    pub masked_nodes: Vec<NodeId>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub parameters: ParameterCount,
}

impl TrainedModel {
    pub fn view(&self) -> ModelView<'_> {
        ModelView {
            task: self.config.task,
            encoder: &self.encoder,
            head: &self.head,
            stats: &self.stats,
            delta_t: self.config.delta_t,
            node_count: self.node_count,
            destinations: &self.destination_ids,
            batch_size: self.config.batch_size,
        }
    }

    /// Training events actually used, i.e. without those touching masked nodes.
    pub fn training_events(&self, train: &EventStream) -> Vec<EdgeEvent> {
        drop_masked(&train.events, &self.masked_nodes)
    }
}

pub fn count_parameters(model: &TrainedModel) -> ParameterCount {
    let er = model.encoder.parameter_count();
    let head = model.head.parameter_count();
    ParameterCount { er, head, total: er + head }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: EventStream,
    pub val: EventStream,
    pub test: EventStream,
}

impl Splits {
    pub fn new(stream: &EventStream, fractions: (f64, f64, f64)) -> Result<Splits> {
        let (train, val, test) = temporal_split(stream, fractions)?;
        Ok(Splits { train, val, test })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Transductive,
    Inductive,
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(Protocol::Transductive),
            "inductive" => Ok(Protocol::Inductive),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub split: SplitName,
    pub protocol: Protocol,
    pub auc: Option<f64>,
    pub mrr: Option<f64>,
    pub recall_at_10: Option<f64>,
    pub scored_events: usize,
}

impl EvalMetrics {
    /// The metric used for model selection.
    pub fn primary(&self) -> f64 {
        self.auc.or(self.mrr).unwrap_or(f64::NAN)
    }

    fn from_scored(split: SplitName, protocol: Protocol, scored: &[Scored]) -> Result<EvalMetrics> {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut ranks: Vec<RankResult> = Vec::new();
        for s in scored {
            match *s {
                Scored::Prob { score, label, .. } => {
                    scores.push(score);
                    labels.push(label);
                }
                Scored::Rank { rank, .. } => ranks.push(rank),
            }
        }
        let auc = if scores.is_empty() { None } else { Some(roc_auc(&scores, &labels)?) };
        let (m, r) = if ranks.is_empty() {
            (None, None)
        } else {
            (Some(mrr(&ranks)?), Some(recall_at_k(&ranks, 10)?))
        };
        if auc.is_none() && m.is_none() {
            return Err(Error::Invalid(format!("no scorable events in the {split:?} split")));
        }
        Ok(EvalMetrics { split, protocol, auc, mrr: m, recall_at_10: r, scored_events: scored.len() })
    }
}

/// Patience counter over a validation metric where larger is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, best_epoch: 0, since_best: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopSignal {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopSignal::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopSignal::Stop
        } else {
            StopSignal::Continue
        }
    }
}

fn drop_masked(events: &[EdgeEvent], masked: &[NodeId]) -> Vec<EdgeEvent> {
    if masked.is_empty() {
        return events.to_vec();
    }
    let set: HashSet<NodeId> = masked.iter().copied().collect();
    events
        .iter()
        .filter(|e| !set.contains(&e.src) && !set.contains(&e.dst))
        .cloned()
        .collect()
}

/// A random `fraction` of the nodes seen in validation or test.
fn choose_masked(cfg: &TrainConfig, splits: &Splits, rng: &mut ChaCha8Rng) -> Vec<NodeId> {
    if cfg.task != Task::LinkPred || cfg.inductive_mask_fraction == 0.0 {
        return Vec::new();
    }
    let mut pool: Vec<NodeId> = splits
        .val
        .events
        .iter()
        .chain(&splits.test.events)
        .flat_map(|e| [e.src, e.dst])
        .collect();
    pool.sort_unstable();
    pool.dedup();
    let k = (cfg.inductive_mask_fraction * pool.len() as f64).round() as usize;
    let mut masked: Vec<NodeId> = rand::seq::index::sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    masked.sort_unstable();
    masked
}

fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// One eval-mode pass from zero states: train metric (node classification
/// only) then the validation metric.
fn epoch_metrics(
    view: ModelView<'_>,
    pool: Option<&rayon::ThreadPool>,
    train: &[EdgeEvent],
    val: &[EdgeEvent],
) -> Result<(Option<f64>, f64)> {
    let mut scorer = Scorer::new(view, pool);
    let train_metric = match view.task {
        Task::NodeClass => {
            let scored = scorer.run(train, &|_| true)?;
            Some(EvalMetrics::from_scored(SplitName::Train, Protocol::Transductive, &scored)?.primary())
        }
        Task::LinkPred => {
            scorer.replay(train)?;
            None
        }
    };
    let scored = scorer.run(val, &|_| true)?;
    let val_metric = EvalMetrics::from_scored(SplitName::Val, Protocol::Transductive, &scored)?.primary();
    Ok((train_metric, val_metric))
}

/// Trains with early stopping on the validation metric and returns the
/// best-validation parameters.
pub fn train(cfg: &TrainConfig, splits: &Splits) -> Result<TrainedModel> {
    train_with(cfg, splits, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch.
pub fn train_with(
    cfg: &TrainConfig,
    splits: &Splits,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    let stats = feature_stats(&splits.train, cfg.buckets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masked = choose_masked(cfg, splits, &mut rng);
    let train_events = drop_masked(&splits.train.events, &masked);
    if train_events.is_empty() {
        return Err(Error::EmptyStream);
    }
    let encoder = Encoder::init(cfg, &stats, &mut rng)?;
    let head_in = encoder.head_input_dim(cfg.task, stats.feature_dim());
    let head = MlpParams::new(
        head_in,
        &cfg.hidden_widths(),
        cfg.dropout,
        cfg.weight_decay,
        cfg.head_learning_rate,
        &mut rng,
    )?;
    let pos_weight = if cfg.auto_pos_weight {
        let pos = train_events.iter().filter(|e| e.label == Some(1)).count();
        let neg = train_events.iter().filter(|e| e.label == Some(0)).count();
        if pos == 0 || neg == 0 { 1.0 } else { neg as f64 / pos as f64 }
    } else {
        cfg.pos_weight
    };
    let pool = thread_pool(cfg.threads)?;
    let node_count = splits.train.node_count;
    let destinations = &splits.train.destination_ids;
    let store = new_store(&encoder, node_count, encoder.tracking(), cfg.precision);
    let mut learner = Learner {
        task: cfg.task,
        encoder,
        head,
        stats: &stats,
        delta_t: cfg.delta_t,
        pos_weight,
        neg_per_pos: cfg.neg_per_pos,
        destinations,
        store,
        dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d80f),
        neg_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0e6a),
        pool: pool.as_ref(),
    };

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut best = (learner.encoder.clone(), learner.head.clone());
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        learner.reset();
        let mut loss = BatchLoss::default();
        for batch in train_events.chunks(cfg.batch_size) {
            let b = learner.train_batch(batch)?;
            loss.sum += b.sum;
            loss.terms += b.terms;
        }
        let view = ModelView {
            task: cfg.task,
            encoder: &learner.encoder,
            head: &learner.head,
            stats: &stats,
            delta_t: cfg.delta_t,
            node_count,
            destinations,
            batch_size: cfg.batch_size,
        };
        let (train_metric, val_metric) = epoch_metrics(view, pool.as_ref(), &train_events, &splits.val.events)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss.sum / loss.terms.max(1) as f64,
            train_metric,
            val_metric,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val {:.5}",
            record.train_loss,
            record.val_metric
        );
        on_epoch(&record);
        history.push(record);
        match stopper.observe(epoch, val_metric) {
            StopSignal::Improved => best = (learner.encoder.clone(), learner.head.clone()),
            StopSignal::Stop => break,
            StopSignal::Continue => {}
        }
    }

    let (encoder, head) = best;
    let mut model = TrainedModel {
        config: cfg.clone(),
        encoder,
        head,
        stats,
        node_count,
        destination_ids: destinations.clone(),
        masked_nodes: masked,
        history,
        best_epoch: stopper.best_epoch,
        best_val_metric: stopper.best.unwrap_or(f64::NAN),
        parameters: ParameterCount { er: 0, head: 0, total: 0 },
    };
    model.parameters = count_parameters(&model);
    Ok(model)
}

/// Replays the splits before `split` without learning, then scores `split`.
pub fn evaluate(model: &TrainedModel, splits: &Splits, split: SplitName, protocol: Protocol) -> Result<EvalMetrics> {
    let (metrics, _) = evaluate_with_store(model, splits, split, protocol)?;
    Ok(metrics)
}

/// As [`evaluate`], also returning the frozen store after the scored split.
pub fn evaluate_with_store(
    model: &TrainedModel,
    splits: &Splits,
    split: SplitName,
    protocol: Protocol,
) -> Result<(EvalMetrics, Option<NodeStore>)> {
    let masked: HashSet<NodeId> = model.masked_nodes.iter().copied().collect();
    if protocol == Protocol::Inductive {
        if model.config.task != Task::LinkPred {
            return Err(Error::Invalid("protocol mismatch: inductive evaluation is defined for link prediction".into()));
        }
        if masked.is_empty() {
            return Err(Error::EmptyInductiveSet);
        }
    }
    let pool = thread_pool(model.config.threads)?;
    let mut scorer = Scorer::new(model.view(), pool.as_ref());
    let train = model.training_events(&splits.train);
    let target: &[EdgeEvent] = match split {
        SplitName::Train => &train,
        SplitName::Val => {
            scorer.replay(&train)?;
            &splits.val.events
        }
        SplitName::Test => {
            scorer.replay(&train)?;
            scorer.replay(&splits.val.events)?;
            &splits.test.events
        }
    };
    let select = |e: &EdgeEvent| match protocol {
        Protocol::Transductive => true,
        Protocol::Inductive => masked.contains(&e.src) || masked.contains(&e.dst),
    };
    let scored = scorer.run(target, &select)?;
    if protocol == Protocol::Inductive && scored.is_empty() {
        return Err(Error::EmptyInductiveSet);
    }
    let metrics = EvalMetrics::from_scored(split, protocol, &scored)?;
    Ok((metrics, scorer.into_store()))
}

/// Frozen store warmed through train and validation, ready to continue on
/// the test stream.
pub fn warm_store(model: &TrainedModel, splits: &Splits) -> Result<Option<NodeStore>> {
    let mut scorer = Scorer::new(model.view(), None);
    scorer.replay(&model.training_events(&splits.train))?;
    scorer.replay(&splits.val.events)?;
    Ok(scorer.into_store())
}

pub const MODEL_MAGIC: &[u8; 4] = b"DGSM";
pub const MODEL_VERSION: u32 = 1;

/// Single-file checkpoint: magic, version, length-prefixed JSON model, then
/// an optional node-store blob.
pub fn model_to_bytes(model: &TrainedModel, store: Option<&NodeStore>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(model)?;
    let mut out = Vec::with_capacity(json.len() + 32);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    match store {
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.to_bytes());
        }
        None => out.push(0),
    }
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(TrainedModel, Option<NodeStore>)> {
    let mut c = Cursor::new(bytes);
    if c.take(4).map_err(|_| Error::BadCheckpointHeader)? != MODEL_MAGIC {
        return Err(Error::BadCheckpointHeader);
    }
    let version = c.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Checkpoint(format!("unsupported model version {version}")));
    }
    let len = usize::try_from(c.u64()?).map_err(|_| Error::Checkpoint("model length overflow".into()))?;
    let model: TrainedModel = serde_json::from_slice(c.take(len)?)?;
    let store = match c.take(1)?[0] {
        0 => None,
        1 => {
            let rest = c.take(c.remaining())?;
            Some(NodeStore::from_bytes(rest)?)
        }
        t => return Err(Error::Checkpoint(format!("bad store tag {t}"))),
    };
    if c.remaining() != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((model, store))
}

pub fn save_model(path: impl AsRef<Path>, model: &TrainedModel, store: Option<&NodeStore>) -> Result<()> {
    std::fs::write(path, model_to_bytes(model, store)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(TrainedModel, Option<NodeStore>)> {
    model_from_bytes(&std::fs::read(path)?)
}
