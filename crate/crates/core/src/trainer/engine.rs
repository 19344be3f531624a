//! Per-batch processing: training steps and frozen inference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::gs::{bucketize_dense, gs_update, raw_features};
use crate::head::{bce_loss, MlpGrads, MlpParams, Mode};
use crate::ingest::{delta_t_feature, EdgeEvent, FeatureStats, NodeId};
use crate::metrics::{rank_in_scores, RankResult};
use crate::recurrent::{
    accumulate_param_grads, bp_forward_backward, sgd_step, BpTerm, DgsParams, ParamGrads,
    SegmentedEmbedding,
};
use crate::store::{BatchSnapshot, BatchUpdates, NodeEntry, NodeStore, Precision};

use super::{Encoder, Task};

/// Borrowed view of everything needed to run a model over a stream.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    pub task: Task,
    pub encoder: &'a Encoder,
    pub head: &'a MlpParams,
    pub stats: &'a FeatureStats,
    pub delta_t: bool,
    pub node_count: usize,
    pub destinations: &'a [NodeId],
    pub batch_size: usize,
}

/// New entry for one endpoint plus what truncated backprop needs to revisit it.
pub(crate) struct EndpointUpdate {
    pub entry: NodeEntry,
    pub embedding: Option<SegmentedEmbedding>,
    pub input: Vec<f64>,
}

/// Input to the embedding: standardized features (plus Δt) for the matrix
/// variants, the bucket one-hot vector otherwise.
pub(crate) fn embedding_input(
    params: &DgsParams,
    stats: &FeatureStats,
    delta_t: bool,
    event: &EdgeEvent,
    last_time: Option<f64>,
) -> Result<Vec<f64>> {
    if params.w.is_some() {
        let mut x = stats.standardize(&event.features);
        if delta_t {
            x.push(delta_t_feature(event.timestamp, last_time));
        }
        Ok(x)
    } else {
        bucketize_dense(&event.features, &stats.bucket_edges)
    }
}

fn dgs_endpoint(
    params: &DgsParams,
    stats: &FeatureStats,
    delta_t: bool,
    event: &EdgeEvent,
    own: &NodeEntry,
    neighbor: &NodeEntry,
) -> Result<EndpointUpdate> {
    let input = embedding_input(params, stats, delta_t, event, own.last_time)?;
    let e = params.embed(&input)?;
    let (state, jac) = params.step(own, neighbor, &e, &input)?;
    Ok(EndpointUpdate {
        entry: NodeEntry { state, jac, last_time: Some(event.timestamp) },
        embedding: Some(e),
        input,
    })
}

/// Both endpoints' new entries, computed from the batch snapshot only.
pub(crate) fn update_endpoints(
    encoder: &Encoder,
    stats: &FeatureStats,
    delta_t: bool,
    snap: &BatchSnapshot,
    event: &EdgeEvent,
) -> Result<[EndpointUpdate; 2]> {
    let src = snap.entry(event.src);
    let dst = snap.entry(event.dst);
    match encoder {
        Encoder::Dgs(p) => Ok([
            dgs_endpoint(p, stats, delta_t, event, src, dst)?,
            dgs_endpoint(p, stats, delta_t, event, dst, src)?,
        ]),
        Encoder::Gs(g) => {
            let delta = bucketize_dense(&event.features, &g.bucket_edges)?;
            let mk = |own: &NodeEntry, nb: &NodeEntry| EndpointUpdate {
                entry: NodeEntry {
                    state: gs_update(g, &own.state, &nb.state, &delta),
                    jac: None,
                    last_time: Some(event.timestamp),
                },
                embedding: None,
                input: Vec::new(),
            };
            Ok([mk(src, dst), mk(dst, src)])
        }
        Encoder::Raw => Err(Error::Invalid("raw features keep no node state".into())),
    }
}

fn map_events<T: Send>(
    pool: Option<&ThreadPool>,
    events: &[EdgeEvent],
    f: impl Fn(&EdgeEvent) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    match pool {
        Some(p) => p.install(|| events.par_iter().map(&f).collect()),
        None => events.iter().map(f).collect(),
    }
}

pub(crate) fn new_store(
    encoder: &Encoder,
    node_count: usize,
    tracking: bool,
    precision: Precision,
) -> Option<NodeStore> {
    match encoder {
        Encoder::Dgs(p) => Some(NodeStore::new(p.store_dims(node_count), tracking, precision)),
        Encoder::Gs(g) => Some(NodeStore::new(
            crate::store::StoreDims { s: g.state_size, h: 0, f: 0, node_count },
            false,
            precision,
        )),
        Encoder::Raw => None,
    }
}

fn snapshot_for(store: Option<&NodeStore>, nodes: impl IntoIterator<Item = NodeId>) -> Result<BatchSnapshot> {
    match store {
        Some(s) => s.snapshot_batch(nodes),
        None => Ok(BatchSnapshot::default()),
    }
}

fn commit(store: Option<&mut NodeStore>, batch: &[EdgeEvent], ups: Vec<[EndpointUpdate; 2]>) -> Result<()> {
    let Some(store) = store else { return Ok(()) };
    let mut pending = BatchUpdates::new();
    for (e, [u, v]) in batch.iter().zip(ups) {
        pending.push(e.src, e.timestamp, u.entry);
        pending.push(e.dst, e.timestamp, v.entry);
    }
    store.commit_batch(pending)
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(a.len() + b.len());
    x.extend_from_slice(a);
    x.extend_from_slice(b);
    x
}

/// Loss summed over a batch and the number of loss terms behind it.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub sum: f64,
    pub terms: usize,
}

/// Mutable training state: parameters, the tracking store and the RNG streams.
pub(crate) struct Learner<'a> {
    pub task: Task,
    pub encoder: Encoder,
    pub head: MlpParams,
    pub stats: &'a FeatureStats,
    pub delta_t: bool,
    pub pos_weight: f64,
    pub neg_per_pos: usize,
    pub destinations: &'a [NodeId],
    pub store: Option<NodeStore>,
    pub dropout_rng: ChaCha8Rng,
    pub neg_rng: ChaCha8Rng,
    pub pool: Option<&'a ThreadPool>,
}

impl Learner<'_> {
    pub fn reset(&mut self) {
        if let Some(s) = self.store.as_mut() {
            s.reset();
        }
    }

    pub fn train_batch(&mut self, batch: &[EdgeEvent]) -> Result<BatchLoss> {
        match self.task {
            Task::NodeClass => self.train_node_class(batch),
            Task::LinkPred => self.train_link_pred(batch),
        }
    }

    fn apply(&mut self, mut head_grads: MlpGrads, er_grads: Option<ParamGrads>, terms: usize) -> Result<()> {
        if terms == 0 {
            return Ok(());
        }
        head_grads.scale(1.0 / terms as f64);
        self.head.adam_step(&head_grads)?;
        if let (Encoder::Dgs(p), Some(g)) = (&mut self.encoder, er_grads) {
            sgd_step(p, &g, terms)?;
        }
        Ok(())
    }

    fn train_node_class(&mut self, batch: &[EdgeEvent]) -> Result<BatchLoss> {
        let snap = snapshot_for(self.store.as_ref(), batch.iter().flat_map(|e| [e.src, e.dst]))?;
        let ups = if self.store.is_some() {
            let (enc, stats, dt) = (&self.encoder, self.stats, self.delta_t);
            map_events(self.pool, batch, |e| update_endpoints(enc, stats, dt, &snap, e))?
        } else {
            Vec::new()
        };

        let mut head_grads = MlpGrads::zeros(&self.head);
        let mut er_grads = match &self.encoder {
            Encoder::Dgs(p) => Some(ParamGrads::zeros(p)),
            _ => None,
        };
        let mut bp_terms: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut loss = BatchLoss::default();
        for (i, e) in batch.iter().enumerate() {
            let Some(label) = e.label else { continue };
            let x = match &self.encoder {
                Encoder::Raw => raw_features(e, self.stats),
                _ => ups[i][0].entry.state.clone(),
            };
            let (logit, tape) = self.head.forward(&x, Mode::Train, &mut self.dropout_rng)?;
            let (l, dl) = bce_loss(logit, label, self.pos_weight);
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("loss {l} at t={}", e.timestamp)));
            }
            let (g, dx) = self.head.backward(tape, dl);
            head_grads.add(&g);
            if let (Encoder::Dgs(p), Some(eg)) = (&self.encoder, er_grads.as_mut()) {
                match &ups[i][0].entry.jac {
                    Some(j) => accumulate_param_grads(p, &dx, j, eg),
                    None => bp_terms.push((i, dx)),
                }
            }
            loss.sum += l;
            loss.terms += 1;
        }
        if let (Encoder::Dgs(p), Some(eg)) = (&self.encoder, er_grads.as_mut()) {
            if !bp_terms.is_empty() {
                let terms: Vec<BpTerm<'_>> = bp_terms
                    .iter()
                    .map(|(i, g)| {
                        let e = &batch[*i];
                        BpTerm {
                            s_prev: &snap.entry(e.src).state,
                            s_star_prev: &snap.entry(e.dst).state,
                            embedding: ups[*i][0].embedding.as_ref().expect("dgs embedding"),
                            features: &ups[*i][0].input,
                            g,
                        }
                    })
                    .collect();
                eg.add(&bp_forward_backward(p, &terms)?);
            }
        }
        commit(self.store.as_mut(), batch, ups)?;
        self.apply(head_grads, er_grads, loss.terms)?;
        Ok(loss)
    }

    fn sample_negative(&mut self, dst: NodeId) -> Result<NodeId> {
        if self.destinations.len() < 2 {
            return Err(Error::Invalid("destination pool empty".into()));
        }
        loop {
            let c = self.destinations[self.neg_rng.random_range(0..self.destinations.len())];
            if c != dst {
                return Ok(c);
            }
        }
    }

    fn train_link_pred(&mut self, batch: &[EdgeEvent]) -> Result<BatchLoss> {
        if matches!(self.encoder, Encoder::Raw) {
            return Err(Error::Config("link prediction needs node states".into()));
        }
        let mut negatives = Vec::with_capacity(batch.len() * self.neg_per_pos);
        for e in batch {
            for _ in 0..self.neg_per_pos {
                negatives.push(self.sample_negative(e.dst)?);
            }
        }
        let snap = snapshot_for(
            self.store.as_ref(),
            batch.iter().flat_map(|e| [e.src, e.dst]).chain(negatives.iter().copied()),
        )?;
        let (enc, stats, dt) = (&self.encoder, self.stats, self.delta_t);
        let ups = map_events(self.pool, batch, |e| update_endpoints(enc, stats, dt, &snap, e))?;

        let mut head_grads = MlpGrads::zeros(&self.head);
        let mut er_grads = match &self.encoder {
            Encoder::Dgs(p) => Some(ParamGrads::zeros(p)),
            _ => None,
        };
        let mut loss = BatchLoss::default();
        for (i, e) in batch.iter().enumerate() {
            let u = snap.entry(e.src);
            let negs = &negatives[i * self.neg_per_pos..(i + 1) * self.neg_per_pos];
            let pairs = std::iter::once((e.dst, 1u8)).chain(negs.iter().map(|&n| (n, 0u8)));
            for (c, label) in pairs {
                let v = snap.entry(c);
                let x = concat(&u.state, &v.state);
                let (logit, tape) = self.head.forward(&x, Mode::Train, &mut self.dropout_rng)?;
                let (l, dl) = bce_loss(logit, label, self.pos_weight);
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("loss {l} at t={}", e.timestamp)));
                }
                let (g, dx) = self.head.backward(tape, dl);
                head_grads.add(&g);
                // Scored states are snapshot values: only their carried
                // Jacobians link them to the parameters.
                if let (Encoder::Dgs(p), Some(eg)) = (&self.encoder, er_grads.as_mut()) {
                    let s = p.state_size();
                    if let (Some(ju), Some(jv)) = (&u.jac, &v.jac) {
                        accumulate_param_grads(p, &dx[..s], ju, eg);
                        accumulate_param_grads(p, &dx[s..], jv, eg);
                    }
                }
                loss.sum += l;
                loss.terms += 1;
            }
        }
        commit(self.store.as_mut(), batch, ups)?;
        self.apply(head_grads, er_grads, loss.terms)?;
        Ok(loss)
    }
}

/// Output of frozen scoring for one event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scored {
    Prob { index: usize, score: f64, label: u8 },
    Rank { index: usize, rank: RankResult },
}

/// Frozen-mode runner: no Jacobians, no parameter updates.
pub struct Scorer<'a> {
    view: ModelView<'a>,
    store: Option<NodeStore>,
    pool: Option<&'a ThreadPool>,
    partial_a: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(view: ModelView<'a>, pool: Option<&'a ThreadPool>) -> Self {
        let store = new_store(view.encoder, view.node_count, false, Precision::F64);
        Scorer { view, store, pool, partial_a: Vec::new(), scratch: Vec::new() }
    }

    /// Continues from an existing (frozen) store.
    pub fn with_store(view: ModelView<'a>, store: NodeStore, pool: Option<&'a ThreadPool>) -> Result<Self> {
        if store.is_tracking() {
            return Err(Error::Invalid("scorer needs a frozen store".into()));
        }
        let mut s = Scorer::new(view, pool);
        if let Some(expected) = s.store.as_ref().map(NodeStore::dims) {
            if store.dims() != expected {
                return Err(Error::Shape(format!(
                    "store dims {:?} do not match the model's {:?}",
                    store.dims(),
                    expected
                )));
            }
            s.store = Some(store);
        }
        Ok(s)
    }

    pub fn view(&self) -> ModelView<'a> {
        self.view
    }

    pub fn store(&self) -> Option<&NodeStore> {
        self.store.as_ref()
    }

    pub fn into_store(self) -> Option<NodeStore> {
        self.store
    }

    pub fn reset(&mut self) {
        if let Some(s) = self.store.as_mut() {
            s.reset();
        }
    }

    /// Runs `events` in batches, scoring those accepted by `select`.
    pub fn run(&mut self, events: &[EdgeEvent], select: &dyn Fn(&EdgeEvent) -> bool) -> Result<Vec<Scored>> {
        let mut out = Vec::new();
        let bs = self.view.batch_size.max(1);
        for (b, batch) in events.chunks(bs).enumerate() {
            for mut s in self.process_batch(batch, select)? {
                match &mut s {
                    Scored::Prob { index, .. } | Scored::Rank { index, .. } => *index += b * bs,
                }
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Updates states without scoring.
    pub fn replay(&mut self, events: &[EdgeEvent]) -> Result<()> {
        self.run(events, &|_| false).map(|_| ())
    }

    fn batch_updates(&self, batch: &[EdgeEvent]) -> Result<(BatchSnapshot, Vec<[EndpointUpdate; 2]>)> {
        let snap = snapshot_for(self.store.as_ref(), batch.iter().flat_map(|e| [e.src, e.dst]))?;
        let ups = if self.store.is_some() {
            let v = self.view;
            map_events(self.pool, batch, |e| update_endpoints(v.encoder, v.stats, v.delta_t, &snap, e))?
        } else {
            Vec::new()
        };
        Ok((snap, ups))
    }

    pub fn process_batch(&mut self, batch: &[EdgeEvent], select: &dyn Fn(&EdgeEvent) -> bool) -> Result<Vec<Scored>> {
        let (snap, ups) = self.batch_updates(batch)?;
        let mut out = Vec::new();
        match self.view.task {
            Task::NodeClass => {
                for (i, e) in batch.iter().enumerate() {
                    let Some(label) = e.label else { continue };
                    if !select(e) {
                        continue;
                    }
                    let score = match self.view.encoder {
                        Encoder::Raw => self.view.head.predict(&raw_features(e, self.view.stats))?,
                        _ => self.view.head.predict(&ups[i][0].entry.state)?,
                    };
                    out.push(Scored::Prob { index: i, score, label });
                }
            }
            Task::LinkPred => {
                let chosen: Vec<usize> = (0..batch.len()).filter(|&i| select(&batch[i])).collect();
                if !chosen.is_empty() {
                    out = self.rank_all(batch, &snap, &chosen)?;
                }
            }
        }
        commit(self.store.as_mut(), batch, ups)?;
        Ok(out)
    }

    /// Ranks each chosen event's destination among all destinations using
    /// pre-batch states. The destination half of the first layer is computed
    /// once per candidate and reused across events.
    fn rank_all(&mut self, batch: &[EdgeEvent], snap: &BatchSnapshot, chosen: &[usize]) -> Result<Vec<Scored>> {
        let store = self
            .store
            .as_ref()
            .ok_or_else(|| Error::Config("link prediction needs node states".into()))?;
        let head = self.view.head;
        let s = store.dims().s;
        let dests = self.view.destinations;
        let mut state = vec![0.0; s];
        let mut part = Vec::new();
        let mut cand_parts = Vec::with_capacity(dests.len());
        for &c in dests {
            store.read_state_into(c, &mut state)?;
            head.first_layer_partial(&state, s, &mut part);
            cand_parts.push(part.clone());
        }
        let mut out = Vec::with_capacity(chosen.len());
        let mut z = Vec::new();
        let mut scores = vec![0.0; dests.len()];
        for &i in chosen {
            let e = &batch[i];
            let pos = dests
                .binary_search(&e.dst)
                .map_err(|_| Error::Invalid(format!("destination {} not in candidate set", e.dst)))?;
            head.first_layer_partial(&snap.entry(e.src).state, 0, &mut self.partial_a);
            for (sc, b) in scores.iter_mut().zip(&cand_parts) {
                z.clear();
                z.extend(self.partial_a.iter().zip(b).map(|(a, b)| a + b));
                *sc = head.predict_from_partial(&z, &mut self.scratch);
            }
            if scores.iter().any(|x| x.is_nan()) {
                return Err(Error::NonFinite("NaN candidate score".into()));
            }
            out.push(Scored::Rank { index: i, rank: rank_in_scores(&scores, pos) });
        }
        Ok(out)
    }

    /// Inference as deployed: every event is scored once (the updated source
    /// for node classification, the true pair before the update for link
    /// prediction) and states are committed. Returns the number scored.
    pub fn infer_batch(&mut self, batch: &[EdgeEvent]) -> Result<usize> {
        let (snap, ups) = self.batch_updates(batch)?;
        let head = self.view.head;
        let mut acc = 0.0;
        for (i, e) in batch.iter().enumerate() {
            acc += match (self.view.task, self.view.encoder) {
                (_, Encoder::Raw) => head.predict(&raw_features(e, self.view.stats))?,
                (Task::NodeClass, _) => head.predict(&ups[i][0].entry.state)?,
                (Task::LinkPred, _) => {
                    head.predict(&concat(&snap.entry(e.src).state, &snap.entry(e.dst).state))?
                }
            };
        }
        std::hint::black_box(acc);
        commit(self.store.as_mut(), batch, ups)?;
        Ok(batch.len())
    }
}
