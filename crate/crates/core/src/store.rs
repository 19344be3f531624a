//! Per-node states and forward-mode sensitivity tables.
//!
//! Entries are created lazily and held in dense slabs. During a mini-batch
//! every occurrence of a node reads the entry frozen at batch start
//! ([`BatchSnapshot`]); all writes land together in [`NodeStore::commit_batch`].
//!
//! A store is either *tracking* (states plus Jacobians, used while training
//! with RTRL) or *frozen* (states only, used for inference and for methods
//! that never read Jacobians).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::NodeId;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGS1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDims {
    /// State size.
    pub s: usize,
    /// Rows per softmax segment; 0 when there is no learnable embedding matrix.
    pub h: usize,
    /// Embedding input width; 0 when there is no learnable embedding matrix.
    pub f: usize,
    pub node_count: usize,
}

impl StoreDims {
    pub fn jw_len(&self) -> usize {
        self.s * self.h * self.f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

/// Sensitivities of one node's state to the global parameters.
///
/// `w` is laid out `[i][r][c]`: state element `i`, row `r` of the segment
/// that owns `i`, feature column `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct RtrlJacobians {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub w: Vec<f64>,
}

impl RtrlJacobians {
    pub fn zeros(dims: &StoreDims) -> Self {
        RtrlJacobians {
            alpha: vec![0.0; dims.s],
            beta: vec![0.0; dims.s],
            w: vec![0.0; dims.jw_len()],
        }
    }

    fn check(&self, dims: &StoreDims) -> Result<()> {
        if self.alpha.len() != dims.s || self.beta.len() != dims.s || self.w.len() != dims.jw_len()
        {
            return Err(Error::Shape(format!(
                "jacobian lengths ({}, {}, {}) do not match s={} h={} f={}",
                self.alpha.len(),
                self.beta.len(),
                self.w.len(),
                dims.s,
                dims.h,
                dims.f
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeEntry {
    pub state: Vec<f64>,
    /// `None` in a frozen store.
    pub jac: Option<RtrlJacobians>,
    pub last_time: Option<f64>,
}

impl NodeEntry {
    fn zeros(dims: &StoreDims, tracking: bool) -> Self {
        NodeEntry {
            state: vec![0.0; dims.s],
            jac: tracking.then(|| RtrlJacobians::zeros(dims)),
            last_time: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Slab {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl Slab {
    fn new(p: Precision) -> Self {
        match p {
            Precision::F64 => Slab::F64(Vec::new()),
            Precision::F32 => Slab::F32(Vec::new()),
        }
    }

    fn len(&self) -> usize {
        match self {
            Slab::F64(v) => v.len(),
            Slab::F32(v) => v.len(),
        }
    }

    fn extend_zeros(&mut self, n: usize) {
        match self {
            Slab::F64(v) => v.resize(v.len() + n, 0.0),
            Slab::F32(v) => v.resize(v.len() + n, 0.0),
        }
    }

    fn read(&self, offset: usize, out: &mut [f64]) {
        match self {
            Slab::F64(v) => out.copy_from_slice(&v[offset..offset + out.len()]),
            Slab::F32(v) => {
                let n = out.len();
                for (o, &x) in out.iter_mut().zip(&v[offset..offset + n]) {
                    *o = f64::from(x);
                }
            }
        }
    }

    fn write(&mut self, offset: usize, src: &[f64]) {
        match self {
            Slab::F64(v) => v[offset..offset + src.len()].copy_from_slice(src),
            Slab::F32(v) => {
                for (o, &x) in v[offset..offset + src.len()].iter_mut().zip(src) {
                    *o = x as f32;
                }
            }
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Slab::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Slab::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(p: Precision, n: usize, cur: &mut Cursor<'_>) -> Result<Slab> {
        Ok(match p {
            Precision::F64 => {
                let bytes = cur.take(n * 8)?;
                Slab::F64(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            Precision::F32 => {
                let bytes = cur.take(n * 4)?;
                Slab::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeStore {
    dims: StoreDims,
    precision: Precision,
    tracking: bool,
    index: HashMap<NodeId, usize>,
    ids: Vec<NodeId>,
    states: Slab,
    j_alpha: Slab,
    j_beta: Slab,
    j_w: Slab,
    last_time: Vec<Option<f64>>,
}

/// Entries frozen at batch start.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchSnapshot {
    entries: HashMap<NodeId, NodeEntry>,
}

impl BatchSnapshot {
    pub fn get(&self, node: NodeId) -> Option<&NodeEntry> {
        self.entries.get(&node)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The entry for `node`; panics if the node was not snapshotted.
    pub fn entry(&self, node: NodeId) -> &NodeEntry {
        self.entries
            .get(&node)
            .unwrap_or_else(|| panic!("node {node} missing from batch snapshot"))
    }
}

/// Pending writes for one batch. When a node is updated more than once the
/// update with the latest timestamp is kept; ties go to the later push.
#[derive(Debug, Clone, Default)]
pub struct BatchUpdates {
    pending: HashMap<NodeId, (f64, NodeEntry)>,
}

impl BatchUpdates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, node: NodeId, timestamp: f64, entry: NodeEntry) {
        match self.pending.get(&node) {
            Some((t, _)) if *t > timestamp => {}
            _ => {
                self.pending.insert(node, (timestamp, entry));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// Byte and element counts held per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub numbers_per_node: usize,
    pub bytes_per_node: usize,
    pub nodes: usize,
    pub total_bytes: usize,
}

impl NodeStore {
    pub fn new(dims: StoreDims, tracking: bool, precision: Precision) -> Self {
        NodeStore {
            dims,
            precision,
            tracking,
            index: HashMap::new(),
            ids: Vec::new(),
            states: Slab::new(precision),
            j_alpha: Slab::new(precision),
            j_beta: Slab::new(precision),
            j_w: Slab::new(precision),
            last_time: Vec::new(),
        }
    }

    pub fn dims(&self) -> StoreDims {
        self.dims
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Drops every entry; subsequent reads see zero-initialized nodes.
    pub fn reset(&mut self) {
        *self = NodeStore::new(self.dims, self.tracking, self.precision);
    }

    fn check_id(&self, node: NodeId) -> Result<()> {
        if node as usize >= self.dims.node_count {
            return Err(Error::NodeOutOfRange { id: node, node_count: self.dims.node_count });
        }
        Ok(())
    }

    fn read_slot(&self, slot: usize) -> NodeEntry {
        let s = self.dims.s;
        let mut state = vec![0.0; s];
        self.states.read(slot * s, &mut state);
        let jac = self.tracking.then(|| {
            let mut j = RtrlJacobians::zeros(&self.dims);
            self.j_alpha.read(slot * s, &mut j.alpha);
            self.j_beta.read(slot * s, &mut j.beta);
            self.j_w.read(slot * self.dims.jw_len(), &mut j.w);
            j
        });
        NodeEntry { state, jac, last_time: self.last_time[slot] }
    }

    fn alloc(&mut self, node: NodeId) -> usize {
        let slot = self.ids.len();
        self.ids.push(node);
        self.index.insert(node, slot);
        self.states.extend_zeros(self.dims.s);
        if self.tracking {
            self.j_alpha.extend_zeros(self.dims.s);
            self.j_beta.extend_zeros(self.dims.s);
            self.j_w.extend_zeros(self.dims.jw_len());
        }
        self.last_time.push(None);
        slot
    }

    /// Reads an entry without allocating; unseen nodes read as zeros.
    pub fn read(&self, node: NodeId) -> Result<NodeEntry> {
        self.check_id(node)?;
        Ok(match self.index.get(&node) {
            Some(&slot) => self.read_slot(slot),
            None => NodeEntry::zeros(&self.dims, self.tracking),
        })
    }

    /// Returns the stored entry, allocating a zero entry for unseen nodes.
    pub fn get_or_init(&mut self, node: NodeId) -> Result<NodeEntry> {
        self.check_id(node)?;
        let slot = match self.index.get(&node) {
            Some(&slot) => slot,
            None => self.alloc(node),
        };
        Ok(self.read_slot(slot))
    }

    /// Reads only the state vector into `out`.
    pub fn read_state_into(&self, node: NodeId, out: &mut [f64]) -> Result<()> {
        self.check_id(node)?;
        match self.index.get(&node) {
            Some(&slot) => self.states.read(slot * self.dims.s, out),
            None => out.fill(0.0),
        }
        Ok(())
    }

    pub fn snapshot_batch(&self, nodes: impl IntoIterator<Item = NodeId>) -> Result<BatchSnapshot> {
        let mut entries = HashMap::new();
        for node in nodes {
            if let std::collections::hash_map::Entry::Vacant(v) = entries.entry(node) {
                v.insert(self.read(node)?);
            }
        }
        Ok(BatchSnapshot { entries })
    }

    fn check_entry(&self, entry: &NodeEntry) -> Result<()> {
        if entry.state.len() != self.dims.s {
            return Err(Error::Shape(format!(
                "state length {} != s={}",
                entry.state.len(),
                self.dims.s
            )));
        }
        match (&entry.jac, self.tracking) {
            (Some(j), true) => j.check(&self.dims),
            (None, true) => Err(Error::Shape("tracking store requires jacobians".into())),
            (_, false) => Ok(()),
        }
    }

    /// Applies all pending writes. Shapes are validated before anything is
    /// written, so a failed commit leaves the store untouched.
    pub fn commit_batch(&mut self, updates: BatchUpdates) -> Result<()> {
        for (_, entry) in updates.pending.values() {
            self.check_entry(entry)?;
        }
        let mut pending: Vec<_> = updates.pending.into_iter().collect();
        pending.sort_unstable_by_key(|(node, _)| *node);
        for (node, (_, entry)) in pending {
            self.check_id(node)?;
            self.write(node, &entry);
        }
        Ok(())
    }

    fn write(&mut self, node: NodeId, entry: &NodeEntry) {
        let slot = match self.index.get(&node) {
            Some(&slot) => slot,
            None => self.alloc(node),
        };
        let s = self.dims.s;
        self.states.write(slot * s, &entry.state);
        if let (true, Some(j)) = (self.tracking, &entry.jac) {
            self.j_alpha.write(slot * s, &j.alpha);
            self.j_beta.write(slot * s, &j.beta);
            self.j_w.write(slot * self.dims.jw_len(), &j.w);
        }
        self.last_time[slot] = entry.last_time;
    }

    pub fn memory_report(&self) -> MemoryReport {
        let numbers_per_node = if self.tracking {
            self.dims.s + 2 * self.dims.s + self.dims.jw_len()
        } else {
            self.dims.s
        };
        let bytes_per_node = numbers_per_node * self.precision.bytes();
        MemoryReport {
            numbers_per_node,
            bytes_per_node,
            nodes: self.len(),
            total_bytes: bytes_per_node * self.len(),
        }
    }

    /// Serializes the store. The layout is documented in `docs/checkpoint.md`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(match self.precision {
            Precision::F64 => 0,
            Precision::F32 => 1,
        });
        out.push(u8::from(self.tracking));
        for d in [self.dims.s, self.dims.h, self.dims.f, self.dims.node_count, self.len()] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for t in &self.last_time {
            out.extend_from_slice(&t.unwrap_or(f64::NAN).to_le_bytes());
        }
        self.states.write_le(&mut out);
        if self.tracking {
            self.j_alpha.write_le(&mut out);
            self.j_beta.write_le(&mut out);
            self.j_w.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<NodeStore> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::BadCheckpointHeader);
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let precision = match cur.u8()? {
            0 => Precision::F64,
            1 => Precision::F32,
            p => return Err(Error::Checkpoint(format!("unknown precision tag {p}"))),
        };
        let tracking = match cur.u8()? {
            0 => false,
            1 => true,
            t => return Err(Error::Checkpoint(format!("unknown tracking flag {t}"))),
        };
        let mut dim = || -> Result<usize> {
            usize::try_from(cur.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))
        };
        let dims = StoreDims { s: dim()?, h: dim()?, f: dim()?, node_count: dim()? };
        let n = dim()?;
        let expected = n
            .checked_mul(4 + 8 + dims.s * precision.bytes())
            .ok_or_else(|| Error::Checkpoint("entry count overflow".into()))?;
        if expected > cur.remaining() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let mut store = NodeStore::new(dims, tracking, precision);
        for slot in 0..n {
            let id = cur.u32()?;
            if id as usize >= dims.node_count || store.index.insert(id, slot).is_some() {
                return Err(Error::Checkpoint(format!("invalid node id {id}")));
            }
            store.ids.push(id);
        }
        for _ in 0..n {
            let t = f64::from_bits(cur.u64()?);
            store.last_time.push((!t.is_nan()).then_some(t));
        }
        store.states = Slab::read_le(precision, n * dims.s, &mut cur)?;
        if tracking {
            store.j_alpha = Slab::read_le(precision, n * dims.s, &mut cur)?;
            store.j_beta = Slab::read_le(precision, n * dims.s, &mut cur)?;
            store.j_w = Slab::read_le(precision, n * dims.jw_len(), &mut cur)?;
        }
        if cur.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", cur.remaining())));
        }
        debug_assert_eq!(store.states.len(), n * dims.s);
        Ok(store)
    }

    pub fn checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn restore(path: impl AsRef<Path>) -> Result<NodeStore> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        NodeStore::from_bytes(&bytes)
    }

    /// Restores and checks that the stored dimensions match `expected`.
    pub fn restore_expecting(path: impl AsRef<Path>, expected: StoreDims) -> Result<NodeStore> {
        let store = NodeStore::restore(path)?;
        if store.dims != expected {
            return Err(Error::Checkpoint(format!(
                "dimension mismatch: checkpoint has {:?}, expected {:?}",
                store.dims, expected
            )));
        }
        Ok(store)
    }
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dims() -> StoreDims {
        StoreDims { s: 4, h: 2, f: 3, node_count: 10 }
    }

    fn entry(v: f64, t: f64) -> NodeEntry {
        let d = dims();
        NodeEntry {
            state: vec![v; d.s],
            jac: Some(RtrlJacobians {
                alpha: vec![v + 1.0; d.s],
                beta: vec![v + 2.0; d.s],
                w: (0..d.jw_len()).map(|k| v * k as f64).collect(),
            }),
            last_time: Some(t),
        }
    }

    #[test]
    fn unseen_node_is_zero() {
        let mut st = NodeStore::new(dims(), true, Precision::F64);
        let e = st.get_or_init(3).unwrap();
        assert_eq!(e.state, vec![0.0; 4]);
        assert_eq!(e.jac.unwrap(), RtrlJacobians::zeros(&dims()));
        assert_eq!(st.len(), 1);
        assert!(matches!(st.get_or_init(10), Err(Error::NodeOutOfRange { .. })));
    }

    #[test]
    fn latest_timestamp_wins() {
        let mut st = NodeStore::new(dims(), true, Precision::F64);
        let mut up = BatchUpdates::new();
        up.push(3, 5.0, entry(0.5, 5.0));
        up.push(3, 9.0, entry(0.9, 9.0));
        up.push(3, 7.0, entry(0.7, 7.0));
        st.commit_batch(up).unwrap();
        assert_eq!(st.get_or_init(3).unwrap(), entry(0.9, 9.0));

        let mut up = BatchUpdates::new();
        up.push(4, 1.0, entry(0.1, 1.0));
        up.push(4, 1.0, entry(0.2, 1.0));
        st.commit_batch(up).unwrap();
        assert_eq!(st.read(4).unwrap().state, vec![0.2; 4]);
    }

    #[test]
    fn empty_commit_is_noop() {
        let mut st = NodeStore::new(dims(), true, Precision::F64);
        st.commit_batch(BatchUpdates::new()).unwrap();
        assert!(st.is_empty());
        assert!(st.snapshot_batch([]).unwrap().is_empty());
    }

    #[test]
    fn snapshot_is_isolated_from_commits() {
        let mut st = NodeStore::new(dims(), true, Precision::F64);
        let snap = st.snapshot_batch([1, 2, 1]).unwrap();
        assert_eq!(snap.len(), 2);
        let mut up = BatchUpdates::new();
        up.push(1, 1.0, entry(0.3, 1.0));
        st.commit_batch(up).unwrap();
        assert_eq!(snap.entry(1).state, vec![0.0; 4]);
        assert_eq!(st.read(1).unwrap().state, vec![0.3; 4]);
    }

    #[test]
    fn shape_mismatch_rejected_atomically() {
        let mut st = NodeStore::new(dims(), true, Precision::F64);
        let mut up = BatchUpdates::new();
        up.push(1, 1.0, entry(0.3, 1.0));
        let mut bad = entry(0.1, 1.0);
        bad.state.push(0.0);
        up.push(2, 1.0, bad);
        assert!(matches!(st.commit_batch(up), Err(Error::Shape(_))));
        assert!(st.is_empty());
    }

    #[test]
    fn memory_report_counts_numbers() {
        let mut st = NodeStore::new(dims(), true, Precision::F64);
        st.get_or_init(0).unwrap();
        st.get_or_init(1).unwrap();
        let r = st.memory_report();
        // s + 2s + s*h*f = 4 + 8 + 24
        assert_eq!(r.numbers_per_node, 36);
        assert_eq!(r.bytes_per_node, 288);
        assert_eq!(r.total_bytes, 576);
        let frozen = NodeStore::new(dims(), false, Precision::F32);
        assert_eq!(frozen.memory_report().bytes_per_node, 16);
    }

    #[test]
    fn corrupt_and_mismatched_checkpoints() {
        let mut st = NodeStore::new(dims(), true, Precision::F64);
        st.get_or_init(2).unwrap();
        let mut bytes = st.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(NodeStore::from_bytes(&bytes), Err(Error::BadCheckpointHeader)));
        let bytes = st.to_bytes();
        assert!(NodeStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");
        st.checkpoint(&path).unwrap();
        let other = StoreDims { s: 5, ..dims() };
        assert!(NodeStore::restore_expecting(&path, other).is_err());
        assert_eq!(NodeStore::restore_expecting(&path, dims()).unwrap(), st);
    }

    #[test]
    fn f32_store_rounds_on_write() {
        let mut st = NodeStore::new(dims(), false, Precision::F32);
        let mut up = BatchUpdates::new();
        up.push(0, 0.0, NodeEntry { state: vec![0.1; 4], jac: None, last_time: None });
        st.commit_batch(up).unwrap();
        assert_eq!(st.read(0).unwrap().state[0], f64::from(0.1f32));
        assert_eq!(NodeStore::from_bytes(&st.to_bytes()).unwrap(), st);
    }

    proptest! {
        #[test]
        fn checkpoint_roundtrip_is_identity(
            nodes in proptest::collection::vec((0u32..10, -1e3f64..1e3, 0.0f64..1e6), 0..20),
        ) {
            let mut st = NodeStore::new(dims(), true, Precision::F64);
            for (node, v, t) in nodes {
                let mut up = BatchUpdates::new();
                up.push(node, t, entry(v, t));
                st.commit_batch(up).unwrap();
            }
            let back = NodeStore::from_bytes(&st.to_bytes()).unwrap();
            prop_assert_eq!(&back, &st);
            for id in 0..10u32 {
                let (a, b) = (back.read(id).unwrap(), st.read(id).unwrap());
                prop_assert!(a.state.iter().zip(&b.state).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }

        #[test]
        fn snapshot_equals_store_at_snapshot_time(
            ops in proptest::collection::vec((0u32..10, -1.0f64..1.0), 1..30),
        ) {
            let mut st = NodeStore::new(dims(), true, Precision::F64);
            let mut snaps = Vec::new();
            for (i, (node, v)) in ops.iter().enumerate() {
                if i % 3 == 0 {
                    let all: Vec<NodeId> = (0..10).collect();
                    let expected: Vec<_> = all.iter().map(|&n| st.read(n).unwrap()).collect();
                    snaps.push((st.snapshot_batch(all).unwrap(), expected));
                }
                let mut up = BatchUpdates::new();
                up.push(*node, i as f64, entry(*v, i as f64));
                st.commit_batch(up).unwrap();
            }
            for (snap, expected) in snaps {
                for (n, e) in expected.iter().enumerate() {
                    prop_assert_eq!(snap.entry(n as NodeId), e);
                }
            }
        }
    }
}
