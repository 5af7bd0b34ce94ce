//! Static forward graph construction.
//!
//! Node-building functions create their output tensors and append them to
//! the execution list as the last step of construction, so construction
//! order is the execution order. The list stores tensor bundles and supports
//! four append modes:
//!
//! * `Serial`: one tensor after one tensor.
//! * `Scatter`: `n > 1` tensors after one tensor; opens a parallel region.
//! * `Parallel`: `n` tensors after `n` tensors, lane by lane.
//! * `Gather`: one tensor after `n > 1` tensors; closes the region.

use std::collections::HashMap;
use std::ops::Range;

use thiserror::Error;

use crate::memory::{MemoryError, MemoryPool};
use crate::tensor::{
    byte_size, make_view, AuxParams, DType, HostTensor, OpKind, Shape, Tensor, TensorBundle, TensorError, TensorId,
};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{mode:?} append of a {bundle}-tensor bundle after a {predecessor}-tensor bundle")]
    ModeMismatch {
        mode: AppendMode,
        bundle: usize,
        predecessor: usize,
    },
    #[error("scatter inside an open parallel region (opened at entry {open})")]
    NestedRegion { open: usize },
    #[error("parallel append outside a parallel region")]
    NoOpenRegion,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("entry {entry} (`{tensor}`) reads `{source_name}`, produced later at entry {source_entry}")]
    NotTopological {
        entry: usize,
        tensor: String,
        source_name: String,
        source_entry: usize,
    },
    #[error("malformed parallel region: {0}")]
    MalformedRegion(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("kv cache layer {layer}: write at position {position}, expected {expected}")]
    Order {
        layer: usize,
        position: usize,
        expected: usize,
    },
    #[error("kv cache layer {layer}: capacity {max_seq} exhausted")]
    Capacity { layer: usize, max_seq: usize },
    #[error("kv cache layer {layer} is empty")]
    Empty { layer: usize },
    #[error("kv cache layer {layer}: row needs {expected} values, got {got}")]
    RowLength {
        layer: usize,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendMode {
    Serial,
    Scatter,
    Parallel,
    Gather,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecEntry {
    pub bundle: TensorBundle,
    pub mode: AppendMode,
    pub successor: Option<usize>,
}

/// Array-backed linked list of graph nodes in execution order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecList {
    entries: Vec<ExecEntry>,
    open_region: Option<usize>,
}

impl ExecList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, bundle: TensorBundle, mode: AppendMode) -> Result<usize, GraphError> {
        let n = bundle.len();
        let prev = self.entries.last().map(|e| e.bundle.len());
        let mismatch = || GraphError::ModeMismatch {
            mode,
            bundle: n,
            predecessor: prev.unwrap_or(0),
        };
        match mode {
            AppendMode::Serial => {
                if n != 1 || prev.is_some_and(|p| p != 1) {
                    return Err(mismatch());
                }
            }
            AppendMode::Scatter => {
                if let Some(open) = self.open_region {
                    return Err(GraphError::NestedRegion { open });
                }
                if n < 2 || prev.is_some_and(|p| p != 1) {
                    return Err(mismatch());
                }
            }
            AppendMode::Parallel => {
                if self.open_region.is_none() {
                    return Err(GraphError::NoOpenRegion);
                }
                if prev != Some(n) {
                    return Err(mismatch());
                }
            }
            AppendMode::Gather => {
                if n != 1 || !prev.is_some_and(|p| p > 1) {
                    return Err(mismatch());
                }
            }
        }
        let index = self.entries.len();
        if let Some(last) = self.entries.last_mut() {
            last.successor = Some(index);
        }
        self.entries.push(ExecEntry {
            bundle,
            mode,
            successor: None,
        });
        match mode {
            AppendMode::Scatter => self.open_region = Some(index),
            AppendMode::Gather => self.open_region = None,
            _ => {}
        }
        Ok(index)
    }

    pub fn entries(&self) -> &[ExecEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head(&self) -> Option<usize> {
        (!self.entries.is_empty()).then_some(0)
    }

    pub fn tail(&self) -> Option<usize> {
        self.entries.len().checked_sub(1)
    }

    pub fn has_open_region(&self) -> bool {
        self.open_region.is_some()
    }

    /// Walks the successor links from the head.
    pub fn iter_linked(&self) -> impl Iterator<Item = (usize, &ExecEntry)> + '_ {
        let mut next = self.head();
        std::iter::from_fn(move || {
            let i = next?;
            next = self.entries[i].successor;
            Some((i, &self.entries[i]))
        })
    }

    /// Checks the bundle-size pattern `1.., n, n.., 1..` of every region.
    pub fn check_regions(&self) -> Result<Vec<ParallelRegion>, GraphError> {
        let mut regions = Vec::new();
        let mut open: Option<(usize, usize)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let n = e.bundle.len();
            match (e.mode, open) {
                (AppendMode::Serial, None) if n == 1 => {}
                (AppendMode::Scatter, None) if n > 1 => open = Some((i, n)),
                (AppendMode::Parallel, Some((_, lanes))) if n == lanes => {}
                (AppendMode::Gather, Some((start, lanes))) if n == 1 => {
                    regions.push(ParallelRegion {
                        scatter: start,
                        body: start + 1..i,
                        gather: i,
                        lanes,
                    });
                    open = None;
                }
                _ => {
                    return Err(GraphError::MalformedRegion(format!(
                        "entry {i}: {:?} bundle of {n} (open region: {open:?})",
                        e.mode
                    )))
                }
            }
        }
        if let Some((start, _)) = open {
            return Err(GraphError::MalformedRegion(format!("region opened at {start} never closed")));
        }
        Ok(regions)
    }
}

/// Entry indices of one Scatter..Gather region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelRegion {
    pub scatter: usize,
    pub body: Range<usize>,
    pub gather: usize,
    pub lanes: usize,
}

/// Tensor headers plus the execution list.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    tensors: Vec<Tensor>,
    names: HashMap<String, TensorId>,
    exec: ExecList,
    producer: Vec<Option<usize>>,
}

impl Graph {
    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.names.get(name).copied()
    }

    pub fn exec(&self) -> &ExecList {
        &self.exec
    }

    /// Execution entry that computes `id`, if any.
    pub fn producer(&self, id: TensorId) -> Option<usize> {
        self.producer[id.index()]
    }

    fn insert(&mut self, tensor: Tensor) -> Result<TensorId, GraphError> {
        if self.names.contains_key(&tensor.name) {
            return Err(GraphError::DuplicateName(tensor.name));
        }
        let id = TensorId(self.tensors.len() as u32);
        self.names.insert(tensor.name.clone(), id);
        self.tensors.push(tensor);
        self.producer.push(None);
        Ok(id)
    }

    fn append(&mut self, bundle: TensorBundle, mode: AppendMode) -> Result<usize, GraphError> {
        let index = self.exec.append(bundle.clone(), mode)?;
        for id in bundle.iter() {
            self.producer[id.index()] = Some(index);
        }
        Ok(index)
    }

    /// Single scan: every source of every entry is a leaf or is produced by
    /// an earlier entry.
    pub fn check_topological(&self) -> Result<(), GraphError> {
        for (i, e) in self.exec.entries().iter().enumerate() {
            for id in e.bundle.iter() {
                for &src in &self.tensor(id).sources {
                    if let Some(j) = self.producer(src) {
                        if j >= i {
                            return Err(GraphError::NotTopological {
                                entry: i,
                                tensor: self.tensor(id).name.clone(),
                                source_name: self.tensor(src).name.clone(),
                                source_entry: j,
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rows of one layer/lane KV cache.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub layer: usize,
    pub lane: usize,
    pub k: TensorId,
    pub v: TensorId,
    pub max_seq: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row_len(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Fails unless `position` is the next free row.
    pub fn check_next(&self, position: usize) -> Result<(), KvError> {
        if self.len >= self.max_seq {
            return Err(KvError::Capacity {
                layer: self.layer,
                max_seq: self.max_seq,
            });
        }
        if position != self.len {
            return Err(KvError::Order {
                layer: self.layer,
                position,
                expected: self.len,
            });
        }
        Ok(())
    }

    /// Marks one more row as written (after the graph wrote it).
    pub fn advance(&mut self) {
        debug_assert!(self.len < self.max_seq);
        self.len += 1;
    }

    pub fn reset(&mut self) {
        self.len = 0;
    }

    /// Writes row `position` of both caches and extends the length.
    pub fn set(
        &mut self,
        graph: &Graph,
        pool: &mut MemoryPool,
        position: usize,
        k: &[f32],
        v: &[f32],
    ) -> Result<(), KvError> {
        self.check_next(position)?;
        let row = self.row_len();
        for got in [k.len(), v.len()] {
            if got != row {
                return Err(KvError::RowLength {
                    layer: self.layer,
                    expected: row,
                    got,
                });
            }
        }
        for (id, data) in [(self.k, k), (self.v, v)] {
            let view = make_view(graph.tensor(id), position..position + 1, "kv.row").expect("row in range");
            pool.write_f32(&view.region, data);
        }
        self.len += 1;
        Ok(())
    }

    /// Views over rows `[0, len)` of the key and value caches.
    pub fn get(&self, graph: &Graph) -> Result<(Tensor, Tensor), KvError> {
        if self.len == 0 {
            return Err(KvError::Empty { layer: self.layer });
        }
        let view = |id: TensorId, tag: &str| {
            let t = graph.tensor(id);
            make_view(t, 0..self.len, format!("{}.{tag}", t.name)).expect("len <= max_seq")
        };
        Ok((view(self.k, "k_view"), view(self.v, "v_view")))
    }
}

/// Aux slot layout shared with the scheduler.
pub mod aux {
    pub const EPS: usize = 0;
    pub const HEAD_DIM: usize = 0;
    pub const THETA: usize = 1;
    pub const N_HEADS: usize = 1;
    pub const N_KV_HEADS: usize = 2;
    pub const SCALE: usize = 3;
}

/// Builds a [`Graph`], allocating every tensor from a [`MemoryPool`].
pub struct GraphBuilder<'p> {
    graph: Graph,
    pool: &'p mut MemoryPool,
    layer: usize,
    home_node: usize,
}

impl<'p> GraphBuilder<'p> {
    pub fn new(pool: &'p mut MemoryPool) -> Self {
        Self {
            graph: Graph::default(),
            pool,
            layer: 0,
            home_node: 0,
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn pool(&mut self) -> &mut MemoryPool {
        self.pool
    }

    pub fn finish(self) -> Graph {
        self.graph
    }

    /// Activation layer index used for subsequent node outputs.
    pub fn set_layer(&mut self, layer: usize) {
        self.layer = layer;
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Weight, input or other long-lived tensor in `node`'s weight arena.
    pub fn leaf(&mut self, name: &str, dims: &[usize], dtype: DType, node: usize) -> Result<TensorId, GraphError> {
        if self.graph.find(name).is_some() {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        let shape = Shape::new(dims)?;
        let region = self.pool.alloc_weight(node, byte_size(dims, dtype)?)?;
        self.graph.insert(Tensor::leaf(name, shape, dtype, region)?)
    }

    /// Leaf holding `host`'s data. Measuring pools only record the size.
    pub fn leaf_data(&mut self, host: &HostTensor, node: usize) -> Result<TensorId, GraphError> {
        let id = self.leaf(&host.name, host.shape.dims(), host.dtype, node)?;
        if self.pool.is_backed() {
            let region = self.graph.tensor(id).region;
            self.pool.write(&region, &host.data);
        }
        Ok(id)
    }

    /// Registers a view of rows `rows` of `src`.
    pub fn view(&mut self, src: TensorId, rows: Range<usize>, name: &str) -> Result<TensorId, GraphError> {
        let t = make_view(self.graph.tensor(src), rows, name)?;
        self.graph.insert(t)
    }

    fn node(
        &mut self,
        name: String,
        dims: &[usize],
        op: OpKind,
        sources: Vec<TensorId>,
        aux: AuxParams,
        node: usize,
    ) -> Result<TensorId, GraphError> {
        if self.graph.find(&name).is_some() {
            return Err(GraphError::DuplicateName(name));
        }
        let shape = Shape::new(dims)?;
        let region = self
            .pool
            .alloc_activation(node, self.layer, byte_size(dims, DType::F32)?)?;
        let mut t = Tensor::leaf(name, shape, DType::F32, region)?;
        t.op = op;
        t.sources = sources;
        t.aux = aux;
        self.graph.insert(t)
    }

    fn append_auto(&mut self, bundle: TensorBundle) -> Result<TensorBundle, GraphError> {
        let mode = if bundle.len() == 1 {
            AppendMode::Serial
        } else {
            AppendMode::Parallel
        };
        self.graph.append(bundle.clone(), mode)?;
        Ok(bundle)
    }

    /// Appends an existing bundle in an explicit mode.
    pub fn append(&mut self, bundle: TensorBundle, mode: AppendMode) -> Result<usize, GraphError> {
        self.graph.append(bundle, mode)
    }

    fn lane_name(name: &str, lanes: usize, lane: usize) -> String {
        if lanes == 1 {
            name.to_string()
        } else {
            format!("{name}#{lane}")
        }
    }

    fn t(&self, id: TensorId) -> &Tensor {
        self.graph.tensor(id)
    }

    /// `out = W x` per lane: weight `[M, K]`, input `[K, N]`, output `[M, N]`.
    pub fn linear(&mut self, input: &TensorBundle, weight: &TensorBundle, name: &str) -> Result<TensorBundle, GraphError> {
        if input.len() != weight.len() {
            return Err(GraphError::Shape(format!(
                "{name}: {} input lanes against {} weight lanes",
                input.len(),
                weight.len()
            )));
        }
        let lanes = input.len();
        let mut out = Vec::with_capacity(lanes);
        for lane in 0..lanes {
            let (x, w) = (self.t(input.lane(lane)), self.t(weight.lane(lane)));
            let (wd, xd) = (w.shape.dims(), x.shape.dims());
            if wd.len() != 2 || xd.len() != 2 || wd[1] != xd[0] || x.dtype != DType::F32 {
                return Err(GraphError::Shape(format!(
                    "{name}: weight `{}` {:?} {} cannot multiply input `{}` {:?} {}",
                    w.name, w.shape, w.dtype, x.name, x.shape, x.dtype
                )));
            }
            let dims = [wd[0], xd[1]];
            let node = x.node.unwrap_or(self.home_node);
            let id = self.node(
                Self::lane_name(name, lanes, lane),
                &dims,
                OpKind::MatMul,
                vec![weight.lane(lane), input.lane(lane)],
                AuxParams::default(),
                node,
            )?;
            out.push(id);
        }
        self.append_auto(TensorBundle::new(out))
    }

    fn map_lanes(
        &mut self,
        name: &str,
        inputs: &[&TensorBundle],
        op: OpKind,
        aux: AuxParams,
    ) -> Result<TensorBundle, GraphError> {
        let lanes = inputs[0].len();
        if inputs.iter().any(|b| b.len() != lanes) {
            return Err(GraphError::Shape(format!("{name}: inputs disagree on lane count")));
        }
        let mut out = Vec::with_capacity(lanes);
        for lane in 0..lanes {
            let first = self.t(inputs[0].lane(lane));
            let (shape, node) = (first.shape, first.node.unwrap_or(self.home_node));
            let sources: Vec<TensorId> = inputs.iter().map(|b| b.lane(lane)).collect();
            if op != OpKind::RMSNorm {
                for &s in &sources[1..] {
                    if self.t(s).shape.numel() != shape.numel() {
                        return Err(GraphError::Shape(format!(
                            "{name}: `{}` {:?} vs `{}` {:?}",
                            first.name,
                            shape,
                            self.t(s).name,
                            self.t(s).shape
                        )));
                    }
                }
            }
            out.push(self.node(Self::lane_name(name, lanes, lane), shape.dims(), op, sources, aux, node)?);
        }
        self.append_auto(TensorBundle::new(out))
    }

    pub fn rmsnorm(&mut self, x: &TensorBundle, gamma: &TensorBundle, eps: f32, name: &str) -> Result<TensorBundle, GraphError> {
        for lane in 0..x.len().min(gamma.len()) {
            let (xt, gt) = (self.t(x.lane(lane)), self.t(gamma.lane(lane)));
            if gt.dtype != DType::F32 || gt.shape.numel() != xt.shape.numel() {
                return Err(GraphError::Shape(format!(
                    "{name}: gain `{}` {:?} {} for input {:?}",
                    gt.name, gt.shape, gt.dtype, xt.shape
                )));
            }
        }
        let mut aux = AuxParams::default();
        aux.set_f32(aux::EPS, eps);
        self.map_lanes(name, &[x, gamma], OpKind::RMSNorm, aux)
    }

    pub fn rope(&mut self, x: &TensorBundle, head_dim: usize, theta: f32, name: &str) -> Result<TensorBundle, GraphError> {
        for id in x.iter() {
            if head_dim % 2 != 0 || self.t(id).shape.numel() % head_dim != 0 {
                return Err(GraphError::Shape(format!(
                    "{name}: {:?} is not a whole number of even heads of {head_dim}",
                    self.t(id).shape
                )));
            }
        }
        let mut aux = AuxParams::default();
        aux.set_u32(aux::HEAD_DIM, head_dim as u32).set_f32(aux::THETA, theta);
        self.map_lanes(name, &[x], OpKind::RoPE, aux)
    }

    pub fn silu(&mut self, x: &TensorBundle, name: &str) -> Result<TensorBundle, GraphError> {
        self.map_lanes(name, &[x], OpKind::SiLU, AuxParams::default())
    }

    pub fn mul(&mut self, a: &TensorBundle, b: &TensorBundle, name: &str) -> Result<TensorBundle, GraphError> {
        self.map_lanes(name, &[a, b], OpKind::Mul, AuxParams::default())
    }

    pub fn add(&mut self, a: &TensorBundle, b: &TensorBundle, name: &str) -> Result<TensorBundle, GraphError> {
        self.map_lanes(name, &[a, b], OpKind::Add, AuxParams::default())
    }

    pub fn softmax(&mut self, x: &TensorBundle, name: &str) -> Result<TensorBundle, GraphError> {
        self.map_lanes(name, &[x], OpKind::Softmax, AuxParams::default())
    }

    /// Embedding lookup of the step's token: table `[vocab, hidden]` to
    /// `[hidden, 1]`.
    pub fn embed(&mut self, table: TensorId, name: &str) -> Result<TensorId, GraphError> {
        let t = self.t(table);
        if t.shape.rank() != 2 {
            return Err(GraphError::Shape(format!("{name}: table {:?} is not 2-D", t.shape)));
        }
        let hidden = t.shape.dims()[1];
        let node = t.node.unwrap_or(self.home_node);
        let id = self.node(name.into(), &[hidden, 1], OpKind::Embed, vec![table], AuxParams::default(), node)?;
        self.append_auto(id.into())?;
        Ok(id)
    }

    /// Allocates the key/value cache of one layer lane in `node`'s weight
    /// arena.
    pub fn kv_create(
        &mut self,
        layer: usize,
        lane: usize,
        node: usize,
        max_seq: usize,
        kv_heads: usize,
        head_dim: usize,
    ) -> Result<KvCache, GraphError> {
        let dims = [max_seq, kv_heads * head_dim];
        let k = self.leaf(&format!("cache.{layer}.k#{lane}"), &dims, DType::F32, node)?;
        let v = self.leaf(&format!("cache.{layer}.v#{lane}"), &dims, DType::F32, node)?;
        Ok(KvCache {
            layer,
            lane,
            k,
            v,
            max_seq,
            kv_heads,
            head_dim,
            len: 0,
        })
    }

    /// Nodes writing the step's key/value rows into the caches (one cache per
    /// lane). Returns the key and value store bundles, whose tensors alias
    /// the full caches.
    pub fn kv_store(
        &mut self,
        caches: &[KvCache],
        k: &TensorBundle,
        v: &TensorBundle,
        name: &str,
    ) -> Result<(TensorBundle, TensorBundle), GraphError> {
        if caches.len() != k.len() || caches.len() != v.len() {
            return Err(GraphError::Shape(format!(
                "{name}: {} caches for {} key / {} value lanes",
                caches.len(),
                k.len(),
                v.len()
            )));
        }
        let lanes = caches.len();
        let mut stored = [Vec::with_capacity(lanes), Vec::with_capacity(lanes)];
        for (which, (src, tag)) in [(k, "k"), (v, "v")].into_iter().enumerate() {
            for (lane, cache) in caches.iter().enumerate() {
                let target = if which == 0 { cache.k } else { cache.v };
                let (s, c) = (self.t(src.lane(lane)), self.t(target));
                if s.shape.numel() != cache.row_len() {
                    return Err(GraphError::Shape(format!(
                        "{name}: `{}` {:?} does not match cache row of {}",
                        s.name,
                        s.shape,
                        cache.row_len()
                    )));
                }
                let mut t = c.clone();
                t.name = Self::lane_name(&format!("{name}.{tag}"), lanes, lane);
                t.op = OpKind::Copy;
                t.sources = vec![src.lane(lane)];
                let id = self.graph.insert(t)?;
                stored[which].push(id);
            }
            let bundle = TensorBundle::new(std::mem::take(&mut stored[which]));
            self.append_auto(bundle.clone())?;
            stored[which] = bundle.handles().to_vec();
        }
        let [ks, vs] = stored;
        Ok((TensorBundle::new(ks), TensorBundle::new(vs)))
    }

    /// Single-query attention per lane over the stored caches.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: &TensorBundle,
        k_store: &TensorBundle,
        v_store: &TensorBundle,
        heads_per_lane: usize,
        kv_heads_per_lane: usize,
        head_dim: usize,
        name: &str,
    ) -> Result<TensorBundle, GraphError> {
        let lanes = q.len();
        if k_store.len() != lanes || v_store.len() != lanes {
            return Err(GraphError::Shape(format!("{name}: lane counts disagree")));
        }
        if kv_heads_per_lane == 0 || heads_per_lane % kv_heads_per_lane != 0 {
            return Err(GraphError::Config(format!(
                "{name}: {heads_per_lane} query heads cannot share {kv_heads_per_lane} kv heads"
            )));
        }
        let mut aux = AuxParams::default();
        aux.set_u32(aux::HEAD_DIM, head_dim as u32)
            .set_u32(aux::N_HEADS, heads_per_lane as u32)
            .set_u32(aux::N_KV_HEADS, kv_heads_per_lane as u32)
            .set_f32(aux::SCALE, 1.0 / (head_dim as f32).sqrt());
        let mut out = Vec::with_capacity(lanes);
        for lane in 0..lanes {
            let qt = self.t(q.lane(lane));
            if qt.shape.numel() != heads_per_lane * head_dim
                || self.t(k_store.lane(lane)).shape.row_elems() != kv_heads_per_lane * head_dim
            {
                return Err(GraphError::Shape(format!(
                    "{name}: query {:?} / cache {:?} for {heads_per_lane}x{head_dim} heads",
                    qt.shape,
                    self.t(k_store.lane(lane)).shape
                )));
            }
            let node = qt.node.unwrap_or(self.home_node);
            let dims = [heads_per_lane * head_dim, 1];
            out.push(self.node(
                Self::lane_name(name, lanes, lane),
                &dims,
                OpKind::Attention,
                vec![q.lane(lane), k_store.lane(lane), v_store.lane(lane)],
                aux,
                node,
            )?);
        }
        self.append_auto(TensorBundle::new(out))
    }

    /// Opens a parallel region: one node-local copy of `x` per lane node.
    pub fn scatter(&mut self, x: TensorId, lane_nodes: &[usize], name: &str) -> Result<TensorBundle, GraphError> {
        if lane_nodes.len() < 2 {
            return Err(GraphError::Config(format!("{name}: scatter needs at least two lanes")));
        }
        let shape = self.t(x).shape;
        let mut out = Vec::with_capacity(lane_nodes.len());
        for (lane, &node) in lane_nodes.iter().enumerate() {
            out.push(self.node(
                format!("{name}#{lane}"),
                shape.dims(),
                OpKind::Scatter,
                vec![x],
                AuxParams::default(),
                node,
            )?);
        }
        let bundle = TensorBundle::new(out);
        self.graph.append(bundle.clone(), AppendMode::Scatter)?;
        Ok(bundle)
    }

    /// Closes a parallel region by summing the lanes in lane order.
    pub fn gather(&mut self, lanes: &TensorBundle, name: &str) -> Result<TensorId, GraphError> {
        let shape = self.t(lanes.lane(0)).shape;
        if lanes.iter().any(|id| self.t(id).shape != shape) {
            return Err(GraphError::Shape(format!("{name}: lane outputs differ in shape")));
        }
        let id = self.node(
            name.into(),
            shape.dims(),
            OpKind::Gather,
            lanes.handles().to_vec(),
            AuxParams::default(),
            self.home_node,
        )?;
        self.graph.append(id.into(), AppendMode::Gather)?;
        Ok(id)
    }
}

/// Decoder block hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockDims {
    pub hidden: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub rope_theta: f32,
    pub rms_eps: f32,
}

impl BlockDims {
    /// Query and kv heads per lane. More lanes than kv heads replicates each
    /// kv head across `lanes / n_kv_heads` lanes.
    pub fn lane_heads(&self, lanes: usize) -> Result<(usize, usize), GraphError> {
        if lanes == 0 || self.n_heads % lanes != 0 {
            return Err(GraphError::Config(format!(
                "heads={} not divisible by {lanes} lanes",
                self.n_heads
            )));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return Err(GraphError::Config(format!(
                "heads={} not divisible by kv_heads={}",
                self.n_heads, self.n_kv_heads
            )));
        }
        let kv = if self.n_kv_heads % lanes == 0 {
            self.n_kv_heads / lanes
        } else if lanes % self.n_kv_heads == 0 {
            1
        } else {
            return Err(GraphError::Config(format!(
                "kv_heads={} incompatible with {lanes} lanes",
                self.n_kv_heads
            )));
        };
        Ok((self.n_heads / lanes, kv))
    }
}

/// Attention weights; projection bundles hold one tensor per lane.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub norm: TensorId,
    pub q: TensorBundle,
    pub k: TensorBundle,
    pub v: TensorBundle,
    pub o: TensorBundle,
}

#[derive(Debug, Clone)]
pub struct MlpWeights {
    pub norm: TensorId,
    pub gate: TensorBundle,
    pub up: TensorBundle,
    pub down: TensorBundle,
}

fn lane_nodes(b: &GraphBuilder<'_>, bundle: &TensorBundle) -> Vec<usize> {
    bundle.iter().map(|id| b.graph().tensor(id).node.unwrap_or(0)).collect()
}

/// Opens a region when the weights are split across lanes.
fn enter_lanes(b: &mut GraphBuilder<'_>, h: TensorId, weights: &TensorBundle, name: &str) -> Result<TensorBundle, GraphError> {
    if weights.len() == 1 {
        Ok(h.into())
    } else {
        let nodes = lane_nodes(b, weights);
        b.scatter(h, &nodes, name)
    }
}

fn leave_lanes(b: &mut GraphBuilder<'_>, out: TensorBundle, name: &str) -> Result<TensorId, GraphError> {
    match out.single() {
        Some(id) => Ok(id),
        None => b.gather(&out, name),
    }
}

/// `x + O(attention(rope(Q h), rope(K h), V h))` with `h = rmsnorm(x)`.
///
/// With `n` weight lanes, Q/K/V are split by heads, the region opens after
/// the norm and the per-lane O partial products are summed by the gather.
pub fn build_attention_block(
    b: &mut GraphBuilder<'_>,
    x: TensorId,
    w: &AttentionWeights,
    caches: &[KvCache],
    dims: &BlockDims,
    prefix: &str,
) -> Result<TensorId, GraphError> {
    let lanes = w.q.len();
    let (heads, kv_heads) = dims.lane_heads(lanes)?;
    if [&w.k, &w.v, &w.o].iter().any(|t| t.len() != lanes) || caches.len() != lanes {
        return Err(GraphError::Config(format!("{prefix}: attention weights disagree on lane count")));
    }
    let h = b.rmsnorm(&x.into(), &w.norm.into(), dims.rms_eps, &format!("{prefix}.attn_norm"))?;
    let h = leave_lanes_single(h);
    let h = enter_lanes(b, h, &w.q, &format!("{prefix}.attn_scatter"))?;
    let q = b.linear(&h, &w.q, &format!("{prefix}.q"))?;
    let k = b.linear(&h, &w.k, &format!("{prefix}.k"))?;
    let v = b.linear(&h, &w.v, &format!("{prefix}.v"))?;
    let q = b.rope(&q, dims.head_dim, dims.rope_theta, &format!("{prefix}.q_rope"))?;
    let k = b.rope(&k, dims.head_dim, dims.rope_theta, &format!("{prefix}.k_rope"))?;
    let (ks, vs) = b.kv_store(caches, &k, &v, &format!("{prefix}.kv_store"))?;
    let a = b.attention(&q, &ks, &vs, heads, kv_heads, dims.head_dim, &format!("{prefix}.attn"))?;
    let o = b.linear(&a, &w.o, &format!("{prefix}.o"))?;
    let o = leave_lanes(b, o, &format!("{prefix}.attn_gather"))?;
    let out = b.add(&x.into(), &o.into(), &format!("{prefix}.attn_residual"))?;
    Ok(leave_lanes_single(out))
}

/// `x + down(silu(gate h) * up h)` with `h = rmsnorm(x)`.
pub fn build_mlp_block(
    b: &mut GraphBuilder<'_>,
    x: TensorId,
    w: &MlpWeights,
    dims: &BlockDims,
    prefix: &str,
) -> Result<TensorId, GraphError> {
    let lanes = w.gate.len();
    if w.up.len() != lanes || w.down.len() != lanes {
        return Err(GraphError::Config(format!("{prefix}: MLP weights disagree on lane count")));
    }
    let h = b.rmsnorm(&x.into(), &w.norm.into(), dims.rms_eps, &format!("{prefix}.ffn_norm"))?;
    let h = leave_lanes_single(h);
    let h = enter_lanes(b, h, &w.gate, &format!("{prefix}.ffn_scatter"))?;
    let gate = b.linear(&h, &w.gate, &format!("{prefix}.gate"))?;
    let up = b.linear(&h, &w.up, &format!("{prefix}.up"))?;
    let act = b.silu(&gate, &format!("{prefix}.silu"))?;
    let prod = b.mul(&act, &up, &format!("{prefix}.gate_up"))?;
    let down = b.linear(&prod, &w.down, &format!("{prefix}.down"))?;
    let down = leave_lanes(b, down, &format!("{prefix}.ffn_gather"))?;
    let out = b.add(&x.into(), &down.into(), &format!("{prefix}.ffn_residual"))?;
    Ok(leave_lanes_single(out))
}

fn leave_lanes_single(b: TensorBundle) -> TensorId {
    b.single().expect("serial node yields one tensor")
}

/// Node names produced by one block template, in append order.
pub const ATTENTION_TEMPLATE: &[&str] = &[
    "attn_norm",
    "q",
    "k",
    "v",
    "q_rope",
    "k_rope",
    "kv_store.k",
    "kv_store.v",
    "attn",
    "o",
    "attn_residual",
];
pub const MLP_TEMPLATE: &[&str] = &["ffn_norm", "gate", "up", "silu", "gate_up", "down", "ffn_residual"];
