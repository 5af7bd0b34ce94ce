//! Executes a graph's list in order on the thread pool.
//!
//! Serial nodes run on the whole pool and end with a global barrier. A
//! parallel region reorganizes the pool into one group per lane (or fewer,
//! when threads are scarce), runs the lanes, and restores a single group
//! before the gather. Inside a region, [`SyncMode::A`] ends every node with
//! a global barrier while [`SyncMode::B`] lets each group walk its lane with
//! local barriers only.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::graph::{aux, AppendMode, Graph, GraphError, ParallelRegion};
use crate::kernels::{self, AttentionDims, KernelError, Matrix, WorkSlice};
use crate::memory::{MemoryPool, RawMemory};
use crate::tensor::{DType, OpKind, TensorId};
use crate::threads::{BarrierKind, PoolError, ThreadPool, WorkerCtx};
use crate::tp::{self, GroupAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncMode {
    #[default]
    A,
    B,
}

impl SyncMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Some(Self::A),
            "b" => Some(Self::B),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::A => "a",
            Self::B => "b",
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("invalid graph: {0}")]
    Graph(#[from] GraphError),
    #[error("node {entry} `{name}`: {source}")]
    Kernel {
        entry: usize,
        name: String,
        source: KernelError,
    },
    #[error("node {entry} `{tensor}` on node {node:?} touched by lane on node {lane_node:?}")]
    Locality {
        entry: usize,
        tensor: String,
        node: Option<usize>,
        lane_node: Option<usize>,
    },
    #[error("pool must be in single-group mode at entry, found groups {0:?}")]
    PoolNotSingle(Vec<usize>),
    #[error("memory pool has no backing storage")]
    Unbacked,
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// Per-step runtime values read by embed, rope, kv store and attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepInput {
    pub token: usize,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExecOptions {
    /// Record the entry index every group starts, in start order.
    pub trace: bool,
    /// Fail when a lane touches a tensor bound to another node.
    pub check_locality: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub entry: usize,
    pub group: usize,
    pub lane: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ExecReport {
    pub elapsed: Duration,
    pub trace: Vec<TraceEvent>,
}

#[derive(Debug, Clone)]
enum Step {
    Serial(usize),
    Region(ParallelRegion),
}

/// Validated step sequence of a graph.
#[derive(Debug, Clone)]
pub struct Schedule {
    steps: Vec<Step>,
}

impl Schedule {
    pub fn compile(graph: &Graph) -> Result<Self, ExecError> {
        graph.check_topological()?;
        let regions = graph.exec().check_regions()?;
        let mut steps = Vec::new();
        let mut next_region = regions.into_iter().peekable();
        let mut i = 0;
        while i < graph.exec().len() {
            match next_region.peek() {
                Some(r) if r.scatter == i => {
                    i = r.gather + 1;
                    steps.push(Step::Region(next_region.next().expect("peeked")));
                }
                _ => {
                    debug_assert_eq!(graph.exec().entries()[i].mode, AppendMode::Serial);
                    steps.push(Step::Serial(i));
                    i += 1;
                }
            }
        }
        Ok(Self { steps })
    }

    pub fn region_count(&self) -> usize {
        self.steps.iter().filter(|s| matches!(s, Step::Region(_))).count()
    }
}

struct Run<'a> {
    graph: &'a Graph,
    mem: RawMemory<'a>,
    input: StepInput,
    opts: ExecOptions,
    failed: AtomicBool,
    error: Mutex<Option<ExecError>>,
    trace: Mutex<Vec<TraceEvent>>,
}

impl Run<'_> {
    fn fail(&self, err: ExecError) {
        self.failed.store(true, Ordering::Release);
        self.error.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert(err);
    }

    fn record(&self, entry: usize, group: usize, lane: usize) {
        if self.opts.trace {
            self.trace
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .push(TraceEvent { entry, group, lane });
        }
    }

    /// Runs one lane of one entry as thread `rank` of `size`.
    fn node(&self, entry: usize, lane: usize, rank: usize, size: usize, lane_node: Option<usize>) {
        if self.failed.load(Ordering::Acquire) {
            return;
        }
        let id = self.graph.exec().entries()[entry].bundle.lane(lane);
        if self.opts.check_locality {
            if let Err(e) = self.check_locality(entry, id, lane_node) {
                self.fail(e);
                return;
            }
        }
        if let Err(source) = self.compute(id, rank, size) {
            self.fail(ExecError::Kernel {
                entry,
                name: self.graph.tensor(id).name.clone(),
                source,
            });
        }
    }

    fn check_locality(&self, entry: usize, id: TensorId, lane_node: Option<usize>) -> Result<(), ExecError> {
        let Some(lane_node) = lane_node else { return Ok(()) };
        let t = self.graph.tensor(id);
        for tid in std::iter::once(id).chain(t.sources.iter().copied()) {
            let s = self.graph.tensor(tid);
            if s.node != Some(lane_node) {
                return Err(ExecError::Locality {
                    entry,
                    tensor: s.name.clone(),
                    node: s.node,
                    lane_node: Some(lane_node),
                });
            }
        }
        Ok(())
    }

    fn compute(&self, id: TensorId, rank: usize, size: usize) -> Result<(), KernelError> {
        let g = self.graph;
        let t = g.tensor(id);
        let src = |i: usize| g.tensor(t.sources[i]);
        let mem = &self.mem;
        let shape_err = |detail: String| KernelError::Shape {
            op: "dispatch",
            detail,
        };
        for &s in &t.sources {
            let st = g.tensor(s);
            let weight_like = matches!(t.op, OpKind::MatMul | OpKind::Embed) && s == t.sources[0];
            if st.dtype != DType::F32 && !weight_like {
                return Err(shape_err(format!("`{}` must be F32, is {}", st.name, st.dtype)));
            }
        }
        // SAFETY (all blocks below): sources were completed before the last
        // barrier and are not written in this step; each thread writes only
        // its own slice of the output.
        unsafe {
            match t.op {
                OpKind::None | OpKind::Reshape => {}
                OpKind::MatMul => {
                    let (w, x) = (src(0), src(1));
                    let (m, k) = (w.shape.dims()[0], w.shape.dims()[1]);
                    let n = x.shape.inner();
                    let slice = WorkSlice::new(rank, size, m);
                    let out = mem.f32s_mut(&t.region, slice.rows.start * n, slice.rows.len() * n);
                    let mat = Matrix::new(mem.bytes(&w.region), w.dtype, m, k)?;
                    kernels::gemm(&mat, mem.f32s(&x.region), n, out, &slice)?;
                }
                OpKind::RMSNorm => {
                    let n = t.shape.numel();
                    let slice = WorkSlice::new(rank, size, n);
                    let out = mem.f32s_mut(&t.region, slice.rows.start, slice.rows.len());
                    kernels::rmsnorm(
                        mem.f32s(&src(0).region),
                        mem.f32s(&src(1).region),
                        t.aux.f32(aux::EPS),
                        out,
                        &slice,
                    )?;
                }
                OpKind::RoPE => {
                    let hd = t.aux.u32(aux::HEAD_DIM) as usize;
                    let slice = WorkSlice::new(rank, size, t.shape.numel() / hd);
                    let out = mem.f32s_mut(&t.region, slice.rows.start * hd, slice.rows.len() * hd);
                    kernels::rope(
                        mem.f32s(&src(0).region),
                        hd,
                        self.input.position,
                        t.aux.f32(aux::THETA),
                        out,
                        &slice,
                    )?;
                }
                OpKind::Attention => {
                    let (q, k, v) = (src(0), src(1), src(2));
                    let dims = AttentionDims {
                        n_heads: t.aux.u32(aux::N_HEADS) as usize,
                        n_kv_heads: t.aux.u32(aux::N_KV_HEADS) as usize,
                        head_dim: t.aux.u32(aux::HEAD_DIM) as usize,
                        len: self.input.position + 1,
                        scale: t.aux.f32(aux::SCALE),
                    };
                    if dims.len > k.shape.rows() {
                        return Err(shape_err(format!(
                            "position {} beyond cache of {} rows",
                            self.input.position,
                            k.shape.rows()
                        )));
                    }
                    let slice = WorkSlice::new(rank, size, dims.n_heads);
                    let hd = dims.head_dim;
                    let out = mem.f32s_mut(&t.region, slice.rows.start * hd, slice.rows.len() * hd);
                    kernels::attention(
                        mem.f32s(&q.region),
                        mem.f32s(&k.region),
                        mem.f32s(&v.region),
                        &dims,
                        out,
                        &slice,
                    )?;
                }
                OpKind::SiLU | OpKind::Mul | OpKind::Add | OpKind::Scatter => {
                    let n = t.shape.numel();
                    let slice = WorkSlice::new(rank, size, n);
                    let out = mem.f32s_mut(&t.region, slice.rows.start, slice.rows.len());
                    let a = mem.f32s(&src(0).region);
                    match t.op {
                        OpKind::SiLU => kernels::silu_rows(a, out, &slice),
                        OpKind::Mul => kernels::mul_rows(a, mem.f32s(&src(1).region), out, &slice),
                        OpKind::Add => kernels::add_rows(a, mem.f32s(&src(1).region), out, &slice),
                        _ => tp::scatter_copy(a, out, &slice),
                    }
                }
                OpKind::Gather => {
                    let slice = WorkSlice::new(rank, size, t.shape.numel());
                    let lanes: Vec<&[f32]> = t.sources.iter().map(|&s| mem.f32s(&g.tensor(s).region)).collect();
                    let out = mem.f32s_mut(&t.region, slice.rows.start, slice.rows.len());
                    tp::gather_sum(&lanes, out, &slice);
                }
                OpKind::Softmax => {
                    if rank == 0 {
                        let out = mem.f32s_mut(&t.region, 0, t.shape.numel());
                        kernels::softmax(mem.f32s(&src(0).region), out)?;
                    }
                }
                OpKind::Copy => {
                    let row = t.shape.row_elems();
                    let pos = self.input.position;
                    if pos >= t.shape.rows() {
                        return Err(shape_err(format!(
                            "cache row {pos} beyond {} rows of `{}`",
                            t.shape.rows(),
                            t.name
                        )));
                    }
                    let slice = WorkSlice::new(rank, size, row);
                    let out = mem.f32s_mut(&t.region, pos * row + slice.rows.start, slice.rows.len());
                    out.copy_from_slice(&mem.f32s(&src(0).region)[slice.rows.clone()]);
                }
                OpKind::Embed => {
                    let table = src(0);
                    let (rows, cols) = (table.shape.dims()[0], table.shape.dims()[1]);
                    let slice = WorkSlice::new(rank, size, cols);
                    let out = mem.f32s_mut(&t.region, slice.rows.start, slice.rows.len());
                    let mat = Matrix::new(mem.bytes(&table.region), table.dtype, rows, cols)?;
                    kernels::embed(&mat, self.input.token, out, &slice)?;
                }
            }
        }
        Ok(())
    }

    fn region(&self, ctx: &mut WorkerCtx<'_>, r: &ParallelRegion, groups: &GroupAssignment, mode: SyncMode) {
        let total = ctx.total_threads();
        ctx.reconfigure(&groups.sizes).expect("group sizes sum to the pool size");
        let group = ctx.group();
        let (rank, size) = (ctx.rank(), ctx.group_size());
        let scatter = &self.graph.exec().entries()[r.scatter].bundle;
        let lane_node = |lane: usize| self.graph.tensor(scatter.lane(lane)).node;
        let entries = r.scatter..r.gather;
        match mode {
            SyncMode::A => {
                for e in entries {
                    for lane in groups.lanes_of(group) {
                        if rank == 0 {
                            self.record(e, group, lane);
                        }
                        let check = (e != r.scatter).then(|| lane_node(lane)).flatten();
                        self.node(e, lane, rank, size, check);
                    }
                    ctx.barrier(BarrierKind::Global);
                }
            }
            SyncMode::B => {
                for lane in groups.lanes_of(group) {
                    for e in entries.clone() {
                        if rank == 0 {
                            self.record(e, group, lane);
                        }
                        let check = (e != r.scatter).then(|| lane_node(lane)).flatten();
                        self.node(e, lane, rank, size, check);
                        ctx.barrier(BarrierKind::Local);
                    }
                }
                ctx.barrier(BarrierKind::Global);
            }
        }
        ctx.reconfigure(&[total]).expect("single group");
        if ctx.thread_index() == 0 {
            self.record(r.gather, 0, 0);
        }
        self.node(r.gather, 0, ctx.thread_index(), total, None);
        ctx.barrier(BarrierKind::Global);
    }
}

/// Runs every node of `graph` once for `input`.
pub fn execute(
    graph: &Graph,
    schedule: &Schedule,
    memory: &mut MemoryPool,
    pool: &ThreadPool,
    mode: SyncMode,
    input: StepInput,
    opts: ExecOptions,
) -> Result<ExecReport, ExecError> {
    if !memory.is_backed() {
        return Err(ExecError::Unbacked);
    }
    let groups = pool.groups();
    if groups.len() != 1 {
        return Err(ExecError::PoolNotSingle(groups));
    }
    let total = pool.total_threads();
    let assignments: Vec<Option<GroupAssignment>> = schedule
        .steps
        .iter()
        .map(|s| match s {
            Step::Region(r) => Some(GroupAssignment::new(total, r.lanes)),
            Step::Serial(_) => None,
        })
        .collect();
    let run = Run {
        graph,
        mem: memory.raw(),
        input,
        opts,
        failed: AtomicBool::new(false),
        error: Mutex::new(None),
        trace: Mutex::new(Vec::new()),
    };
    let start = Instant::now();
    pool.run(|ctx| {
        for (step, groups) in schedule.steps.iter().zip(&assignments) {
            match step {
                Step::Serial(e) => {
                    if ctx.thread_index() == 0 {
                        run.record(*e, 0, 0);
                    }
                    run.node(*e, 0, ctx.thread_index(), total, None);
                    ctx.barrier(BarrierKind::Global);
                }
                Step::Region(r) => run.region(ctx, r, groups.as_ref().expect("region"), mode),
            }
        }
    })?;
    let elapsed = start.elapsed();
    if let Some(err) = run.error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(err);
    }
    Ok(ExecReport {
        elapsed,
        trace: run.trace.into_inner().unwrap_or_else(|e| e.into_inner()),
    })
}
