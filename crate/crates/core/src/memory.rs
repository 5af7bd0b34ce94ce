//! Per-node memory pool.
//!
//! Every node owns one weight arena and two activation arenas. Activations
//! are served from the arena matching the parity of their layer index, and a
//! parity arena rewinds when the first allocation for a new layer of that
//! parity arrives, so consecutive layers never collide while layer `L` reuses
//! the bytes of layer `L - 2`.

use std::alloc::{self, Layout};
use std::collections::BTreeMap;
use std::ptr::NonNull;

use thiserror::Error;

use crate::numa;

pub const ALIGNMENT: usize = 64;

/// Environment variable that overrides the requested NUMA mode.
pub const NUMA_MODE_ENV: &str = "ARCLITE_NUMA_MODE";

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("NUMA unavailable: {0}")]
    NumaUnavailable(String),
    #[error("out of memory on node {node}: {kind:?} arena needs {requested} bytes, {available} left")]
    OutOfMemory {
        node: usize,
        kind: ArenaKind,
        requested: usize,
        available: usize,
    },
    #[error("node {node} out of range (pool has {nodes} nodes)")]
    InvalidNode { node: usize, nodes: usize },
    #[error("invalid pool size: {0}")]
    InvalidSize(String),
    #[error("host allocation of {0} bytes failed")]
    Alloc(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NumaMode {
    /// Arenas are bound to platform nodes.
    Real,
    /// Node ids are bookkeeping only.
    Emulated,
}

impl NumaMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Some(NumaMode::Real),
            "emulated" => Some(NumaMode::Emulated),
            _ => None,
        }
    }

    /// `requested`, unless the environment override names another mode.
    pub fn from_env_or(requested: NumaMode) -> NumaMode {
        std::env::var(NUMA_MODE_ENV)
            .ok()
            .and_then(|v| NumaMode::parse(&v))
            .unwrap_or(requested)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NumaMode::Real => "real",
            NumaMode::Emulated => "emulated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeLayout {
    pub mode: NumaMode,
    pub node_count: usize,
    /// Platform node id and CPUs for each logical node (Real mode only).
    pub cores: Vec<Vec<usize>>,
    platform_ids: Vec<usize>,
}

impl NodeLayout {
    pub fn emulated(node_count: usize) -> Self {
        assert!(node_count >= 1, "node_count must be positive");
        Self {
            mode: NumaMode::Emulated,
            node_count,
            cores: Vec::new(),
            platform_ids: (0..node_count).collect(),
        }
    }

    /// Uses the first `node_count` platform nodes.
    pub fn real(node_count: usize) -> Result<Self, MemoryError> {
        if node_count == 0 {
            return Err(MemoryError::InvalidSize("node_count must be positive".into()));
        }
        let nodes = numa::detect_nodes()
            .ok_or_else(|| MemoryError::NumaUnavailable("platform reports no NUMA nodes".into()))?;
        if nodes.len() < node_count {
            return Err(MemoryError::NumaUnavailable(format!(
                "requested {node_count} nodes, platform has {}",
                nodes.len()
            )));
        }
        let nodes = &nodes[..node_count];
        Ok(Self {
            mode: NumaMode::Real,
            node_count,
            cores: nodes.iter().map(|n| n.cpus.clone()).collect(),
            platform_ids: nodes.iter().map(|n| n.id).collect(),
        })
    }

    pub fn new(mode: NumaMode, node_count: usize) -> Result<Self, MemoryError> {
        match mode {
            NumaMode::Real => Self::real(node_count),
            NumaMode::Emulated => Ok(Self::emulated(node_count)),
        }
    }

    pub fn platform_id(&self, node: usize) -> usize {
        self.platform_ids[node]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArenaKind {
    Weight,
    /// Activation arena for layers of the given parity (0 or 1).
    Activation(u8),
}

impl ArenaKind {
    fn slot(self) -> usize {
        match self {
            ArenaKind::Weight => 0,
            ArenaKind::Activation(p) => 1 + p as usize,
        }
    }
}

/// A byte range inside one arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Region {
    pub arena: ArenaKind,
    pub node: usize,
    pub offset: usize,
    pub len: usize,
}

impl Region {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.arena == other.arena
            && self.node == other.node
            && self.offset < other.end()
            && other.offset < self.end()
    }
}

enum Backing {
    /// Dry run: offsets are tracked, no memory exists.
    None,
    Heap { ptr: NonNull<u8>, layout: Layout },
    Mapped { ptr: NonNull<u8>, len: usize },
}

struct Arena {
    kind: ArenaKind,
    node: usize,
    backing: Backing,
    capacity: usize,
    cursor: usize,
    high_water: usize,
    current_layer: Option<usize>,
}

impl Arena {
    fn base(&self) -> Option<NonNull<u8>> {
        match self.backing {
            Backing::None => None,
            Backing::Heap { ptr, .. } | Backing::Mapped { ptr, .. } => Some(ptr),
        }
    }

    fn bump(&mut self, bytes: usize) -> Result<usize, MemoryError> {
        let padded = align_up(bytes);
        let available = self.capacity - self.cursor;
        if padded > available {
            return Err(MemoryError::OutOfMemory {
                node: self.node,
                kind: self.kind,
                requested: padded,
                available,
            });
        }
        let offset = self.cursor;
        self.cursor += padded;
        self.high_water = self.high_water.max(self.cursor);
        Ok(offset)
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        match self.backing {
            Backing::None => {}
            // SAFETY: ptr/layout come from the matching alloc_zeroed call.
            Backing::Heap { ptr, layout } => unsafe { alloc::dealloc(ptr.as_ptr(), layout) },
            // SAFETY: ptr/len come from the matching mmap call.
            Backing::Mapped { ptr, len } => unsafe {
                libc::munmap(ptr.as_ptr().cast(), len);
            },
        }
    }
}

pub fn align_up(bytes: usize) -> usize {
    bytes.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Pre-allocated arenas for every node.
pub struct MemoryPool {
    layout: NodeLayout,
    arenas: Vec<Arena>,
    /// Aligned bytes requested per (node, activation layer).
    layer_demand: BTreeMap<(usize, usize), usize>,
}

// SAFETY: the pool exclusively owns its backing memory. Shared access to the
// bytes goes through `RawMemory`, whose users uphold the barrier discipline.
unsafe impl Send for MemoryPool {}
unsafe impl Sync for MemoryPool {}

impl std::fmt::Debug for MemoryPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryPool")
            .field("layout", &self.layout)
            .field("backed", &self.is_backed())
            .finish()
    }
}

impl MemoryPool {
    /// Allocates one weight arena and two activation arenas per node. Each
    /// activation arena holds `activation_bytes_per_node` bytes.
    pub fn create(
        layout: NodeLayout,
        weight_bytes_per_node: usize,
        activation_bytes_per_node: usize,
    ) -> Result<Self, MemoryError> {
        if weight_bytes_per_node == 0 || activation_bytes_per_node == 0 {
            return Err(MemoryError::InvalidSize("arena sizes must be positive".into()));
        }
        let mut arenas = Vec::with_capacity(layout.node_count * 3);
        for node in 0..layout.node_count {
            for kind in [ArenaKind::Weight, ArenaKind::Activation(0), ArenaKind::Activation(1)] {
                let capacity = align_up(match kind {
                    ArenaKind::Weight => weight_bytes_per_node,
                    ArenaKind::Activation(_) => activation_bytes_per_node,
                });
                let backing = match layout.mode {
                    NumaMode::Emulated => heap_backing(capacity)?,
                    NumaMode::Real => mapped_backing(capacity, layout.platform_id(node))?,
                };
                arenas.push(Arena {
                    kind,
                    node,
                    backing,
                    capacity,
                    cursor: 0,
                    high_water: 0,
                    current_layer: None,
                });
            }
        }
        Ok(Self {
            layout,
            arenas,
            layer_demand: BTreeMap::new(),
        })
    }

    /// Unbounded pool without memory, used to measure arena demand before
    /// the real pool is created.
    pub fn measuring(layout: NodeLayout) -> Self {
        let mut arenas = Vec::with_capacity(layout.node_count * 3);
        for node in 0..layout.node_count {
            for kind in [ArenaKind::Weight, ArenaKind::Activation(0), ArenaKind::Activation(1)] {
                arenas.push(Arena {
                    kind,
                    node,
                    backing: Backing::None,
                    capacity: usize::MAX / 2,
                    cursor: 0,
                    high_water: 0,
                    current_layer: None,
                });
            }
        }
        Self {
            layout,
            arenas,
            layer_demand: BTreeMap::new(),
        }
    }

    pub fn layout(&self) -> &NodeLayout {
        &self.layout
    }

    pub fn node_count(&self) -> usize {
        self.layout.node_count
    }

    pub fn is_backed(&self) -> bool {
        self.arenas.iter().all(|a| !matches!(a.backing, Backing::None))
    }

    fn arena_index(&self, node: usize, kind: ArenaKind) -> Result<usize, MemoryError> {
        if node >= self.layout.node_count {
            return Err(MemoryError::InvalidNode {
                node,
                nodes: self.layout.node_count,
            });
        }
        Ok(node * 3 + kind.slot())
    }

    fn arena(&self, node: usize, kind: ArenaKind) -> &Arena {
        &self.arenas[self.arena_index(node, kind).expect("valid node")]
    }

    pub fn alloc_weight(&mut self, node: usize, bytes: usize) -> Result<Region, MemoryError> {
        let idx = self.arena_index(node, ArenaKind::Weight)?;
        let offset = self.arenas[idx].bump(bytes)?;
        Ok(Region {
            arena: ArenaKind::Weight,
            node,
            offset,
            len: bytes,
        })
    }

    pub fn alloc_activation(&mut self, node: usize, layer: usize, bytes: usize) -> Result<Region, MemoryError> {
        let kind = ArenaKind::Activation((layer % 2) as u8);
        let idx = self.arena_index(node, kind)?;
        let arena = &mut self.arenas[idx];
        if arena.current_layer != Some(layer) {
            // the previous layer of this parity is dead once layer L starts
            arena.cursor = 0;
            arena.current_layer = Some(layer);
        }
        let offset = arena.bump(bytes)?;
        *self.layer_demand.entry((node, layer)).or_default() += align_up(bytes);
        Ok(Region {
            arena: kind,
            node,
            offset,
            len: bytes,
        })
    }

    pub fn cursor(&self, node: usize, kind: ArenaKind) -> usize {
        self.arena(node, kind).cursor
    }

    pub fn capacity(&self, node: usize, kind: ArenaKind) -> usize {
        self.arena(node, kind).capacity
    }

    /// Highest cursor position ever reached in the arena.
    pub fn high_water(&self, node: usize, kind: ArenaKind) -> usize {
        self.arena(node, kind).high_water
    }

    /// Aligned activation bytes requested by `layer` on `node`.
    pub fn layer_demand(&self, node: usize, layer: usize) -> usize {
        self.layer_demand.get(&(node, layer)).copied().unwrap_or(0)
    }

    /// All recorded (node, layer) activation demands.
    pub fn layer_demands(&self) -> impl Iterator<Item = ((usize, usize), usize)> + '_ {
        self.layer_demand.iter().map(|(k, v)| (*k, *v))
    }

    /// Largest weight high-water mark over nodes.
    pub fn max_weight_high_water(&self) -> usize {
        self.arenas
            .iter()
            .filter(|a| a.kind == ArenaKind::Weight)
            .map(|a| a.high_water)
            .max()
            .unwrap_or(0)
    }

    /// Largest activation high-water mark over nodes and parities.
    pub fn max_activation_high_water(&self) -> usize {
        self.arenas
            .iter()
            .filter(|a| a.kind != ArenaKind::Weight)
            .map(|a| a.high_water)
            .max()
            .unwrap_or(0)
    }

    /// Sum of both activation high-water marks on `node`.
    pub fn activation_peak(&self, node: usize) -> usize {
        self.high_water(node, ArenaKind::Activation(0)) + self.high_water(node, ArenaKind::Activation(1))
    }

    fn checked_ptr(&self, region: &Region) -> NonNull<u8> {
        let arena = self.arena(region.node, region.arena);
        assert!(
            region.end() <= arena.capacity,
            "region {region:?} exceeds arena capacity {}",
            arena.capacity
        );
        let base = arena.base().expect("measuring pool has no memory");
        // SAFETY: offset is within the arena allocation (checked above).
        unsafe { NonNull::new_unchecked(base.as_ptr().add(region.offset)) }
    }

    pub fn bytes(&self, region: &Region) -> &[u8] {
        let p = self.checked_ptr(region);
        // SAFETY: in-bounds; `&self` excludes writers through `&mut self`,
        // and `RawMemory` borrows the pool mutably for its whole lifetime.
        unsafe { std::slice::from_raw_parts(p.as_ptr(), region.len) }
    }

    pub fn bytes_mut(&mut self, region: &Region) -> &mut [u8] {
        let p = self.checked_ptr(region);
        // SAFETY: in-bounds and exclusively borrowed.
        unsafe { std::slice::from_raw_parts_mut(p.as_ptr(), region.len) }
    }

    pub fn write(&mut self, region: &Region, data: &[u8]) {
        assert_eq!(region.len, data.len(), "write length must match region");
        self.bytes_mut(region).copy_from_slice(data);
    }

    pub fn read_f32(&self, region: &Region) -> Vec<f32> {
        self.bytes(region)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    pub fn write_f32(&mut self, region: &Region, values: &[f32]) {
        let bytes = self.bytes_mut(region);
        assert_eq!(bytes.len(), values.len() * 4);
        for (dst, v) in bytes.chunks_exact_mut(4).zip(values) {
            dst.copy_from_slice(&v.to_le_bytes());
        }
    }

    /// Platform node backing the first page of `region`, when the platform
    /// can answer. Emulated pools report the recorded node.
    pub fn backing_node(&self, region: &Region) -> Option<usize> {
        match self.layout.mode {
            NumaMode::Emulated => Some(region.node),
            NumaMode::Real => {
                let p = self.checked_ptr(region);
                let platform = numa::memory_node_of(p.as_ptr()).ok()?;
                self.layout.platform_ids.iter().position(|&id| id == platform)
            }
        }
    }

    /// Shared raw view used by worker threads during execution.
    pub fn raw(&mut self) -> RawMemory<'_> {
        let bases = self
            .arenas
            .iter()
            .map(|a| (a.base().map(|p| p.as_ptr()), a.capacity))
            .collect();
        RawMemory {
            bases,
            _pool: std::marker::PhantomData,
        }
    }
}

/// Raw access to pool memory for concurrent kernels.
///
/// Holding a `RawMemory` keeps the pool mutably borrowed, so the only
/// accesses during its lifetime are through it. Callers guarantee that
/// concurrent writers touch disjoint bytes and that readers never overlap a
/// concurrent writer; the scheduler's barriers provide this.
pub struct RawMemory<'a> {
    bases: Vec<(Option<*mut u8>, usize)>,
    _pool: std::marker::PhantomData<&'a mut MemoryPool>,
}

// SAFETY: see the type-level contract.
unsafe impl Send for RawMemory<'_> {}
unsafe impl Sync for RawMemory<'_> {}

impl RawMemory<'_> {
    fn ptr(&self, region: &Region, offset: usize, len: usize) -> *mut u8 {
        let (base, cap) = self.bases[region.node * 3 + region.arena.slot()];
        let base = base.expect("measuring pool has no memory");
        assert!(offset + len <= region.len, "access outside region");
        assert!(region.offset + offset + len <= cap, "region exceeds arena");
        // SAFETY: bounds checked above.
        unsafe { base.add(region.offset + offset) }
    }

    /// # Safety
    /// No thread may write the returned bytes while the slice is alive.
    pub unsafe fn bytes(&self, region: &Region) -> &[u8] {
        std::slice::from_raw_parts(self.ptr(region, 0, region.len), region.len)
    }

    /// # Safety
    /// `region` must hold properly aligned f32 data, with the same rule as
    /// [`RawMemory::bytes`].
    pub unsafe fn f32s(&self, region: &Region) -> &[f32] {
        let p = self.ptr(region, 0, region.len);
        debug_assert_eq!(p as usize % 4, 0);
        std::slice::from_raw_parts(p.cast::<f32>(), region.len / 4)
    }

    /// Mutable f32 elements `[start, start + count)` of `region`.
    ///
    /// # Safety
    /// The caller must be the only thread accessing these elements while the
    /// slice is alive.
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn f32s_mut(&self, region: &Region, start: usize, count: usize) -> &mut [f32] {
        let p = self.ptr(region, start * 4, count * 4);
        std::slice::from_raw_parts_mut(p.cast::<f32>(), count)
    }
}

fn heap_backing(capacity: usize) -> Result<Backing, MemoryError> {
    let layout = Layout::from_size_align(capacity, ALIGNMENT).map_err(|_| MemoryError::Alloc(capacity))?;
    // SAFETY: capacity is nonzero (sizes checked positive, then aligned up).
    let ptr = unsafe { alloc::alloc_zeroed(layout) };
    let ptr = NonNull::new(ptr).ok_or(MemoryError::Alloc(capacity))?;
    Ok(Backing::Heap { ptr, layout })
}

fn mapped_backing(capacity: usize, platform_node: usize) -> Result<Backing, MemoryError> {
    let page = page_size();
    let len = capacity.div_ceil(page) * page;
    // SAFETY: anonymous private mapping; result checked against MAP_FAILED.
    let ptr = unsafe {
        libc::mmap(
            std::ptr::null_mut(),
            len,
            libc::PROT_READ | libc::PROT_WRITE,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
            -1,
            0,
        )
    };
    if ptr == libc::MAP_FAILED {
        return Err(MemoryError::Alloc(len));
    }
    let ptr = NonNull::new(ptr.cast::<u8>()).ok_or(MemoryError::Alloc(len))?;
    if let Err(e) = numa::bind_memory(ptr.as_ptr(), len, platform_node) {
        // SAFETY: unmapping the mapping created above.
        unsafe { libc::munmap(ptr.as_ptr().cast(), len) };
        return Err(MemoryError::NumaUnavailable(format!(
            "binding {len} bytes to node {platform_node}: {e}"
        )));
    }
    // fault every page in now so placement happens at startup
    for off in (0..len).step_by(page) {
        // SAFETY: within the mapping.
        unsafe { ptr.as_ptr().add(off).write_volatile(0) };
    }
    Ok(Backing::Mapped { ptr, len })
}

fn page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    let p = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if p > 0 {
        p as usize
    } else {
        4096
    }
}
