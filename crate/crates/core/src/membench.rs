//! Sequential-read bandwidth between every (core node, memory node) pair.

use std::hint::black_box;
use std::ptr::NonNull;
use std::time::Instant;

use thiserror::Error;

use crate::numa::{self, NodeInfo};

pub const MIN_BUFFER_BYTES: usize = 256 << 20;

#[derive(Debug, Error)]
pub enum MembenchError {
    #[error("buffer of {0} bytes is below the {MIN_BUFFER_BYTES}-byte minimum")]
    BufferTooSmall(usize),
    #[error("mapping {bytes} bytes failed: {source}")]
    Map {
        bytes: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("node {0} has no CPUs")]
    NoCpus(usize),
}

#[derive(Debug, Clone)]
pub struct MembenchConfig {
    pub buffer_bytes: usize,
    /// Timed passes per pair; the best pass is reported.
    pub passes: usize,
    /// Reader threads per core node (default: every CPU of the node).
    pub threads_per_node: Option<usize>,
}

impl Default for MembenchConfig {
    fn default() -> Self {
        Self {
            buffer_bytes: MIN_BUFFER_BYTES,
            passes: 3,
            threads_per_node: None,
        }
    }
}

/// `gbps[core_node][memory_node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthMatrix {
    pub nodes: Vec<usize>,
    pub gbps: Vec<Vec<f64>>,
}

impl BandwidthMatrix {
    pub fn is_square(&self) -> bool {
        self.gbps.len() == self.nodes.len() && self.gbps.iter().all(|r| r.len() == self.nodes.len())
    }

    pub fn all_positive(&self) -> bool {
        self.gbps.iter().flatten().all(|&v| v > 0.0 && v.is_finite())
    }

    pub fn diagonal_mean(&self) -> f64 {
        let n = self.nodes.len();
        (0..n).map(|i| self.gbps[i][i]).sum::<f64>() / n as f64
    }

    /// `None` on a single node.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let n = self.nodes.len();
        if n < 2 {
            return None;
        }
        let sum: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.gbps[i][j])
            .sum();
        Some(sum / (n * (n - 1)) as f64)
    }

    /// Rows are the cores' node, columns the memory's node.
    pub fn render(&self) -> String {
        let mut out = String::from("cores from \\ memory in");
        for n in &self.nodes {
            out += &format!(" | node {n:<3}");
        }
        out += "\n";
        for (i, row) in self.gbps.iter().enumerate() {
            out += &format!("{:<21}", format!("node {}", self.nodes[i]));
            for v in row {
                out += &format!(" | {v:>8.1}");
            }
            out += "\n";
        }
        out += "(GB/s, sequential read)\n";
        out
    }
}

struct Buffer {
    ptr: NonNull<u8>,
    len: usize,
}

impl Buffer {
    fn bound(len: usize, node: usize) -> Result<Self, MembenchError> {
        // SAFETY: anonymous private mapping checked against MAP_FAILED.
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
            return Err(MembenchError::Map {
                bytes: len,
                source: std::io::Error::last_os_error(),
            });
        }
        let buf = Self {
            ptr: NonNull::new(ptr.cast()).expect("mmap never returns null"),
            len,
        };
        if let Err(e) = numa::bind_memory(buf.ptr.as_ptr(), len, node) {
            log::warn!("membench: binding buffer to node {node} failed ({e}); using default placement");
        }
        // SAFETY: exclusive access to the fresh mapping.
        unsafe { std::ptr::write_bytes(buf.ptr.as_ptr(), 1, len) };
        Ok(buf)
    }

    fn words(&self) -> &[u64] {
        // SAFETY: page-aligned mapping of `len` bytes, initialized above.
        unsafe { std::slice::from_raw_parts(self.ptr.as_ptr().cast(), self.len / 8) }
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        // SAFETY: unmaps exactly the mapping created in `bound`.
        unsafe { libc::munmap(self.ptr.as_ptr().cast(), self.len) };
    }
}

fn read_sum(words: &[u64]) -> u64 {
    let mut acc = [0u64; 4];
    for c in words.chunks_exact(4) {
        for i in 0..4 {
            acc[i] = acc[i].wrapping_add(c[i]);
        }
    }
    acc.iter().fold(0, |a, &b| a.wrapping_add(b))
}

/// Best-of-`passes` bandwidth with `cpus.len()` pinned readers splitting
/// the buffer.
fn measure(buf: &Buffer, cpus: &[usize], passes: usize) -> f64 {
    let words = buf.words();
    let chunk = words.len().div_ceil(cpus.len());
    let mut best = 0f64;
    for _ in 0..passes.max(1) {
        let barrier = std::sync::Barrier::new(cpus.len() + 1);
        let elapsed = std::thread::scope(|s| {
            for (i, &cpu) in cpus.iter().enumerate() {
                let part = &words[(i * chunk).min(words.len())..((i + 1) * chunk).min(words.len())];
                let barrier = &barrier;
                s.spawn(move || {
                    let _ = numa::pin_current_thread(cpu);
                    barrier.wait();
                    black_box(read_sum(black_box(part)));
                });
            }
            barrier.wait();
            Instant::now()
        })
        .elapsed();
        best = best.max(buf.len as f64 / elapsed.as_secs_f64() / 1e9);
    }
    best
}

pub fn run_membench(cfg: &MembenchConfig) -> Result<BandwidthMatrix, MembenchError> {
    run_on_nodes(cfg, &numa::nodes_or_single())
}

pub fn run_on_nodes(cfg: &MembenchConfig, nodes: &[NodeInfo]) -> Result<BandwidthMatrix, MembenchError> {
    if cfg.buffer_bytes < MIN_BUFFER_BYTES {
        return Err(MembenchError::BufferTooSmall(cfg.buffer_bytes));
    }
    let len = cfg.buffer_bytes & !4095;
    let mut gbps = vec![vec![0.0; nodes.len()]; nodes.len()];
    for (j, mem_node) in nodes.iter().enumerate() {
        let buf = Buffer::bound(len, mem_node.id)?;
        for (i, core_node) in nodes.iter().enumerate() {
            if core_node.cpus.is_empty() {
                return Err(MembenchError::NoCpus(core_node.id));
            }
            let n = cfg.threads_per_node.unwrap_or(core_node.cpus.len()).clamp(1, core_node.cpus.len());
            gbps[i][j] = measure(&buf, &core_node.cpus[..n], cfg.passes);
        }
    }
    Ok(BandwidthMatrix {
        nodes: nodes.iter().map(|n| n.id).collect(),
        gbps,
    })
}
