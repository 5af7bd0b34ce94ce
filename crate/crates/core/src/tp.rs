//! Cross-node weight partitioning and the Scatter/Gather lane operators.
//!
//! Q, K, V are split by heads, gate and up by output rows, and O and down by
//! input columns matching the lane's rows, so each lane's partial product
//! only reads node-local data and the lanes' outputs sum to the full result.

use std::ops::Range;

use thiserror::Error;

use crate::graph::{GraphBuilder, GraphError};
use crate::kernels::WorkSlice;
use crate::quant::{BLOCK_BYTES, BLOCK_ELEMS};
use crate::tensor::{DType, HostTensor, TensorBundle, TensorError};
use crate::threads::even_split;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("{dimension}={value} not divisible by {divisor} ({lanes} lanes)")]
    Divisibility {
        dimension: &'static str,
        value: usize,
        divisor: usize,
        lanes: usize,
    },
    #[error("{0} lanes requested; need at least one")]
    NoLanes(usize),
    #[error("{lanes} lanes but {nodes} lane nodes given")]
    NodeCount { lanes: usize, nodes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitAxis {
    Row,
    Column,
    Heads,
}

/// How one weight matrix is cut: row ranges for `Row`/`Heads`, column
/// ranges for `Column`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightSplit {
    pub axis: SplitAxis,
    pub ranges: Vec<Range<usize>>,
}

impl WeightSplit {
    fn even(axis: SplitAxis, total: usize, lanes: usize) -> Self {
        let part = total / lanes;
        Self {
            axis,
            ranges: (0..lanes).map(|l| l * part..(l + 1) * part).collect(),
        }
    }

    /// Cuts `w` (`[rows, cols]`) for `lane`. Q4B column cuts move whole
    /// blocks and never requantize.
    pub fn slice(&self, w: &HostTensor, lane: usize, name: &str) -> Result<HostTensor, TensorError> {
        let dims = w.shape.dims();
        let (rows, cols) = (dims[0], dims[1]);
        let r = self.ranges[lane].clone();
        let row_bytes = w.dtype.bytes_for(cols).expect("valid row");
        match self.axis {
            SplitAxis::Row | SplitAxis::Heads => {
                let data = w.data[r.start * row_bytes..r.end * row_bytes].to_vec();
                HostTensor::new(name, &[r.len(), cols], w.dtype, data)
            }
            SplitAxis::Column => {
                let (b0, b1) = match w.dtype {
                    DType::Q4B => {
                        if r.start % BLOCK_ELEMS != 0 || r.end % BLOCK_ELEMS != 0 {
                            return Err(TensorError::UnalignedView {
                                name: w.name.clone(),
                                start: r.start,
                                end: r.end,
                            });
                        }
                        (r.start / BLOCK_ELEMS * BLOCK_BYTES, r.end / BLOCK_ELEMS * BLOCK_BYTES)
                    }
                    dt => {
                        let e = dt.bytes_for(1).expect("scalar dtype");
                        (r.start * e, r.end * e)
                    }
                };
                let mut data = Vec::with_capacity(rows * (b1 - b0));
                for row in w.data.chunks_exact(row_bytes) {
                    data.extend_from_slice(&row[b0..b1]);
                }
                HostTensor::new(name, &[rows, r.len()], w.dtype, data)
            }
        }
    }
}

/// Model dimensions the partition depends on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionDims {
    pub hidden: usize,
    pub intermediate: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// Column splits must be whole Q4B blocks.
    pub quantized: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub lanes: usize,
    pub lane_nodes: Vec<usize>,
    pub heads_per_lane: usize,
    pub kv_heads_per_lane: usize,
    pub q: WeightSplit,
    pub k: WeightSplit,
    pub v: WeightSplit,
    pub o: WeightSplit,
    pub gate: WeightSplit,
    pub up: WeightSplit,
    pub down: WeightSplit,
}

/// Plans an `n_lanes` split; lane `l` lives on `lane_nodes[l]` (default:
/// node `l`).
///
/// With more lanes than kv heads (and `n_lanes % kv_heads == 0`), each kv
/// head is replicated on the `n_lanes / kv_heads` lanes whose query heads
/// use it.
pub fn plan_partition(dims: &PartitionDims, n_lanes: usize, lane_nodes: Option<Vec<usize>>) -> Result<PartitionPlan, PlanError> {
    if n_lanes == 0 {
        return Err(PlanError::NoLanes(n_lanes));
    }
    let lane_nodes = lane_nodes.unwrap_or_else(|| (0..n_lanes).collect());
    if lane_nodes.len() != n_lanes {
        return Err(PlanError::NodeCount {
            lanes: n_lanes,
            nodes: lane_nodes.len(),
        });
    }
    let div = |dimension, value: usize, divisor: usize| {
        if divisor == 0 || value % divisor != 0 {
            Err(PlanError::Divisibility {
                dimension,
                value,
                divisor,
                lanes: n_lanes,
            })
        } else {
            Ok(())
        }
    };
    div("heads", dims.n_heads, n_lanes)?;
    div("heads", dims.n_heads, dims.n_kv_heads)?;
    let kv_per_lane = if dims.n_kv_heads % n_lanes == 0 {
        dims.n_kv_heads / n_lanes
    } else {
        div("kv_heads", n_lanes, dims.n_kv_heads).map_err(|_| PlanError::Divisibility {
            dimension: "kv_heads",
            value: dims.n_kv_heads,
            divisor: n_lanes,
            lanes: n_lanes,
        })?;
        1
    };
    div("intermediate", dims.intermediate, n_lanes)?;
    let heads_per_lane = dims.n_heads / n_lanes;
    if dims.quantized && n_lanes > 1 {
        div("intermediate", dims.intermediate, BLOCK_ELEMS * n_lanes)?;
        div("heads*head_dim", dims.n_heads * dims.head_dim, BLOCK_ELEMS * n_lanes)?;
    }

    let hd = dims.head_dim;
    let q_rows = dims.n_heads * hd;
    let kv_ranges = (0..n_lanes)
        .map(|l| {
            let first = if dims.n_kv_heads >= n_lanes {
                l * kv_per_lane
            } else {
                l / (n_lanes / dims.n_kv_heads)
            };
            first * hd..(first + kv_per_lane) * hd
        })
        .collect::<Vec<_>>();
    let kv = WeightSplit {
        axis: SplitAxis::Heads,
        ranges: kv_ranges,
    };
    Ok(PartitionPlan {
        lanes: n_lanes,
        lane_nodes,
        heads_per_lane,
        kv_heads_per_lane: kv_per_lane,
        q: WeightSplit::even(SplitAxis::Heads, q_rows, n_lanes),
        k: kv.clone(),
        v: kv,
        o: WeightSplit::even(SplitAxis::Column, q_rows, n_lanes),
        gate: WeightSplit::even(SplitAxis::Row, dims.intermediate, n_lanes),
        up: WeightSplit::even(SplitAxis::Row, dims.intermediate, n_lanes),
        down: WeightSplit::even(SplitAxis::Column, dims.intermediate, n_lanes),
    })
}

impl PartitionPlan {
    /// One-lane plan: every range is the full matrix.
    pub fn identity(dims: &PartitionDims) -> Self {
        plan_partition(
            &PartitionDims {
                quantized: false,
                ..*dims
            },
            1,
            None,
        )
        .expect("one lane always divides")
    }

    /// Copies each lane's slice of `w` into its node's weight arena.
    pub fn materialize(
        &self,
        b: &mut GraphBuilder<'_>,
        split: &WeightSplit,
        w: &HostTensor,
    ) -> Result<TensorBundle, GraphError> {
        if self.lanes == 1 {
            return Ok(b.leaf_data(w, self.lane_nodes[0])?.into());
        }
        let mut ids = Vec::with_capacity(self.lanes);
        for lane in 0..self.lanes {
            let part = split.slice(w, lane, &format!("{}#{lane}", w.name))?;
            ids.push(b.leaf_data(&part, self.lane_nodes[lane])?);
        }
        Ok(TensorBundle::new(ids))
    }

    pub fn lane_contexts(&self, threads: usize) -> Vec<LaneContext> {
        let groups = GroupAssignment::new(threads, self.lanes);
        (0..self.lanes)
            .map(|lane| LaneContext {
                lane,
                node: self.lane_nodes[lane],
                group: groups.lane_group[lane],
            })
            .collect()
    }
}

/// Where a lane runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LaneContext {
    pub lane: usize,
    pub node: usize,
    pub group: usize,
}

/// Thread groups for a region of `lanes` lanes.
///
/// With at least one thread per lane each lane gets its own group (even
/// split). With fewer threads, each thread forms a group and runs a
/// contiguous run of lanes one after another.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    pub sizes: Vec<usize>,
    pub lane_group: Vec<usize>,
}

impl GroupAssignment {
    pub fn new(threads: usize, lanes: usize) -> Self {
        let groups = lanes.min(threads).max(1);
        Self {
            sizes: even_split(threads, groups),
            lane_group: (0..lanes).map(|l| l * groups / lanes).collect(),
        }
    }

    /// Lanes run by `group`, in lane order.
    pub fn lanes_of(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        self.lane_group
            .iter()
            .enumerate()
            .filter(move |(_, &g)| g == group)
            .map(|(l, _)| l)
    }
}

/// Scatter body: a node-local copy of the input, restricted to the slice.
pub fn scatter_copy(input: &[f32], out: &mut [f32], slice: &WorkSlice) {
    out.copy_from_slice(&input[slice.rows.clone()]);
}

/// Gather body: `out = sum of lanes`, summed in lane order.
pub fn gather_sum(lanes: &[&[f32]], out: &mut [f32], slice: &WorkSlice) {
    for (o, i) in out.iter_mut().zip(slice.rows.clone()) {
        let mut acc = 0f32;
        for lane in lanes {
            acc += lane[i];
        }
        *o = acc;
    }
}
