//! Reference scalar kernels.
//!
//! Every kernel writes only the output rows named by its [`WorkSlice`] and
//! never splits a reduction across threads, so results are bit-identical for
//! any group size.

use std::ops::Range;

use half::f16;
use thiserror::Error;

use crate::quant::{self, BLOCK_BYTES, BLOCK_ELEMS};
use crate::tensor::DType;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
}

fn shape_err(op: &'static str, detail: String) -> KernelError {
    KernelError::Shape { op, detail }
}

/// The output rows one thread owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkSlice {
    pub rank: usize,
    pub size: usize,
    pub rows: Range<usize>,
}

impl WorkSlice {
    /// Balanced contiguous partition of `[0, total)`: slice sizes differ by
    /// at most one.
    pub fn new(rank: usize, size: usize, total: usize) -> Self {
        assert!(rank < size, "rank {rank} outside group of {size}");
        let base = total / size;
        let rem = total % size;
        let start = rank * base + rank.min(rem);
        let len = base + usize::from(rank < rem);
        Self {
            rank,
            size,
            rows: start..start + len,
        }
    }

    pub fn full(total: usize) -> Self {
        Self {
            rank: 0,
            size: 1,
            rows: 0..total,
        }
    }
}

/// Read-only `[rows, cols]` matrix in any storage type.
#[derive(Debug, Clone, Copy)]
pub struct Matrix<'a> {
    pub data: &'a [u8],
    pub dtype: DType,
    pub rows: usize,
    pub cols: usize,
}

impl<'a> Matrix<'a> {
    pub fn new(data: &'a [u8], dtype: DType, rows: usize, cols: usize) -> Result<Self, KernelError> {
        let row_bytes = dtype
            .bytes_for(cols)
            .ok_or_else(|| shape_err("matrix", format!("{cols} columns do not fill whole Q4B blocks")))?;
        if data.len() != row_bytes * rows {
            return Err(shape_err(
                "matrix",
                format!("[{rows}, {cols}] {dtype} needs {} bytes, got {}", row_bytes * rows, data.len()),
            ));
        }
        Ok(Self {
            data,
            dtype,
            rows,
            cols,
        })
    }

    fn row_bytes(&self) -> usize {
        self.dtype.bytes_for(self.cols).expect("validated")
    }

    /// Decodes row `r` into `out` (length `cols`).
    pub fn decode_row(&self, r: usize, out: &mut [f32]) {
        let rb = self.row_bytes();
        let bytes = &self.data[r * rb..(r + 1) * rb];
        match self.dtype {
            DType::F32 => {
                for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
                    *o = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                }
            }
            DType::F16 => {
                for (o, c) in out.iter_mut().zip(bytes.chunks_exact(2)) {
                    *o = f16::from_le_bytes([c[0], c[1]]).to_f32();
                }
            }
            DType::Q4B => quant::dequantize_q4b_into(bytes, out),
        }
    }

    /// Decodes elements `cols` of row `r`.
    pub fn decode_elems(&self, r: usize, cols: Range<usize>, out: &mut [f32]) {
        let rb = self.row_bytes();
        let bytes = &self.data[r * rb..(r + 1) * rb];
        for (o, c) in out.iter_mut().zip(cols) {
            *o = match self.dtype {
                DType::F32 => {
                    let b = &bytes[c * 4..c * 4 + 4];
                    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
                }
                DType::F16 => f16::from_le_bytes([bytes[c * 2], bytes[c * 2 + 1]]).to_f32(),
                DType::Q4B => quant::q4b_element(bytes, c),
            };
        }
    }
}

/// `out[m, n] = sum_k w[m, k] * x[k, n]` for `m` in `slice.rows`.
///
/// `x` is `[K, N]` row-major and `out` holds only the slice's rows
/// (`slice.rows.len() * N` values). Q4B rows are dequantized a block at a
/// time; accumulation is F32 in increasing `k`.
pub fn gemm(w: &Matrix<'_>, x: &[f32], n: usize, out: &mut [f32], slice: &WorkSlice) -> Result<(), KernelError> {
    let k = w.cols;
    if n == 0 || x.len() != k * n {
        return Err(shape_err(
            "gemm",
            format!("weight [{}, {k}] against input of {} values (N = {n})", w.rows, x.len()),
        ));
    }
    if slice.rows.end > w.rows || out.len() != slice.rows.len() * n {
        return Err(shape_err(
            "gemm",
            format!("output slice {:?} x {n} does not fit {} rows / {} values", slice.rows, w.rows, out.len()),
        ));
    }

    let mut acc = vec![0f32; n];
    let mut block = [0f32; BLOCK_ELEMS];
    let mut wrow = if w.dtype == DType::Q4B { Vec::new() } else { vec![0f32; k] };
    let rb = w.row_bytes();

    for (i, m) in slice.rows.clone().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        match w.dtype {
            DType::Q4B => {
                let row = &w.data[m * rb..(m + 1) * rb];
                for (b, bytes) in row.chunks_exact(BLOCK_BYTES).enumerate() {
                    quant::BlockQ4::from_bytes(bytes).dequantize(&mut block);
                    let k0 = b * BLOCK_ELEMS;
                    for (j, &wv) in block.iter().enumerate() {
                        let xr = &x[(k0 + j) * n..(k0 + j + 1) * n];
                        for (a, &xv) in acc.iter_mut().zip(xr) {
                            *a += wv * xv;
                        }
                    }
                }
            }
            _ => {
                w.decode_row(m, &mut wrow);
                for (kk, &wv) in wrow.iter().enumerate() {
                    let xr = &x[kk * n..(kk + 1) * n];
                    for (a, &xv) in acc.iter_mut().zip(xr) {
                        *a += wv * xv;
                    }
                }
            }
        }
        out[i * n..(i + 1) * n].copy_from_slice(&acc);
    }
    Ok(())
}

/// `y_i = gamma_i * x_i / sqrt(mean(x^2) + eps)` for `i` in `slice.rows`.
pub fn rmsnorm(x: &[f32], gamma: &[f32], eps: f32, out: &mut [f32], slice: &WorkSlice) -> Result<(), KernelError> {
    if x.is_empty() || gamma.len() != x.len() || out.len() != slice.rows.len() || slice.rows.end > x.len() {
        return Err(shape_err(
            "rmsnorm",
            format!("x {} / gamma {} / out {} / rows {:?}", x.len(), gamma.len(), out.len(), slice.rows),
        ));
    }
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let scale = 1.0 / (mean_sq + eps).sqrt();
    for (o, i) in out.iter_mut().zip(slice.rows.clone()) {
        *o = gamma[i] * (x[i] * scale);
    }
    Ok(())
}

/// Numerically stable softmax over the whole of `x`.
pub fn softmax(x: &[f32], out: &mut [f32]) -> Result<(), KernelError> {
    if x.is_empty() || out.len() != x.len() {
        return Err(shape_err("softmax", format!("input {} / output {}", x.len(), out.len())));
    }
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

#[inline]
pub fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

/// Elementwise SiLU on `x[slice.rows]`.
pub fn silu_rows(x: &[f32], out: &mut [f32], slice: &WorkSlice) {
    for (o, &v) in out.iter_mut().zip(&x[slice.rows.clone()]) {
        *o = silu(v);
    }
}

pub fn mul_rows(a: &[f32], b: &[f32], out: &mut [f32], slice: &WorkSlice) {
    for ((o, &x), &y) in out.iter_mut().zip(&a[slice.rows.clone()]).zip(&b[slice.rows.clone()]) {
        *o = x * y;
    }
}

pub fn add_rows(a: &[f32], b: &[f32], out: &mut [f32], slice: &WorkSlice) {
    for ((o, &x), &y) in out.iter_mut().zip(&a[slice.rows.clone()]).zip(&b[slice.rows.clone()]) {
        *o = x + y;
    }
}

/// Rotary embedding over the heads in `slice.rows`.
///
/// `x` is `[heads * head_dim]`; pair `(2i, 2i + 1)` of each head is rotated
/// by `position * theta_base^(-2i / head_dim)`. `out` holds the slice's heads.
pub fn rope(
    x: &[f32],
    head_dim: usize,
    position: usize,
    theta_base: f32,
    out: &mut [f32],
    slice: &WorkSlice,
) -> Result<(), KernelError> {
    if head_dim % 2 != 0 || x.len() % head_dim != 0 || out.len() != slice.rows.len() * head_dim {
        return Err(shape_err(
            "rope",
            format!("{} values, head_dim {head_dim}, output {}", x.len(), out.len()),
        ));
    }
    let pos = position as f32;
    for (oh, h) in out.chunks_exact_mut(head_dim).zip(slice.rows.clone()) {
        let xh = &x[h * head_dim..(h + 1) * head_dim];
        for i in 0..head_dim / 2 {
            let freq = theta_base.powf(-((2 * i) as f32) / head_dim as f32);
            let (sin, cos) = (pos * freq).sin_cos();
            let (a, b) = (xh[2 * i], xh[2 * i + 1]);
            oh[2 * i] = a * cos - b * sin;
            oh[2 * i + 1] = a * sin + b * cos;
        }
    }
    Ok(())
}

/// Shapes of one attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionDims {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// Number of cached positions to attend over.
    pub len: usize,
    pub scale: f32,
}

/// Single-query attention over the cache, one pass per head with a running
/// max and denominator.
///
/// `k` and `v` are `[>= len, n_kv_heads * head_dim]`; query head `h` reads kv
/// head `h / (n_heads / n_kv_heads)`. `out` holds the heads in `slice.rows`.
pub fn attention(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    dims: &AttentionDims,
    out: &mut [f32],
    slice: &WorkSlice,
) -> Result<(), KernelError> {
    let AttentionDims {
        n_heads,
        n_kv_heads,
        head_dim,
        len,
        scale,
    } = *dims;
    let kv_row = n_kv_heads * head_dim;
    if n_kv_heads == 0
        || n_heads % n_kv_heads != 0
        || q.len() != n_heads * head_dim
        || len == 0
        || k.len() < len * kv_row
        || v.len() < len * kv_row
        || out.len() != slice.rows.len() * head_dim
    {
        return Err(shape_err(
            "attention",
            format!(
                "q {} for {n_heads}x{head_dim}, kv heads {n_kv_heads}, len {len}, cache {} / {}, out {}",
                q.len(),
                k.len(),
                v.len(),
                out.len()
            ),
        ));
    }
    let group = n_heads / n_kv_heads;
    for (oh, h) in out.chunks_exact_mut(head_dim).zip(slice.rows.clone()) {
        let qh = &q[h * head_dim..(h + 1) * head_dim];
        let kvh = h / group;
        let mut running_max = f32::NEG_INFINITY;
        let mut denom = 0f32;
        oh.iter_mut().for_each(|o| *o = 0.0);
        for t in 0..len {
            let base = t * kv_row + kvh * head_dim;
            let kt = &k[base..base + head_dim];
            let vt = &v[base..base + head_dim];
            let s = qh.iter().zip(kt).map(|(a, b)| a * b).sum::<f32>() * scale;
            let new_max = running_max.max(s);
            let correction = (running_max - new_max).exp();
            let p = (s - new_max).exp();
            denom = denom * correction + p;
            for (o, &vv) in oh.iter_mut().zip(vt) {
                *o = *o * correction + p * vv;
            }
            running_max = new_max;
        }
        for o in oh.iter_mut() {
            *o /= denom;
        }
    }
    Ok(())
}

/// Copies row `token` of the embedding table, restricted to `slice.rows`.
pub fn embed(table: &Matrix<'_>, token: usize, out: &mut [f32], slice: &WorkSlice) -> Result<(), KernelError> {
    if token >= table.rows || slice.rows.end > table.cols || out.len() != slice.rows.len() {
        return Err(shape_err(
            "embed",
            format!("token {token} of table [{}, {}], rows {:?}", table.rows, table.cols, slice.rows),
        ));
    }
    table.decode_elems(token, slice.rows.clone(), out);
    Ok(())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f32_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    /// Textbook triple loop.
    fn naive_gemm(w: &[f32], x: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += w[i * k + kk] * x[kk * n + j];
                }
            }
        }
        out
    }

    fn run_gemm(w: &Matrix<'_>, x: &[f32], n: usize) -> Vec<f32> {
        let mut out = vec![0f32; w.rows * n];
        gemm(w, x, n, &mut out, &WorkSlice::full(w.rows)).unwrap();
        out
    }

    #[test]
    fn work_slices_partition_rows() {
        for total in [0usize, 1, 7, 64, 65] {
            for size in 1..=9 {
                let slices: Vec<_> = (0..size).map(|r| WorkSlice::new(r, size, total)).collect();
                let mut next = 0;
                for s in &slices {
                    assert_eq!(s.rows.start, next);
                    next = s.rows.end;
                }
                assert_eq!(next, total);
                let lens: Vec<_> = slices.iter().map(|s| s.rows.len()).collect();
                assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn gemm_examples() {
        let id = f32_bytes(&[1.0, 0.0, 0.0, 1.0]);
        let w = Matrix::new(&id, DType::F32, 2, 2).unwrap();
        assert_eq!(run_gemm(&w, &[5.0, 7.0], 1), vec![5.0, 7.0]);

        let wb = f32_bytes(&[1.0, 2.0, 3.0, 4.0]);
        let w = Matrix::new(&wb, DType::F32, 2, 2).unwrap();
        assert_eq!(run_gemm(&w, &[1.0, 1.0], 1), naive_gemm(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2, 1));
        assert_eq!(run_gemm(&w, &[1.0, 1.0], 1), vec![3.0, 7.0]);

        let mut out = vec![0.0; 2];
        assert!(matches!(
            gemm(&w, &[1.0, 1.0, 1.0], 1, &mut out, &WorkSlice::full(2)),
            Err(KernelError::Shape { .. })
        ));
    }

    #[test]
    fn gemm_matches_naive_oracle_and_slicing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (13, 24, 3);
        let w: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wb = f32_bytes(&w);
        let mat = Matrix::new(&wb, DType::F32, m, k).unwrap();
        let full = run_gemm(&mat, &x, n);
        let oracle = naive_gemm(&w, &x, m, k, n);
        for (a, b) in full.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-5);
        }
        for size in [2, 3, 5, 13] {
            let mut pieced = Vec::new();
            for r in 0..size {
                let s = WorkSlice::new(r, size, m);
                let mut out = vec![0f32; s.rows.len() * n];
                gemm(&mat, &x, n, &mut out, &s).unwrap();
                pieced.extend(out);
            }
            assert_eq!(pieced, full, "group size {size}");
        }
    }

    #[test]
    fn q4b_gemm_relative_row_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k) = (32, 32);
        let w: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f32> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = quant::quantize_q4b(&w);
        let qm = Matrix::new(&q, DType::Q4B, m, k).unwrap();
        let yq = run_gemm(&qm, &x, 1);
        let y = naive_gemm(&w, &x, m, k, 1);
        let xmax = x.iter().fold(0f32, |a, v| a.max(v.abs()));
        for r in 0..m {
            let wmax = w[r * k..(r + 1) * k].iter().fold(0f32, |a, v| a.max(v.abs()));
            let rel = (yq[r] - y[r]).abs() / (k as f32 * wmax * xmax);
            assert!(rel <= 1.0 / 32.0, "row {r}: {rel}");
        }
        // and matches dequantize-then-multiply exactly
        let deq = quant::dequantize_q4b(&q);
        assert_eq!(yq, naive_gemm(&deq, &x, m, k, 1));
    }

    #[test]
    fn f16_gemm_upconverts() {
        let w: Vec<u8> = [1.5f32, -2.0, 0.25, 4.0]
            .iter()
            .flat_map(|v| f16::from_f32(*v).to_le_bytes())
            .collect();
        let m = Matrix::new(&w, DType::F16, 2, 2).unwrap();
        assert_eq!(run_gemm(&m, &[2.0, 1.0], 1), vec![1.0, 4.5]);
    }

    #[test]
    fn rmsnorm_examples() {
        let mut out = vec![0.0; 8];
        rmsnorm(&[2.0; 8], &[1.0; 8], 1e-12, &mut out, &WorkSlice::full(8)).unwrap();
        assert!(out.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        rmsnorm(&[0.0; 8], &[1.0; 8], 1e-6, &mut out, &WorkSlice::full(8)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f32> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let gamma: Vec<f32> = (0..64).map(|_| rng.gen_range(0.5..2.0)).collect();
        let mut y = vec![0.0; 64];
        rmsnorm(&x, &gamma, 1e-6, &mut y, &WorkSlice::full(64)).unwrap();
        let ms = y.iter().zip(&gamma).map(|(a, g)| (a / g).powi(2)).sum::<f32>() / 64.0;
        assert!((ms - 1.0).abs() < 1e-4, "{ms}");
    }

    #[test]
    fn softmax_properties() {
        let mut out = vec![0.0; 5];
        softmax(&[3.0; 5], &mut out).unwrap();
        assert!(out.iter().all(|&v| (v - 0.2).abs() < 1e-7));

        let x = [1.0f32, -2.0, 0.5, 7.0];
        let mut a = vec![0.0; 4];
        let mut b = vec![0.0; 4];
        softmax(&x, &mut a).unwrap();
        softmax(&x.map(|v| v + 100.0), &mut b).unwrap();
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-6);
        }
        assert!(softmax(&[], &mut []).is_err());
    }

    #[test]
    fn silu_and_rope_identities() {
        assert_eq!(silu(0.0), 0.0);
        let x: Vec<f32> = (0..16).map(|i| i as f32 * 0.3 - 2.0).collect();
        let mut out = vec![0.0; 16];
        rope(&x, 8, 0, 10000.0, &mut out, &WorkSlice::full(2)).unwrap();
        assert_eq!(out, x);
        rope(&x, 8, 3, 10000.0, &mut out, &WorkSlice::full(2)).unwrap();
        // rotation preserves each pair's norm
        for (a, b) in x.chunks(2).zip(out.chunks(2)) {
            let na = a[0].hypot(a[1]);
            let nb = b[0].hypot(b[1]);
            assert!((na - nb).abs() < 1e-5);
        }
        // first pair rotates by exactly `position` radians
        let (s, c) = 3f32.sin_cos();
        assert!((out[0] - (x[0] * c - x[1] * s)).abs() < 1e-6);
        assert!(rope(&x[..15], 5, 0, 1.0, &mut out[..15], &WorkSlice::full(3)).is_err());
    }

    /// Materializes all scores, then softmax, then the weighted sum.
    fn naive_attention(q: &[f32], k: &[f32], v: &[f32], d: &AttentionDims) -> Vec<f32> {
        let hd = d.head_dim;
        let row = d.n_kv_heads * hd;
        let group = d.n_heads / d.n_kv_heads;
        let mut out = vec![0f32; d.n_heads * hd];
        for h in 0..d.n_heads {
            let kvh = h / group;
            let scores: Vec<f64> = (0..d.len)
                .map(|t| {
                    (0..hd)
                        .map(|i| q[h * hd + i] as f64 * k[t * row + kvh * hd + i] as f64)
                        .sum::<f64>()
                        * d.scale as f64
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for i in 0..hd {
                out[h * hd + i] = (0..d.len)
                    .map(|t| exps[t] / sum * v[t * row + kvh * hd + i] as f64)
                    .sum::<f64>() as f32;
            }
        }
        out
    }

    fn run_attention(q: &[f32], k: &[f32], v: &[f32], d: &AttentionDims) -> Vec<f32> {
        let mut out = vec![0f32; q.len()];
        attention(q, k, v, d, &mut out, &WorkSlice::full(d.n_heads)).unwrap();
        out
    }

    #[test]
    fn attention_single_and_equal_logits() {
        let d = AttentionDims {
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            len: 1,
            scale: 0.5,
        };
        let q = [0.3, -1.0, 2.0, 0.1, 1.0, 1.0, 1.0, 1.0];
        let v0 = [1.25, -3.0, 0.5, 8.0];
        let out = run_attention(&q, &[0.7, 0.1, -0.2, 0.4], &v0, &d);
        assert_eq!(&out[..4], &v0);
        assert_eq!(&out[4..], &v0);

        let d2 = AttentionDims { len: 2, ..d };
        let k = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let v = [2.0, 4.0, 6.0, 8.0, 4.0, 0.0, -6.0, 1.0];
        let out = run_attention(&q, &k, &v, &d2);
        assert_eq!(&out[..4], &[3.0, 2.0, 0.0, 4.5]);
    }

    #[test]
    fn attention_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst = 0f32;
        for _ in 0..1000 {
            let n_kv_heads = rng.gen_range(1..=3);
            let n_heads = n_kv_heads * rng.gen_range(1..=3);
            let head_dim = 2 * rng.gen_range(1..=8);
            let len = rng.gen_range(1..=12);
            let d = AttentionDims {
                n_heads,
                n_kv_heads,
                head_dim,
                len,
                scale: 1.0 / (head_dim as f32).sqrt(),
            };
            let mut gen = |n: usize| (0..n).map(|_| rng.gen_range(-2.0f32..2.0)).collect::<Vec<_>>();
            let q = gen(n_heads * head_dim);
            let k = gen(len * n_kv_heads * head_dim);
            let v = gen(len * n_kv_heads * head_dim);
            let got = run_attention(&q, &k, &v, &d);
            let want = naive_attention(&q, &k, &v, &d);
            let scale = want.iter().fold(0f32, |a, x| a.max(x.abs())).max(1e-3);
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs() / scale);
            }
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn embed_reads_one_row() {
        let table: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let tb = f32_bytes(&table);
        let m = Matrix::new(&tb, DType::F32, 3, 4).unwrap();
        let mut out = vec![0.0; 2];
        embed(&m, 2, &mut out, &WorkSlice::new(1, 2, 4)).unwrap();
        assert_eq!(out, vec![10.0, 11.0]);
        assert!(embed(&m, 3, &mut out, &WorkSlice::new(1, 2, 4)).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }
}
