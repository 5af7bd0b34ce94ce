//! Q4B: 4-bit block quantization.
//!
//! A block covers 32 consecutive values and is stored in 18 bytes:
//!
//! ```text
//! [scale: f16 LE][16 bytes of nibbles]
//! ```
//!
//! Element `i < 16` lives in the low nibble of byte `i`, element `i >= 16` in
//! the high nibble of byte `i - 16`. A nibble `q` decodes to `d * (q - 8)`.

use half::f16;

pub const BLOCK_ELEMS: usize = 32;
pub const BLOCK_BYTES: usize = 18;

/// One decoded view of an 18-byte block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockQ4 {
    pub scale: f16,
    pub nibbles: [u8; 16],
}

impl BlockQ4 {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let scale = f16::from_le_bytes([bytes[0], bytes[1]]);
        let mut nibbles = [0u8; 16];
        nibbles.copy_from_slice(&bytes[2..BLOCK_BYTES]);
        Self { scale, nibbles }
    }

    pub fn write_to(&self, out: &mut [u8]) {
        out[..2].copy_from_slice(&self.scale.to_le_bytes());
        out[2..BLOCK_BYTES].copy_from_slice(&self.nibbles);
    }

    #[inline]
    pub fn nibble(&self, i: usize) -> u8 {
        if i < 16 {
            self.nibbles[i] & 0x0f
        } else {
            self.nibbles[i - 16] >> 4
        }
    }

    pub fn dequantize(&self, out: &mut [f32]) {
        let d = self.scale.to_f32();
        for (i, o) in out.iter_mut().enumerate().take(BLOCK_ELEMS) {
            *o = d * (self.nibble(i) as f32 - 8.0);
        }
    }
}

fn nibble_index(v: f32, d: f32) -> i32 {
    (v / d).round() as i32 + 8
}

/// Quantizes exactly one block of 32 values.
///
/// The scale is the signed value of largest magnitude divided by -8, so that
/// value lands on nibble 0. When a value of the opposite sign would then need
/// nibble 16, the block falls back to a divisor of -7, which keeps every value
/// inside the nibble range and the per-element error within half a step.
pub fn quantize_block(values: &[f32]) -> BlockQ4 {
    debug_assert_eq!(values.len(), BLOCK_ELEMS);
    let amax = values
        .iter()
        .copied()
        .fold(0.0f32, |acc, v| if v.abs() > acc.abs() { v } else { acc });

    let mut block = BlockQ4 {
        scale: f16::ZERO,
        nibbles: [0x88; 16],
    };
    if amax == 0.0 {
        return block;
    }

    let mut d = f16::from_f32(amax / -8.0);
    if values.iter().any(|&v| nibble_index(v, d.to_f32()) > 15) {
        d = f16::from_f32(amax / -7.0);
    }
    let df = d.to_f32();
    if df == 0.0 {
        // scale underflows f16; the block decodes to zeros
        return block;
    }
    block.scale = d;

    for (i, &v) in values.iter().enumerate() {
        let q = nibble_index(v, df).clamp(0, 15) as u8;
        if i < 16 {
            block.nibbles[i] = (block.nibbles[i] & 0xf0) | q;
        } else {
            block.nibbles[i - 16] = (block.nibbles[i - 16] & 0x0f) | (q << 4);
        }
    }
    block
}

/// Quantizes `values` (length a multiple of 32) into packed Q4B bytes.
pub fn quantize_q4b(values: &[f32]) -> Vec<u8> {
    assert!(
        values.len() % BLOCK_ELEMS == 0,
        "Q4B input length {} is not a multiple of {BLOCK_ELEMS}",
        values.len()
    );
    let mut out = vec![0u8; values.len() / BLOCK_ELEMS * BLOCK_BYTES];
    for (chunk, dst) in values
        .chunks_exact(BLOCK_ELEMS)
        .zip(out.chunks_exact_mut(BLOCK_BYTES))
    {
        quantize_block(chunk).write_to(dst);
    }
    out
}

pub fn dequantize_q4b(bytes: &[u8]) -> Vec<f32> {
    assert!(bytes.len() % BLOCK_BYTES == 0);
    let mut out = vec![0f32; bytes.len() / BLOCK_BYTES * BLOCK_ELEMS];
    dequantize_q4b_into(bytes, &mut out);
    out
}

pub fn dequantize_q4b_into(bytes: &[u8], out: &mut [f32]) {
    for (src, dst) in bytes
        .chunks_exact(BLOCK_BYTES)
        .zip(out.chunks_exact_mut(BLOCK_ELEMS))
    {
        BlockQ4::from_bytes(src).dequantize(dst);
    }
}

/// Decodes a single element from packed Q4B bytes.
#[inline]
pub fn q4b_element(bytes: &[u8], index: usize) -> f32 {
    let block = &bytes[(index / BLOCK_ELEMS) * BLOCK_BYTES..];
    let d = f16::from_le_bytes([block[0], block[1]]).to_f32();
    let i = index % BLOCK_ELEMS;
    let q = if i < 16 {
        block[2 + i] & 0x0f
    } else {
        block[2 + i - 16] >> 4
    };
    d * (q as f32 - 8.0)
}

/// Scale of the block containing element `index`.
pub fn q4b_scale(bytes: &[u8], index: usize) -> f32 {
    let block = &bytes[(index / BLOCK_ELEMS) * BLOCK_BYTES..];
    f16::from_le_bytes([block[0], block[1]]).to_f32()
}
