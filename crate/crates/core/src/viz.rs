//! Cluster maps as binary PPM images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor_io::write_atomic;

const MASK24: u32 = 0x00ff_ffff;

/// Color of `id` under `seed`. The map from `id` to the packed 24-bit color
/// is a bijection for every seed, so distinct ids never share a color.
pub fn palette_color(id: u16, seed: u64) -> [u8; 3] {
    let mut x = (id as u32).wrapping_add(seed as u32 ^ (seed >> 32) as u32) & MASK24;
    // xor-shifts and odd multipliers are invertible modulo 2^24
    x ^= x >> 12;
    x = x.wrapping_mul(0x009e_3779) & MASK24;
    x ^= x >> 11;
    x = x.wrapping_mul(0x005b_d1e9) & MASK24;
    x ^= x >> 13;
    [(x >> 16) as u8, (x >> 8) as u8, x as u8]
}

/// Render a `rows x cols` id grid as a `height x width` P6 image, each pixel
/// taking the color of the cell it falls in.
pub fn emit_cluster_map(
    ids: &[u32],
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<u8>> {
    if ids.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(Error::contract(format!("{} ids for a {rows}x{cols} grid", ids.len())));
    }
    if let Some(bad) = ids.iter().find(|&&id| id > u16::MAX as u32) {
        return Err(Error::invalid(format!("cluster id {bad} does not fit in 16 bits")));
    }
    let header = format!("P6\n{width} {height}\n255\n");
    let mut out = Vec::with_capacity(header.len() + 3 * width * height);
    out.extend_from_slice(header.as_bytes());
    let colors: Vec<[u8; 3]> = ids.iter().map(|&id| palette_color(id as u16, seed)).collect();
    for y in 0..height {
        let r = y * rows / height;
        for x in 0..width {
            out.extend_from_slice(&colors[r * cols + x * cols / width]);
        }
    }
    Ok(out)
}

pub fn save_cluster_map(
    path: &Path,
    ids: &[u32],
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<()> {
    write_atomic(path, &emit_cluster_map(ids, rows, cols, height, width, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn two_by_two_blocks() {
        let img = emit_cluster_map(&[0, 1, 1, 0], 2, 2, 4, 4, 7).unwrap();
        let header = b"P6\n4 4\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        let (a, b) = (palette_color(0, 7), palette_color(1, 7));
        assert_ne!(a, b);
        for y in 0..4 {
            for x in 0..4 {
                let want = if (y < 2) == (x < 2) { a } else { b };
                assert_eq!(&px[3 * (y * 4 + x)..][..3], &want, "pixel {x},{y}");
            }
        }
        assert_eq!(img, emit_cluster_map(&[0, 1, 1, 0], 2, 2, 4, 4, 7).unwrap());
    }

    #[test]
    fn palette_is_collision_free() {
        for seed in [0, 1, 99, u64::MAX] {
            let set: HashSet<[u8; 3]> = (0..300).map(|id| palette_color(id, seed)).collect();
            assert_eq!(set.len(), 300);
        }
        let all: HashSet<[u8; 3]> = (0..=u16::MAX).map(|id| palette_color(id, 5)).collect();
        assert_eq!(all.len(), 1 << 16);
    }

    #[test]
    fn rejects_wide_ids() {
        assert!(emit_cluster_map(&[70_000], 1, 1, 2, 2, 0).is_err());
    }
}
