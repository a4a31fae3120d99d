//! Frames, patch grids and continuous-coordinate sampling.
//!
//! Grid cell `(r, c)` has its center at pixel `((c + 0.5) p, (r + 0.5) p)`.
//! Sampling outside the grid clamps to the border cell centers.

use crate::error::{Error, Result};

/// A clip of `t` frames stored row-major as `[t, h, w, c]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<f32>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub frame_rate: f32,
    pub clip_id: String,
}

impl VideoClip {
    pub fn new(
        frames: Vec<f32>,
        (t, h, w, c): (usize, usize, usize, usize),
        frame_rate: f32,
        clip_id: impl Into<String>,
    ) -> Result<Self> {
        if frames.len() != t * h * w * c {
            return Err(Error::invalid(format!(
                "frame buffer has {} values, shape [{t},{h},{w},{c}] needs {}",
                frames.len(),
                t * h * w * c
            )));
        }
        if t < 1 || h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("clip dimensions must be nonzero"));
        }
        if let Some(v) = frames.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("pixel value {v} outside [0,1]")));
        }
        Ok(VideoClip {
            frames,
            t,
            h,
            w,
            c,
            frame_rate,
            clip_id: clip_id.into(),
        })
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> &[f32] {
        let i = ((t * self.h + y) * self.w + x) * self.c;
        &self.frames[i..i + self.c]
    }
}

/// Raw patch vectors `[t, rows, cols, p*p*c]`, each row-major over `(py, px, ch)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub data: Vec<f32>,
    pub t: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl Patches {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.cells() * self.dim;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn patch(&self, t: usize, r: usize, c: usize) -> &[f32] {
        let i = ((t * self.rows + r) * self.cols + c) * self.dim;
        &self.data[i..i + self.dim]
    }
}

pub fn patchify(clip: &VideoClip, p: usize) -> Result<Patches> {
    if p == 0 || !clip.h.is_multiple_of(p) || !clip.w.is_multiple_of(p) {
        return Err(Error::invalid(format!(
            "frame {}x{} not divisible by patch size {p}",
            clip.h, clip.w
        )));
    }
    let (rows, cols, ch) = (clip.h / p, clip.w / p, clip.c);
    let dim = p * p * ch;
    let mut data = Vec::with_capacity(clip.frames.len());
    for t in 0..clip.t {
        let frame = clip.frame(t);
        for r in 0..rows {
            for c in 0..cols {
                for py in 0..p {
                    let start = ((r * p + py) * clip.w + c * p) * ch;
                    data.extend_from_slice(&frame[start..start + p * ch]);
                }
            }
        }
    }
    Ok(Patches {
        data,
        t: clip.t,
        rows,
        cols,
        dim,
        patch_size: p,
        channels: ch,
    })
}

/// Inverse of [`patchify`]: returns the `[t, h, w, c]` frame buffer.
pub fn unpatchify(patches: &Patches) -> Vec<f32> {
    let p = patches.patch_size;
    let ch = patches.channels;
    let (h, w) = (patches.rows * p, patches.cols * p);
    let mut out = vec![0.0f32; patches.t * h * w * ch];
    for t in 0..patches.t {
        for r in 0..patches.rows {
            for c in 0..patches.cols {
                let src = patches.patch(t, r, c);
                for py in 0..p {
                    let dst = ((t * h + r * p + py) * w + c * p) * ch;
                    out[dst..dst + p * ch].copy_from_slice(&src[py * p * ch..(py + 1) * p * ch]);
                }
            }
        }
    }
    out
}

/// Continuous pixel coordinate: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCoord {
    pub x: f32,
    pub y: f32,
}

impl GridCoord {
    pub fn new(x: f32, y: f32) -> Self {
        GridCoord { x, y }
    }
}

/// Pixel coordinate to continuous grid coordinate `(row, col)`. No clamping.
pub fn pixel_to_grid(coord: GridCoord, p: usize) -> (f32, f32) {
    let p = p as f32;
    (coord.y / p - 0.5, coord.x / p - 0.5)
}

/// The four (cell index, weight) pairs of a clamped bilinear lookup.
pub fn bilinear_taps(gr: f32, gc: f32, rows: usize, cols: usize) -> [(usize, f32); 4] {
    let axis = |g: f32, n: usize| -> (usize, usize, f32) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let g = g.clamp(0.0, (n - 1) as f32);
        let i0 = (g.floor() as usize).min(n - 2);
        (i0, i0 + 1, g - i0 as f32)
    };
    let (r0, r1, fr) = axis(gr, rows);
    let (c0, c1, fc) = axis(gc, cols);
    [
        (r0 * cols + c0, (1.0 - fr) * (1.0 - fc)),
        (r0 * cols + c1, (1.0 - fr) * fc),
        (r1 * cols + c0, fr * (1.0 - fc)),
        (r1 * cols + c1, fr * fc),
    ]
}

/// Nearest cell to a continuous grid coordinate; ties go to the smaller index.
pub fn nearest_cell(gr: f32, gc: f32, rows: usize, cols: usize) -> (usize, usize) {
    let pick = |g: f32, n: usize| -> usize {
        let i = (g - 0.5).ceil();
        if i.is_nan() || i <= 0.0 {
            0
        } else {
            (i as usize).min(n - 1)
        }
    };
    (pick(gr, rows), pick(gc, cols))
}

/// Dense `[rows, cols, dim]` feature map for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub data: Vec<f32>,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub patch_size: usize,
    pub normalized: bool,
}

impl FeatureGrid {
    pub fn new(data: Vec<f32>, rows: usize, cols: usize, dim: usize, patch_size: usize) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(Error::invalid(format!(
                "feature grid needs {} values, got {}",
                rows * cols * dim,
                data.len()
            )));
        }
        if rows == 0 || cols == 0 || patch_size == 0 {
            return Err(Error::invalid("empty feature grid"));
        }
        Ok(FeatureGrid {
            data,
            rows,
            cols,
            dim,
            patch_size,
            normalized: false,
        })
    }

    pub fn cell(&self, r: usize, c: usize) -> &[f32] {
        let i = (r * self.cols + c) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn cell_at(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn sample_bilinear(&self, coord: GridCoord) -> Vec<f32> {
        let (gr, gc) = pixel_to_grid(coord, self.patch_size);
        let mut acc = vec![0.0f64; self.dim];
        for (idx, w) in bilinear_taps(gr, gc, self.rows, self.cols) {
            if w == 0.0 {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(self.cell_at(idx)) {
                *a += w as f64 * *v as f64;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    }

    /// Returns the nearest cell's vector and its flat index `r * cols + c`.
    pub fn sample_nearest(&self, coord: GridCoord) -> (Vec<f32>, usize) {
        let (gr, gc) = pixel_to_grid(coord, self.patch_size);
        let (r, c) = nearest_cell(gr, gc, self.rows, self.cols);
        let idx = r * self.cols + c;
        (self.cell_at(idx).to_vec(), idx)
    }

    pub fn l2_normalize(&self, eps: f32) -> FeatureGrid {
        let mut out = self.clone();
        for v in out.data.chunks_exact_mut(self.dim.max(1)) {
            normalize_in_place(v, eps);
        }
        out.normalized = true;
        out
    }
}

pub fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}

/// Divide `v` by `max(||v||, eps)`.
pub fn normalize_in_place(v: &mut [f32], eps: f32) {
    let n = (l2_norm(v)).max(eps);
    for x in v.iter_mut() {
        *x /= n;
    }
}
