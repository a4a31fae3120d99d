//! Desk-scale encoder: linear patch embedding, a 3x3 zero-padded mixing
//! convolution over the patch grid, GELU, and a two-layer projection head.
//!
//! Everything is generic over the float type so the same code runs in `f32`
//! for training and in `f64` for finite-difference replay. Weight matrices
//! are stored `[in, out]` row-major; reductions accumulate in `f64`.

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, Patches};

pub const PATCH_W: usize = 0;
pub const PATCH_B: usize = 1;
pub const MIXER_W: usize = 2;
pub const MIXER_B: usize = 3;
pub const FC1_W: usize = 4;
pub const FC1_B: usize = 5;
pub const FC2_W: usize = 6;
pub const FC2_B: usize = 7;
pub const MASK_TOKEN: usize = 8;
pub const PROTOTYPES: usize = 9;
pub const NUM_BLOCKS: usize = 10;

pub const BLOCK_NAMES: [&str; NUM_BLOCKS] = [
    "patch_embed.weight",
    "patch_embed.bias",
    "mixer.weight",
    "mixer.bias",
    "head.fc1.weight",
    "head.fc1.bias",
    "head.fc2.weight",
    "head.fc2.bias",
    "mask_token",
    "prototypes",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Backbone,
    Head,
}

pub fn block_group(block: usize) -> Group {
    match block {
        PATCH_W | PATCH_B | MIXER_W | MIXER_B | MASK_TOKEN => Group::Backbone,
        _ => Group::Head,
    }
}

/// Weight decay applies to the four weight matrices only.
pub fn block_decays(block: usize) -> bool {
    matches!(block, PATCH_W | MIXER_W | FC1_W | FC2_W)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub patch_size: usize,
    pub channels: usize,
    pub d_e: usize,
    pub h_dim: usize,
    pub d: usize,
    pub k: usize,
}

impl ModelDims {
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn block_shape(&self, block: usize) -> Vec<usize> {
        let (p, e, h, d) = (self.patch_dim(), self.d_e, self.h_dim, self.d);
        match block {
            PATCH_W => vec![p, e],
            PATCH_B | MIXER_B | MASK_TOKEN => vec![e],
            MIXER_W => vec![3, 3, e, e],
            FC1_W => vec![e, h],
            FC1_B => vec![h],
            FC2_W => vec![h, d],
            FC2_B => vec![d],
            PROTOTYPES => vec![self.k, d],
            _ => unreachable!("block index {block}"),
        }
    }

    pub fn block_len(&self, block: usize) -> usize {
        self.block_shape(block).iter().product()
    }
}

/// Student or teacher parameters, including the prototype matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub dims: ModelDims,
    pub blocks: Vec<Vec<F>>,
}

impl<F: Float> Params<F> {
    pub fn zeros(dims: ModelDims) -> Self {
        Params {
            dims,
            blocks: (0..NUM_BLOCKS).map(|b| vec![F::zero(); dims.block_len(b)]).collect(),
        }
    }

    pub fn block(&self, b: usize) -> &[F] {
        &self.blocks[b]
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        Params {
            dims: self.dims,
            blocks: self
                .blocks
                .iter()
                .map(|b| b.iter().map(|v| G::from(*v).expect("float cast")).collect())
                .collect(),
        }
    }

    pub fn check_shapes(&self, dims: &ModelDims) -> Result<()> {
        if self.dims != *dims {
            return Err(Error::contract(format!(
                "parameter dims {:?} differ from {:?}",
                self.dims, dims
            )));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.len() != dims.block_len(b) {
                return Err(Error::contract(format!(
                    "block {} has {} values, expected {}",
                    BLOCK_NAMES[b],
                    block.len(),
                    dims.block_len(b)
                )));
            }
        }
        Ok(())
    }
}

impl Params<f32> {
    /// He-uniform `±sqrt(6/fan_in)` weights, zero biases, a small random
    /// mask token and isotropic unit prototypes.
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        if dims.k < 2 {
            return Err(Error::invalid(format!("need at least 2 prototypes, got {}", dims.k)));
        }
        if dims.patch_size == 0 || dims.channels == 0 || dims.d_e == 0 || dims.h_dim == 0 || dims.d == 0 {
            return Err(Error::invalid(format!("degenerate model dims {dims:?}")));
        }
        let mut p = Params::zeros(dims);
        let fan_in = [
            (PATCH_W, dims.patch_dim()),
            (MIXER_W, 9 * dims.d_e),
            (FC1_W, dims.d_e),
            (FC2_W, dims.h_dim),
        ];
        for (b, fan) in fan_in {
            let bound = (6.0 / fan as f32).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            p.blocks[b].iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        let small = Uniform::new_inclusive(-0.02f32, 0.02);
        p.blocks[MASK_TOKEN].iter_mut().for_each(|v| *v = small.sample(rng));
        for row in p.blocks[PROTOTYPES].chunks_exact_mut(dims.d) {
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
            crate::grid::normalize_in_place(row, 1e-12);
        }
        Ok(p)
    }
}

#[inline]
fn f64_of<F: Float>(v: F) -> f64 {
    v.to_f64().expect("float to f64")
}

#[inline]
fn of_f64<F: Float>(v: f64) -> F {
    F::from(v).expect("f64 to float")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn widen<F: Float>(v: &[F]) -> Vec<f64> {
    v.iter().map(|x| f64_of(*x)).collect()
}

/// `out[r] = bias + x[r] W` for `rows` input rows of width `n_in`.
fn linear<F: Float>(x: &[F], w: &[F], bias: &[F], n_in: usize, n_out: usize) -> Vec<F> {
    let rows = x.len() / n_in;
    let (w, bias) = (widen(w), widen(bias));
    let mut out = Vec::with_capacity(rows * n_out);
    let mut acc = vec![0.0f64; n_out];
    for xr in x.chunks_exact(n_in) {
        acc.copy_from_slice(&bias);
        for (xi, wr) in xr.iter().zip(w.chunks_exact(n_out)) {
            let xi = f64_of(*xi);
            if xi == 0.0 {
                continue;
            }
            acc.iter_mut().zip(wr).for_each(|(a, w)| *a += xi * w);
        }
        out.extend(acc.iter().map(|a| of_f64::<F>(*a)));
    }
    out
}

/// Neighbour offsets of the 3x3 kernel, in kernel storage order.
fn taps() -> impl Iterator<Item = (usize, isize, isize)> {
    (0..9).map(|k| (k, k as isize / 3 - 1, k as isize % 3 - 1))
}

fn neighbour(r: usize, c: usize, dr: isize, dc: isize, rows: usize, cols: usize) -> Option<usize> {
    let (rr, cc) = (r as isize + dr, c as isize + dc);
    (rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols).then(|| rr as usize * cols + cc as usize)
}

/// Activations of one frame, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FrameCache<F> {
    /// Embeddings after mask-token substitution, `[n, d_e]`.
    pub embed: Vec<F>,
    /// Mixer pre-activation, `[n, d_e]`.
    pub mixed: Vec<F>,
    /// Backbone features `gelu(mixed)`, `[n, d_e]`.
    pub backbone: Vec<F>,
    /// Head hidden pre-activation, `[n, h_dim]`.
    pub hidden: Vec<F>,
    /// Head output, `[n, d]`.
    pub out: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct Encoded<F> {
    pub frames: Vec<FrameCache<F>>,
    /// Source frame index of each cached frame.
    pub frame_ids: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub mask: Option<Vec<bool>>,
}

impl<F: Float> Encoded<F> {
    pub fn out_grid(&self, i: usize, dims: &ModelDims) -> FeatureGrid {
        let data = self.frames[i].out.iter().map(|v| f64_of(*v) as f32).collect();
        FeatureGrid::new(data, self.rows, self.cols, dims.d, dims.patch_size).expect("consistent grid")
    }

    pub fn backbone_grid(&self, i: usize, dims: &ModelDims) -> FeatureGrid {
        let data = self.frames[i].backbone.iter().map(|v| f64_of(*v) as f32).collect();
        FeatureGrid::new(data, self.rows, self.cols, dims.d_e, dims.patch_size).expect("consistent grid")
    }
}

fn check_patches(dims: &ModelDims, patches: &Patches) -> Result<()> {
    if patches.dim != dims.patch_dim() || patches.patch_size != dims.patch_size {
        return Err(Error::contract(format!(
            "patches of size {} / dim {} do not fit model patch size {} / dim {}",
            patches.patch_size,
            patches.dim,
            dims.patch_size,
            dims.patch_dim()
        )));
    }
    Ok(())
}

fn backbone_frame<F: Float>(
    params: &Params<F>,
    patches: &Patches,
    t: usize,
    mask: Option<&[bool]>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let dims = &params.dims;
    let (e, n) = (dims.d_e, patches.cells());
    let x: Vec<F> = patches.frame(t).iter().map(|v| of_f64::<F>(*v as f64)).collect();
    let mut embed = linear(
        &x,
        &params.blocks[PATCH_W],
        &params.blocks[PATCH_B],
        dims.patch_dim(),
        e,
    );
    if let Some(m) = mask {
        for (i, _) in m.iter().enumerate().filter(|(_, m)| **m) {
            embed[i * e..(i + 1) * e].copy_from_slice(&params.blocks[MASK_TOKEN]);
        }
    }
    let (rows, cols) = (patches.rows, patches.cols);
    let wm = widen(&params.blocks[MIXER_W]);
    let bm = widen(&params.blocks[MIXER_B]);
    let x = widen(&embed);
    let mut mixed = Vec::with_capacity(n * e);
    let mut acc = vec![0.0f64; e];
    for r in 0..rows {
        for c in 0..cols {
            acc.copy_from_slice(&bm);
            for (k, dr, dc) in taps() {
                let Some(j) = neighbour(r, c, dr, dc, rows, cols) else {
                    continue;
                };
                let kernel = &wm[k * e * e..(k + 1) * e * e];
                for (&xi, wr) in x[j * e..(j + 1) * e].iter().zip(kernel.chunks_exact(e)) {
                    if xi == 0.0 {
                        continue;
                    }
                    acc.iter_mut().zip(wr).for_each(|(a, w)| *a += xi * w);
                }
            }
            mixed.extend(acc.iter().map(|a| of_f64::<F>(*a)));
        }
    }
    let backbone = mixed.iter().map(|v| of_f64::<F>(gelu(f64_of(*v)))).collect();
    (embed, mixed, backbone)
}

/// Run the encoder on the listed frames. `mask` (length `rows*cols`, shared
/// by all frames) swaps masked embeddings for the mask token.
pub fn encode<F: Float>(
    params: &Params<F>,
    patches: &Patches,
    mask: Option<&[bool]>,
    frames: &[usize],
) -> Result<Encoded<F>> {
    let dims = &params.dims;
    check_patches(dims, patches)?;
    if let Some(m) = mask {
        if m.len() != patches.cells() {
            return Err(Error::contract(format!(
                "mask has {} entries for {} cells",
                m.len(),
                patches.cells()
            )));
        }
    }
    if let Some(&f) = frames.iter().find(|&&f| f >= patches.t) {
        return Err(Error::contract(format!(
            "frame {f} beyond {} encoded frames",
            patches.t
        )));
    }
    let out = frames
        .iter()
        .map(|&t| {
            let (embed, mixed, backbone) = backbone_frame(params, patches, t, mask);
            let hidden = linear(
                &backbone,
                &params.blocks[FC1_W],
                &params.blocks[FC1_B],
                dims.d_e,
                dims.h_dim,
            );
            let act: Vec<F> = hidden.iter().map(|v| of_f64::<F>(gelu(f64_of(*v)))).collect();
            let out = linear(&act, &params.blocks[FC2_W], &params.blocks[FC2_B], dims.h_dim, dims.d);
            FrameCache {
                embed,
                mixed,
                backbone,
                hidden,
                out,
            }
        })
        .collect();
    Ok(Encoded {
        frames: out,
        frame_ids: frames.to_vec(),
        rows: patches.rows,
        cols: patches.cols,
        mask: mask.map(|m| m.to_vec()),
    })
}

/// Pre-head backbone features of every frame, as used for evaluation.
pub fn backbone_features(params: &Params<f32>, patches: &Patches) -> Result<Vec<FeatureGrid>> {
    check_patches(&params.dims, patches)?;
    (0..patches.t)
        .map(|t| {
            let (_, _, backbone) = backbone_frame(params, patches, t, None);
            FeatureGrid::new(
                backbone,
                patches.rows,
                patches.cols,
                params.dims.d_e,
                params.dims.patch_size,
            )
        })
        .collect()
}

/// Accumulate parameter gradients into `grads` given `d_out[i]`, the loss
/// gradient w.r.t. the head output of cached frame `i` (`[n, d]`).
pub fn backward<F: Float>(
    params: &Params<F>,
    patches: &Patches,
    enc: &Encoded<F>,
    d_out: &[Vec<f64>],
    grads: &mut Params<f64>,
) -> Result<()> {
    let dims = params.dims;
    if d_out.len() != enc.frames.len() {
        return Err(Error::contract(format!(
            "{} output gradients for {} cached frames",
            d_out.len(),
            enc.frames.len()
        )));
    }
    grads.check_shapes(&dims)?;
    let (e, h, d, pd) = (dims.d_e, dims.h_dim, dims.d, dims.patch_dim());
    let (rows, cols) = (enc.rows, enc.cols);
    let n = rows * cols;
    let (w_fc2, w_fc1, w_mix) = (
        widen(&params.blocks[FC2_W]),
        widen(&params.blocks[FC1_W]),
        widen(&params.blocks[MIXER_W]),
    );
    let [g_pw, g_pb, g_mw, g_mb, g_f1w, g_f1b, g_f2w, g_f2b, g_mask, _] = &mut grads.blocks[..] else {
        unreachable!("checked shapes")
    };
    let mut d_backbone = vec![0.0f64; n * e];
    let mut d_embed = vec![0.0f64; n * e];
    let mut dh = vec![0.0f64; h];
    for ((cache, &t), dz) in enc.frames.iter().zip(&enc.frame_ids).zip(d_out) {
        if dz.len() != n * d {
            return Err(Error::contract("output gradient has the wrong shape"));
        }
        d_backbone.fill(0.0);
        for cell in 0..n {
            let dzc = &dz[cell * d..(cell + 1) * d];
            if dzc.iter().all(|v| *v == 0.0) {
                continue;
            }
            g_f2b.iter_mut().zip(dzc).for_each(|(a, g)| *a += g);
            let hid = &cache.hidden[cell * h..(cell + 1) * h];
            for (i, ((hv, gw), ww)) in hid
                .iter()
                .zip(g_f2w.chunks_exact_mut(d))
                .zip(w_fc2.chunks_exact(d))
                .enumerate()
            {
                let hv = f64_of(*hv);
                let act = gelu(hv);
                let mut back = 0.0;
                for ((gw, ww), g) in gw.iter_mut().zip(ww).zip(dzc) {
                    *gw += act * g;
                    back += g * ww;
                }
                dh[i] = back * gelu_grad(hv);
            }
            g_f1b.iter_mut().zip(&dh).for_each(|(a, g)| *a += g);
            let bb = &cache.backbone[cell * e..(cell + 1) * e];
            let db = &mut d_backbone[cell * e..(cell + 1) * e];
            for ((a, dbi), (gw, ww)) in bb
                .iter()
                .zip(db)
                .zip(g_f1w.chunks_exact_mut(h).zip(w_fc1.chunks_exact(h)))
            {
                let a = f64_of(*a);
                let mut back = 0.0;
                for ((gw, ww), g) in gw.iter_mut().zip(ww).zip(&dh) {
                    *gw += a * g;
                    back += g * ww;
                }
                *dbi = back;
            }
        }
        let d_mixed: Vec<f64> = d_backbone
            .iter()
            .zip(&cache.mixed)
            .map(|(g, m)| g * gelu_grad(f64_of(*m)))
            .collect();
        let x = widen(&cache.embed);
        d_embed.fill(0.0);
        for r in 0..rows {
            for c in 0..cols {
                let cell = r * cols + c;
                let du = &d_mixed[cell * e..(cell + 1) * e];
                if du.iter().all(|v| *v == 0.0) {
                    continue;
                }
                g_mb.iter_mut().zip(du).for_each(|(a, g)| *a += g);
                for (k, dr, dc) in taps() {
                    let Some(src) = neighbour(r, c, dr, dc, rows, cols) else {
                        continue;
                    };
                    let base = k * e * e;
                    let gk = g_mw[base..base + e * e].chunks_exact_mut(e);
                    let wk = w_mix[base..base + e * e].chunks_exact(e);
                    let xs = &x[src * e..(src + 1) * e];
                    let ds = &mut d_embed[src * e..(src + 1) * e];
                    for (((gw, ww), &xi), dsi) in gk.zip(wk).zip(xs).zip(ds) {
                        let mut back = 0.0;
                        for ((gw, ww), g) in gw.iter_mut().zip(ww).zip(du) {
                            *gw += xi * g;
                            back += g * ww;
                        }
                        *dsi += back;
                    }
                }
            }
        }
        let frame = patches.frame(t);
        for cell in 0..n {
            let de = &d_embed[cell * e..(cell + 1) * e];
            if de.iter().all(|v| *v == 0.0) {
                continue;
            }
            if enc.mask.as_ref().is_some_and(|m| m[cell]) {
                g_mask.iter_mut().zip(de).for_each(|(a, g)| *a += g);
                continue;
            }
            g_pb.iter_mut().zip(de).for_each(|(a, g)| *a += g);
            for (x, gw) in frame[cell * pd..(cell + 1) * pd].iter().zip(g_pw.chunks_exact_mut(e)) {
                let x = *x as f64;
                if x == 0.0 {
                    continue;
                }
                gw.iter_mut().zip(de).for_each(|(a, g)| *a += x * g);
            }
        }
    }
    Ok(())
}
