//! Trajectory-propagated teacher targets, student cluster scores and the
//! visibility-masked cross-entropy with its analytic gradient.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::grid::{nearest_cell, pixel_to_grid, FeatureGrid};
use crate::ot::{compute_cost, hard_assign, sinkhorn, Prototypes};
use crate::scene::TrajectorySet;

/// Norm floor used when normalizing sampled features.
pub const NORM_EPS: f64 = 1e-12;

/// Teacher labels of the seed points, carried along every track.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedTargets {
    pub t: usize,
    pub n: usize,
    /// `[T, N]` cluster ids.
    pub labels: Vec<u32>,
    /// `[T, N]` visibility copied from the tracks.
    pub visible: Vec<bool>,
}

impl PropagatedTargets {
    pub fn label(&self, t: usize, i: usize) -> u32 {
        self.labels[t * self.n + i]
    }

    pub fn is_visible(&self, t: usize, i: usize) -> bool {
        self.visible[t * self.n + i]
    }

    /// Broadcast one label per track to all `t` frames.
    pub fn propagate(seed_labels: &[u32], tracks: &TrajectorySet) -> Result<Self> {
        if seed_labels.len() != tracks.n {
            return Err(Error::contract(format!(
                "{} seed labels for {} tracks",
                seed_labels.len(),
                tracks.n
            )));
        }
        Ok(PropagatedTargets {
            t: tracks.t,
            n: tracks.n,
            labels: (0..tracks.t).flat_map(|_| seed_labels.iter().copied()).collect(),
            visible: tracks.visible.clone(),
        })
    }
}

/// `[T, N, K]` student cluster probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub t: usize,
    pub n: usize,
    pub k: usize,
    pub values: Vec<f32>,
    pub temperature: f32,
}

impl ScoreTensor {
    pub fn row(&self, t: usize, i: usize) -> &[f32] {
        let at = (t * self.n + i) * self.k;
        &self.values[at..at + self.k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f32,
    /// Visible points among the frames that enter the loss.
    pub visible_count: u32,
    pub per_frame_loss: Vec<f32>,
}

impl LossReport {
    pub fn zero(t: usize) -> Self {
        LossReport {
            loss: 0.0,
            visible_count: 0,
            per_frame_loss: vec![0.0; t],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossDirection {
    /// Student scores at the track position in every frame.
    StudentAllFrames,
    /// Student scores in the first frame only.
    StudentT0Only,
}

impl LossDirection {
    pub fn name(self) -> &'static str {
        match self {
            LossDirection::StudentAllFrames => "student_all_frames",
            LossDirection::StudentT0Only => "student_t0_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "student_all_frames" => Some(LossDirection::StudentAllFrames),
            "student_t0_only" => Some(LossDirection::StudentT0Only),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub tau: f32,
    pub visible_only: bool,
    pub direction: LossDirection,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            tau: 0.1,
            visible_only: true,
            direction: LossDirection::StudentAllFrames,
        }
    }
}

impl LossOptions {
    fn counts(&self, t: usize, visible: bool) -> bool {
        (t == 0 || self.direction == LossDirection::StudentAllFrames) && (visible || !self.visible_only)
    }

    fn frame_used(&self, t: usize) -> bool {
        t == 0 || self.direction == LossDirection::StudentAllFrames
    }
}

fn normalize_f64(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = n.max(NORM_EPS);
    v.iter_mut().for_each(|x| *x /= s);
    n
}

/// Bilinear teacher features at the frame-0 track positions, normalized.
pub fn seed_features(grid_t0: &FeatureGrid, tracks: &TrajectorySet) -> Vec<f32> {
    let mut out = Vec::with_capacity(tracks.n * grid_t0.dim);
    for i in 0..tracks.n {
        let mut v: Vec<f64> = grid_t0
            .sample_bilinear(tracks.coord(0, i))
            .iter()
            .map(|x| *x as f64)
            .collect();
        normalize_f64(&mut v);
        out.extend(v.iter().map(|x| *x as f32));
    }
    out
}

/// Cluster the teacher's seed features with Sinkhorn and propagate the hard
/// labels along the tracks. Targets are constants for the backward pass.
pub fn teacher_targets(
    grid_t0: &FeatureGrid,
    protos: &Prototypes,
    tracks: &TrajectorySet,
    eps: f32,
    tol: f32,
    iters: u32,
) -> Result<PropagatedTargets> {
    if tracks.n == 0 || tracks.t == 0 {
        return PropagatedTargets::propagate(&[], &TrajectorySet::new(tracks.t, 0, vec![], vec![])?);
    }
    let feats = seed_features(grid_t0, tracks);
    let cost = compute_cost(&feats, grid_t0.dim, protos)?;
    let plan = sinkhorn(&cost, eps, iters, tol)?;
    let labels: Vec<u32> = hard_assign(&plan).into_iter().map(|k| k as u32).collect();
    PropagatedTargets::propagate(&labels, tracks)
}

/// Forward state of the student scores, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StudentCache {
    pub t: usize,
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub tau: f64,
    /// Flat grid cell sampled for each `(t, i)`.
    pub cells: Vec<usize>,
    /// Pre-normalization norm of each sampled feature.
    pub norms: Vec<f64>,
    /// `[T, N, d]` normalized features.
    pub zhat: Vec<f64>,
    /// `[T, N, K]` softmax probabilities.
    pub probs: Vec<f64>,
    /// `[T, N, K]` logits.
    pub logits: Vec<f64>,
}

impl StudentCache {
    pub fn scores(&self) -> ScoreTensor {
        ScoreTensor {
            t: self.t,
            n: self.n,
            k: self.k,
            values: self.probs.iter().map(|v| *v as f32).collect(),
            temperature: self.tau as f32,
        }
    }
}

/// Nearest-cell student features at every track position, normalized and
/// scored against the prototypes. `frames[t]` is frame `t`'s `[cells, d]`
/// head output.
pub fn student_forward<F: Float>(
    frames: &[&[F]],
    (rows, cols, patch_size): (usize, usize, usize),
    protos: &[F],
    d: usize,
    tracks: &TrajectorySet,
    tau: f32,
) -> Result<StudentCache> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if frames.len() != tracks.t {
        return Err(Error::contract(format!(
            "{} student frames for {} track frames",
            frames.len(),
            tracks.t
        )));
    }
    if d == 0 || !protos.len().is_multiple_of(d) || frames.iter().any(|f| f.len() != rows * cols * d) {
        return Err(Error::contract("student feature or prototype shapes disagree"));
    }
    let k = protos.len() / d;
    let p: Vec<f64> = protos.iter().map(|v| v.to_f64().unwrap()).collect();
    let tau = tau as f64;
    let total = tracks.t * tracks.n;
    let mut cache = StudentCache {
        t: tracks.t,
        n: tracks.n,
        k,
        d,
        tau,
        cells: Vec::with_capacity(total),
        norms: Vec::with_capacity(total),
        zhat: Vec::with_capacity(total * d),
        probs: Vec::with_capacity(total * k),
        logits: Vec::with_capacity(total * k),
    };
    for (t, frame) in frames.iter().enumerate() {
        for i in 0..tracks.n {
            let (gr, gc) = pixel_to_grid(tracks.coord(t, i), patch_size);
            let (r, c) = nearest_cell(gr, gc, rows, cols);
            let cell = r * cols + c;
            let mut z: Vec<f64> = frame[cell * d..(cell + 1) * d]
                .iter()
                .map(|v| v.to_f64().unwrap())
                .collect();
            let norm = normalize_f64(&mut z);
            let logits: Vec<f64> = p.chunks_exact(d).map(|pk| dot(&z, pk) / tau).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            cache.cells.push(cell);
            cache.norms.push(norm);
            cache.zhat.extend_from_slice(&z);
            cache.probs.extend(e.iter().map(|v| v / s));
            cache.logits.extend_from_slice(&logits);
        }
    }
    Ok(cache)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Student scores for already-computed feature grids.
pub fn student_scores(
    grids: &[FeatureGrid],
    protos: &Prototypes,
    tracks: &TrajectorySet,
    tau: f32,
) -> Result<ScoreTensor> {
    let first = grids.first().ok_or_else(|| Error::contract("no student grids"))?;
    if grids
        .iter()
        .any(|g| g.rows != first.rows || g.cols != first.cols || g.dim != protos.d)
    {
        return Err(Error::contract("student grids disagree in shape"));
    }
    let frames: Vec<&[f32]> = grids.iter().map(|g| g.data.as_slice()).collect();
    let cache = student_forward(
        &frames,
        (first.rows, first.cols, first.patch_size),
        &protos.data,
        protos.d,
        tracks,
        tau,
    )?;
    Ok(cache.scores())
}

fn check_targets(t: usize, n: usize, targets: &PropagatedTargets, k: usize) -> Result<()> {
    if targets.t != t || targets.n != n {
        return Err(Error::contract(format!(
            "targets are {}x{}, scores are {t}x{n}",
            targets.t, targets.n
        )));
    }
    if let Some(l) = targets.labels.iter().find(|l| **l as usize >= k) {
        return Err(Error::contract(format!("target label {l} outside [0, {k})")));
    }
    Ok(())
}

/// Mean cross-entropy over the counted `(t, i)` terms.
pub fn clustering_loss(scores: &ScoreTensor, targets: &PropagatedTargets, opts: &LossOptions) -> Result<LossReport> {
    check_targets(scores.t, scores.n, targets, scores.k)?;
    let terms = |t: usize, i: usize| -> Option<f64> {
        opts.counts(t, targets.is_visible(t, i)).then(|| {
            let s = scores.row(t, i)[targets.label(t, i) as usize] as f64;
            -s.max(f64::MIN_POSITIVE).ln()
        })
    };
    Ok(reduce(scores.t, scores.n, targets, opts, terms))
}

fn reduce(
    t_len: usize,
    n: usize,
    targets: &PropagatedTargets,
    opts: &LossOptions,
    term: impl Fn(usize, usize) -> Option<f64>,
) -> LossReport {
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut visible = 0u32;
    let mut per_frame = vec![0.0f32; t_len];
    for (t, pf) in per_frame.iter_mut().enumerate() {
        if !opts.frame_used(t) {
            continue;
        }
        let (mut ft, mut fc) = (0.0f64, 0usize);
        for i in 0..n {
            visible += targets.is_visible(t, i) as u32;
            if let Some(v) = term(t, i) {
                ft += v;
                fc += 1;
            }
        }
        total += ft;
        count += fc;
        *pf = if fc > 0 { (ft / fc as f64) as f32 } else { 0.0 };
    }
    LossReport {
        loss: (total / count.max(1) as f64) as f32,
        visible_count: visible,
        per_frame_loss: per_frame,
    }
}

/// Loss gradients: w.r.t. each frame's `[cells, d]` head output and the
/// `[K, d]` prototypes. Terms that do not count contribute exactly zero.
pub struct LossGrads {
    /// The loss in full `f64` precision.
    pub value: f64,
    pub d_frames: Vec<Vec<f64>>,
    pub d_protos: Vec<f64>,
}

fn term_loss(cache: &StudentCache, t: usize, i: usize, targets: &PropagatedTargets) -> f64 {
    let at = (t * cache.n + i) * cache.k;
    let l = &cache.logits[at..at + cache.k];
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - l[targets.label(t, i) as usize]
}

pub fn loss_backward<F: Float>(
    cache: &StudentCache,
    cells_per_frame: usize,
    protos: &[F],
    targets: &PropagatedTargets,
    opts: &LossOptions,
) -> Result<(LossReport, LossGrads)> {
    let (t_len, n, k, d) = (cache.t, cache.n, cache.k, cache.d);
    check_targets(t_len, n, targets, k)?;
    if protos.len() != k * d {
        return Err(Error::contract("prototype shape differs from the forward pass"));
    }
    let p: Vec<f64> = protos.iter().map(|v| v.to_f64().unwrap()).collect();
    let count = (0..t_len)
        .flat_map(|t| (0..n).map(move |i| (t, i)))
        .filter(|&(t, i)| opts.counts(t, targets.is_visible(t, i)))
        .count();
    let report = reduce(t_len, n, targets, opts, |t, i| {
        opts.counts(t, targets.is_visible(t, i))
            .then(|| term_loss(cache, t, i, targets))
    });
    let value = (0..t_len)
        .flat_map(|t| (0..n).map(move |i| (t, i)))
        .filter(|&(t, i)| opts.counts(t, targets.is_visible(t, i)))
        .map(|(t, i)| term_loss(cache, t, i, targets))
        .sum::<f64>()
        / count.max(1) as f64;
    let mut grads = LossGrads {
        value,
        d_frames: vec![vec![0.0; cells_per_frame * d]; t_len],
        d_protos: vec![0.0; k * d],
    };
    if count == 0 {
        return Ok((report, grads));
    }
    let w = 1.0 / count as f64;
    let mut dzhat = vec![0.0f64; d];
    for t in 0..t_len {
        for i in 0..n {
            if !opts.counts(t, targets.is_visible(t, i)) {
                continue;
            }
            let idx = t * n + i;
            let probs = &cache.probs[idx * k..(idx + 1) * k];
            let z = &cache.zhat[idx * d..(idx + 1) * d];
            let y = targets.label(t, i) as usize;
            dzhat.iter_mut().for_each(|v| *v = 0.0);
            for (kk, pk) in p.chunks_exact(d).enumerate() {
                let dl = w * (probs[kk] - (kk == y) as u8 as f64) / cache.tau;
                if dl == 0.0 {
                    continue;
                }
                for j in 0..d {
                    grads.d_protos[kk * d + j] += dl * z[j];
                    dzhat[j] += dl * pk[j];
                }
            }
            let norm = cache.norms[idx];
            let cell = cache.cells[idx];
            let out = &mut grads.d_frames[t][cell * d..(cell + 1) * d];
            if norm > NORM_EPS {
                let proj = dot(z, &dzhat);
                for j in 0..d {
                    out[j] += (dzhat[j] - z[j] * proj) / norm;
                }
            } else {
                for j in 0..d {
                    out[j] += dzhat[j] / NORM_EPS;
                }
            }
        }
    }
    Ok((report, grads))
}
