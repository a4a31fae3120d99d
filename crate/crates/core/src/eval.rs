//! Dense evaluation protocols: clustering with Hungarian matching at frame,
//! clip or dataset scope, nearest-neighbour label retrieval, and a linear
//! probe. All of them are deterministic for a fixed seed.
//!
//! Labels are `u32` class ids at feature-cell resolution; background (id 0)
//! is an ordinary class.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y) * (x as f64 - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<u32>,
    /// `[k, d]` row-major.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

fn nearest(x: &[f32], centroids: &[f64], d: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (c, mu) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(x, mu);
        if dist < best.1 {
            best = (c as u32, dist);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached. A cluster that empties is re-seeded at
/// the point farthest from its current centroid.
pub fn kmeans(features: &[f32], d: usize, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    if d == 0 || !features.len().is_multiple_of(d) {
        return Err(Error::contract(format!(
            "feature buffer of {} not divisible by d={d}",
            features.len()
        )));
    }
    let n = features.len() / d;
    if k == 0 || n < k {
        return Err(Error::invalid(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let row = |i: usize| &features[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids: Vec<f64> = Vec::with_capacity(k * d);
    centroids.extend(row(rng.gen_range(0..n)).iter().map(|&v| v as f64));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..d])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            // never land on a zero-weight (already chosen) point
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).expect("positive total");
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend(row(pick).iter().map(|&v| v as f64));
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(sq_dist(row(i), &centroids[start..]));
        }
    }

    let mut assign = vec![u32::MAX; n];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let mut changed = false;
        for i in 0..n {
            let (c, _) = nearest(row(i), &centroids, d);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0f64; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i] as usize;
            counts[c] += 1;
            sums[c * d..(c + 1) * d]
                .iter_mut()
                .zip(row(i))
                .for_each(|(s, &v)| *s += v as f64);
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, sq_dist(row(i), &centroids[assign[i] as usize * d..][..d])))
                    .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best })
                    .0;
                counts[assign[far] as usize] -= 1;
                assign[far] = c as u32;
                counts[c] = 1;
                for j in 0..d {
                    centroids[c * d + j] = features[far * d + j] as f64;
                }
            }
        }
    }
    if iterations == 0 {
        for i in 0..n {
            assign[i] = nearest(row(i), &centroids, d).0;
        }
    }
    let inertia = (0..n)
        .map(|i| sq_dist(row(i), &centroids[assign[i] as usize * d..][..d]))
        .sum();
    Ok(KMeans {
        assignments: assign,
        centroids,
        inertia,
        iterations,
    })
}

/// Optimal one-to-one matching between the `a` rows and `b` columns of a
/// row-major score matrix. The matrix is zero-padded to square and solved
/// with the O(n^3) potential-based Kuhn-Munkres method. Returns
/// `min(a, b)` `(row, col)` pairs sorted by row.
pub fn hungarian(score: &[f64], a: usize, b: usize, maximize: bool) -> Vec<(usize, usize)> {
    assert_eq!(score.len(), a * b, "score matrix must be a x b");
    let n = a.max(b);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < a && j < b {
            if maximize {
                -score[i * b + j]
            } else {
                score[i * b + j]
            }
        } else {
            0.0
        }
    };
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| p[j] >= 1 && p[j] - 1 < a && j - 1 < b)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub miou: f32,
    /// `(class, iou)` for every class present in the ground truth.
    pub per_class: Vec<(u32, f32)>,
}

/// IoU per ground-truth class after mapping predicted ids through `mapping`
/// (unmapped ids predict no class). Pixels whose ground truth equals
/// `ignore` are dropped. The mean runs over classes present in `gt`.
pub fn miou(pred: &[u32], gt: &[u32], mapping: impl Fn(u32) -> Option<u32>, ignore: Option<u32>) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "pred has {} labels, gt has {}",
            pred.len(),
            gt.len()
        )));
    }
    // class -> (intersection, gt count, pred count)
    let mut stats: BTreeMap<u32, (u64, u64, u64)> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore {
            continue;
        }
        let e = stats.entry(g).or_default();
        e.1 += 1;
        let m = mapping(p);
        if m == Some(g) {
            e.0 += 1;
        }
        if let Some(m) = m {
            stats.entry(m).or_default().2 += 1;
        }
    }
    let per_class: Vec<(u32, f32)> = stats
        .iter()
        .filter(|(_, s)| s.1 > 0)
        .map(|(&c, &(i, g, p))| (c, (i as f64 / (g + p - i) as f64) as f32))
        .collect();
    let miou = if per_class.is_empty() {
        0.0
    } else {
        (per_class.iter().map(|x| x.1 as f64).sum::<f64>() / per_class.len() as f64) as f32
    };
    Ok(MiouReport { miou, per_class })
}

/// Downsample an `h x w` id mask to `rows x cols` cells of `patch x patch`
/// pixels by majority vote; ties go to the smaller id.
pub fn majority_downsample(mask: &[u16], h: usize, w: usize, patch: usize) -> Result<Vec<u32>> {
    if mask.len() != h * w || patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::contract(format!(
            "mask of {} for {h}x{w} does not tile into {patch}px cells",
            mask.len()
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(rows * cols);
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for r in 0..rows {
        for c in 0..cols {
            counts.clear();
            for y in r * patch..(r + 1) * patch {
                for x in c * patch..(c + 1) * patch {
                    *counts.entry(mask[y * w + x]).or_default() += 1;
                }
            }
            // BTreeMap iterates ascending, strict > keeps the smaller id on ties
            let mut best = (0u16, 0usize);
            for (&id, &n) in &counts {
                if n > best.1 {
                    best = (id, n);
                }
            }
            out.push(best.0 as u32);
        }
    }
    Ok(out)
}

/// Features and cell labels of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFrame {
    /// `[cells, dim]` row-major.
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalClip {
    pub id: String,
    pub dim: usize,
    pub rows: usize,
    pub cols: usize,
    pub frames: Vec<EvalFrame>,
}

impl EvalClip {
    /// Pair per-frame feature grids with majority-vote downsampled masks.
    pub fn from_grids(id: &str, grids: &[FeatureGrid], masks: &[&[u16]], h: usize, w: usize) -> Result<Self> {
        if grids.is_empty() || grids.len() != masks.len() {
            return Err(Error::contract(format!(
                "{} feature grids for {} masks",
                grids.len(),
                masks.len()
            )));
        }
        let g0 = &grids[0];
        let frames = grids
            .iter()
            .zip(masks)
            .map(|(g, m)| {
                if (g.rows, g.cols, g.dim) != (g0.rows, g0.cols, g0.dim) {
                    return Err(Error::contract("feature grids differ in shape within a clip"));
                }
                let labels = majority_downsample(m, h, w, h / g.rows)?;
                if labels.len() != g.rows * g.cols || w / g.cols != h / g.rows {
                    return Err(Error::contract(format!(
                        "{}x{} feature grid does not tile a {h}x{w} mask",
                        g.rows, g.cols
                    )));
                }
                Ok(EvalFrame {
                    features: g.data.clone(),
                    labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalClip {
            id: id.to_string(),
            dim: g0.dim,
            rows: g0.rows,
            cols: g0.cols,
            frames,
        })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Granularity {
    Frame,
    Clip,
    Dataset,
}

impl Granularity {
    pub fn letter(self) -> char {
        match self {
            Granularity::Frame => 'F',
            Granularity::Clip => 'C',
            Granularity::Dataset => 'D',
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F" | "f" | "frame" => Some(Granularity::Frame),
            "C" | "c" | "clip" => Some(Granularity::Clip),
            "D" | "d" | "dataset" => Some(Granularity::Dataset),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEvalConfig {
    pub granularity: Granularity,
    /// `None`: as many clusters as ground-truth classes in each scope,
    /// matched one-to-one. `Some(k)`: over-clustering with many-to-one
    /// matching.
    pub k: Option<usize>,
    pub seed: u64,
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEvalReport {
    pub granularity: Granularity,
    pub k: Option<usize>,
    /// Mean over evaluated scopes.
    pub miou: f32,
    pub scope_miou: Vec<f32>,
    /// Scopes without foreground pixels.
    pub skipped: usize,
    /// Matched class id per cell, `[clip][frame][cell]`; `u32::MAX` for
    /// unmatched clusters and skipped scopes.
    pub maps: Vec<Vec<Vec<u32>>>,
    /// Raw cluster id per cell, same layout.
    pub clusters: Vec<Vec<Vec<u32>>>,
}

struct ScopeOutcome {
    miou: Option<f32>,
    clusters: Vec<u32>,
    mapped: Vec<u32>,
}

/// Cluster one pooled scope and match clusters to classes.
fn eval_scope(
    features: &[f32],
    labels: &[u32],
    dim: usize,
    cfg: &ClusterEvalConfig,
    seed: u64,
) -> Result<ScopeOutcome> {
    let n = labels.len();
    let classes: Vec<u32> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    if labels.iter().all(|&l| l == 0) {
        return Ok(ScopeOutcome {
            miou: None,
            clusters: vec![u32::MAX; n],
            mapped: vec![u32::MAX; n],
        });
    }
    let k = cfg.k.unwrap_or(classes.len());
    if k > n {
        return Err(Error::invalid(format!(
            "k={k} exceeds the {n} cells of a {:?} scope",
            cfg.granularity
        )));
    }
    let km = kmeans(features, dim, k, seed, cfg.max_iters)?;
    let class_idx: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let nc = classes.len();
    let mut overlap = vec![0.0f64; k * nc];
    for (&a, &l) in km.assignments.iter().zip(labels) {
        overlap[a as usize * nc + class_idx[&l]] += 1.0;
    }
    let mapping: Vec<Option<u32>> = if cfg.k.is_none() {
        let mut m = vec![None; k];
        for (r, c) in hungarian(&overlap, k, nc, true) {
            m[r] = Some(classes[c]);
        }
        m
    } else {
        // greedy precision: each cluster joins the class it overlaps most
        let group: Vec<usize> = (0..k)
            .map(|r| {
                let row = &overlap[r * nc..(r + 1) * nc];
                row.iter()
                    .enumerate()
                    .fold((0, -1.0), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                    .0
            })
            .collect();
        // merged maps (one per greedy class) matched to classes
        let mut merged = vec![0.0f64; nc * nc];
        for r in 0..k {
            for j in 0..nc {
                merged[group[r] * nc + j] += overlap[r * nc + j];
            }
        }
        let mut to_class = vec![None; nc];
        for (g, c) in hungarian(&merged, nc, nc, true) {
            to_class[g] = Some(classes[c]);
        }
        (0..k).map(|r| to_class[group[r]]).collect()
    };
    let report = miou(&km.assignments, labels, |p| mapping[p as usize], None)?;
    let mapped = km
        .assignments
        .iter()
        .map(|&a| mapping[a as usize].unwrap_or(u32::MAX))
        .collect();
    Ok(ScopeOutcome {
        miou: Some(report.miou),
        clusters: km.assignments,
        mapped,
    })
}

/// Cluster features within each scope (frame, clip or dataset) and report
/// the mean of the per-scope Hungarian-matched mIoU.
pub fn cluster_eval(clips: &[EvalClip], cfg: &ClusterEvalConfig) -> Result<ClusterEvalReport> {
    if clips.is_empty() {
        return Err(Error::invalid("no clips to evaluate"));
    }
    let dim = clips[0].dim;
    if clips.iter().any(|c| c.dim != dim) {
        return Err(Error::contract("clips differ in feature dimension"));
    }
    // a scope is a list of (clip, frame) pairs
    let scopes: Vec<Vec<(usize, usize)>> = match cfg.granularity {
        Granularity::Frame => clips
            .iter()
            .enumerate()
            .flat_map(|(c, clip)| (0..clip.frames.len()).map(move |f| vec![(c, f)]))
            .collect(),
        Granularity::Clip => clips
            .iter()
            .enumerate()
            .map(|(c, clip)| (0..clip.frames.len()).map(|f| (c, f)).collect())
            .collect(),
        Granularity::Dataset => vec![clips
            .iter()
            .enumerate()
            .flat_map(|(c, clip)| (0..clip.frames.len()).map(move |f| (c, f)))
            .collect()],
    };
    let run = |(s, members): (usize, &Vec<(usize, usize)>)| -> Result<ScopeOutcome> {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for &(c, f) in members {
            feats.extend_from_slice(&clips[c].frames[f].features);
            labels.extend_from_slice(&clips[c].frames[f].labels);
        }
        eval_scope(&feats, &labels, dim, cfg, cfg.seed ^ s as u64)
    };
    #[cfg(feature = "parallel")]
    let outcomes: Vec<Result<ScopeOutcome>> = {
        use rayon::prelude::*;
        scopes.par_iter().enumerate().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Result<ScopeOutcome>> = scopes.iter().enumerate().map(run).collect();

    let mut maps: Vec<Vec<Vec<u32>>> = clips.iter().map(|c| vec![Vec::new(); c.frames.len()]).collect();
    let mut clusters = maps.clone();
    let mut scope_miou = Vec::new();
    let mut skipped = 0;
    for (members, outcome) in scopes.iter().zip(outcomes) {
        let o = outcome?;
        match o.miou {
            Some(m) => scope_miou.push(m),
            None => skipped += 1,
        }
        let mut at = 0;
        for &(c, f) in members {
            let n = clips[c].frames[f].labels.len();
            maps[c][f] = o.mapped[at..at + n].to_vec();
            clusters[c][f] = o.clusters[at..at + n].to_vec();
            at += n;
        }
    }
    let miou = if scope_miou.is_empty() {
        0.0
    } else {
        (scope_miou.iter().map(|&v| v as f64).sum::<f64>() / scope_miou.len() as f64) as f32
    };
    Ok(ClusterEvalReport {
        granularity: cfg.granularity,
        k: cfg.k,
        miou,
        scope_miou,
        skipped,
        maps,
        clusters,
    })
}

/// Unit-normalized features with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub dim: usize,
}

impl MemoryBank {
    pub fn new(mut features: Vec<f32>, labels: Vec<u32>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::contract(format!(
                "bank of {} values does not hold {} rows of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        for row in features.chunks_exact_mut(dim) {
            crate::grid::normalize_in_place(row, 1e-12);
        }
        Ok(MemoryBank { features, labels, dim })
    }

    pub fn from_clips(clips: &[EvalClip]) -> Result<Self> {
        let dim = clips.first().map_or(0, |c| c.dim);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for f in clips.iter().flat_map(|c| &c.frames) {
            feats.extend_from_slice(&f.features);
            labels.extend_from_slice(&f.labels);
        }
        MemoryBank::new(feats, labels, dim)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Exact cosine k-NN label transfer. Each query takes the label with the
/// largest sum of neighbour weights, the weights being a softmax of
/// similarity / `tau_nn` over its `k` neighbours. Ties go to the smaller
/// class id.
pub fn dense_nn_retrieval(bank: &MemoryBank, queries: &[f32], k: usize, tau_nn: f32) -> Result<Vec<u32>> {
    if bank.is_empty() {
        return Err(Error::invalid("empty memory bank"));
    }
    if k == 0 || k > bank.len() {
        return Err(Error::invalid(format!("k={k} must lie in [1, {}]", bank.len())));
    }
    if !(tau_nn > 0.0) {
        return Err(Error::invalid(format!("tau_nn={tau_nn} must be positive")));
    }
    let d = bank.dim;
    if !queries.len().is_multiple_of(d) {
        return Err(Error::contract(format!(
            "query buffer of {} not divisible by d={d}",
            queries.len()
        )));
    }
    let one = |q: &[f32]| -> u32 {
        let qn = crate::grid::l2_norm(q).max(1e-12) as f64;
        let mut sims: Vec<(f64, usize)> = bank
            .features
            .chunks_exact(d)
            .enumerate()
            .map(|(i, b)| (q.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() / qn, i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, cmp);
            sims.truncate(k);
        }
        sims.sort_unstable_by(cmp);
        let top = sims[0].0;
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for &(s, i) in &sims {
            *scores.entry(bank.labels[i]).or_default() += ((s - top) / tau_nn as f64).exp();
        }
        // normalizing the softmax does not change the argmax
        scores
            .iter()
            .fold((0u32, -1.0), |b, (&c, &v)| if v > b.1 { (c, v) } else { b })
            .0
    };
    #[cfg(feature = "parallel")]
    let out = {
        use rayon::prelude::*;
        queries.par_chunks_exact(d).map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let out = queries.chunks_exact(d).map(one).collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 20,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub miou: MiouReport,
    pub final_train_loss: f64,
}

/// Train a linear classifier on frozen cell features and report validation
/// mIoU. SGD with momentum and weight decay; the learning rate drops by 10x
/// after two thirds of the epochs.
pub fn linear_probe(train: &[EvalClip], val: &[EvalClip], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let pool = |clips: &[EvalClip]| {
        let mut f = Vec::new();
        let mut l = Vec::new();
        for fr in clips.iter().flat_map(|c| &c.frames) {
            f.extend_from_slice(&fr.features);
            l.extend_from_slice(&fr.labels);
        }
        (f, l)
    };
    let d = train
        .first()
        .ok_or_else(|| Error::invalid("empty probe training set"))?
        .dim;
    if train.iter().chain(val).any(|c| c.dim != d) {
        return Err(Error::contract("probe clips differ in feature dimension"));
    }
    let (xf, xl) = pool(train);
    let (vf, vl) = pool(val);
    let nc = xl.iter().chain(&vl).copied().max().unwrap_or(0) as usize + 1;
    let n = xl.len();
    let mut w = vec![0.0f64; nc * (d + 1)];
    let mut vel = vec![0.0f64; w.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let drop_at = (2 * cfg.epochs).div_ceil(3);
    let logits = |w: &[f64], x: &[f32], out: &mut [f64]| {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &w[c * (d + 1)..(c + 1) * (d + 1)];
            *o = row[d] + row[..d].iter().zip(x).map(|(&a, &b)| a * b as f64).sum::<f64>();
        }
    };
    let mut z = vec![0.0f64; nc];
    let mut final_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let lr = if epoch >= drop_at { cfg.lr * 0.1 } else { cfg.lr };
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut g = vec![0.0f64; w.len()];
            for &i in batch {
                let x = &xf[i * d..(i + 1) * d];
                logits(&w, x, &mut z);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let y = xl[i] as usize;
                epoch_loss += m + s.ln() - z[y];
                for c in 0..nc {
                    let p = (z[c] - m).exp() / s - if c == y { 1.0 } else { 0.0 };
                    let row = &mut g[c * (d + 1)..(c + 1) * (d + 1)];
                    row[..d].iter_mut().zip(x).for_each(|(a, &b)| *a += p * b as f64);
                    row[d] += p;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for j in 0..w.len() {
                let grad = g[j] * inv + cfg.weight_decay * w[j];
                vel[j] = cfg.momentum * vel[j] + grad;
                w[j] -= lr * vel[j];
            }
        }
        final_loss = epoch_loss / n.max(1) as f64;
    }
    let pred: Vec<u32> = vf
        .chunks_exact(d)
        .map(|x| {
            logits(&w, x, &mut z);
            z.iter()
                .enumerate()
                .fold(
                    (0u32, f64::NEG_INFINITY),
                    |b, (c, &v)| if v > b.1 { (c as u32, v) } else { b },
                )
                .0
        })
        .collect();
    Ok(ProbeReport {
        miou: miou(&pred, &vl, Some, None)?,
        final_train_loss: final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_force(score: &[f64], n: usize) -> Vec<usize> {
        fn perms(k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for j in 0..k {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    perms(k, cur, used, out);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut all = Vec::new();
        perms(n, &mut Vec::new(), &mut vec![false; n], &mut all);
        all.into_iter()
            .min_by(|a, b| {
                let ca: f64 = a.iter().enumerate().map(|(i, &j)| score[i * n + j]).sum();
                let cb: f64 = b.iter().enumerate().map(|(i, &j)| score[i * n + j]).sum();
                ca.total_cmp(&cb)
            })
            .unwrap()
    }

    proptest! {
        #[test]
        fn hungarian_matches_enumeration(n in 1usize..=6, vals in prop::collection::vec(-10.0f64..10.0, 36)) {
            let score = &vals[..n * n];
            let got: Vec<usize> = hungarian(score, n, n, false).into_iter().map(|p| p.1).collect();
            prop_assert_eq!(got, brute_force(score, n));
        }

        #[test]
        fn miou_invariant_under_relabeling(pred in prop::collection::vec(0u32..4, 40), gt in prop::collection::vec(0u32..3, 40), shift in 1u32..50) {
            let map = |p: u32| Some(p % 3);
            let a = miou(&pred, &gt, map, None).unwrap();
            let relabeled: Vec<u32> = pred.iter().map(|p| p + shift).collect();
            let b = miou(&relabeled, &gt, |p| map(p - shift), None).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn hungarian_small_cases() {
        let id = [9.0, 1.0, 1.0, 1.0, 9.0, 1.0, 1.0, 1.0, 9.0];
        assert_eq!(hungarian(&id, 3, 3, true), vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(hungarian(&[1.0, 2.0, 2.0, 1.0], 2, 2, false), vec![(0, 0), (1, 1)]);
        // rectangular: 2 rows, 3 columns
        assert_eq!(
            hungarian(&[1.0, 0.0, 5.0, 0.0, 4.0, 0.0], 2, 3, true),
            vec![(0, 2), (1, 1)]
        );
        assert_eq!(hungarian(&[1.0, 5.0, 3.0], 3, 1, true), vec![(1, 0)]);
    }

    #[test]
    fn miou_fixtures() {
        let gt = [0, 0, 1, 1];
        assert_eq!(miou(&gt, &gt, Some, None).unwrap().miou, 1.0);
        // single class, disjoint prediction
        let r = miou(
            &[0, 0, 1, 1],
            &[1, 1, 0, 0],
            |p| if p == 0 { Some(2) } else { None },
            None,
        )
        .unwrap();
        assert_eq!(r.miou, 0.0);
        // pred covers half of the gt region and an equal area outside it
        let gt = [1, 1, 1, 1, 0, 0, 0, 0];
        let pred = [1, 1, 0, 0, 1, 1, 0, 0];
        let r = miou(&pred, &gt, |p| if p == 1 { Some(1) } else { None }, None).unwrap();
        assert!((r.per_class.iter().find(|c| c.0 == 1).unwrap().1 - 1.0 / 3.0).abs() < 1e-7);
        // ignored pixels leave no trace
        let r = miou(&[1, 5, 5], &[1, 9, 9], Some, Some(9)).unwrap();
        assert_eq!(r.per_class, vec![(1, 1.0)]);
    }

    #[test]
    fn majority_ties_pick_smaller_id() {
        let mask = [3u16, 2, 7, 7, 2, 3, 7, 1];
        assert_eq!(majority_downsample(&mask, 2, 4, 2).unwrap(), vec![2, 7]);
    }

    #[test]
    fn kmeans_fixtures() {
        let pts = [0.0f32, 1.0, 2.0, 3.0];
        let km = kmeans(&pts, 1, 4, 3, 10).unwrap();
        assert_eq!(km.inertia, 0.0);
        let mut a = km.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
        assert!(kmeans(&pts, 1, 5, 0, 10).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut feats = Vec::new();
        let mut truth = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let (cx, cy) = if c == 0 { (-5.0, 0.0) } else { (5.0, 1.0) };
            feats.extend_from_slice(&[cx + rng.gen_range(-1.0f32..1.0), cy + rng.gen_range(-1.0f32..1.0)]);
            truth.push(c as u32);
        }
        // duplicate rows
        feats.extend_from_slice(&[0.3, 0.3, 0.3, 0.3]);
        let km = kmeans(&feats, 2, 2, 11, 100).unwrap();
        let flip = km.assignments[0];
        assert!(truth.iter().zip(&km.assignments).all(|(&t, &a)| (t ^ flip) == a));
        assert_eq!(km.assignments[60], km.assignments[61]);
        assert_eq!(kmeans(&feats, 2, 2, 11, 100).unwrap(), km);
    }

    fn one_hot_clip(id: &str, frames: &[Vec<u32>], nc: usize, perm: &[usize]) -> EvalClip {
        EvalClip {
            id: id.into(),
            dim: nc,
            rows: 1,
            cols: frames[0].len(),
            frames: frames
                .iter()
                .map(|l| EvalFrame {
                    features: l
                        .iter()
                        .flat_map(|&c| (0..nc).map(move |j| (perm[c as usize] == j) as u8 as f32))
                        .collect(),
                    labels: l.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn one_hot_features_score_perfectly() {
        let frames = vec![vec![0, 0, 1, 1, 2, 2], vec![0, 1, 1, 2, 2, 2]];
        let clips = vec![
            one_hot_clip("a", &frames, 3, &[0, 1, 2]),
            one_hot_clip("b", &frames, 3, &[0, 1, 2]),
        ];
        for g in [Granularity::Frame, Granularity::Clip, Granularity::Dataset] {
            let cfg = ClusterEvalConfig {
                granularity: g,
                k: None,
                seed: 1,
                max_iters: 50,
            };
            let r = cluster_eval(&clips, &cfg).unwrap();
            assert_eq!(r.miou, 1.0, "{g:?}");
            assert_eq!(r.maps[1][1], frames[1]);
        }
    }

    #[test]
    fn inconsistent_features_rank_clip_above_dataset() {
        let frames = vec![vec![0, 0, 1, 1, 2, 2, 3, 3], vec![0, 1, 1, 2, 2, 3, 3, 3]];
        let perms = [[0, 1, 2, 3], [1, 2, 3, 0], [2, 3, 0, 1], [3, 0, 1, 2]];
        let clips: Vec<EvalClip> = perms
            .iter()
            .enumerate()
            .map(|(i, p)| one_hot_clip(&i.to_string(), &frames, 4, p))
            .collect();
        let run = |g| {
            cluster_eval(
                &clips,
                &ClusterEvalConfig {
                    granularity: g,
                    k: None,
                    seed: 0,
                    max_iters: 50,
                },
            )
            .unwrap()
            .miou
        };
        let (f, c, d) = (
            run(Granularity::Frame),
            run(Granularity::Clip),
            run(Granularity::Dataset),
        );
        assert_eq!((f, c), (1.0, 1.0));
        assert!(d < c, "dataset {d} vs clip {c}");
    }

    #[test]
    fn overclustering_merges_many_to_one() {
        let frames = vec![vec![0, 0, 0, 0, 1, 1]];
        let mut clip = one_hot_clip("a", &frames, 2, &[0, 1]);
        // split class 0 into two distinct feature groups
        clip.frames[0].features[0] = 0.5;
        clip.frames[0].features[2] = 0.5;
        let r = cluster_eval(
            &[clip],
            &ClusterEvalConfig {
                granularity: Granularity::Frame,
                k: Some(3),
                seed: 2,
                max_iters: 50,
            },
        )
        .unwrap();
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn background_only_scope_is_skipped() {
        let clip = one_hot_clip("a", &[vec![0, 0, 0], vec![0, 1, 1]], 2, &[0, 1]);
        let cfg = ClusterEvalConfig {
            granularity: Granularity::Frame,
            k: None,
            seed: 0,
            max_iters: 10,
        };
        let r = cluster_eval(&[clip], &cfg).unwrap();
        assert_eq!((r.skipped, r.scope_miou.len()), (1, 1));
    }

    #[test]
    fn retrieval_fixtures() {
        let feats = vec![1.0, 0.0, 0.0, 1.0, 0.9, 0.1];
        let bank = MemoryBank::new(feats.clone(), vec![3, 5, 3], 2).unwrap();
        assert_eq!(dense_nn_retrieval(&bank, &feats, 1, 0.1).unwrap(), vec![3, 5, 3]);
        assert_eq!(dense_nn_retrieval(&bank, &[2.0, 0.0], 3, 0.1).unwrap(), vec![3]);
        assert!(dense_nn_retrieval(&bank, &[1.0, 0.0], 4, 0.1).is_err());
    }

    #[test]
    fn retrieval_weighted_vote_by_hand() {
        // 6-entry bank in the plane; query along the x axis, k = 5
        let angles: [f64; 6] = [0.1, 0.2, -0.3, 0.5, 0.55, 3.0];
        let labels = vec![0, 1, 1, 0, 0, 2];
        let feats: Vec<f32> = angles.iter().flat_map(|a| [a.cos() as f32, a.sin() as f32]).collect();
        let bank = MemoryBank::new(feats, labels.clone(), 2).unwrap();
        let tau = 0.05f64;
        // neighbours are the first five; weights exp(cos(a)/tau)
        let mut score = [0.0f64; 3];
        for i in 0..5 {
            score[labels[i] as usize] += (angles[i].cos() / tau).exp();
        }
        let want = if score[0] > score[1] { 0 } else { 1 };
        assert_eq!(
            dense_nn_retrieval(&bank, &[1.0, 0.0], 5, tau as f32).unwrap(),
            vec![want]
        );
        assert_eq!(want, 1);
    }

    #[test]
    fn probe_separable_and_shuffled() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let make = |rng: &mut ChaCha8Rng, shuffle: bool| {
            let labels: Vec<u32> = (0..64).map(|_| rng.gen_range(0..4)).collect();
            let mut feat_labels = labels.clone();
            if shuffle {
                feat_labels.shuffle(rng);
            }
            let frames = vec![EvalFrame {
                features: feat_labels
                    .iter()
                    .flat_map(|&c| (0..4).map(move |j| (c == j) as u8 as f32))
                    .collect(),
                labels,
            }];
            EvalClip {
                id: "x".into(),
                dim: 4,
                rows: 8,
                cols: 8,
                frames,
            }
        };
        let train: Vec<EvalClip> = (0..4).map(|_| make(&mut rng, false)).collect();
        let val = vec![make(&mut rng, false)];
        let r = linear_probe(&train, &val, &ProbeConfig::default()).unwrap();
        assert_eq!(r.miou.miou, 1.0);

        let train: Vec<EvalClip> = (0..4).map(|_| make(&mut rng, true)).collect();
        let val = vec![make(&mut rng, true)];
        let r = linear_probe(&train, &val, &ProbeConfig::default()).unwrap();
        assert!(r.miou.miou < 0.4, "{}", r.miou.miou);
    }
}
