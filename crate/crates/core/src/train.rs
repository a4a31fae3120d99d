//! Teacher-student training: clip preparation, masking, the per-clip
//! forward/backward pass, Adam with decoupled weight decay, cosine schedule
//! and the EMA teacher.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::EvalClip;
use crate::grid::{patchify, Patches};
use crate::loss::{loss_backward, student_forward, teacher_targets, LossOptions, LossReport, PropagatedTargets};
use crate::model::{
    backward, block_decays, block_group, encode, Group, ModelDims, Params, BLOCK_NAMES, NUM_BLOCKS, PROTOTYPES,
};
use crate::ot::{Prototypes, Role};
use crate::scene::{apply_crop, check_window, oracle_track, seed_grid, ClipSample, CropWindow, TrajectorySet};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Exactly `round(m * n)` masked positions, drawn without replacement.
pub fn draw_mask(n: usize, ratio: f32, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = (ratio as f64 * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n];
    for i in index::sample(&mut rng, n, count) {
        mask[i] = true;
    }
    Ok(mask)
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`; zero once `step >= total`.
pub fn cosine_lr(lr0: f64, step: u64, total: u64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Adam moments for every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(dims: &ModelDims) -> Self {
        let zeros = || (0..NUM_BLOCKS).map(|b| vec![0.0f32; dims.block_len(b)]).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay. `lr(block)`
/// gives the learning rate of each block; a non-finite gradient aborts the
/// step before anything is modified.
pub fn adam_step(
    params: &mut Params<f32>,
    opt: &mut AdamState,
    grads: &Params<f64>,
    lr: impl Fn(usize) -> f64,
    weight_decay: f64,
) -> Result<()> {
    for (b, g) in grads.blocks.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in {}", BLOCK_NAMES[b])));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    for b in 0..NUM_BLOCKS {
        let lr_b = lr(b);
        let decay = if block_decays(b) { weight_decay } else { 0.0 };
        let (p, m, v) = (&mut params.blocks[b], &mut opt.m[b], &mut opt.v[b]);
        for (j, g) in grads.blocks[b].iter().enumerate() {
            let mj = ADAM_BETA1 * m[j] as f64 + (1.0 - ADAM_BETA1) * g;
            let vj = ADAM_BETA2 * v[j] as f64 + (1.0 - ADAM_BETA2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS);
            let pj = p[j] as f64;
            p[j] = (pj - lr_b * update - lr_b * decay * pj) as f32;
        }
    }
    Ok(())
}

/// `teacher = m * teacher + (1 - m) * student`, then unit teacher prototypes.
pub fn ema_update(teacher: &mut Params<f32>, student: &Params<f32>, momentum: f32) -> Result<()> {
    teacher.check_shapes(&student.dims)?;
    let m = momentum as f64;
    for (tb, sb) in teacher.blocks.iter_mut().zip(&student.blocks) {
        for (t, s) in tb.iter_mut().zip(sb) {
            *t = (*t as f64 + (1.0 - m) * (*s as f64 - *t as f64)) as f32;
        }
    }
    renormalize_prototypes(teacher);
    Ok(())
}

pub fn renormalize_prototypes<F: num_traits::Float>(params: &mut Params<F>) {
    let d = params.dims.d;
    for row in params.blocks[PROTOTYPES].chunks_exact_mut(d) {
        let n = row
            .iter()
            .map(|v| v.to_f64().unwrap().powi(2))
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        // already unit at f32 precision: dividing again could move it by an ulp
        if (n - 1.0).abs() <= f32::EPSILON as f64 {
            continue;
        }
        row.iter_mut()
            .for_each(|v| *v = F::from(v.to_f64().unwrap() / n).unwrap());
    }
}

pub fn prototypes_of(params: &Params<f32>, role: Role) -> Prototypes {
    Prototypes {
        data: params.blocks[PROTOTYPES].clone(),
        k: params.dims.k,
        d: params.dims.d,
        role,
    }
}

/// Frame indices sampled at `j * clip_seconds / frames` seconds.
pub fn frame_indices(cfg: &TrainConfig, frame_rate: f32, available: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..cfg.frames_per_clip)
        .map(|j| {
            let time = j as f64 * cfg.clip_seconds as f64 / cfg.frames_per_clip as f64;
            (time * frame_rate as f64).round() as usize
        })
        .collect();
    match idx.last() {
        Some(&last) if last >= available => Err(Error::invalid(format!(
            "clip has {available} frames, {} frames over {} s at {frame_rate} fps need {}",
            cfg.frames_per_clip,
            cfg.clip_seconds,
            last + 1
        ))),
        _ => Ok(idx),
    }
}

/// Select frames and crop. With `track_after_crop`, the seed grid is laid on
/// the cropped view and tracked through the scene; otherwise the stored
/// tracks are cropped along with the frames.
pub fn prepare_clip(sample: &ClipSample, cfg: &TrainConfig, crop_seed: u64) -> Result<ClipSample> {
    let idx = frame_indices(cfg, sample.clip.frame_rate, sample.clip.t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crop_seed);
    let (w, h) = (sample.clip.w, sample.clip.h);
    let window = CropWindow::random(w, h, (cfg.crop_min, cfg.crop_max), &mut rng)?;
    check_window(&window, cfg.patch_size)?;
    let mut view = sample.select_frames(&idx)?;
    if cfg.track_after_crop {
        let seeds: Vec<_> = seed_grid(h, w, cfg.grid_size)
            .into_iter()
            .map(|p| window.map_back(p))
            .collect();
        view.tracks = oracle_track(&sample.spec, &seeds).select_frames(&idx);
    }
    Ok(apply_crop(&view, &window))
}

/// Backbone features of every frame of `sample` paired with its
/// downsampled class masks. Evaluation reads the pre-head backbone.
pub fn eval_clip(params: &Params<f32>, sample: &ClipSample) -> Result<EvalClip> {
    let patches = patchify(&sample.clip, params.dims.patch_size)?;
    let grids = crate::model::backbone_features(params, &patches)?;
    eval_clip_from_grids(sample, &grids)
}

/// Pair externally computed per-frame features with the class masks of `sample`.
pub fn eval_clip_from_grids(sample: &ClipSample, grids: &[crate::grid::FeatureGrid]) -> Result<EvalClip> {
    let masks: Vec<Vec<u16>> = (0..sample.clip.t).map(|t| sample.class_mask(t)).collect();
    let refs: Vec<&[u16]> = masks.iter().map(Vec::as_slice).collect();
    EvalClip::from_grids(&sample.clip.clip_id, grids, &refs, sample.clip.h, sample.clip.w)
}

/// A prepared clip with its mask and targets, ready for the student pass.
pub struct ClipTask {
    pub patches: Patches,
    pub tracks: TrajectorySet,
    pub mask: Vec<bool>,
    pub targets: PropagatedTargets,
}

impl ClipTask {
    /// Patchify, draw the student mask and compute teacher targets.
    pub fn build(view: &ClipSample, teacher: &Params<f32>, cfg: &TrainConfig, mask_seed: u64) -> Result<Self> {
        let patches = patchify(&view.clip, cfg.patch_size)?;
        let mask = draw_mask(patches.cells(), cfg.mask_ratio, mask_seed)?;
        let targets = if view.tracks.n == 0 {
            PropagatedTargets::propagate(&[], &view.tracks)?
        } else {
            let t_enc = encode(teacher, &patches, None, &[0])?;
            teacher_targets(
                &t_enc.out_grid(0, &teacher.dims),
                &prototypes_of(teacher, Role::Teacher),
                &view.tracks,
                cfg.eps,
                cfg.tol,
                cfg.sinkhorn_iters,
            )?
        };
        Ok(ClipTask {
            patches,
            tracks: view.tracks.clone(),
            mask,
            targets,
        })
    }

    /// Student loss and, when `with_grad`, its gradient w.r.t. every block.
    pub fn loss<F: num_traits::Float>(
        &self,
        student: &Params<F>,
        opts: &LossOptions,
        with_grad: bool,
    ) -> Result<ClipLoss> {
        let frames: Vec<usize> = (0..self.patches.t).collect();
        let enc = encode(student, &self.patches, Some(&self.mask), &frames)?;
        let outs: Vec<&[F]> = enc.frames.iter().map(|f| f.out.as_slice()).collect();
        let dims = student.dims;
        let cache = student_forward(
            &outs,
            (enc.rows, enc.cols, dims.patch_size),
            &student.blocks[PROTOTYPES],
            dims.d,
            &self.tracks,
            opts.tau,
        )?;
        let (report, lg) = loss_backward(
            &cache,
            enc.rows * enc.cols,
            &student.blocks[PROTOTYPES],
            &self.targets,
            opts,
        )?;
        let mut out = ClipLoss {
            report,
            value: lg.value,
            grads: None,
        };
        if with_grad {
            let mut grads = Params::<f64>::zeros(dims);
            backward(student, &self.patches, &enc, &lg.d_frames, &mut grads)?;
            grads.blocks[PROTOTYPES] = lg.d_protos;
            out.grads = Some(grads);
        }
        Ok(out)
    }
}

pub struct ClipLoss {
    pub report: LossReport,
    /// Full-precision loss value.
    pub value: f64,
    pub grads: Option<Params<f64>>,
}

/// Student, EMA teacher, optimizer and RNG: everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: TrainConfig,
    pub student: Params<f32>,
    pub teacher: Params<f32>,
    pub opt: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: u32,
}

/// Per-step summary handed to progress callbacks.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossReport,
    pub lr_head: f64,
    pub lr_backbone: f64,
    /// Visible share of all track points in the batch.
    pub visible_fraction: f64,
}

impl ModelState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let student = Params::init(config.dims(), &mut rng)?;
        Ok(ModelState {
            teacher: student.clone(),
            opt: AdamState::new(&student.dims),
            student,
            rng,
            epoch: 0,
            config,
        })
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.config.batch_size) as u64
    }

    /// One optimizer step over `batch`; `total_steps` sets the schedule length.
    pub fn train_step(&mut self, batch: &[&ClipSample], total_steps: u64) -> Result<StepReport> {
        let cfg = self.config.clone();
        let seeds: Vec<(u64, u64)> = batch.iter().map(|_| (self.rng.gen(), self.rng.gen())).collect();
        let opts = cfg.loss_options();
        let run = |(sample, (crop_seed, mask_seed)): (&&ClipSample, &(u64, u64))| -> Result<(LossReport, Params<f64>, usize)> {
            let go = || {
                let view = prepare_clip(sample, &cfg, *crop_seed)?;
                let task = ClipTask::build(&view, &self.teacher, &cfg, *mask_seed)?;
                let out = task.loss(&self.student, &opts, true)?;
                Ok((out.report, out.grads.expect("requested"), task.tracks.t * task.tracks.n))
            };
            go().map_err(|e: Error| e.in_clip(&sample.clip.clip_id))
        };
        #[cfg(feature = "parallel")]
        let results: Vec<_> = {
            use rayon::prelude::*;
            batch.par_iter().zip(seeds.par_iter()).map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let results: Vec<_> = batch.iter().zip(seeds.iter()).map(run).collect();

        let dims = self.student.dims;
        let mut grads = Params::<f64>::zeros(dims);
        let mut loss = 0.0f64;
        let mut visible = 0u32;
        let mut points = 0usize;
        let mut per_frame: Vec<f64> = Vec::new();
        for r in results {
            let (report, g, n_points) = r?;
            for (acc, gb) in grads.blocks.iter_mut().zip(&g.blocks) {
                acc.iter_mut().zip(gb).for_each(|(a, v)| *a += v);
            }
            loss += report.loss as f64;
            visible += report.visible_count;
            points += n_points;
            if per_frame.len() < report.per_frame_loss.len() {
                per_frame.resize(report.per_frame_loss.len(), 0.0);
            }
            per_frame
                .iter_mut()
                .zip(&report.per_frame_loss)
                .for_each(|(a, v)| *a += *v as f64);
        }
        let b = batch.len().max(1) as f64;
        grads.blocks.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v /= b));
        let step = self.opt.step;
        let lr_head = cosine_lr(cfg.lr_head as f64, step, total_steps);
        let lr_backbone = cosine_lr(cfg.lr_backbone as f64, step, total_steps);
        let lr = |blk: usize| match block_group(blk) {
            Group::Head => lr_head,
            Group::Backbone => lr_backbone,
        };
        adam_step(&mut self.student, &mut self.opt, &grads, lr, cfg.weight_decay as f64)?;
        renormalize_prototypes(&mut self.student);
        ema_update(&mut self.teacher, &self.student, cfg.ema_momentum)?;
        Ok(StepReport {
            step,
            loss: LossReport {
                loss: (loss / b) as f32,
                visible_count: visible,
                per_frame_loss: per_frame.iter().map(|v| (v / b) as f32).collect(),
            },
            lr_head,
            lr_backbone,
            visible_fraction: if points == 0 {
                0.0
            } else {
                visible as f64 / points as f64
            },
        })
    }

    /// One pass over `dataset` in a freshly shuffled order.
    pub fn train_epoch(
        &mut self,
        dataset: &[ClipSample],
        total_steps: u64,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<()> {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&ClipSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let report = self.train_step(&batch, total_steps)?;
            on_step(&report);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Train until `config.epochs` epochs are done.
    pub fn train(&mut self, dataset: &[ClipSample], mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        let total = self.steps_per_epoch(dataset.len()) * self.config.epochs as u64;
        while self.epoch < self.config.epochs {
            self.train_epoch(dataset, total, &mut on_step)?;
        }
        Ok(())
    }
}
