//! Central finite differences against the analytic backward pass.
//!
//! The stencil is the fourth-order five-point one,
//! `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`: at `h = 1e-3` the
//! three-point stencil's `O(h^2)` error alone exceeds `1e-4` relative once
//! the softmax temperature is small.
//!
//! The instance is a tiny rendered clip; parameters are drawn in `f32` and
//! replayed in `f64`. Teacher targets and the student mask are fixed before
//! differencing, so the checked function is exactly the student loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{KvMap, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Params, BLOCK_NAMES};
use crate::scene::{random_scene, render_scene, SceneParams};
use crate::train::{prepare_clip, ClipTask};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub train: TrainConfig,
    pub height: usize,
    pub width: usize,
    /// Difference step.
    pub step: f64,
    pub tol: f64,
    /// Absolute floor of the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        let train = TrainConfig {
            patch_size: 4,
            d_e: 8,
            h_dim: 8,
            d: 8,
            prototypes: 4,
            grid_size: 3,
            frames_per_clip: 3,
            clip_seconds: 3.0,
            crop_min: 1.0,
            crop_max: 1.0,
            mask_ratio: 0.25,
            ..TrainConfig::default()
        };
        GradCheckConfig {
            train,
            height: 16,
            width: 16,
            step: 1e-3,
            tol: 1e-4,
            floor: 1e-8,
        }
    }
}

impl GradCheckConfig {
    /// Training keys plus `height`, `width`, `fd_step`, `fd_tol`, `fd_floor`.
    pub fn take_from(map: &mut KvMap) -> Result<Self> {
        let d = GradCheckConfig::default();
        for (key, value) in [
            ("patch_size", d.train.patch_size.to_string()),
            ("d_e", d.train.d_e.to_string()),
            ("h_dim", d.train.h_dim.to_string()),
            ("d", d.train.d.to_string()),
            ("prototypes", d.train.prototypes.to_string()),
            ("grid_size", d.train.grid_size.to_string()),
            ("frames_per_clip", d.train.frames_per_clip.to_string()),
            ("clip_seconds", d.train.clip_seconds.to_string()),
            ("crop_min", d.train.crop_min.to_string()),
            ("crop_max", d.train.crop_max.to_string()),
            ("mask_ratio", d.train.mask_ratio.to_string()),
        ] {
            if !map.contains(key) {
                map.set(key, &value);
            }
        }
        let cfg = GradCheckConfig {
            height: map.take_num("height", d.height, 1, 4096, false)?,
            width: map.take_num("width", d.width, 1, 4096, false)?,
            step: map.take_num("fd_step", d.step, 1e-12, 1.0, false)?,
            tol: map.take_num("fd_tol", d.tol, 0.0, 1.0, false)?,
            floor: map.take_num("fd_floor", d.floor, 0.0, 1.0, false)?,
            train: TrainConfig::take_from(map)?,
        };
        if cfg.train.frames_per_clip > 3 || cfg.train.grid_size > 4 || cfg.train.prototypes > 4 || cfg.train.d > 8 {
            return Err(Error::config(
                "grid_size",
                "finite differences need a desk-scale instance: frames_per_clip<=3, grid_size<=4, prototypes<=4, d<=8",
            ));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// Element with the largest error and the two gradients there.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub tol: f64,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> &BlockError {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("at least one block")
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.blocks
            .iter()
            .filter(|b| !(b.max_rel_error < self.tol))
            .map(|b| b.name)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failing().is_empty()
    }
}

pub fn grad_check(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(cfg, seed, |_| {})
}

/// As [`grad_check`], with a hook that may tamper with the analytic gradient
/// before comparison.
pub fn grad_check_with(cfg: &GradCheckConfig, seed: u64, tamper: impl Fn(&mut Params<f64>)) -> Result<GradCheckReport> {
    let tc = &cfg.train;
    let params = SceneParams {
        height: cfg.height,
        width: cfg.width,
        duration: tc.clip_seconds,
        frame_rate: tc.frames_per_clip as f32 / tc.clip_seconds,
        ..SceneParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_scene(&params, &mut rng)?;
    let sample = render_scene(&spec, seed, tc.grid_size)?;
    let view = prepare_clip(&sample, tc, seed)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let student = Params::init(tc.dims(), &mut init_rng)?;
    let teacher = Params::init(tc.dims(), &mut init_rng)?;
    let task = ClipTask::build(&view, &teacher, tc, seed)?;
    let opts = tc.loss_options();

    let base: Params<f64> = student.cast();
    let analytic = {
        let out = task.loss(&base, &opts, true)?;
        let mut g = out.grads.expect("requested");
        tamper(&mut g);
        (out.value, g)
    };
    let mut blocks = Vec::with_capacity(base.blocks.len());
    let mut probe = base.clone();
    for (b, name) in BLOCK_NAMES.iter().enumerate() {
        let mut worst = BlockError {
            name,
            max_rel_error: 0.0,
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..base.blocks[b].len() {
            let x = base.blocks[b][j];
            let mut at = |offset: f64| -> Result<f64> {
                probe.blocks[b][j] = x + offset;
                let v = task.loss(&probe, &opts, false)?.value;
                probe.blocks[b][j] = x;
                Ok(v)
            };
            let h = cfg.step;
            let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            let a = analytic.1.blocks[b][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if err > worst.max_rel_error || err.is_nan() {
                worst = BlockError {
                    name,
                    max_rel_error: err,
                    index: j,
                    analytic: a,
                    numeric,
                };
            }
        }
        blocks.push(worst);
    }
    Ok(GradCheckReport {
        blocks,
        tol: cfg.tol,
        loss: analytic.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_helpers() {
        let mk = |name, e| BlockError {
            name,
            max_rel_error: e,
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let r = GradCheckReport {
            blocks: vec![mk("mixer.weight", 1e-7), mk("head.fc1.bias", 3e-3)],
            tol: 1e-4,
            loss: 1.0,
        };
        assert_eq!(r.worst().name, "head.fc1.bias");
        assert_eq!(r.failing(), vec!["head.fc1.bias"]);
        assert!(!r.passed());
    }
}
