//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export is a thin wrapper over a plain Rust function so the logic can
//! be tested natively.

use mosic_core::config::TrainConfig;
use mosic_core::dataset::{generate_clip, GenConfig};
use mosic_core::eval::{cluster_eval, ClusterEvalConfig, EvalClip, Granularity};
use mosic_core::grid::normalize_in_place;
use mosic_core::ot::{compute_cost, hard_assign, sinkhorn, Prototypes, Role};
use mosic_core::scene::ClipSample;
use mosic_core::train::{eval_clip, ModelState};
use mosic_core::viz::palette_color;
use mosic_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js(e: mosic_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

const FEATURE_DIM: usize = 8;

fn unit_rows(rows: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut v: Vec<f32> = (0..rows * FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    v.chunks_mut(FEATURE_DIM).for_each(|r| normalize_in_place(r, 1e-12));
    v
}

#[wasm_bindgen]
pub struct SinkhornView {
    n: usize,
    k: usize,
    plan: Vec<f32>,
    assignment: Vec<u32>,
    iterations: u32,
    violation: f32,
}

#[wasm_bindgen]
impl SinkhornView {
    #[wasm_bindgen(getter)]
    pub fn n(&self) -> usize {
        self.n
    }

    #[wasm_bindgen(getter)]
    pub fn k(&self) -> usize {
        self.k
    }

    /// Row-major `[n, k]` plan.
    pub fn plan(&self) -> Vec<f32> {
        self.plan.clone()
    }

    pub fn assignment(&self) -> Vec<u32> {
        self.assignment.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn iterations(&self) -> u32 {
        self.iterations
    }

    #[wasm_bindgen(getter)]
    pub fn violation(&self) -> f32 {
        self.violation
    }

    /// Points per cluster under the hard assignment.
    pub fn cluster_sizes(&self) -> Vec<u32> {
        let mut sizes = vec![0; self.k];
        self.assignment.iter().for_each(|&a| sizes[a as usize] += 1);
        sizes
    }
}

/// Balanced assignment of `n` random unit features to `k` random prototypes.
pub fn plan_for(n: usize, k: usize, eps: f32, seed: u64) -> Result<SinkhornView> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats = unit_rows(n, &mut rng);
    let protos = Prototypes::new(unit_rows(k, &mut rng), k, FEATURE_DIM, Role::Teacher)?;
    let cost = compute_cost(&feats, FEATURE_DIM, &protos)?;
    let plan = sinkhorn(&cost, eps, 500, 1e-6)?;
    Ok(SinkhornView {
        n,
        k,
        assignment: hard_assign(&plan).into_iter().map(|a| a as u32).collect(),
        iterations: plan.iterations_used,
        violation: plan.max_marginal_violation,
        plan: plan.values,
    })
}

#[wasm_bindgen]
pub fn sinkhorn_plan(n: usize, k: usize, eps: f32, seed: u64) -> std::result::Result<SinkhornView, JsError> {
    plan_for(n, k, eps, seed).map_err(js)
}

fn rgba(values: &[f32]) -> Vec<u8> {
    values
        .chunks_exact(3)
        .flat_map(|p| {
            let c = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [c(p[0]), c(p[1]), c(p[2]), 255]
        })
        .collect()
}

#[wasm_bindgen]
pub struct Scene {
    sample: ClipSample,
}

/// Render clip `seed` of a synthetic scene at `size`x`size` pixels.
pub fn scene_for(seed: u64, occlusion_rate: f32, size: usize) -> Result<Scene> {
    let mut cfg = GenConfig {
        seed,
        grid_size: 8,
        ..GenConfig::default()
    };
    cfg.scene.height = size;
    cfg.scene.width = size;
    cfg.scene.occlusion_rate = occlusion_rate;
    let (_, sample) = generate_clip(&cfg, 0)?;
    Ok(Scene { sample })
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, occlusion_rate: f32, size: usize) -> std::result::Result<Scene, JsError> {
        scene_for(seed, occlusion_rate, size).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn frames(&self) -> usize {
        self.sample.clip.t
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.sample.clip.w
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.sample.clip.h
    }

    /// RGBA bytes of frame `t`.
    pub fn frame_rgba(&self, t: usize) -> Vec<u8> {
        rgba(self.sample.clip.frame(t.min(self.sample.clip.t - 1)))
    }

    /// `(x, y, visible)` per track at frame `t`.
    pub fn tracks(&self, t: usize) -> Vec<f32> {
        let tr = &self.sample.tracks;
        let t = t.min(tr.t.saturating_sub(1));
        (0..tr.n)
            .flat_map(|i| {
                let c = tr.coord(t, i);
                [c.x, c.y, if tr.is_visible(t, i) { 1.0 } else { 0.0 }]
            })
            .collect()
    }

    #[wasm_bindgen(getter)]
    pub fn visible_fraction(&self) -> f64 {
        1.0 - mosic_core::dataset::invisible_fraction(&self.sample)
    }
}

/// A small model trained step by step on a handful of clips.
#[wasm_bindgen]
pub struct Trainer {
    state: ModelState,
    clips: Vec<ClipSample>,
    total_steps: u64,
    cursor: usize,
}

pub const TRAINER_CLIPS: usize = 8;

impl Trainer {
    pub fn build(seed: u64, prototypes: usize, total_steps: u64) -> Result<Trainer> {
        let mut gen = GenConfig {
            n_clips: TRAINER_CLIPS,
            seed,
            grid_size: 8,
            ..GenConfig::default()
        };
        gen.scene.height = 32;
        gen.scene.width = 32;
        let clips = (0..gen.n_clips)
            .map(|i| generate_clip(&gen, i).map(|c| c.1))
            .collect::<Result<_>>()?;
        let config = TrainConfig {
            prototypes,
            grid_size: 8,
            frames_per_clip: 6,
            batch_size: 2,
            lr_head: 0.03,
            lr_backbone: 0.03,
            seed,
            ..TrainConfig::default()
        };
        Ok(Trainer {
            state: ModelState::new(config)?,
            clips,
            total_steps,
            cursor: 0,
        })
    }

    /// Run `n` steps; returns the mean loss.
    pub fn run(&mut self, n: usize) -> Result<f32> {
        let mut sum = 0.0;
        for _ in 0..n {
            let b = self.state.config.batch_size;
            let batch: Vec<&ClipSample> = (0..b)
                .map(|j| &self.clips[(self.cursor + j) % self.clips.len()])
                .collect();
            self.cursor = (self.cursor + b) % self.clips.len();
            sum += self.state.train_step(&batch, self.total_steps)?.loss.loss;
        }
        Ok(sum / n.max(1) as f32)
    }

    fn eval_clips(&self) -> Result<Vec<EvalClip>> {
        self.clips.iter().map(|s| eval_clip(&self.state.teacher, s)).collect()
    }

    /// Clip-granularity clustering mIoU and the cluster ids of `clip`.
    pub fn clusters(&self, clip: usize) -> Result<(f32, Vec<Vec<u32>>, usize, usize)> {
        let clips = self.eval_clips()?;
        let report = cluster_eval(
            &clips,
            &ClusterEvalConfig {
                granularity: Granularity::Clip,
                k: None,
                seed: 0,
                max_iters: 50,
            },
        )?;
        let c = clip.min(clips.len() - 1);
        Ok((report.miou, report.clusters[c].clone(), clips[c].rows, clips[c].cols))
    }
}

#[wasm_bindgen]
impl Trainer {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, prototypes: usize, total_steps: u64) -> std::result::Result<Trainer, JsError> {
        Trainer::build(seed, prototypes, total_steps).map_err(js)
    }

    pub fn step(&mut self, n: usize) -> std::result::Result<f32, JsError> {
        self.run(n).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn steps_done(&self) -> u64 {
        self.state.opt.step
    }

    /// Clip-granularity mIoU over the training clips.
    pub fn miou(&self) -> std::result::Result<f32, JsError> {
        self.clusters(0).map(|c| c.0).map_err(js)
    }

    /// RGBA cluster map of `frame` of `clip`, upsampled to the clip size.
    pub fn cluster_map(&self, clip: usize, frame: usize) -> std::result::Result<Vec<u8>, JsError> {
        let (_, maps, rows, cols) = self.clusters(clip).map_err(js)?;
        let sample = &self.clips[clip.min(self.clips.len() - 1)];
        Ok(upsample(
            &maps[frame.min(maps.len() - 1)],
            rows,
            cols,
            sample.clip.h,
            sample.clip.w,
        ))
    }

    pub fn clip_rgba(&self, clip: usize, frame: usize) -> Vec<u8> {
        let c = &self.clips[clip.min(self.clips.len() - 1)].clip;
        rgba(c.frame(frame.min(c.t - 1)))
    }
}

/// Nearest-neighbour upsampling of a cell map to RGBA pixels.
pub fn upsample(ids: &[u32], rows: usize, cols: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let id = ids[(y * rows / h) * cols + x * cols / w];
            let [r, g, b] = palette_color(id.wrapping_add(1) as u16, 0);
            out.extend_from_slice(&[r, g, b, 255]);
        }
    }
    out
}
