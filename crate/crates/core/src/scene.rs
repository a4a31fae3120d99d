//! Synthetic scenes and an analytic point tracker.
//!
//! Shapes move rigidly in world coordinates; the camera pans at a constant
//! velocity, so on-screen position is `world - pan * time`. A tracked point
//! is glued to the top-most surface under its seed in the first frame and
//! follows that surface exactly. Visibility is resolved at pixel-center
//! resolution: a point is visible at frame `t` iff it lies inside the frame
//! and the top-most surface at the center of its pixel is its carrier, so
//! visible points always agree with the ground-truth mask.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{GridCoord, VideoClip};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Circle { radius: f32 },
    Rect { half_w: f32, half_h: f32 },
}

/// World-space path of a shape center; time in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Linear {
        x0: f32,
        y0: f32,
        vx: f32,
        vy: f32,
    },
    Sinusoid {
        cx: f32,
        cy: f32,
        ax: f32,
        ay: f32,
        freq: f32,
        phase: f32,
    },
}

impl Motion {
    pub fn center(&self, s: f64) -> (f64, f64) {
        match *self {
            Motion::Linear { x0, y0, vx, vy } => (x0 as f64 + vx as f64 * s, y0 as f64 + vy as f64 * s),
            Motion::Sinusoid {
                cx,
                cy,
                ax,
                ay,
                freq,
                phase,
            } => {
                let a = 2.0 * PI * freq as f64 * s + phase as f64;
                (cx as f64 + ax as f64 * a.sin(), cy as f64 + ay as f64 * a.cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    pub z: i32,
    pub motion: Motion,
}

impl Shape {
    fn covers(&self, cx: f64, cy: f64, x: f64, y: f64) -> bool {
        match self.kind {
            ShapeKind::Circle { radius } => {
                let r = radius as f64;
                (x - cx).powi(2) + (y - cy).powi(2) < r * r
            }
            ShapeKind::Rect { half_w, half_h } => (x - cx).abs() < half_w as f64 && (y - cy).abs() < half_h as f64,
        }
    }

    fn half_extent(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Circle { radius } => (radius as f64, radius as f64),
            ShapeKind::Rect { half_w, half_h } => (half_w as f64, half_h as f64),
        }
    }
}

/// World-fixed background paint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    Solid([f32; 3]),
    /// Smooth periodic blend between two colors along direction `angle` (radians).
    Gradient {
        c0: [f32; 3],
        c1: [f32; 3],
        period: f32,
        angle: f32,
    },
}

impl Background {
    fn color(&self, wx: f64, wy: f64) -> [f32; 3] {
        match *self {
            Background::Solid(c) => c,
            Background::Gradient { c0, c1, period, angle } => {
                let u = wx * (angle as f64).cos() + wy * (angle as f64).sin();
                let f = (0.5 - 0.5 * (2.0 * PI * u / period as f64).cos()) as f32;
                [0, 1, 2].map(|k| c0[k] + (c1[k] - c0[k]) * f)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<Shape>,
    pub background: Background,
    /// Camera pan velocity in px/s.
    pub pan: (f32, f32),
    pub duration: f32,
    pub frame_rate: f32,
    /// Screen-fixed illumination falloff in `[0, 1)`: brightness drops
    /// linearly from 1 at the top-left corner to `1 - shading` at the bottom-right.
    pub shading: f32,
    /// Uniform per-pixel noise amplitude, drawn from the render seed.
    pub noise: f32,
}

impl SceneSpec {
    pub fn frame_count(&self) -> usize {
        (self.duration as f64 * self.frame_rate as f64).round().max(0.0) as usize
    }

    pub fn time(&self, frame: usize) -> f64 {
        frame as f64 / self.frame_rate as f64
    }

    fn camera(&self, s: f64) -> (f64, f64) {
        (self.pan.0 as f64 * s, self.pan.1 as f64 * s)
    }

    /// On-screen center of shape `k` at time `s`.
    pub fn screen_center(&self, k: usize, s: f64) -> (f64, f64) {
        let (wx, wy) = self.shapes[k].motion.center(s);
        let (cx, cy) = self.camera(s);
        (wx - cx, wy - cy)
    }

    /// Instance id (shape index + 1, 0 for background) of the top-most
    /// surface at screen point `(x, y)` at time `s`.
    pub fn top_id(&self, x: f64, y: f64, s: f64) -> u16 {
        let mut best: Option<(i32, usize)> = None;
        for (k, shape) in self.shapes.iter().enumerate() {
            let (cx, cy) = self.screen_center(k, s);
            if shape.covers(cx, cy, x, y) && best.is_none_or(|(z, _)| shape.z > z) {
                best = Some((shape.z, k));
            }
        }
        best.map_or(0, |(_, k)| k as u16 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::invalid("scene has no shapes"));
        }
        if self.shapes.len() >= u16::MAX as usize {
            return Err(Error::invalid("too many shapes"));
        }
        if !(self.duration > 0.0 && self.frame_rate > 0.0) {
            return Err(Error::invalid("scene duration and frame rate must be positive"));
        }
        if self.frame_count() < 2 {
            return Err(Error::invalid(format!(
                "scene spans {} frames, need at least 2",
                self.frame_count()
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("empty canvas"));
        }
        let zs: BTreeSet<i32> = self.shapes.iter().map(|s| s.z).collect();
        if zs.len() != self.shapes.len() {
            return Err(Error::invalid("shape z-orders must be unique"));
        }
        if !(0.0..1.0).contains(&self.shading) || !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("shading must be in [0,1) and noise in [0,1]"));
        }
        for s in &self.shapes {
            let (hx, hy) = s.half_extent();
            if !(hx > 0.0 && hy > 0.0) {
                return Err(Error::invalid("shape sizes must be positive"));
            }
        }
        let t = self.frame_count();
        let (w, h) = (self.width as f64, self.height as f64);
        let in_frame = (0..t)
            .filter(|&f| {
                let s = self.time(f);
                self.shapes.iter().enumerate().any(|(k, shape)| {
                    let (cx, cy) = self.screen_center(k, s);
                    let (hx, hy) = shape.half_extent();
                    cx + hx > 0.0 && cx - hx < w && cy + hy > 0.0 && cy - hy < h
                })
            })
            .count();
        if 2 * in_frame < t {
            return Err(Error::invalid(format!(
                "shapes are in frame for only {in_frame} of {t} frames"
            )));
        }
        Ok(())
    }
}

/// `N` point tracks over `T` frames; coordinates are `[T, N, 2]` as `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub t: usize,
    pub n: usize,
    pub coords: Vec<f32>,
    pub visible: Vec<bool>,
    pub origin: Vec<GridCoord>,
}

impl TrajectorySet {
    pub fn new(t: usize, n: usize, coords: Vec<f32>, visible: Vec<bool>) -> Result<Self> {
        if coords.len() != t * n * 2 || visible.len() != t * n {
            return Err(Error::invalid(format!("track buffers do not match T={t}, N={n}")));
        }
        let origin = if t > 0 {
            (0..n)
                .map(|i| GridCoord::new(coords[2 * i], coords[2 * i + 1]))
                .collect()
        } else {
            Vec::new()
        };
        Ok(TrajectorySet {
            t,
            n,
            coords,
            visible,
            origin,
        })
    }

    pub fn coord(&self, t: usize, i: usize) -> GridCoord {
        let k = 2 * (t * self.n + i);
        GridCoord::new(self.coords[k], self.coords[k + 1])
    }

    pub fn is_visible(&self, t: usize, i: usize) -> bool {
        self.visible[t * self.n + i]
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    /// Restrict to the given frame indices, in order.
    pub fn select_frames(&self, frames: &[usize]) -> TrajectorySet {
        let mut coords = Vec::with_capacity(frames.len() * self.n * 2);
        let mut visible = Vec::with_capacity(frames.len() * self.n);
        for &f in frames {
            coords.extend_from_slice(&self.coords[2 * f * self.n..2 * (f + 1) * self.n]);
            visible.extend_from_slice(&self.visible[f * self.n..(f + 1) * self.n]);
        }
        let mut out = TrajectorySet::new(frames.len(), self.n, coords, visible).expect("consistent");
        if frames.first() == Some(&0) {
            out.origin = self.origin.clone();
        }
        out
    }
}

/// One rendered clip with its instance masks and tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub clip: VideoClip,
    /// `[T, H, W]` instance ids, 0 = background.
    pub masks: Vec<u16>,
    pub tracks: TrajectorySet,
    pub spec: SceneSpec,
}

impl ClipSample {
    pub fn mask(&self, t: usize) -> &[u16] {
        let n = self.clip.h * self.clip.w;
        &self.masks[t * n..(t + 1) * n]
    }

    /// Semantic class of every instance id: 0 for background, `1 + i` for
    /// a shape painted with `OBJECT_PALETTE[i]`. Shapes with other colors
    /// get classes past the palette, by shape index.
    pub fn class_of_ids(&self) -> Vec<u16> {
        let mut classes = vec![0u16];
        for (k, sh) in self.spec.shapes.iter().enumerate() {
            let c = match OBJECT_PALETTE.iter().position(|p| *p == sh.color) {
                Some(i) => 1 + i,
                None => 1 + OBJECT_PALETTE.len() + k,
            };
            classes.push(c as u16);
        }
        classes
    }

    /// Frame `t` of the mask with instance ids replaced by classes.
    pub fn class_mask(&self, t: usize) -> Vec<u16> {
        let classes = self.class_of_ids();
        self.mask(t)
            .iter()
            .map(|&id| classes.get(id as usize).copied().unwrap_or(id))
            .collect()
    }

    pub fn select_frames(&self, frames: &[usize]) -> Result<ClipSample> {
        if let Some(&f) = frames.iter().find(|&&f| f >= self.clip.t) {
            return Err(Error::invalid(format!("frame {f} beyond clip length {}", self.clip.t)));
        }
        let fl = self.clip.frame_len();
        let ml = self.clip.h * self.clip.w;
        let mut data = Vec::with_capacity(frames.len() * fl);
        let mut masks = Vec::with_capacity(frames.len() * ml);
        for &f in frames {
            data.extend_from_slice(self.clip.frame(f));
            masks.extend_from_slice(self.mask(f));
        }
        let mut clip = self.clip.clone();
        clip.frames = data;
        clip.t = frames.len();
        Ok(ClipSample {
            clip,
            masks,
            tracks: self.tracks.select_frames(frames),
            spec: self.spec.clone(),
        })
    }
}

/// Uniform `g x g` lattice of seed points over an `h x w` frame.
pub fn seed_grid(h: usize, w: usize, g: usize) -> Vec<GridCoord> {
    let mut out = Vec::with_capacity(g * g);
    for k in 0..g {
        for j in 0..g {
            out.push(GridCoord::new(
                ((j as f64 + 0.5) * w as f64 / g as f64) as f32,
                ((k as f64 + 0.5) * h as f64 / g as f64) as f32,
            ));
        }
    }
    out
}

fn pixel_index(x: f64, y: f64, w: usize, h: usize) -> Option<(usize, usize)> {
    if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
        Some((x.floor() as usize, y.floor() as usize))
    } else {
        None
    }
}

/// Follow each seed's carrier surface analytically through every frame.
pub fn oracle_track(spec: &SceneSpec, seeds: &[GridCoord]) -> TrajectorySet {
    let t_count = spec.frame_count();
    let n = seeds.len();
    let s0 = spec.time(0);
    // carrier id and the seed's offset in the carrier's own frame
    let carriers: Vec<(u16, f64, f64)> = seeds
        .iter()
        .map(|seed| {
            let (x, y) = (seed.x as f64, seed.y as f64);
            let id = match pixel_index(x, y, spec.width, spec.height) {
                Some((px, py)) => spec.top_id(px as f64 + 0.5, py as f64 + 0.5, s0),
                None => 0,
            };
            if id == 0 {
                let (cx, cy) = spec.camera(s0);
                (0, x + cx, y + cy)
            } else {
                let (cx, cy) = spec.screen_center(id as usize - 1, s0);
                (id, x - cx, y - cy)
            }
        })
        .collect();

    let mut coords = Vec::with_capacity(t_count * n * 2);
    let mut visible = Vec::with_capacity(t_count * n);
    for f in 0..t_count {
        let s = spec.time(f);
        for &(id, ox, oy) in &carriers {
            let (x, y) = if id == 0 {
                let (cx, cy) = spec.camera(s);
                (ox - cx, oy - cy)
            } else {
                let (cx, cy) = spec.screen_center(id as usize - 1, s);
                (cx + ox, cy + oy)
            };
            let vis = match pixel_index(x, y, spec.width, spec.height) {
                Some((px, py)) => spec.top_id(px as f64 + 0.5, py as f64 + 0.5, s) == id,
                None => false,
            };
            coords.push(x as f32);
            coords.push(y as f32);
            visible.push(vis);
        }
    }
    let mut tracks = TrajectorySet::new(t_count, n, coords, visible).expect("consistent buffers");
    tracks.origin = seeds.to_vec();
    tracks
}

/// Render frames, instance masks and `g x g` oracle tracks.
pub fn render_scene(spec: &SceneSpec, seed: u64, g: usize) -> Result<ClipSample> {
    spec.validate()?;
    let (h, w, t_count) = (spec.height, spec.width, spec.frame_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(t_count * h * w * CHANNELS);
    let mut masks = Vec::with_capacity(t_count * h * w);
    for f in 0..t_count {
        let s = spec.time(f);
        let cam = spec.camera(s);
        for py in 0..h {
            for px in 0..w {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let id = spec.top_id(x, y, s);
                let base = if id == 0 {
                    spec.background.color(x + cam.0, y + cam.1)
                } else {
                    spec.shapes[id as usize - 1].color
                };
                let u = 0.5 * (x / w as f64 + y / h as f64);
                let light = 1.0 - spec.shading * u as f32;
                for c in base {
                    let mut v = c * light;
                    if spec.noise > 0.0 {
                        v += rng.gen_range(-spec.noise..=spec.noise);
                    }
                    frames.push(v.clamp(0.0, 1.0));
                }
                masks.push(id);
            }
        }
    }
    let clip = VideoClip::new(
        frames,
        (t_count, h, w, CHANNELS),
        spec.frame_rate,
        format!("scene-{seed}"),
    )?;
    let tracks = oracle_track(spec, &seed_grid(h, w, g));
    Ok(ClipSample {
        clip,
        masks,
        tracks,
        spec: spec.clone(),
    })
}

/// Axis-aligned crop window in source pixels, resized to `out_w x out_h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
    pub out_w: usize,
    pub out_h: usize,
}

impl CropWindow {
    pub fn identity(w: usize, h: usize) -> Self {
        CropWindow {
            x0: 0.0,
            y0: 0.0,
            w: w as f64,
            h: h as f64,
            out_w: w,
            out_h: h,
        }
    }

    /// Draw a window with area fraction uniform in `scale_range` and aspect in
    /// `[3/4, 4/3]` restricted to the values that fit inside the frame.
    pub fn random(w: usize, h: usize, scale_range: (f32, f32), rng: &mut impl Rng) -> Result<Self> {
        let (lo, hi) = scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid(format!(
                "crop scale range [{lo},{hi}] must satisfy 0<lo<=hi<=1"
            )));
        }
        let area = if lo == hi {
            lo as f64
        } else {
            rng.gen_range(lo as f64..=hi as f64)
        };
        let a_lo = (3.0f64 / 4.0).max(area);
        let a_hi = (4.0f64 / 3.0).min(1.0 / area);
        let aspect = if a_hi > a_lo {
            (rng.gen_range(a_lo.ln()..=a_hi.ln())).exp()
        } else {
            1.0
        };
        let cw = ((area * aspect).sqrt() * w as f64).min(w as f64);
        let ch = ((area / aspect).sqrt() * h as f64).min(h as f64);
        let x0 = if cw < w as f64 {
            rng.gen_range(0.0..=(w as f64 - cw))
        } else {
            0.0
        };
        let y0 = if ch < h as f64 {
            rng.gen_range(0.0..=(h as f64 - ch))
        } else {
            0.0
        };
        Ok(CropWindow {
            x0,
            y0,
            w: cw,
            h: ch,
            out_w: w,
            out_h: h,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.x0 == 0.0 && self.y0 == 0.0 && self.w == self.out_w as f64 && self.h == self.out_h as f64
    }

    pub fn map_forward(&self, p: GridCoord) -> GridCoord {
        if self.is_identity() {
            return p;
        }
        GridCoord::new(
            ((p.x as f64 - self.x0) * self.out_w as f64 / self.w) as f32,
            ((p.y as f64 - self.y0) * self.out_h as f64 / self.h) as f32,
        )
    }

    pub fn map_back(&self, p: GridCoord) -> GridCoord {
        if self.is_identity() {
            return p;
        }
        GridCoord::new(
            (self.x0 + p.x as f64 * self.w / self.out_w as f64) as f32,
            (self.y0 + p.y as f64 * self.h / self.out_h as f64) as f32,
        )
    }

    /// Source pixel sampled by output pixel `(ox, oy)` under nearest-pixel resize.
    fn source_pixel(&self, ox: usize, oy: usize, src_w: usize, src_h: usize) -> (usize, usize) {
        let sx = (self.x0 + (ox as f64 + 0.5) * self.w / self.out_w as f64).floor();
        let sy = (self.y0 + (oy as f64 + 0.5) * self.h / self.out_h as f64).floor();
        (
            (sx.max(0.0) as usize).min(src_w - 1),
            (sy.max(0.0) as usize).min(src_h - 1),
        )
    }
}

/// Apply `window` to every frame, mask and track of `sample`.
pub fn apply_crop(sample: &ClipSample, window: &CropWindow) -> ClipSample {
    if window.is_identity() {
        return sample.clone();
    }
    let clip = &sample.clip;
    let (ow, oh, ch) = (window.out_w, window.out_h, clip.c);
    let mut frames = Vec::with_capacity(clip.t * oh * ow * ch);
    let mut masks = Vec::with_capacity(clip.t * oh * ow);
    let lut: Vec<(usize, usize)> = (0..oh)
        .flat_map(|oy| (0..ow).map(move |ox| (ox, oy)))
        .map(|(ox, oy)| window.source_pixel(ox, oy, clip.w, clip.h))
        .collect();
    for t in 0..clip.t {
        let mask = sample.mask(t);
        for &(sx, sy) in &lut {
            frames.extend_from_slice(clip.pixel(t, sy, sx));
            masks.push(mask[sy * clip.w + sx]);
        }
    }
    let tr = &sample.tracks;
    let mut coords = Vec::with_capacity(tr.coords.len());
    let mut visible = Vec::with_capacity(tr.visible.len());
    for t in 0..tr.t {
        for i in 0..tr.n {
            let q = window.map_forward(tr.coord(t, i));
            let inside = q.x >= 0.0 && q.y >= 0.0 && (q.x as f64) < ow as f64 && (q.y as f64) < oh as f64;
            coords.push(q.x);
            coords.push(q.y);
            visible.push(tr.is_visible(t, i) && inside);
        }
    }
    let mut tracks = TrajectorySet::new(tr.t, tr.n, coords, visible).expect("consistent");
    tracks.origin = tr.origin.iter().map(|p| window.map_forward(*p)).collect();
    let mut out_clip = clip.clone();
    out_clip.frames = frames;
    out_clip.h = oh;
    out_clip.w = ow;
    ClipSample {
        clip: out_clip,
        masks,
        tracks,
        spec: sample.spec.clone(),
    }
}

/// Random crop applied identically to all frames; rejects windows smaller than one patch.
pub fn crop_clip(
    sample: &ClipSample,
    scale_range: (f32, f32),
    seed: u64,
    patch_size: usize,
) -> Result<(ClipSample, CropWindow)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = CropWindow::random(sample.clip.w, sample.clip.h, scale_range, &mut rng)?;
    check_window(&window, patch_size)?;
    Ok((apply_crop(sample, &window), window))
}

pub(crate) fn check_window(window: &CropWindow, patch_size: usize) -> Result<()> {
    if window.w < patch_size as f64 || window.h < patch_size as f64 {
        return Err(Error::invalid(format!(
            "crop window {:.2}x{:.2} smaller than one {patch_size}px patch",
            window.w, window.h
        )));
    }
    Ok(())
}

/// Knobs for sampling random scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub duration: f32,
    pub frame_rate: f32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Probability that a shape is placed on a collision course with a lower one.
    pub occlusion_rate: f32,
    pub max_speed: f32,
    pub max_pan: f32,
    pub shading: f32,
    pub noise: f32,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            height: 32,
            width: 32,
            duration: 3.2,
            frame_rate: 12.0 / 3.2,
            min_shapes: 2,
            max_shapes: 4,
            occlusion_rate: 0.3,
            max_speed: 6.0,
            max_pan: 2.0,
            shading: 0.5,
            noise: 0.0,
        }
    }
}

/// Saturated, mutually distinct object colors.
pub const OBJECT_PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.25, 0.95],
];

/// Sample a valid random scene.
pub fn random_scene(params: &SceneParams, rng: &mut impl Rng) -> Result<SceneSpec> {
    if params.min_shapes == 0 || params.min_shapes > params.max_shapes || params.max_shapes > OBJECT_PALETTE.len() {
        return Err(Error::invalid(format!(
            "shape count range [{}, {}] must lie in [1, {}]",
            params.min_shapes,
            params.max_shapes,
            OBJECT_PALETTE.len()
        )));
    }
    let (w, h) = (params.width as f32, params.height as f32);
    let size = w.min(h);
    for _attempt in 0..64 {
        let n = rng.gen_range(params.min_shapes..=params.max_shapes);
        let mut colors: Vec<usize> = (0..OBJECT_PALETTE.len()).collect();
        for i in (1..colors.len()).rev() {
            colors.swap(i, rng.gen_range(0..=i));
        }
        let mid = params.duration as f64 / 2.0;
        let mut shapes: Vec<Shape> = Vec::with_capacity(n);
        for k in 0..n {
            let kind = if rng.gen_bool(0.5) {
                ShapeKind::Circle {
                    radius: rng.gen_range(0.12..0.25) * size,
                }
            } else {
                ShapeKind::Rect {
                    half_w: rng.gen_range(0.10..0.25) * size,
                    half_h: rng.gen_range(0.10..0.25) * size,
                }
            };
            let speed = params.max_speed;
            let (vx, vy) = (rng.gen_range(-speed..=speed), rng.gen_range(-speed..=speed));
            let collide = k > 0 && rng.gen::<f32>() < params.occlusion_rate;
            let motion = if collide {
                // start on screen and cross the mid-clip center of a lower shape
                let other: &Shape = &shapes[rng.gen_range(0..k)];
                let (ox, oy) = other.motion.center(mid);
                let (x0, y0) = (rng.gen_range(0.1..0.9) * w, rng.gen_range(0.1..0.9) * h);
                Motion::Linear {
                    x0,
                    y0,
                    vx: ((ox - x0 as f64) / mid) as f32,
                    vy: ((oy - y0 as f64) / mid) as f32,
                }
            } else if rng.gen_bool(0.7) {
                Motion::Linear {
                    x0: rng.gen_range(0.2..0.8) * w,
                    y0: rng.gen_range(0.2..0.8) * h,
                    vx,
                    vy,
                }
            } else {
                Motion::Sinusoid {
                    cx: rng.gen_range(0.3..0.7) * w,
                    cy: rng.gen_range(0.3..0.7) * h,
                    ax: rng.gen_range(0.05..0.2) * w,
                    ay: rng.gen_range(0.05..0.2) * h,
                    freq: rng.gen_range(0.1..0.3),
                    phase: rng.gen_range(0.0..std::f32::consts::TAU),
                }
            };
            shapes.push(Shape {
                kind,
                color: OBJECT_PALETTE[colors[k]],
                z: k as i32,
                motion,
            });
        }
        let dark = |rng: &mut dyn rand::RngCore| -> [f32; 3] {
            let g = rng.gen_range(0.15..0.45f32);
            [g, g + rng.gen_range(-0.05..0.05f32), g + rng.gen_range(-0.05..0.05f32)]
        };
        let background = if rng.gen_bool(0.5) {
            Background::Solid(dark(rng))
        } else {
            Background::Gradient {
                c0: dark(rng),
                c1: dark(rng),
                period: rng.gen_range(1.0..3.0) * size,
                angle: rng.gen_range(0.0..std::f32::consts::PI),
            }
        };
        let pan = (
            rng.gen_range(-params.max_pan..=params.max_pan),
            rng.gen_range(-params.max_pan..=params.max_pan),
        );
        let spec = SceneSpec {
            height: params.height,
            width: params.width,
            shapes,
            background,
            pan,
            duration: params.duration,
            frame_rate: params.frame_rate,
            shading: params.shading,
            noise: params.noise,
        };
        if spec.validate().is_ok() {
            return Ok(spec);
        }
    }
    Err(Error::invalid("could not sample a valid scene in 64 attempts"))
}

fn fmt3(c: [f32; 3]) -> String {
    format!("{} {} {}", c[0], c[1], c[2])
}

impl SceneSpec {
    /// Canonical `key=value` text, one shape per `shape.<k>` line.
    pub fn to_cfg(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("height={}\nwidth={}\n", self.height, self.width));
        s.push_str(&format!("duration={}\nframe_rate={}\n", self.duration, self.frame_rate));
        s.push_str(&format!(
            "pan={} {}\nshading={}\nnoise={}\n",
            self.pan.0, self.pan.1, self.shading, self.noise
        ));
        let bg = match self.background {
            Background::Solid(c) => format!("solid {}", fmt3(c)),
            Background::Gradient { c0, c1, period, angle } => {
                format!("gradient {} {} {} {}", fmt3(c0), fmt3(c1), period, angle)
            }
        };
        s.push_str(&format!("background={bg}\n"));
        for (k, sh) in self.shapes.iter().enumerate() {
            let kind = match sh.kind {
                ShapeKind::Circle { radius } => format!("circle {radius}"),
                ShapeKind::Rect { half_w, half_h } => format!("rect {half_w} {half_h}"),
            };
            let motion = match sh.motion {
                Motion::Linear { x0, y0, vx, vy } => format!("linear {x0} {y0} {vx} {vy}"),
                Motion::Sinusoid {
                    cx,
                    cy,
                    ax,
                    ay,
                    freq,
                    phase,
                } => {
                    format!("sinusoid {cx} {cy} {ax} {ay} {freq} {phase}")
                }
            };
            s.push_str(&format!(
                "shape.{k}={kind}; color {}; z {}; {motion}\n",
                fmt3(sh.color),
                sh.z
            ));
        }
        s
    }

    pub fn from_cfg(text: &str) -> Result<SceneSpec> {
        fn nums(key: &str, s: &str, n: usize) -> Result<Vec<f32>> {
            let v: std::result::Result<Vec<f32>, _> = s.split_whitespace().map(str::parse::<f32>).collect();
            match v {
                Ok(v) if v.len() == n => Ok(v),
                _ => Err(Error::config(key, format!("expected {n} numbers, got `{s}`"))),
            }
        }
        fn rgb(key: &str, s: &str) -> Result<[f32; 3]> {
            let v = nums(key, s, 3)?;
            Ok([v[0], v[1], v[2]])
        }
        let mut height = None;
        let mut width = None;
        let mut duration = None;
        let mut frame_rate = None;
        let mut pan = (0.0, 0.0);
        let mut shading = 0.0;
        let mut noise = 0.0;
        let mut background = None;
        let mut shapes: Vec<(usize, Shape)> = Vec::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::config(key, format!("not an integer: `{v}`")))
            };
            let flt = |v: &str| {
                v.parse::<f32>()
                    .map_err(|_| Error::config(key, format!("not a number: `{v}`")))
            };
            match key {
                "height" => height = Some(int(value)?),
                "width" => width = Some(int(value)?),
                "duration" => duration = Some(flt(value)?),
                "frame_rate" => frame_rate = Some(flt(value)?),
                "pan" => {
                    let v = nums(key, value, 2)?;
                    pan = (v[0], v[1]);
                }
                "shading" => shading = flt(value)?,
                "noise" => noise = flt(value)?,
                "background" => {
                    let (kind, rest) = value.split_once(' ').unwrap_or((value, ""));
                    background = Some(match kind {
                        "solid" => Background::Solid(rgb(key, rest)?),
                        "gradient" => {
                            let v = nums(key, rest, 8)?;
                            Background::Gradient {
                                c0: [v[0], v[1], v[2]],
                                c1: [v[3], v[4], v[5]],
                                period: v[6],
                                angle: v[7],
                            }
                        }
                        other => return Err(Error::config(key, format!("unknown background `{other}`"))),
                    });
                }
                k if k.starts_with("shape.") => {
                    let idx = k["shape.".len()..]
                        .parse::<usize>()
                        .map_err(|_| Error::config(key, "bad shape index"))?;
                    let parts: Vec<&str> = value.split(';').map(str::trim).collect();
                    if parts.len() != 4 {
                        return Err(Error::config(key, "expected `kind; color; z; motion`"));
                    }
                    let (kname, kargs) = parts[0].split_once(' ').unwrap_or((parts[0], ""));
                    let kind = match kname {
                        "circle" => ShapeKind::Circle {
                            radius: nums(key, kargs, 1)?[0],
                        },
                        "rect" => {
                            let v = nums(key, kargs, 2)?;
                            ShapeKind::Rect {
                                half_w: v[0],
                                half_h: v[1],
                            }
                        }
                        other => return Err(Error::config(key, format!("unknown shape `{other}`"))),
                    };
                    let color = rgb(key, parts[1].strip_prefix("color").unwrap_or("").trim())?;
                    let z = parts[2]
                        .strip_prefix('z')
                        .and_then(|v| v.trim().parse::<i32>().ok())
                        .ok_or_else(|| Error::config(key, "bad z"))?;
                    let (mname, margs) = parts[3].split_once(' ').unwrap_or((parts[3], ""));
                    let motion = match mname {
                        "linear" => {
                            let v = nums(key, margs, 4)?;
                            Motion::Linear {
                                x0: v[0],
                                y0: v[1],
                                vx: v[2],
                                vy: v[3],
                            }
                        }
                        "sinusoid" => {
                            let v = nums(key, margs, 6)?;
                            Motion::Sinusoid {
                                cx: v[0],
                                cy: v[1],
                                ax: v[2],
                                ay: v[3],
                                freq: v[4],
                                phase: v[5],
                            }
                        }
                        other => return Err(Error::config(key, format!("unknown motion `{other}`"))),
                    };
                    shapes.push((idx, Shape { kind, color, z, motion }));
                }
                other => return Err(Error::config(other, "unknown scene key")),
            }
        }
        shapes.sort_by_key(|(i, _)| *i);
        if shapes.iter().enumerate().any(|(k, (i, _))| k != *i) {
            return Err(Error::config("shape", "shape indices must be 0..n without gaps"));
        }
        let missing = |k: &str| Error::config(k, "missing");
        Ok(SceneSpec {
            height: height.ok_or_else(|| missing("height"))?,
            width: width.ok_or_else(|| missing("width"))?,
            shapes: shapes.into_iter().map(|(_, s)| s).collect(),
            background: background.ok_or_else(|| missing("background"))?,
            pan,
            duration: duration.ok_or_else(|| missing("duration"))?,
            frame_rate: frame_rate.ok_or_else(|| missing("frame_rate"))?,
            shading,
            noise,
        })
    }
}
