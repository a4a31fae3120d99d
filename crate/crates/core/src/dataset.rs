//! Synthetic datasets on disk.
//!
//! ```text
//! <root>/gen.cfg             canonical generator config
//! <root>/manifest.cfg        per-clip seeds and invisibility statistics
//! <root>/clip_000/frames.mgt1   [T, H, W, C]
//! <root>/clip_000/masks.mgt1    [T, H, W] instance ids as f32
//! <root>/clip_000/tracks.trk1
//! <root>/clip_000/spec.cfg      scene description
//! ```
//!
//! Clip `i` is generated from `dataset_seed ^ i`, so clips are independent
//! and the dataset is identical for identical configs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::grid::VideoClip;
use crate::scene::{random_scene, render_scene, ClipSample, SceneParams, SceneSpec};
use crate::tensor_io::{load_mgt1, save_mgt1, write_atomic, Tensor};
use crate::track_file::{load_tracks, save_tracks};

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_clips: usize,
    pub seed: u64,
    pub frames: usize,
    pub grid_size: usize,
    pub scene: SceneParams,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_clips: 8,
            seed: 0,
            frames: 12,
            grid_size: 16,
            scene: SceneParams::default(),
        }
    }
}

impl GenConfig {
    pub fn take_from(map: &mut KvMap) -> Result<Self> {
        let d = GenConfig::default();
        let s = &d.scene;
        let frames = map.take_num("frames", d.frames, 1, 10_000, false)?;
        let duration = map.take_positive("clip_seconds", s.duration)?;
        let scene = SceneParams {
            height: map.take_num("height", s.height, 1, 4096, false)?,
            width: map.take_num("width", s.width, 1, 4096, false)?,
            duration,
            frame_rate: frames as f32 / duration,
            min_shapes: map.take_num("min_shapes", s.min_shapes, 1, 8, false)?,
            max_shapes: map.take_num("max_shapes", s.max_shapes, 1, 8, false)?,
            occlusion_rate: map.take_num("occlusion_rate", s.occlusion_rate, 0.0, 1.0, false)?,
            max_speed: map.take_num("max_speed", s.max_speed, 0.0, 1000.0, false)?,
            max_pan: map.take_num("max_pan", s.max_pan, 0.0, 1000.0, false)?,
            shading: map.take_num("shading", s.shading, 0.0, 1.0, false)?,
            noise: map.take_num("noise", s.noise, 0.0, 0.5, false)?,
        };
        if scene.min_shapes > scene.max_shapes {
            return Err(Error::config(
                "min_shapes",
                format!("{} exceeds max_shapes = {}", scene.min_shapes, scene.max_shapes),
            ));
        }
        Ok(GenConfig {
            n_clips: map.take_num("n_clips", d.n_clips, 1, 100_000, false)?,
            seed: map.take_num("seed", d.seed, 0, u64::MAX, false)?,
            frames,
            grid_size: map.take_num("grid_size", d.grid_size, 1, 256, false)?,
            scene,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::parse(text)?;
        let cfg = GenConfig::take_from(&mut map)?;
        map.finish()?;
        Ok(cfg)
    }

    pub fn to_cfg(&self) -> String {
        let s = &self.scene;
        let kv: [(&str, String); 14] = [
            ("clip_seconds", s.duration.to_string()),
            ("frames", self.frames.to_string()),
            ("grid_size", self.grid_size.to_string()),
            ("height", s.height.to_string()),
            ("max_pan", s.max_pan.to_string()),
            ("max_shapes", s.max_shapes.to_string()),
            ("max_speed", s.max_speed.to_string()),
            ("min_shapes", s.min_shapes.to_string()),
            ("n_clips", self.n_clips.to_string()),
            ("noise", s.noise.to_string()),
            ("occlusion_rate", s.occlusion_rate.to_string()),
            ("seed", self.seed.to_string()),
            ("shading", s.shading.to_string()),
            ("width", s.width.to_string()),
        ];
        kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn clip_name(index: usize) -> String {
    format!("clip_{index:03}")
}

/// Seed, scene and rendered sample of clip `index`.
pub fn generate_clip(cfg: &GenConfig, index: usize) -> Result<(u64, ClipSample)> {
    let seed = cfg.seed ^ index as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_scene(&cfg.scene, &mut rng)?;
    let mut sample = render_scene(&spec, seed, cfg.grid_size)?;
    sample.clip.clip_id = clip_name(index);
    Ok((seed, sample))
}

/// Share of track points that are not visible.
pub fn invisible_fraction(sample: &ClipSample) -> f64 {
    let total = sample.tracks.t * sample.tracks.n;
    if total == 0 {
        return 0.0;
    }
    1.0 - sample.tracks.visible_count() as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub invisible_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dataset_seed: u64,
    pub clips: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn mean_invisible_fraction(&self) -> f64 {
        if self.clips.is_empty() {
            return 0.0;
        }
        self.clips.iter().map(|c| c.invisible_fraction).sum::<f64>() / self.clips.len() as f64
    }

    pub fn to_cfg(&self) -> String {
        let mut s = format!(
            "dataset_seed = {}\nn_clips = {}\nmean_invisible_fraction = {:.6}\n",
            self.dataset_seed,
            self.clips.len(),
            self.mean_invisible_fraction()
        );
        for c in &self.clips {
            s.push_str(&format!("{}.seed = {}\n", c.name, c.seed));
            s.push_str(&format!(
                "{}.invisible_fraction = {:.6}\n",
                c.name, c.invisible_fraction
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::parse(text)?;
        let dataset_seed = map.take_num("dataset_seed", 0u64, 0, u64::MAX, false)?;
        let n = map.take_num("n_clips", 0usize, 0, usize::MAX, false)?;
        map.take_raw("mean_invisible_fraction");
        let mut clips = Vec::with_capacity(n);
        for i in 0..n {
            let name = clip_name(i);
            let key = format!("{name}.seed");
            if !map.contains(&key) {
                return Err(Error::config(key, "missing from manifest"));
            }
            let seed = map.take_num(&key, 0u64, 0, u64::MAX, false)?;
            let invisible_fraction = map.take_num(&format!("{name}.invisible_fraction"), 0.0f64, 0.0, 1.0, false)?;
            clips.push(ManifestEntry {
                name,
                seed,
                invisible_fraction,
            });
        }
        map.finish()?;
        Ok(Manifest { dataset_seed, clips })
    }
}

pub fn save_clip(dir: &Path, sample: &ClipSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let c = &sample.clip;
    save_mgt1(
        &dir.join("frames.mgt1"),
        &Tensor::new(vec![c.t, c.h, c.w, c.c], c.frames.clone())?,
    )?;
    let masks: Vec<f32> = sample.masks.iter().map(|&m| m as f32).collect();
    save_mgt1(&dir.join("masks.mgt1"), &Tensor::new(vec![c.t, c.h, c.w], masks)?)?;
    save_tracks(&dir.join("tracks.trk1"), &sample.tracks)?;
    write_atomic(&dir.join("spec.cfg"), sample.spec.to_cfg().as_bytes())?;
    Ok(())
}

/// Load one clip directory; errors name the file that failed.
pub fn load_clip(dir: &Path, name: &str) -> Result<ClipSample> {
    let in_file = |file: &'static str| {
        move |e: Error| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{file}: {message}"),
            },
            other => other,
        }
    };
    let spec_text = fs::read_to_string(dir.join("spec.cfg"))?;
    let spec = SceneSpec::from_cfg(&spec_text)?;
    let frames = load_mgt1(&dir.join("frames.mgt1")).map_err(in_file("frames.mgt1"))?;
    let [t, h, w, c] = frames.dims[..] else {
        return Err(Error::format(
            5,
            format!("frames.mgt1: expected rank 4, got {:?}", frames.dims),
        ));
    };
    let clip = VideoClip::new(frames.data, (t, h, w, c), spec.frame_rate, name)?;
    let masks = load_mgt1(&dir.join("masks.mgt1")).map_err(in_file("masks.mgt1"))?;
    if masks.dims != [t, h, w] {
        return Err(Error::format(
            5,
            format!("masks.mgt1: shape {:?}, frames imply [{t}, {h}, {w}]", masks.dims),
        ));
    }
    let masks = masks
        .data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v <= u16::MAX as f32 && v.fract() == 0.0 {
                Ok(v as u16)
            } else {
                Err(Error::invalid(format!("masks.mgt1: {v} is not an instance id")))
            }
        })
        .collect::<Result<Vec<u16>>>()?;
    let tracks = load_tracks(&dir.join("tracks.trk1"))
        .map_err(in_file("tracks.trk1"))?
        .tracks;
    if tracks.t != t {
        return Err(Error::invalid(format!(
            "tracks.trk1: {} frames, clip has {t}",
            tracks.t
        )));
    }
    Ok(ClipSample {
        clip,
        masks,
        tracks,
        spec,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub clips: Vec<ClipSample>,
}

/// Generate and write every clip; the manifest goes last.
pub fn write_dataset(root: &Path, cfg: &GenConfig) -> Result<Manifest> {
    fs::create_dir_all(root)?;
    let make = |i: usize| -> Result<ManifestEntry> {
        let (seed, sample) = generate_clip(cfg, i).map_err(|e| e.in_clip(clip_name(i)))?;
        save_clip(&root.join(clip_name(i)), &sample).map_err(|e| e.in_clip(clip_name(i)))?;
        Ok(ManifestEntry {
            name: clip_name(i),
            seed,
            invisible_fraction: invisible_fraction(&sample),
        })
    };
    #[cfg(feature = "parallel")]
    let clips: Vec<Result<ManifestEntry>> = {
        use rayon::prelude::*;
        (0..cfg.n_clips).into_par_iter().map(make).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let clips: Vec<Result<ManifestEntry>> = (0..cfg.n_clips).map(make).collect();
    let manifest = Manifest {
        dataset_seed: cfg.seed,
        clips: clips.into_iter().collect::<Result<_>>()?,
    };
    write_atomic(&root.join("gen.cfg"), cfg.to_cfg().as_bytes())?;
    write_atomic(&root.join("manifest.cfg"), manifest.to_cfg().as_bytes())?;
    Ok(manifest)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(root.join("manifest.cfg"))
        .map_err(|e| Error::invalid(format!("{}: {e}", root.join("manifest.cfg").display())))?;
    let manifest = Manifest::parse(&text)?;
    let clips = manifest
        .clips
        .iter()
        .map(|c| load_clip(&root.join(&c.name), &c.name).map_err(|e| e.in_clip(&c.name)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        clips,
    })
}
