//! Flat `key = value` configuration with typed, range-checked keys.
//!
//! Every consumer takes the keys it understands out of a [`KvMap`] and then
//! calls [`KvMap::finish`], which rejects whatever is left over.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::{LossDirection, LossOptions};
use crate::model::ModelDims;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    /// Parse `key = value` lines; `#` starts a comment. Duplicate keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::config("", format!("line {}: empty key", lineno + 1)));
            }
            if map.entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::config(k, format!("line {}: duplicate key", lineno + 1)));
            }
        }
        Ok(map)
    }

    /// Set or replace a key, as done by command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn take_parsed<T: FromStr>(&mut self, key: &str, default: T, what: &str) -> Result<T> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::config(key, format!("`{v}` is not {what}"))),
        }
    }

    /// A number that must lie in `[lo, hi]` (or `[lo, hi)` when `open_hi`).
    pub fn take_num<T>(&mut self, key: &str, default: T, lo: T, hi: T, open_hi: bool) -> Result<T>
    where
        T: FromStr + PartialOrd + Display + Copy,
    {
        let v = self.take_parsed(key, default, "a number")?;
        let ok = v >= lo && if open_hi { v < hi } else { v <= hi };
        if !ok {
            let close = if open_hi { ')' } else { ']' };
            return Err(Error::config(
                key,
                format!("{v} outside legal range [{lo}, {hi}{close}"),
            ));
        }
        Ok(v)
    }

    /// A strictly positive finite float.
    pub fn take_positive(&mut self, key: &str, default: f32) -> Result<f32> {
        let v: f32 = self.take_parsed(key, default, "a number")?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config(key, format!("{v} outside legal range (0, inf)")));
        }
        Ok(v)
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.entries.remove(key).as_deref() {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::config(key, format!("`{v}` is not one of true, false"))),
        }
    }

    pub fn take_choice(&mut self, key: &str, default: &str, choices: &[&str]) -> Result<String> {
        let v = self.entries.remove(key).unwrap_or_else(|| default.to_string());
        if !choices.contains(&v.as_str()) {
            return Err(Error::config(
                key,
                format!("`{v}` is not one of {}", choices.join(", ")),
            ));
        }
        Ok(v)
    }

    pub fn take_string(&mut self, key: &str, default: &str) -> String {
        self.entries.remove(key).unwrap_or_else(|| default.to_string())
    }

    /// Unknown keys are errors, not warnings.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::config(k, "unknown key")),
        }
    }
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub d_e: usize,
    pub h_dim: usize,
    pub d: usize,
    pub prototypes: usize,
    pub grid_size: usize,
    pub frames_per_clip: usize,
    pub clip_seconds: f32,
    pub crop_min: f32,
    pub crop_max: f32,
    pub track_after_crop: bool,
    pub mask_ratio: f32,
    pub eps: f32,
    pub tol: f32,
    pub sinkhorn_iters: u32,
    pub tau: f32,
    pub visible_only: bool,
    pub loss_direction: LossDirection,
    pub lr_head: f32,
    pub lr_backbone: f32,
    pub weight_decay: f32,
    pub epochs: u32,
    pub batch_size: usize,
    pub ema_momentum: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 4,
            channels: 3,
            d_e: 32,
            h_dim: 64,
            d: 16,
            prototypes: 100,
            grid_size: 16,
            frames_per_clip: 12,
            clip_seconds: 3.2,
            crop_min: 0.4,
            crop_max: 1.0,
            track_after_crop: true,
            mask_ratio: 0.10,
            eps: 0.05,
            tol: 1e-6,
            sinkhorn_iters: 100,
            tau: 0.1,
            visible_only: true,
            loss_direction: LossDirection::StudentAllFrames,
            lr_head: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 0.04,
            epochs: 1,
            batch_size: 8,
            ema_momentum: 0.99,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            patch_size: self.patch_size,
            channels: self.channels,
            d_e: self.d_e,
            h_dim: self.h_dim,
            d: self.d,
            k: self.prototypes,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            tau: self.tau,
            visible_only: self.visible_only,
            direction: self.loss_direction,
        }
    }

    /// Consume the training keys of `map`, falling back to defaults.
    pub fn take_from(map: &mut KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        let direction = map.take_choice(
            "loss_direction",
            d.loss_direction.name(),
            &["student_all_frames", "student_t0_only"],
        )?;
        let cfg = TrainConfig {
            patch_size: map.take_num("patch_size", d.patch_size, 1, 64, false)?,
            channels: map.take_num("channels", d.channels, 1, 16, false)?,
            d_e: map.take_num("d_e", d.d_e, 1, 1024, false)?,
            h_dim: map.take_num("h_dim", d.h_dim, 1, 4096, false)?,
            d: map.take_num("d", d.d, 1, 1024, false)?,
            prototypes: map.take_num("prototypes", d.prototypes, 2, 65535, false)?,
            grid_size: map.take_num("grid_size", d.grid_size, 1, 256, false)?,
            frames_per_clip: map.take_num("frames_per_clip", d.frames_per_clip, 1, 1024, false)?,
            clip_seconds: map.take_positive("clip_seconds", d.clip_seconds)?,
            crop_min: map.take_num("crop_min", d.crop_min, f32::MIN_POSITIVE, 1.0, false)?,
            crop_max: map.take_num("crop_max", d.crop_max, f32::MIN_POSITIVE, 1.0, false)?,
            track_after_crop: map.take_bool("track_after_crop", d.track_after_crop)?,
            mask_ratio: map.take_num("mask_ratio", d.mask_ratio, 0.0, 1.0, true)?,
            eps: map.take_positive("eps", d.eps)?,
            tol: map.take_positive("tol", d.tol)?,
            sinkhorn_iters: map.take_num("sinkhorn_iters", d.sinkhorn_iters, 1, 1_000_000, false)?,
            tau: map.take_positive("tau", d.tau)?,
            visible_only: map.take_bool("visible_only", d.visible_only)?,
            loss_direction: LossDirection::parse(&direction).expect("validated choice"),
            lr_head: map.take_num("lr_head", d.lr_head, 0.0, 10.0, false)?,
            lr_backbone: map.take_num("lr_backbone", d.lr_backbone, 0.0, 10.0, false)?,
            weight_decay: map.take_num("weight_decay", d.weight_decay, 0.0, 1.0, false)?,
            epochs: map.take_num("epochs", d.epochs, 0, 1_000_000, false)?,
            batch_size: map.take_num("batch_size", d.batch_size, 1, 4096, false)?,
            ema_momentum: map.take_num("ema_momentum", d.ema_momentum, 0.0, 1.0, false)?,
            seed: map.take_num("seed", d.seed, 0, u64::MAX, false)?,
        };
        if cfg.crop_min > cfg.crop_max {
            return Err(Error::config(
                "crop_min",
                format!("{} exceeds crop_max {}", cfg.crop_min, cfg.crop_max),
            ));
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = KvMap::parse(text)?;
        let cfg = TrainConfig::take_from(&mut map)?;
        map.finish()?;
        Ok(cfg)
    }

    /// Canonical text: every key, sorted, one per line.
    pub fn to_cfg(&self) -> String {
        let mut kv: Vec<(&str, String)> = vec![
            ("batch_size", self.batch_size.to_string()),
            ("channels", self.channels.to_string()),
            ("clip_seconds", self.clip_seconds.to_string()),
            ("crop_max", self.crop_max.to_string()),
            ("crop_min", self.crop_min.to_string()),
            ("d", self.d.to_string()),
            ("d_e", self.d_e.to_string()),
            ("ema_momentum", self.ema_momentum.to_string()),
            ("epochs", self.epochs.to_string()),
            ("eps", self.eps.to_string()),
            ("frames_per_clip", self.frames_per_clip.to_string()),
            ("grid_size", self.grid_size.to_string()),
            ("h_dim", self.h_dim.to_string()),
            ("loss_direction", self.loss_direction.name().to_string()),
            ("lr_backbone", self.lr_backbone.to_string()),
            ("lr_head", self.lr_head.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("prototypes", self.prototypes.to_string()),
            ("seed", self.seed.to_string()),
            ("sinkhorn_iters", self.sinkhorn_iters.to_string()),
            ("tau", self.tau.to_string()),
            ("tol", self.tol.to_string()),
            ("track_after_crop", self.track_after_crop.to_string()),
            ("visible_only", self.visible_only.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
        ];
        kv.sort_by(|a, b| a.0.cmp(b.0));
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.mask_ratio, c.grid_size, c.prototypes, c.frames_per_clip),
            (0.10, 16, 100, 12)
        );
        assert_eq!((c.clip_seconds, c.crop_min, c.crop_max), (3.2, 0.4, 1.0));
        assert_eq!((c.lr_head, c.lr_backbone, c.ema_momentum), (1e-4, 1e-5, 0.99));
    }

    #[test]
    fn canonical_text_round_trips() {
        let c = TrainConfig {
            tau: 0.07,
            loss_direction: LossDirection::StudentT0Only,
            seed: 12345678901,
            ..TrainConfig::default()
        };
        let text = c.to_cfg();
        assert_eq!(TrainConfig::parse(&text).unwrap(), c);
        assert_eq!(TrainConfig::parse(&text).unwrap().to_cfg(), text);
    }

    #[test]
    fn rejects_unknown_and_out_of_range() {
        let err = TrainConfig::parse("mask_ration = 0.1").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "mask_ration"));
        let err = TrainConfig::parse("mask_ratio = 1.0").unwrap_err();
        assert!(err.to_string().contains("mask_ratio") && err.to_string().contains("[0, 1)"));
        assert!(TrainConfig::parse("prototypes = 1").is_err());
        assert!(TrainConfig::parse("eps = 0").is_err());
        assert!(TrainConfig::parse("crop_min = 0.8\ncrop_max = 0.5").is_err());
        assert!(TrainConfig::parse("loss_direction = sideways").is_err());
        assert!(TrainConfig::parse("tau = 0.1\ntau = 0.2").is_err());
        assert!(TrainConfig::parse("just words").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = TrainConfig::parse("# run\n\nepochs = 3 # short\n").unwrap();
        assert_eq!(c.epochs, 3);
    }
}
