use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mosic_core::checkpoint::{decode_checkpoint, load_checkpoint, save_checkpoint, MCK1_MAGIC};
use mosic_core::config::{KvMap, TrainConfig};
use mosic_core::dataset::{load_dataset, write_dataset, GenConfig};
use mosic_core::gradcheck::{grad_check as run_grad_check, GradCheckConfig};
use mosic_core::model::BLOCK_NAMES;
use mosic_core::tensor_io::{decode_mgt1, write_atomic, MGT1_MAGIC};
use mosic_core::track_file::{decode_tracks, TRK1_MAGIC};
use mosic_core::train::ModelState;
use mosic_core::Error;

use crate::error::CliError;
use crate::metrics::{num, Table, METRICS_HEADER};

/// Config file (if any) with command-line overrides applied on top.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<KvMap, CliError> {
    let mut map = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            KvMap::parse(&text)?
        }
        None => KvMap::default(),
    };
    for (k, v) in overrides {
        map.set(k, v);
    }
    Ok(map)
}

/// Make sure `out` exists and is empty. With `force`, entries accepted by
/// `ours` are removed first; anything else still blocks.
pub fn prepare_out(out: &Path, force: bool, ours: impl Fn(&str) -> bool) -> Result<(), CliError> {
    if out.exists() {
        let mut foreign = Vec::new();
        let mut owned = Vec::new();
        for entry in fs::read_dir(out)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if ours(&name) {
                owned.push(entry.path());
            } else {
                foreign.push(name);
            }
        }
        if !foreign.is_empty() || (!owned.is_empty() && !force) {
            let hint = if foreign.is_empty() {
                "; pass --force to overwrite"
            } else {
                ""
            };
            return Err(CliError::Usage(format!(
                "output directory {} is not empty{hint}",
                out.display()
            )));
        }
        for p in owned {
            if p.is_dir() {
                fs::remove_dir_all(p)?;
            } else {
                fs::remove_file(p)?;
            }
        }
    }
    fs::create_dir_all(out)?;
    Ok(())
}

pub fn gen_data(mut map: KvMap, out: &Path, force: bool) -> Result<(), CliError> {
    let cfg = GenConfig::take_from(&mut map)?;
    map.finish()?;
    prepare_out(out, force, |n| {
        n.starts_with("clip_") || n == "gen.cfg" || n == "manifest.cfg"
    })?;
    let manifest = write_dataset(out, &cfg)?;
    println!(
        "wrote {} clips to {} (mean invisible fraction {:.4})",
        manifest.clips.len(),
        out.display(),
        manifest.mean_invisible_fraction()
    );
    Ok(())
}

pub struct TrainOpts {
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub force: bool,
    pub walltime: bool,
}

pub fn checkpoint_name(epoch: u32) -> String {
    format!("epoch_{epoch:03}.mck1")
}

pub fn train(mut map: KvMap, opts: &TrainOpts) -> Result<(), CliError> {
    let mut state = match &opts.resume {
        Some(path) => {
            let mut state = load_checkpoint(path)?;
            let epochs = map.take_num("epochs", state.config.epochs, 0, 1_000_000, false)?;
            if let Err(Error::Config { key, .. }) = map.finish() {
                return Err(Error::config(key, "only `epochs` may change when resuming").into());
            }
            state.config.epochs = epochs;
            fs::create_dir_all(&opts.out)?;
            state
        }
        None => {
            let cfg = TrainConfig::take_from(&mut map)?;
            map.finish()?;
            prepare_out(&opts.out, opts.force, |n| {
                n.ends_with(".mck1") || n == "metrics.csv" || n == "config.cfg"
            })?;
            ModelState::new(cfg)?
        }
    };
    let dataset = load_dataset(&opts.data)?;
    if dataset.clips.is_empty() {
        return Err(Error::invalid("dataset has no clips").into());
    }
    write_atomic(&opts.out.join("config.cfg"), state.config.to_cfg().as_bytes())?;
    let mut last = opts.out.join(checkpoint_name(state.epoch));
    if opts.resume.is_none() {
        save_checkpoint(&last, &state)?;
    }

    let start = Instant::now();
    let mut table = Table::open(&opts.out.join("metrics.csv"), &METRICS_HEADER, opts.resume.is_some())?;
    let total = state.steps_per_epoch(dataset.clips.len()) * state.config.epochs as u64;
    while state.epoch < state.config.epochs {
        let mut rows = Vec::new();
        state.train_epoch(&dataset.clips, total, |r| {
            let wall = if opts.walltime {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            for (name, value) in [
                ("loss", r.loss.loss as f64),
                ("lr_head", r.lr_head),
                ("lr_backbone", r.lr_backbone),
                ("visible_fraction", r.visible_fraction),
            ] {
                rows.push([r.step.to_string(), name.to_string(), num(value), format!("{wall:.3}")]);
            }
        })?;
        for row in &rows {
            table.row(row)?;
        }
        last = opts.out.join(checkpoint_name(state.epoch));
        save_checkpoint(&last, &state)?;
        let losses: Vec<f64> = rows
            .iter()
            .filter(|r| r[1] == "loss")
            .map(|r| r[2].parse().unwrap_or(0.0))
            .collect();
        eprintln!(
            "epoch {}: {} steps, mean loss {:.4}",
            state.epoch,
            losses.len(),
            losses.iter().sum::<f64>() / losses.len().max(1) as f64
        );
    }
    table.finish()?;
    println!("{}", last.display());
    Ok(())
}

pub fn grad_check(mut map: KvMap) -> Result<(), CliError> {
    let cfg = GradCheckConfig::take_from(&mut map)?;
    map.finish()?;
    let started = Instant::now();
    let report = run_grad_check(&cfg, cfg.train.seed)?;
    println!(
        "{:<20} {:>12} {:>14} {:>14}",
        "block", "max rel err", "analytic", "numeric"
    );
    for b in &report.blocks {
        println!(
            "{:<20} {:>12.3e} {:>14.6e} {:>14.6e}",
            b.name, b.max_rel_error, b.analytic, b.numeric
        );
    }
    let worst = report.worst();
    println!(
        "worst {} {:.3e} (tol {:.0e}), {:.1}s",
        worst.name,
        worst.max_rel_error,
        report.tol,
        started.elapsed().as_secs_f64()
    );
    if !report.passed() {
        return Err(CliError::GradCheck(format!(
            "blocks over tolerance: {}",
            report.failing().join(", ")
        )));
    }
    Ok(())
}

struct Stats {
    min: f64,
    max: f64,
    mean: f64,
    std: f64,
    non_finite: usize,
}

fn stats(v: &[f32]) -> Stats {
    let finite: Vec<f64> = v.iter().filter(|x| x.is_finite()).map(|&x| x as f64).collect();
    let n = finite.len().max(1) as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Stats {
        min: finite.iter().cloned().fold(f64::INFINITY, f64::min),
        max: finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean,
        std: var.sqrt(),
        non_finite: v.len() - finite.len(),
    }
}

fn print_stats(name: &str, dims: &[usize], v: &[f32]) {
    let s = stats(v);
    println!(
        "{name:<28} {:<16} min {:>11.4e} max {:>11.4e} mean {:>11.4e} std {:>11.4e}{}",
        format!("{dims:?}"),
        s.min,
        s.max,
        s.mean,
        s.std,
        if s.non_finite > 0 {
            format!(" non-finite {}", s.non_finite)
        } else {
            String::new()
        }
    );
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let bytes = fs::read(path)?;
    match bytes.get(..4) {
        Some(m) if m == MGT1_MAGIC => {
            let t = decode_mgt1(&bytes)?;
            println!("MGT1 tensor, rank {}", t.dims.len());
            print_stats("values", &t.dims, &t.data);
        }
        Some(m) if m == TRK1_MAGIC => {
            let l = decode_tracks(&bytes)?;
            let tr = &l.tracks;
            let total = (tr.t * tr.n).max(1);
            println!("TRK1 tracks, T={} N={}", tr.t, tr.n);
            println!("visible fraction {:.4}", tr.visible_count() as f64 / total as f64);
            println!("never visible {}", l.never_visible);
        }
        Some(m) if m == MCK1_MAGIC => {
            let s = decode_checkpoint(&bytes)?;
            println!("MCK1 checkpoint, epoch {}, optimizer step {}", s.epoch, s.opt.step);
            for line in s.config.to_cfg().lines() {
                println!("  {line}");
            }
            for (role, p) in [("student", &s.student), ("teacher", &s.teacher)] {
                for (b, name) in BLOCK_NAMES.iter().enumerate() {
                    print_stats(&format!("{role}.{name}"), &p.dims.block_shape(b), &p.blocks[b]);
                }
            }
        }
        _ => {
            return Err(Error::format(0, format!("{}: not an MGT1, TRK1 or MCK1 file", path.display())).into());
        }
    }
    Ok(())
}

pub fn tracks_import(path: &Path, into: Option<&Path>) -> Result<(), CliError> {
    let bytes = fs::read(path)?;
    let loaded = decode_tracks(&bytes)?;
    let tr = &loaded.tracks;
    println!("T={} N={} visible points {}", tr.t, tr.n, tr.visible_count());
    if loaded.never_visible > 0 {
        eprintln!("warning: {} tracks are never visible", loaded.never_visible);
    }
    if let Some(dir) = into {
        let frames = decode_mgt1(&fs::read(dir.join("frames.mgt1"))?)?;
        if frames.dims.first() != Some(&tr.t) {
            return Err(Error::invalid(format!(
                "tracks have {} frames, clip {} has {:?}",
                tr.t,
                dir.display(),
                frames.dims.first()
            ))
            .into());
        }
        write_atomic(&dir.join("tracks.trk1"), &bytes)?;
        println!("installed into {}", dir.display());
    }
    Ok(())
}
