use std::fs;
use std::path::{Path, PathBuf};

use mosic_core::checkpoint::load_checkpoint;
use mosic_core::config::KvMap;
use mosic_core::dataset::{load_dataset, Dataset};
use mosic_core::eval::{
    cluster_eval, dense_nn_retrieval, linear_probe, miou, ClusterEvalConfig, EvalClip, Granularity, MemoryBank,
    ProbeConfig,
};
use mosic_core::grid::FeatureGrid;
use mosic_core::tensor_io::load_mgt1;
use mosic_core::train::{eval_clip, eval_clip_from_grids};
use mosic_core::viz::save_cluster_map;
use mosic_core::Error;

use crate::commands::prepare_out;
use crate::error::CliError;
use crate::metrics::{num, Table, REPORT_HEADER};

pub enum Source {
    Checkpoint(PathBuf),
    Features(PathBuf),
}

const PROTOCOLS: [&str; 4] = ["cluster", "overcluster", "retrieval", "probe"];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub protocols: Vec<String>,
    pub granularities: Vec<Granularity>,
    /// Over-clustering K at frame and clip scope.
    pub k_over: usize,
    /// Over-clustering K at dataset scope.
    pub k_over_dataset: usize,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub retrieval_k: usize,
    pub tau_nn: f32,
    /// Share of clips (taken from the end) held out as queries / validation.
    pub val_fraction: f32,
    pub probe: ProbeConfig,
    pub maps: bool,
    pub map_granularity: Granularity,
    pub palette_seed: u64,
}

impl EvalConfig {
    pub fn take_from(map: &mut KvMap) -> Result<Self, CliError> {
        let list = |raw: String| -> Vec<String> {
            raw.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        };
        let protocols = list(map.take_string("protocols", &PROTOCOLS.join(",")));
        if let Some(bad) = protocols.iter().find(|p| !PROTOCOLS.contains(&p.as_str())) {
            return Err(Error::config("protocols", format!("`{bad}` is not one of {}", PROTOCOLS.join(", "))).into());
        }
        let granularity = |key: &str, raw: &str| {
            Granularity::parse(raw).ok_or_else(|| Error::config(key, format!("`{raw}` is not one of F, C, D")))
        };
        let granularities = list(map.take_string("granularities", "F,C,D"))
            .iter()
            .map(|g| granularity("granularities", g))
            .collect::<Result<Vec<_>, _>>()?;
        let d = ProbeConfig::default();
        let cfg = EvalConfig {
            protocols,
            granularities,
            k_over: map.take_num("k_over", 10, 1, 65_535, false)?,
            k_over_dataset: map.take_num("k_over_dataset", 32, 1, 65_535, false)?,
            seed: map.take_num("eval_seed", 0, 0, u64::MAX, false)?,
            kmeans_iters: map.take_num("kmeans_iters", 100, 1, 100_000, false)?,
            retrieval_k: map.take_num("retrieval_k", 30, 1, 1_000_000, false)?,
            tau_nn: map.take_positive("tau_nn", 0.1)?,
            val_fraction: map.take_num("val_fraction", 0.25, 0.0, 1.0, true)?,
            probe: ProbeConfig {
                epochs: map.take_num("probe_epochs", d.epochs, 1, 10_000, false)?,
                lr: map.take_num("probe_lr", d.lr, 0.0, 10.0, false)?,
                momentum: map.take_num("probe_momentum", d.momentum, 0.0, 1.0, true)?,
                weight_decay: map.take_num("probe_weight_decay", d.weight_decay, 0.0, 1.0, false)?,
                batch_size: map.take_num("probe_batch_size", d.batch_size, 1, 1_000_000, false)?,
                seed: map.take_num("probe_seed", d.seed, 0, u64::MAX, false)?,
            },
            maps: map.take_bool("maps", true)?,
            map_granularity: granularity("map_granularity", &map.take_string("map_granularity", "C"))?,
            palette_seed: map.take_num("palette_seed", 0, 0, u64::MAX, false)?,
        };
        if cfg.granularities.is_empty() && cfg.protocols.iter().any(|p| p.contains("cluster")) {
            return Err(Error::config("granularities", "clustering protocols need at least one of F, C, D").into());
        }
        Ok(cfg)
    }

    fn over_k(&self, g: Granularity) -> usize {
        match g {
            Granularity::Dataset => self.k_over_dataset,
            _ => self.k_over,
        }
    }

    fn wants(&self, protocol: &str) -> bool {
        self.protocols.iter().any(|p| p == protocol)
    }
}

/// Features of an external dump: one `[T, rows, cols, d]` tensor per clip.
fn external_clip(sample: &mosic_core::scene::ClipSample, path: &Path) -> Result<EvalClip, Error> {
    let t = load_mgt1(path)?;
    let [frames, rows, cols, dim] = t.dims[..] else {
        return Err(Error::format(
            5,
            format!(
                "{}: expected rank 4 [T, rows, cols, d], got {:?}",
                path.display(),
                t.dims
            ),
        ));
    };
    if frames != sample.clip.t || rows == 0 || !sample.clip.h.is_multiple_of(rows) {
        return Err(Error::invalid(format!(
            "{}: {frames} frames of {rows}x{cols} do not fit clip {} ({} frames, {}x{})",
            path.display(),
            sample.clip.clip_id,
            sample.clip.t,
            sample.clip.h,
            sample.clip.w
        )));
    }
    let per = rows * cols * dim;
    let grids = (0..frames)
        .map(|f| {
            FeatureGrid::new(
                t.data[f * per..(f + 1) * per].to_vec(),
                rows,
                cols,
                dim,
                sample.clip.h / rows,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    eval_clip_from_grids(sample, &grids)
}

fn features(data: &Dataset, source: &Source) -> Result<Vec<EvalClip>, CliError> {
    match source {
        Source::Checkpoint(path) => {
            let state = load_checkpoint(path)?;
            Ok(data
                .clips
                .iter()
                .map(|s| eval_clip(&state.teacher, s).map_err(|e| e.in_clip(&s.clip.clip_id)))
                .collect::<Result<_, _>>()?)
        }
        Source::Features(manifest) => {
            let text = fs::read_to_string(manifest)?;
            let mut map = KvMap::parse(&text)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let clips = data
                .clips
                .iter()
                .map(|s| {
                    let id = &s.clip.clip_id;
                    let file = map
                        .take_raw(id)
                        .ok_or_else(|| Error::config(id.clone(), "missing from feature manifest"))?;
                    external_clip(s, &base.join(file)).map_err(|e| e.in_clip(id))
                })
                .collect::<Result<Vec<_>, Error>>()?;
            map.finish()?;
            Ok(clips)
        }
    }
}

pub fn eval(mut map: KvMap, data_dir: &Path, out: &Path, source: &Source, force: bool) -> Result<(), CliError> {
    let cfg = EvalConfig::take_from(&mut map)?;
    map.finish()?;
    prepare_out(out, force, |n| n == "report.csv" || n == "maps")?;
    let data = load_dataset(data_dir)?;
    let clips = features(&data, source)?;
    let rows = run_protocols(&cfg, &clips)?;
    let mut table = Table::open(&out.join("report.csv"), &REPORT_HEADER, false)?;
    for r in &rows {
        table.row(&r.fields())?;
    }
    table.finish()?;

    if cfg.maps {
        let report = cluster_eval(&clips, &cluster_cfg(&cfg, cfg.map_granularity, None))?;
        for (c, (sample, maps)) in data.clips.iter().zip(&report.clusters).enumerate() {
            let dir = out.join("maps").join(&sample.clip.clip_id);
            fs::create_dir_all(&dir)?;
            for (f, ids) in maps.iter().enumerate() {
                // colour 0 marks skipped (background-only) scopes
                let ids: Vec<u32> = ids.iter().map(|&i| i.wrapping_add(1)).collect();
                let path = dir.join(format!("frame_{f:03}.ppm"));
                save_cluster_map(
                    &path,
                    &ids,
                    clips[c].rows,
                    clips[c].cols,
                    sample.clip.h,
                    sample.clip.w,
                    cfg.palette_seed,
                )?;
            }
        }
    }
    for r in &rows {
        println!("{}", r.fields().join(" "));
    }
    Ok(())
}

pub struct ReportRow {
    pub protocol: &'static str,
    pub granularity: String,
    pub k: String,
    pub metric: &'static str,
    pub value: f64,
}

impl ReportRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.protocol.to_string(),
            self.granularity.clone(),
            self.k.clone(),
            self.metric.to_string(),
            num(self.value),
        ]
    }
}

fn cluster_cfg(cfg: &EvalConfig, g: Granularity, k: Option<usize>) -> ClusterEvalConfig {
    ClusterEvalConfig {
        granularity: g,
        k,
        seed: cfg.seed,
        max_iters: cfg.kmeans_iters,
    }
}

/// Every requested protocol, in a fixed order.
pub fn run_protocols(cfg: &EvalConfig, clips: &[EvalClip]) -> Result<Vec<ReportRow>, CliError> {
    let mut rows = Vec::new();
    let cells = clips.first().map_or(0, |c| c.cells());
    for (protocol, over) in [("cluster", false), ("overcluster", true)] {
        if !cfg.wants(protocol) {
            continue;
        }
        for &g in &cfg.granularities {
            let k = over.then(|| cfg.over_k(g));
            if let Some(k) = k {
                let pool = match g {
                    Granularity::Frame => cells,
                    Granularity::Clip => clips.iter().map(|c| c.cells() * c.frames.len()).min().unwrap_or(0),
                    Granularity::Dataset => clips.iter().map(|c| c.cells() * c.frames.len()).sum(),
                };
                if k > pool {
                    let key = if g == Granularity::Dataset {
                        "k_over_dataset"
                    } else {
                        "k_over"
                    };
                    return Err(Error::config(
                        key,
                        format!("{k} clusters exceed the {pool} cells of a {} scope", g.letter()),
                    )
                    .into());
                }
            }
            let r = cluster_eval(clips, &cluster_cfg(cfg, g, k))?;
            let kname = k.map_or("gt".to_string(), |k| k.to_string());
            for (metric, value) in [("miou", r.miou as f64), ("skipped_scopes", r.skipped as f64)] {
                rows.push(ReportRow {
                    protocol,
                    granularity: g.letter().to_string(),
                    k: kname.clone(),
                    metric,
                    value,
                });
            }
        }
    }

    let needs_split = cfg.wants("retrieval") || cfg.wants("probe");
    if !needs_split {
        return Ok(rows);
    }
    let n_val = ((clips.len() as f64 * cfg.val_fraction as f64).ceil() as usize).max(1);
    if n_val >= clips.len() {
        return Err(Error::config(
            "val_fraction",
            format!(
                "holding out {n_val} of {} clips leaves nothing to train on",
                clips.len()
            ),
        )
        .into());
    }
    let (train, val) = clips.split_at(clips.len() - n_val);
    if cfg.wants("retrieval") {
        let bank = MemoryBank::from_clips(train)?;
        if cfg.retrieval_k > bank.len() {
            return Err(Error::config(
                "retrieval_k",
                format!("{} exceeds the {} bank rows", cfg.retrieval_k, bank.len()),
            )
            .into());
        }
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for f in val.iter().flat_map(|c| &c.frames) {
            pred.extend(dense_nn_retrieval(&bank, &f.features, cfg.retrieval_k, cfg.tau_nn)?);
            gt.extend_from_slice(&f.labels);
        }
        let m = miou(&pred, &gt, Some, None)?;
        rows.push(ReportRow {
            protocol: "retrieval",
            granularity: "-".into(),
            k: cfg.retrieval_k.to_string(),
            metric: "miou",
            value: m.miou as f64,
        });
    }
    if cfg.wants("probe") {
        let r = linear_probe(train, val, &cfg.probe)?;
        for (metric, value) in [("miou", r.miou.miou as f64), ("train_loss", r.final_train_loss)] {
            rows.push(ReportRow {
                protocol: "probe",
                granularity: "-".into(),
                k: "-".into(),
                metric,
                value,
            });
        }
    }
    Ok(rows)
}
