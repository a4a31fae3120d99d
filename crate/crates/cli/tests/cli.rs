use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mosic_core::dataset::Manifest;
use tempfile::TempDir;

const GEN: &[&str] = &[
    "--n_clips=3",
    "--height=32",
    "--width=32",
    "--frames=4",
    "--grid_size=4",
    "--seed=7",
];
const TRAIN: &[&str] = &[
    "--grid_size=4",
    "--frames_per_clip=3",
    "--batch_size=2",
    "--prototypes=6",
    "--d_e=8",
    "--h_dim=12",
    "--d=6",
    "--lr_head=0.01",
    "--lr_backbone=0.003",
];

fn mosic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mosic"))
        .args(args)
        .output()
        .expect("spawn mosic")
}

fn ok(args: &[&str]) -> Output {
    let out = mosic(args);
    assert!(
        out.status.success(),
        "mosic {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_data(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--out", p(dir)];
    args.extend_from_slice(GEN);
    args.extend_from_slice(extra);
    ok(&args);
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(TRAIN);
    args.extend_from_slice(extra);
    mosic(&args)
}

/// Relative path and bytes of every file below `root`, sorted.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, acc: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, acc);
            } else {
                acc.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    let mut acc = Vec::new();
    walk(root, root, &mut acc);
    acc.sort();
    acc
}

#[test]
fn gen_data_is_deterministic_and_guards_output() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_data(&a, &[]);
    gen_data(&b, &[]);
    let snap = snapshot(&a);
    assert!(snap.iter().any(|(p, _)| p.ends_with("clip_002/tracks.trk1")));
    assert_eq!(snap, snapshot(&b));

    let mut again = vec!["gen-data", "--out", p(&a)];
    again.extend_from_slice(GEN);
    assert_eq!(mosic(&again).status.code(), Some(2));
    again.push("--force");
    ok(&again);
    assert_eq!(snap, snapshot(&a));
}

#[test]
fn occlusion_rate_raises_invisible_fraction() {
    let tmp = TempDir::new().unwrap();
    let fraction = |rate: &str| {
        let dir = tmp.path().join(rate);
        gen_data(
            &dir,
            &[&format!("--occlusion_rate={rate}"), "--n_clips=6", "--frames=8"],
        );
        Manifest::parse(&fs::read_to_string(dir.join("manifest.cfg")).unwrap())
            .unwrap()
            .mean_invisible_fraction()
    };
    let (low, high) = (fraction("0"), fraction("1"));
    assert!(high > low, "high {high} low {low}");
}

#[test]
fn train_writes_metrics_and_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_data(&data, &[]);
    let out = train(&data, &run, &["--epochs=2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        p(&run.join("epoch_002.mck1"))
    );

    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("step,name,value,walltime"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // 3 clips at batch 2 is 2 steps per epoch, 4 series per step
    assert_eq!(rows.len(), 2 * 2 * 4);
    assert!(rows.iter().all(|r| r.len() == 4 && r[3] == "0.000"));
    let names: Vec<&str> = rows[..4].iter().map(|r| r[1]).collect();
    assert_eq!(names, ["loss", "lr_head", "lr_backbone", "visible_fraction"]);
    assert_eq!(rows.last().unwrap()[0], "3");

    for e in 0..=2 {
        assert!(run.join(format!("epoch_{e:03}.mck1")).exists());
    }
    assert!(run.join("config.cfg").exists());
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_data(&data, &[]);
    assert!(train(&data, &run, &["--epochs=0"]).status.success());
    let ckpts: Vec<_> = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".mck1"))
        .collect();
    assert_eq!(ckpts, ["epoch_000.mck1"]);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, &[]);
    let (full, resumed) = (tmp.path().join("full"), tmp.path().join("resumed"));
    assert!(train(&data, &full, &["--epochs=2"]).status.success());

    // pick up the 2-epoch run as if it had stopped after its first epoch
    let resume = full.join("epoch_001.mck1");
    let out = mosic(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&resumed),
        "--resume",
        p(&resume),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(full.join("epoch_002.mck1")).unwrap(),
        fs::read(resumed.join("epoch_002.mck1")).unwrap()
    );
    let full_metrics = fs::read_to_string(full.join("metrics.csv")).unwrap();
    let resumed_metrics = fs::read_to_string(resumed.join("metrics.csv")).unwrap();
    let tail: Vec<&str> = full_metrics.lines().skip(1 + 2 * 4).collect();
    assert_eq!(resumed_metrics.lines().skip(1).collect::<Vec<_>>(), tail);

    let bad = mosic(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&resumed),
        "--resume",
        p(&resume),
        "--lr_head=1",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(
        mosic(&["gen-data", "--out", p(&data), "--no_such_key=1"]).status.code(),
        Some(2)
    );
    assert_eq!(
        mosic(&["gen-data", "--out", p(&data), "--noise=9"]).status.code(),
        Some(2)
    );
    assert_eq!(mosic(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        train(&tmp.path().join("missing"), &tmp.path().join("run"), &[])
            .status
            .code(),
        Some(3)
    );
    let junk = tmp.path().join("junk.bin");
    fs::write(&junk, b"nope").unwrap();
    assert_eq!(mosic(&["inspect", p(&junk)]).status.code(), Some(3));
}

#[test]
fn corrupt_clip_names_clip_and_offset() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data, &[]);
    let frames = data.join("clip_001").join("frames.mgt1");
    let bytes = fs::read(&frames).unwrap();
    fs::write(&frames, &bytes[..bytes.len() / 2]).unwrap();
    let out = train(&data, &tmp.path().join("run"), &[]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("clip_001") && err.contains("byte"), "{err}");
}

#[test]
fn eval_writes_report_and_maps() {
    let tmp = TempDir::new().unwrap();
    let (data, run, ev) = (tmp.path().join("data"), tmp.path().join("run"), tmp.path().join("eval"));
    gen_data(&data, &["--n_clips=4"]);
    assert!(train(&data, &run, &["--epochs=0"]).status.success());
    let ckpt = run.join("epoch_000.mck1");
    ok(&[
        "eval",
        "--data",
        p(&data),
        "--out",
        p(&ev),
        "--checkpoint",
        p(&ckpt),
        "--k_over=4",
        "--k_over_dataset=8",
        "--retrieval_k=5",
        "--probe_epochs=2",
    ]);
    let report = fs::read_to_string(ev.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("protocol,granularity,k,metric,value"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    for (protocol, g) in [
        ("cluster", "F"),
        ("cluster", "C"),
        ("cluster", "D"),
        ("overcluster", "D"),
    ] {
        let row = rows
            .iter()
            .find(|r| r[0] == protocol && r[1] == g && r[3] == "miou")
            .unwrap_or_else(|| panic!("missing {protocol} {g}"));
        let v: f64 = row[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(rows.iter().any(|r| r[0] == "retrieval"));
    assert!(rows.iter().any(|r| r[0] == "probe"));

    let ppm = fs::read(ev.join("maps").join("clip_000").join("frame_000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert_eq!(ppm.len(), b"P6\n32 32\n255\n".len() + 32 * 32 * 3);

    let again = mosic(&["eval", "--data", p(&data), "--out", p(&ev), "--checkpoint", p(&ckpt)]);
    assert_eq!(again.status.code(), Some(2));
    let big = mosic(&[
        "eval",
        "--data",
        p(&data),
        "--out",
        p(&tmp.path().join("e2")),
        "--checkpoint",
        p(&ckpt),
        "--k_over=1000",
    ]);
    assert_eq!(big.status.code(), Some(2));
}

#[test]
fn inspect_and_tracks_import() {
    let tmp = TempDir::new().unwrap();
    let (data, other) = (tmp.path().join("data"), tmp.path().join("other"));
    gen_data(&data, &[]);
    gen_data(&other, &["--frames=6"]);
    let clip = data.join("clip_000");
    for (file, header) in [("frames.mgt1", "MGT1"), ("tracks.trk1", "TRK1")] {
        let out = ok(&["inspect", p(&clip.join(file))]);
        assert!(String::from_utf8_lossy(&out.stdout).starts_with(header));
    }
    let run = tmp.path().join("run");
    assert!(train(&data, &run, &["--epochs=0"]).status.success());
    let out = ok(&["inspect", p(&run.join("epoch_000.mck1"))]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("teacher.mixer.weight"));

    let tracks = clip.join("tracks.trk1");
    ok(&["tracks-import", p(&tracks), "--into", p(&data.join("clip_001"))]);
    let mismatch = mosic(&["tracks-import", p(&tracks), "--into", p(&other.join("clip_000"))]);
    assert_eq!(mismatch.status.code(), Some(3));
}
