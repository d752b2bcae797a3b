use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn momatrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_momatrack"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = momatrack(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    let text = fs::read_to_string(path).unwrap();
    let mut it = text.lines();
    assert_eq!(it.next(), Some("#schema=1"));
    it.map(|l| serde_json::from_str(l).unwrap()).collect()
}

const TINY: [&str; 8] = [
    "--set",
    "model.channels=16",
    "--set",
    "train.epochs=2",
    "--set",
    "train.batch_size=16",
    "--set",
    "train.samples_per_epoch=32",
];

#[test]
fn simulate_writes_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["simulate", "--out", p(&a), "--seed", "5"]);
    ok(&["simulate", "--out", p(&b), "--seed", "5"]);
    for f in ["detections.jsonl", "ground_truth.jsonl"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(fs::read_dir(&a).unwrap().count(), 2);

    // Default: 10 scenes of 8 objects over 20 frames, minus late entries,
    // early exits and dropouts, plus false positives.
    let gt = lines(&a.join("ground_truth.jsonl"));
    let det = lines(&a.join("detections.jsonl"));
    assert!(
        gt.len() <= 10 * 8 * 20 && gt.len() > 10 * 8 * 20 / 2,
        "{}",
        gt.len()
    );
    let linked = gt
        .iter()
        .filter(|r| r.get("detection_id").is_some())
        .count();
    assert!(det.len() >= linked && det.len() < linked + 10 * 20 * 8);
    assert!(gt.iter().all(|r| r.get("track_id").is_some()));
    assert!(det.iter().all(|r| r.get("track_id").is_none()));

    let again = momatrack(&["simulate", "--out", p(&a), "--seed", "6"]);
    assert_eq!(code(&again), 1);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["simulate", "--out", p(&a), "--seed", "6", "--force"]);
    assert_ne!(
        fs::read(a.join("detections.jsonl")).unwrap(),
        fs::read(b.join("detections.jsonl")).unwrap()
    );
}

#[test]
fn invalid_configuration_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = momatrack(&[
        "simulate",
        "--out",
        p(dir.path()),
        "--set",
        "scene.p_dropout=2",
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("p_dropout"));

    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let out = momatrack(&["simulate", "--out", p(dir.path()), "--config", p(&cfg)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    assert_eq!(code(&momatrack(&["simulate"])), 1);
    assert_eq!(code(&momatrack(&["frobnicate"])), 1);
    assert_eq!(code(&momatrack(&["--help"])), 0);
}

#[test]
fn config_file_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "num_scenes = 2\n[scene]\nnum_frames = 5\nnum_objects = 3\np_dropout = 0.0\n",
    )
    .unwrap();
    let data = dir.path().join("d");
    ok(&["simulate", "--out", p(&data), "--config", p(&cfg)]);
    let gt = lines(&data.join("ground_truth.jsonl"));
    let scenes: BTreeSet<_> = gt
        .iter()
        .map(|r| r["scene"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(scenes.len(), 2);
    assert!(gt.iter().all(|r| r["frame"].as_i64().unwrap() < 5));
}

#[test]
fn train_track_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    ok(&["simulate", "--out", p(&data), "--scenes", "4"]);

    let start = Instant::now();
    let mut args = vec!["train", "--data", p(&data), "--out", p(&model)];
    args.extend(TINY);
    ok(&args);
    assert!(start.elapsed().as_secs() < 60);
    for f in ["model.json", "epoch-001.json", "epoch-002.json", "loss.log"] {
        assert!(model.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(model.join("loss.log")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let tracks = dir.path().join("tracks.jsonl");
    let dets = data.join("detections.jsonl");
    let ckpt = model.join("model.json");
    ok(&[
        "track",
        "--detections",
        p(&dets),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&tracks),
    ]);
    let first = fs::read(&tracks).unwrap();
    ok(&[
        "track",
        "--detections",
        p(&dets),
        "--checkpoint",
        p(&ckpt),
        "--out",
        p(&tracks),
        "--force",
    ]);
    assert_eq!(first, fs::read(&tracks).unwrap());

    let recs = lines(&tracks);
    let mut per_frame: BTreeMap<(String, i64), Vec<u64>> = BTreeMap::new();
    let mut last: Option<(String, i64)> = None;
    for r in &recs {
        let key = (
            r["scene"].as_str().unwrap().to_string(),
            r["frame"].as_i64().unwrap(),
        );
        assert!(
            last.as_ref().is_none_or(|l| l <= &key),
            "frames out of order"
        );
        last = Some(key.clone());
        per_frame
            .entry(key)
            .or_default()
            .push(r["track_id"].as_u64().unwrap());
    }
    for ids in per_frame.values() {
        assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), ids.len());
    }

    // An epoch checkpoint also works as a tracking model.
    let t2 = dir.path().join("t2.jsonl");
    ok(&[
        "track",
        "--detections",
        p(&dets),
        "--checkpoint",
        p(&model.join("epoch-002.json")),
        "--out",
        p(&t2),
    ]);
    assert_eq!(first, fs::read(&t2).unwrap());

    let gt = data.join("ground_truth.jsonl");
    let out = ok(&["eval", "--tracks", p(&tracks), "--gt", p(&gt)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("AMOTA"));
}

#[test]
fn resumed_training_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["simulate", "--out", p(&data), "--scenes", "3"]);
    let straight = dir.path().join("straight");
    let resumed = dir.path().join("resumed");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&straight)];
    args.extend(TINY);
    args.extend(["--set", "train.epochs=4"]);
    ok(&args);
    let from = straight.join("epoch-002.json");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&resumed),
        "--resume",
        p(&from),
    ]);
    assert_eq!(
        fs::read_to_string(straight.join("loss.log")).unwrap(),
        fs::read_to_string(resumed.join("loss.log")).unwrap()
    );
    assert_eq!(
        fs::read(straight.join("model.json")).unwrap(),
        fs::read(resumed.join("model.json")).unwrap()
    );
}

#[test]
fn training_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = momatrack(&[
        "train",
        "--data",
        p(&missing),
        "--out",
        p(&dir.path().join("m")),
    ]);
    assert_eq!(code(&out), 2);

    let data = dir.path().join("data");
    ok(&["simulate", "--out", p(&data), "--scenes", "2"]);
    let m = dir.path().join("m");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&m)];
    args.extend(TINY);
    args.extend(["--set", "train.lr=1e300", "--set", "precision=\"f64\""]);
    let out = momatrack(&args);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn baselines_need_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["simulate", "--out", p(&data), "--scenes", "2"]);
    let dets = data.join("detections.jsonl");
    let out = momatrack(&[
        "track",
        "--detections",
        p(&dets),
        "--out",
        p(&dir.path().join("t.jsonl")),
    ]);
    assert_eq!(code(&out), 1);
    for b in ["greedy", "output-space"] {
        let t = dir.path().join(format!("{b}.jsonl"));
        ok(&[
            "track",
            "--detections",
            p(&dets),
            "--out",
            p(&t),
            "--baseline",
            b,
        ]);
        assert!(!lines(&t).is_empty());
    }
    let x = dir.path().join("x");
    let out = momatrack(&[
        "track",
        "--detections",
        p(&dets),
        "--out",
        p(&x),
        "--baseline",
        "magic",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["simulate", "--out", p(&data), "--scenes", "2"]);
    let gt = data.join("ground_truth.jsonl");
    let json = dir.path().join("report.json");
    let bev = dir.path().join("bev.csv");
    let out = ok(&[
        "eval",
        "--tracks",
        p(&gt),
        "--gt",
        p(&gt),
        "--out",
        p(&json),
        "--bev-dump",
        p(&bev),
    ]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(
        table
            .lines()
            .any(|l| l.starts_with("AMOTA") && l.trim_end().ends_with("1.0000")),
        "{table}"
    );

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    for key in [
        "AMOTA", "AMOTP", "MOTA", "MOTP", "RECALL", "IDS", "FP", "FN", "GT", "MT", "ML", "MOTAR",
    ] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert_eq!(report["AMOTA"], 1.0);

    let csv = fs::read_to_string(&bev).unwrap();
    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some("source,scene,frame,track_id,x,y"));
    let n = lines(&gt).len();
    assert_eq!(rows.count(), 2 * n);

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "#schema=1\n{\"scene\":1}\n").unwrap();
    assert_eq!(
        code(&momatrack(&["eval", "--tracks", p(&bad), "--gt", p(&gt)])),
        2
    );
}
