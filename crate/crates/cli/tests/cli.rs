use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dan")).args(args).output().expect("run dan")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir` with its contents, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["synth", "--out", p(&out)];
    args.extend_from_slice(extra);
    let o = dan(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&dan(&[])), 2);
    assert_eq!(code(&dan(&["frobnicate"])), 2);
    assert_eq!(code(&dan(&["eval", "--gt", "x.csv"])), 2);
    assert_eq!(code(&dan(&["synth", "--out", "x", "--frames", "ten"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let seq = synth(dir.path(), "s", &["--frames", "3"]);
    let out = dir.path().join("t.csv");
    let o = dan(&["track", "--oracle", "--config", p(&cfg), "--seq", p(&seq), "--out", p(&out)]);
    assert_eq!(code(&o), 3, "unknown keys are file format errors");
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    fs::write(&cfg, "delta_b = 0\n").unwrap();
    let o = dan(&["track", "--oracle", "--config", p(&cfg), "--seq", p(&seq), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let o = dan(&["track", "--seq", p(&seq), "--out", p(&out)]);
    assert_eq!(code(&o), 2, "model is required without --oracle");
    let o = dan(&["eval", "--gt", p(&seq.join("gt.csv")), "--hyp", p(&seq.join("gt.csv")), "--iou", "1.5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_and_malformed_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "1,2,3\n").unwrap();
    let good = dir.path().join("good.csv");
    fs::write(&good, "1,1,0,0,10,10,1,-1,-1,-1\n").unwrap();
    assert_eq!(code(&dan(&["eval", "--gt", p(&missing), "--hyp", p(&good)])), 3);
    let o = dan(&["eval", "--gt", p(&bad), "--hyp", p(&good)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.csv"));
    let model = dir.path().join("model.bin");
    fs::write(&model, b"not a model").unwrap();
    let seq = synth(dir.path(), "s", &["--frames", "2"]);
    let o = dan(&["track", "--model", p(&model), "--seq", p(&seq), "--out", p(&dir.path().join("t.csv"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn empty_ground_truth_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&dan(&["eval", "--gt", p(&empty), "--hyp", p(&empty)])), 1);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--frames", "20", "--seed", "7", "--enter-prob", "0.1", "--leave-prob", "0.05"];
    let a = synth(dir.path(), "a", &args);
    let b = synth(dir.path(), "b", &args);
    // The sequence name is stored in seqinfo, so compare everything else.
    let (mut sa, mut sb) = (snapshot(&a), snapshot(&b));
    let (ia, ib) = (sa.remove(Path::new("seqinfo.txt")).unwrap(), sb.remove(Path::new("seqinfo.txt")).unwrap());
    assert_eq!(sa, sb);
    assert_eq!(String::from_utf8(ia).unwrap().replace("name = a", "name = b"), String::from_utf8(ib).unwrap());
    assert_eq!(sa.keys().filter(|k| k.starts_with("img1")).count(), 20);
    let c = synth(dir.path(), "c", &["--frames", "20", "--seed", "8"]);
    assert_ne!(snapshot(&c).get(Path::new("gt.csv")), sa.get(Path::new("gt.csv")));
    // Rewriting an existing directory replaces it.
    let again = synth(dir.path(), "a", &args);
    assert_eq!(snapshot(&again).len(), sa.len() + 1);
}

#[test]
fn synth_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let none = synth(dir.path(), "none", &["--frames", "5", "--objects", "0"]);
    assert_eq!(fs::read_to_string(none.join("gt.csv")).unwrap(), "");
    let one = synth(dir.path(), "one", &["--frames", "1"]);
    assert_eq!(snapshot(&one).keys().filter(|k| k.starts_with("img1")).count(), 1);
    let o = dan(&["synth", "--out", p(&dir.path().join("x")), "--det-dropout", "2"]);
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("x").exists());
}

#[test]
fn oracle_track_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), "s", &["--frames", "60", "--objects", "4", "--seed", "3"]);
    let gt = seq.join("gt.csv");
    let hyp = dir.path().join("hyp.csv");
    let hyp2 = dir.path().join("hyp2.csv");
    for out in [&hyp, &hyp2] {
        let args = ["track", "--oracle", "--seq", p(&seq), "--dets", p(&gt), "--out", p(out), "--delta-b", "61", "--delta-w", "60"];
        let o = dan(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&hyp).unwrap(), fs::read(&hyp2).unwrap());
    let events = dir.path().join("events.csv");
    let o = dan(&["eval", "--gt", p(&gt), "--hyp", p(&hyp), "--events", p(&events)]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("MOTA") && table.contains("IDF1"));
    let kv = fs::read_to_string(dir.path().join("hyp.csv.eval.txt")).unwrap();
    assert!(kv.lines().any(|l| l == "mota=100.0000"), "{kv}");
    assert!(kv.lines().any(|l| l == "idf1=100.0000"), "{kv}");
    assert!(kv.lines().any(|l| l == "id_sw=0"), "{kv}");
    let ev = fs::read_to_string(&events).unwrap();
    assert!(ev.starts_with("frame,event,gt_id,hyp_id,iou"));
    assert!(!ev.contains(",FN,") && !ev.contains(",FP,"));
    let again = dir.path().join("again.txt");
    assert_eq!(code(&dan(&["eval", "--gt", p(&gt), "--hyp", p(&hyp), "--out", p(&again)])), 0);
    assert_eq!(fs::read(&again).unwrap(), kv.as_bytes());
}

#[test]
fn empty_detections_give_empty_tracks() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), "s", &["--frames", "4"]);
    let dets = dir.path().join("dets.csv");
    fs::write(&dets, "").unwrap();
    let out = dir.path().join("tracks.csv");
    let o = dan(&["track", "--oracle", "--seq", p(&seq), "--dets", p(&dets), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
}

#[test]
fn train_and_track_with_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), "s", &["--frames", "12", "--objects", "3"]);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "n_v = 4\nbatch_size = 2\ndelta_b = 3\n").unwrap();
    let model = dir.path().join("init.bin");
    let train = |out: &Path, epochs: &str| {
        let o = dan(&["train", "--data", p(&seq), "--config", p(&cfg), "--out", p(out), "--epochs", epochs, "--pairs", "4", "--seed", "5"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    train(&model, "0");
    let log = fs::read_to_string(dir.path().join("init.bin.log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,lr,mean_loss,L_f,L_b,L_c,L_a");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,"));

    let (m1, m2) = (dir.path().join("m1.bin"), dir.path().join("m2.bin"));
    train(&m1, "1");
    train(&m2, "1");
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    assert_ne!(fs::read(&m1).unwrap(), fs::read(&model).unwrap());
    assert_eq!(fs::read_to_string(dir.path().join("m1.bin.log.csv")).unwrap().lines().count(), 3);

    let (t1, t2) = (dir.path().join("t1.csv"), dir.path().join("t2.csv"));
    for t in [&t1, &t2] {
        let o = dan(&["track", "--model", p(&m1), "--config", p(&cfg), "--seq", p(&seq), "--out", p(t)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let tracks = fs::read_to_string(&t1).unwrap();
    assert_eq!(tracks.as_bytes(), fs::read(&t2).unwrap());
    let dets = fs::read_to_string(seq.join("det.csv")).unwrap();
    assert_eq!(tracks.lines().count(), dets.lines().count());

    // A model trained under one shape cannot be loaded under another.
    let other = dir.path().join("other.cfg");
    fs::write(&other, "compression_widths = 144,32,1\ncompression_bn = 1\n").unwrap();
    let o = dan(&["track", "--model", p(&m1), "--config", p(&other), "--seq", p(&seq), "--out", p(&t1)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_without_sequences_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = dan(&["train", "--data", p(dir.path()), "--out", p(&dir.path().join("m.bin"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let o = dan(&["gradcheck", "--instances", "3", "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = dan(&["gradcheck", "--instances", "3", "--seed", "1", "--corrupt-gradient"]);
    assert_eq!(code(&o), 1);
}
