use std::path::Path;
use std::process::{Command, Output};

fn stcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stcorr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn stcorr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(dir), "--videos", "2", "--frames", "9"];
    args.extend_from_slice(extra);
    let o = stcorr(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let masks = dir.path().join("masks");
    let o = stcorr(&["eval", "--pred", p(&masks), "--gt", p(&masks)]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "sequence_id\tfg_ari\tmiou\tj\tf\tjf");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("synth_000\t1.000000\t1.000000"));
    assert_eq!(lines[3], "mean\t1.000000\t1.000000\t1.000000\t1.000000\t1.000000");
}

#[test]
fn single_sequence_eval() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let seq = dir.path().join("masks").join("synth_001");
    let o = stcorr(&["eval", "--pred", p(&seq), "--gt", p(&seq), "--protocol", "single"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("synth_001\t1.000000"));
}

#[test]
fn segment_then_eval_with_identity_correlator() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let pred = dir.path().join("pred");
    let manifest = dir.path().join("manifest.tsv");
    let o = stcorr(&["segment", "--manifest", p(&manifest), "--identity", "--out", p(&pred)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(pred.join("summary.tsv")).unwrap();
    assert!(summary.starts_with("sequence_id\tframes\tclusters\tmetric\tkey_frames\n"));
    assert!(pred.join("synth_000").join("frame_00008.stf").is_file());
    let o = stcorr(&["eval", "--pred", p(&pred), "--gt", p(&dir.path().join("masks"))]);
    assert_eq!(o.status.code(), Some(0));
    let mean = stdout(&o).lines().last().unwrap().to_string();
    let ari: f64 = mean.split('\t').nth(1).unwrap().parse().unwrap();
    assert!(ari > 0.95, "{mean}");
}

#[test]
fn single_protocol_merges_foreground() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let features = dir.path().join("features").join("synth_000.stf");
    let gt = dir.path().join("masks").join("synth_000");
    let out = dir.path().join("fg");
    let o = stcorr(&[
        "segment", "--features", p(&features), "--identity", "--protocol", "single", "--gt", p(&gt), "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = stcorr(&["eval", "--pred", p(&out), "--gt", p(&gt), "--protocol", "single"]);
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    let j: f64 = row.split('\t').nth(3).unwrap().parse().unwrap();
    assert!(j > 0.95, "{row}");
}

#[test]
fn raw_feature_source() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let features = dir.path().join("features").join("synth_000.stf");
    let out = dir.path().join("raw");
    let o = stcorr(&[
        "segment", "--features", p(&features), "--metric-source", "raw-features", "--tau", "0.3", "--out", p(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\tcosine\t"));
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--height", "4", "--width", "4", "--channels", "8", "--min-size", "1", "--max-size", "2"]);
    let out = dir.path().join("run");
    let manifest = dir.path().join("manifest.tsv");
    let o = stcorr(&[
        "train", "--manifest", p(&manifest), "--out", p(&out), "--iters", "3", "--batch", "2", "--kp", "2", "--kn", "3",
        "--heads", "2", "--lr", "1e-3", "--seed", "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("loss.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("1\t"));
    let ckpt = out.join("checkpoint.stf");
    let o = stcorr(&["inspect", "--file", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("meta\tu32\t[4]"));
    assert!(text.contains("query_weight\tf32\t[8, 8]"));

    let features = dir.path().join("features").join("synth_000.stf");
    let seg = |name: &str| {
        let target = dir.path().join(name);
        let o = stcorr(&["segment", "--features", p(&features), "--checkpoint", p(&ckpt), "--out", p(&target)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(target.join("frame_00000.stf")).unwrap()
    };
    assert_eq!(seg("a"), seg("b"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(stcorr(&[]).status.code(), Some(1));
    assert_eq!(stcorr(&["segment", "--bogus"]).status.code(), Some(1));
    assert_eq!(stcorr(&["train", "--out", "x"]).status.code(), Some(1));
    assert_eq!(stcorr(&["segment", "--features", "f.stf", "--out", "o", "--key-ratio", "0"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let features = dir.path().join("features").join("synth_000.stf");
    let o = stcorr(&["segment", "--features", p(&features), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.stf");
    assert_eq!(stcorr(&["inspect", "--file", p(&missing)]).status.code(), Some(2));
    let junk = dir.path().join("junk.stf");
    std::fs::write(&junk, b"NOPE0000").unwrap();
    let o = stcorr(&["inspect", "--file", p(&junk)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magic"));
}

#[test]
fn help_lists_defaults() {
    for (cmd, flags) in [
        ("train", &["--iters", "[default: 30000]", "--lr", "[default: 0.0001]", "--kp", "[default: 10]", "--kn", "[default: 50]", "--batch", "[default: 16]"][..]),
        ("segment", &["--tau", "1.0 for multi, 0.6 for single", "--key-ratio", "--metric-source", "[default: correlator-attention]"][..]),
        ("eval", &["--protocol", "[default: multi]"][..]),
        ("synth", &["--noise", "[default: 0.05]"][..]),
    ] {
        let o = stcorr(&[cmd, "--help"]);
        assert_eq!(o.status.code(), Some(0));
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}:\n{text}");
        }
        assert!(text.contains("--threads"));
    }
}

#[test]
fn inspect_lists_tensors() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let file = dir.path().join("masks").join("synth_000").join("frame_00000.stf");
    let o = stcorr(&["--threads", "1", "inspect", "--file", p(&file)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("labels\tu16\t[12, 12]\t"));
}
