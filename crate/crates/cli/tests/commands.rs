use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_osvi");

fn osvi(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("osvi runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(out: &Path, n: &str, frames: &str) -> Output {
    osvi(&["synth", "--n", n, "--height", "16", "--width", "24", "--frames", frames, "--seed", "1", "--out", s(out)])
}

/// A one-step checkpoint of a small model.
fn checkpoint(work: &Path) -> std::path::PathBuf {
    let data = work.join("train_data");
    assert!(synth(&data, "2", "6").status.success());
    let run = work.join("run");
    let o = osvi(&["train", "--data", s(&data), "--out", s(&run), "--iterations", "1", "--blocks", "1", "--heads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    run.join("checkpoint.osvc")
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_and_accepts_zero() {
    let w = tempfile::tempdir().unwrap();
    let (a, b) = (w.path().join("a"), w.path().join("b"));
    assert!(synth(&a, "3", "4").status.success());
    assert!(synth(&b, "3", "4").status.success());
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    assert_eq!(tree_bytes(&a).len(), 1 + 3 * 3 * 4);
    let empty = w.path().join("empty");
    assert!(synth(&empty, "0", "4").status.success());
    let manifest = std::fs::read_to_string(empty.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 1);
}

#[test]
fn help_lists_defaults() {
    let help = stdout(&osvi(&["train", "--help"]));
    for needle in ["[default: 1000]", "[default: 0.0001]", "[default: 100]", "[default: key-side]", "[default: off]"] {
        assert!(help.contains(needle), "missing {needle}");
    }
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(osvi(&["bogus"]).status.code(), Some(1));
    assert_eq!(osvi(&["train", "--unknown-flag"]).status.code(), Some(1));
    assert_eq!(osvi(&["verify", "--suite", "nope"]).status.code(), Some(1));
    assert_eq!(osvi(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_with_two() {
    let w = tempfile::tempdir().unwrap();
    let o = osvi(&["train", "--data", s(&w.path().join("none")), "--out", s(&w.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let w = tempfile::tempdir().unwrap();
    let data = w.path().join("data");
    assert!(synth(&data, "1", "3").status.success());
    let cfg = w.path().join("run.cfg");
    std::fs::write(&cfg, "iterations = 5\nblocks = 1\nheads = 2\nlr = 3e-4\n").unwrap();
    let run = w.path().join("run");
    let o = osvi(&["train", "--data", s(&data), "--out", s(&run), "--config", s(&cfg), "--iterations", "2"]);
    assert!(o.status.success());
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert_eq!(stdout(&o), log);
    let used = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(used.contains("iterations = 2") && used.contains("blocks = 1") && used.contains("lr = 3e-4"));
}

#[test]
fn resume_rejects_model_changes() {
    let w = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(w.path());
    let o = osvi(&[
        "train",
        "--data",
        s(&w.path().join("train_data")),
        "--out",
        s(&w.path().join("run")),
        "--resume",
        s(&ckpt),
        "--blocks",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn infer_logs_memory_and_keeps_frame_zero_mask() {
    let w = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(w.path());
    let clip = w.path().join("clip");
    assert!(osvi(&["synth", "--n", "1", "--frames", "12", "--seed", "1", "--out", s(&clip)]).status.success());
    let snip = clip.join("snippet_0000");
    let mask0 = snip.join("mask/frame_0000.pgm");
    let out = w.path().join("out");
    let o = osvi(&["infer", "--checkpoint", s(&ckpt), "--video", s(&snip.join("input")), "--mask0", s(&mask0), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("memory frames [0, 5, 10]"));
    assert_eq!(std::fs::read_dir(out.join("frames")).unwrap().count(), 12);
    assert_eq!(std::fs::read_dir(out.join("masks")).unwrap().count(), 12);
    assert_eq!(std::fs::read(out.join("masks/frame_0000.pgm")).unwrap(), std::fs::read(&mask0).unwrap());

    let missing = osvi(&["infer", "--checkpoint", s(&ckpt), "--video", s(&snip.join("input")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn composite_keeps_input_outside_predicted_mask() {
    use osvi::data::dataset::{read_frames, read_masks};
    let w = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(w.path());
    let data = w.path().join("data");
    assert!(synth(&data, "1", "6").status.success());
    let snip = data.join("snippet_0000");
    let out = w.path().join("out");
    let o = osvi(&[
        "infer",
        "--checkpoint",
        s(&ckpt),
        "--video",
        s(&snip.join("input")),
        "--mask0",
        s(&snip.join("mask/frame_0000.pgm")),
        "--out",
        s(&out),
        "--composite",
    ]);
    assert!(o.status.success());
    let (frames, masks) = (read_frames(&out.join("frames")).unwrap(), read_masks(&out.join("masks")).unwrap());
    let input = read_frames(&snip.join("input")).unwrap();
    let hw = 16 * 24;
    for (i, (&f, &x)) in frames.data().iter().zip(input.data()).enumerate() {
        if masks.data()[(i / (3 * hw)) * hw + i % hw] < 0.5 {
            assert_eq!(f, x);
        }
    }
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let w = tempfile::tempdir().unwrap();
    let data = w.path().join("data");
    assert!(synth(&data, "2", "3").status.success());
    let pred = w.path().join("pred");
    let ids = ["toy-A-1", "toy-A-2"];
    for (i, id) in ids.iter().enumerate() {
        let src = data.join(format!("snippet_{i:04}"));
        for (from, to) in [("clean", "frames"), ("mask", "masks")] {
            let dst = pred.join(id).join(to);
            std::fs::create_dir_all(&dst).unwrap();
            for e in std::fs::read_dir(src.join(from)).unwrap() {
                let p = e.unwrap().path();
                std::fs::copy(&p, dst.join(p.file_name().unwrap())).unwrap();
            }
        }
    }
    let o = osvi(&["eval", "--pred", s(&pred), "--data", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = std::fs::read_to_string(pred.join("eval.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().collect();
    assert_eq!(rows[0], "snippet\tpsnr\tssim\tiou\trecall");
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("MEAN"));
    for row in &rows[1..] {
        let f: Vec<&str> = row.split('\t').collect();
        assert_eq!(&f[1..], ["99.0000", "1.000000", "1.000000", "1.000000"]);
    }

    let nothing = w.path().join("nothing");
    std::fs::create_dir_all(&nothing).unwrap();
    assert_eq!(osvi(&["eval", "--pred", s(&nothing), "--data", s(&data)]).status.code(), Some(2));
}

#[test]
fn eval_respects_thread_cap() {
    let w = tempfile::tempdir().unwrap();
    let data = w.path().join("data");
    assert!(synth(&data, "1", "3").status.success());
    let o = Command::new(BIN)
        .args(["eval", "--pred", s(&w.path().join("none")), "--data", s(&data)])
        .env("OSVI_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: skipping toy-A-1"));
}
