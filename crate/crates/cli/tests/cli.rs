use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use labelrefine::raster::{save_image, save_label};
use labelrefine::{LabelMap, RasterImage};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelrefine"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = run(dir, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn simulated_corpus(dir: &Path, count: &str, side: &str) {
    ok(dir, &["synth", "--count", count, "--side", side, "--out", "clean", "--seed", "4"]);
    ok(dir, &["simulate", "--corpus", "clean", "--out", "noisy", "--seed", "4"]);
}

#[test]
fn help_lists_configuration_keys() {
    let d = tempfile::tempdir().unwrap();
    for args in [&["--help"][..], &["train", "--help"], &["refine", "--help"]] {
        let o = run(d.path(), args);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        assert!(text.contains("refine.lambda = 50.0"), "{args:?}");
        assert!(text.contains("noise.p_erode = 0.25"), "{args:?}");
    }
    assert_eq!(code(&run(d.path(), &["--version"])), 0);
}

#[test]
fn dump_config_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let first = stdout(&ok(d.path(), &["--dump-config", "--seed", "77"]));
    fs::write(d.path().join("c.json"), &first).unwrap();
    let second = stdout(&ok(d.path(), &["--config", "c.json", "--dump-config"]));
    assert_eq!(first, second);
    assert!(first.contains("\"seed\": 77"));
    let other = stdout(&ok(d.path(), &["--config", "c.json", "--seed", "78", "--dump-config"]));
    assert_ne!(first, other, "section seeds follow the top-level seed");
    let train = stdout(&ok(d.path(), &["train", "--corpus", "x", "--epochs", "7", "--dump-config"]));
    assert!(train.contains("\"epochs\": 7"));
}

#[test]
fn usage_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(d.path(), &[])), 1);
    assert_eq!(code(&run(d.path(), &["synth", "--bogus"])), 1);
    assert_eq!(code(&run(d.path(), &["synth"])), 1, "missing --out");
    assert_eq!(code(&run(d.path(), &["--jobs", "0", "synth", "--out", "x"])), 1);
    fs::write(d.path().join("typo.json"), r#"{"refine": {"lamda": 3}}"#).unwrap();
    assert_eq!(code(&run(d.path(), &["--config", "typo.json", "--dump-config"])), 1);
    fs::write(d.path().join("bad.json"), r#"{"noise": {"p_erode": 0.9, "p_dilate": 0.9}}"#).unwrap();
    assert_eq!(code(&run(d.path(), &["--config", "bad.json", "synth", "--out", "x"])), 1);
    assert_eq!(code(&run(d.path(), &["synth", "--side", "8", "--out", "x"])), 1);
}

#[test]
fn data_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(d.path(), &["simulate", "--corpus", "missing", "--out", "x"])), 2);
    fs::write(d.path().join("empty.tsv"), "# nothing\n").unwrap();
    assert_eq!(code(&run(d.path(), &["mine", "--input", "empty.tsv", "--out", "x"])), 2);
    ok(d.path(), &["synth", "--count", "2", "--side", "32", "--out", "clean"]);
    let o = run(d.path(), &["train", "--corpus", "clean", "--out", "t", "--epochs", "1"]);
    assert_eq!(code(&o), 2, "training needs simulated pairs");
    fs::write(d.path().join("junk.lprf"), b"not a checkpoint").unwrap();
    assert_eq!(code(&run(d.path(), &["refine", "--checkpoint", "junk.lprf", "--corpus", "clean", "--out", "r"])), 2);
}

#[test]
fn divergence_exits_3() {
    let d = tempfile::tempdir().unwrap();
    simulated_corpus(d.path(), "2", "32");
    fs::write(d.path().join("huge.json"), r#"{"refine": {"lambda": 1e308}}"#).unwrap();
    let o = run(d.path(), &["--config", "huge.json", "train", "--corpus", "noisy", "--out", "t", "--epochs", "1"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_refine_evaluate_outputs() {
    let d = tempfile::tempdir().unwrap();
    simulated_corpus(d.path(), "4", "64");
    ok(d.path(), &["train", "--corpus", "noisy", "--holdout", "noisy", "--out", "t", "--epochs", "2", "--batch-size", "2"]);
    let log = fs::read_to_string(d.path().join("t/train_log.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(!lines[2].ends_with("undefined"), "holdout IoU logged: {}", lines[2]);
    for f in ["t/checkpoints/epoch_002_generator.lprf", "t/checkpoints/epoch_002_discriminator.lprf", "t/provenance.json"] {
        assert!(d.path().join(f).is_file(), "{f}");
    }
    let prov = fs::read_to_string(d.path().join("t/provenance.json")).unwrap();
    assert!(prov.contains("corpus_manifest") && !prov.contains(d.path().to_str().unwrap()));

    ok(d.path(), &["refine", "--checkpoint", "t/generator.lprf", "--corpus", "noisy", "--out", "r", "--tile", "32", "--overlap", "8"]);
    let manifest = fs::read_to_string(d.path().join("r/manifest.tsv")).unwrap();
    assert!(manifest.contains("checkpoint_sha256"));
    assert_eq!(manifest.lines().filter(|l| l.starts_with("0000")).count(), 4);
    assert_eq!(code(&run(d.path(), &["refine", "--checkpoint", "t/generator.lprf", "--corpus", "noisy", "--out", "r2", "--tile", "128"])), 1);
    assert_eq!(
        code(&run(d.path(), &["refine", "--checkpoint", "t/checkpoints/epoch_001_discriminator.lprf", "--corpus", "noisy", "--out", "r3"])),
        2
    );

    let o = ok(d.path(), &["evaluate", "--corpus", "noisy", "--refined", "r", "--out", "e"]);
    let metrics = fs::read_to_string(d.path().join("e/metrics.tsv")).unwrap();
    assert!(metrics.starts_with("image_id\tacc\tse\tsp\tauc\tiou_noisy\tiou_refined\tdelta\n"));
    assert_eq!(metrics.lines().count(), 6);
    assert!(stdout(&o).starts_with("mean\t"));
}

fn write_annotated(dir: &Path, name: &str, w: usize, h: usize) -> [String; 3] {
    let vessel = LabelMap::from_fn(w, h, |x, y| x % 8 < 2 || (y + x / 4) % 11 == 0);
    let img = RasterImage::new(w, h, 3, (0..w * h * 3).map(|i| ((i / 3) % 7) as f32 / 7.0).collect()).unwrap();
    let names = [format!("{name}.png"), format!("{name}_a1.png"), format!("{name}_a2.png")];
    save_image(dir.join(&names[0]), &img).unwrap();
    save_label(dir.join(&names[1]), &vessel).unwrap();
    save_label(dir.join(&names[2]), &vessel).unwrap();
    names
}

#[test]
fn mine_builds_a_corpus_from_annotations() {
    let d = tempfile::tempdir().unwrap();
    let mut tsv = String::from("image\tannot1\tannot2\n");
    for name in ["a", "b"] {
        tsv.push_str(&write_annotated(d.path(), name, 80, 70).join("\t"));
        tsv.push('\n');
    }
    fs::write(d.path().join("input.tsv"), tsv).unwrap();
    fs::write(d.path().join("m.json"), r#"{"mine": {"patch_side": 32, "patches_per_image": 5}}"#).unwrap();
    ok(d.path(), &["--config", "m.json", "mine", "--input", "input.tsv", "--out", "mined", "--jobs", "2"]);
    let m = fs::read_to_string(d.path().join("mined/manifest.tsv")).unwrap();
    let rows: Vec<&str> = m.lines().skip(3).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows[0].contains("\ta\t") && rows[9].contains("\tb\t"));
    ok(d.path(), &["--config", "m.json", "simulate", "--corpus", "mined", "--out", "sim"]);

    fs::write(d.path().join("short.json"), r#"{"mine": {"patch_side": 32, "patches_per_image": 5, "ratio_min": 0.99}}"#).unwrap();
    let o = ok(d.path(), &["--config", "short.json", "mine", "--input", "input.tsv", "--out", "none"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}
