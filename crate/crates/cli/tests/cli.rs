use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adnet_core::data;

fn adnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adnet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = adnet(args);
    assert!(o.status.success(), "adnet {args:?} failed:\n{}", stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy_tree(root: &Path, layout: &[(&str, usize)]) {
    for (class, n) in layout {
        let dir = root.join(class);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..*n {
            image::RgbImage::from_pixel(100, 100, image::Rgb([(i * 30) as u8; 3]))
                .save(dir.join(format!("{i}.png")))
                .unwrap();
        }
    }
}

#[test]
fn split_toy_tree_and_rerun_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    toy_tree(&root, &[("NonDemented", 5), ("VeryMildDemented", 3), ("MildDemented", 2)]);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let out = ok(&["split", "--data", s(&root), "--fraction", "0.8", "--seed", "4", "--out", s(&a)]);
    ok(&["split", "--data", s(&root), "--fraction", "0.8", "--seed", "4", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let total = out.lines().find(|l| l.starts_with("total")).unwrap();
    assert_eq!(total.split_whitespace().collect::<Vec<_>>(), ["total", "8", "2"]);
    let text = fs::read_to_string(&a).unwrap();
    let train_rows = |label: &str| text.lines().filter(|l| l.ends_with(&format!(",{label},train"))).count();
    assert_eq!((train_rows("0"), train_rows("1"), train_rows("2")), (4, 2, 2));
}

#[test]
fn split_with_tiny_class_keeps_every_image() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    toy_tree(&root, &[("NonDemented", 3), ("VeryMildDemented", 2), ("MildDemented", 2)]);
    let m = dir.path().join("m.csv");
    ok(&["split", "--data", s(&root), "--fraction", "0.99", "--seed", "1", "--out", s(&m)]);
    let text = fs::read_to_string(&m).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#') && l.contains(".png")).collect();
    assert_eq!(rows.len(), 7);
}

#[test]
fn split_rejects_bad_fraction() {
    let dir = tempfile::tempdir().unwrap();
    toy_tree(dir.path(), &[("NonDemented", 2)]);
    let o = adnet(&["split", "--data", s(dir.path()), "--fraction", "1.5", "--seed", "1", "--out", "x.csv"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error["), "{}", stderr(&o));
}

#[test]
fn summary_totals_and_collapse() {
    let out = ok(&["summary"]);
    assert!(out.contains("total params:         7866819"), "{out}");
    assert!(out.contains("trainable params:     7862275"));
    assert!(out.contains("non-trainable params: 4544"));
    assert!(out.contains("[1,2048]"));

    let o = adnet(&["summary", "--filter-scale", "1/64"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("b1.block1"), "{}", stderr(&o));
}

#[test]
fn gradcheck_filter_and_perturbation() {
    let out = ok(&["gradcheck", "--op", "conv2d", "--seeds", "3"]);
    let rows: Vec<&str> = out.lines().filter(|l| l.contains("conv")).collect();
    assert!(!rows.is_empty());
    assert!(!out.contains("maxpool") && !out.contains("end_to_end"), "{out}");
    assert!(out.contains("all gradient checks passed"));

    let o = adnet(&["gradcheck", "--op", "dense", "--seeds", "2", "--perturb", "dense"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error[gradcheck]: tolerance exceeded in dense"), "{}", stderr(&o));

    let o = adnet(&["gradcheck", "--op", "no_such_op"]);
    assert!(!o.status.success());
}

#[test]
fn train_rejects_zero_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let o = adnet(&[
        "train",
        "--manifest",
        "missing.csv",
        "--epochs",
        "0",
        "--out",
        s(&dir.path().join("w.bin")),
        "--metrics",
        s(&dir.path().join("m.csv")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
    assert!(!dir.path().join("w.bin").exists());
}

fn synthetic_split(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    data::write_synthetic_dataset(&root, 4, 2).unwrap();
    let m = dir.join("manifest.csv");
    ok(&["split", "--data", s(&root), "--fraction", "0.75", "--seed", "1", "--out", s(&m)]);
    m
}

fn train_small(manifest: &Path, out: &Path, metrics: &Path) {
    ok(&[
        "train",
        "--manifest",
        s(manifest),
        "--epochs",
        "80",
        "--batch-size",
        "3",
        "--lr",
        "0.001",
        "--seed",
        "0",
        "--filter-scale",
        "1/16",
        "--deterministic",
        "--out",
        s(out),
        "--metrics",
        s(metrics),
    ]);
}

#[test]
fn overfit_then_eval_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = synthetic_split(d);
    let (w1, m1, w2, m2) = (d.join("w1.bin"), d.join("m1.csv"), d.join("w2.bin"), d.join("m2.csv"));
    train_small(&manifest, &w1, &m1);
    train_small(&manifest, &w2, &m2);
    assert_eq!(fs::read(&w1).unwrap(), fs::read(&w2).unwrap());
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    let metrics = fs::read_to_string(&m1).unwrap();
    assert_eq!(metrics.lines().count(), 81);
    assert!(metrics.lines().next().unwrap().starts_with("epoch,split,loss,accuracy"));

    let confusion = d.join("c.csv");
    let out = ok(&[
        "eval",
        "--weights",
        s(&w1),
        "--manifest",
        s(&manifest),
        "--split",
        "train",
        "--filter-scale",
        "1/16",
        "--confusion",
        s(&confusion),
    ]);
    assert!(out.contains("accuracy 1.000000"), "{out}");
    let cm = fs::read_to_string(&confusion).unwrap();
    let rows: Vec<Vec<u64>> = cm
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert_eq!(v > 0, i == j, "{cm}");
        }
    }

    let text = fs::read_to_string(&manifest).unwrap();
    for line in text.lines().filter(|l| l.ends_with(",train")) {
        let mut parts = line.split(',');
        let path = parts.next().unwrap();
        let label: usize = parts.next().unwrap().parse().unwrap();
        let out = ok(&["predict", "--weights", s(&w1), "--image", path, "--filter-scale", "1/16"]);
        let probs: Vec<f64> = out
            .lines()
            .filter(|l| !l.starts_with("prediction"))
            .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(probs.len(), 3);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5, "{out}");
        assert!(probs[label] > 0.5, "{path}: {out}");
        let predicted = out.lines().last().unwrap();
        assert_eq!(predicted, format!("prediction {}", data::CLASS_NAMES[label]));
    }

    let o = adnet(&["eval", "--weights", s(&w1), "--manifest", s(&manifest), "--filter-scale", "1/8"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[compat]"), "{}", stderr(&o));

    let broken = d.join("broken.png");
    fs::write(&broken, b"junk").unwrap();
    let o = adnet(&["predict", "--weights", s(&w1), "--image", s(&broken), "--filter-scale", "1/16"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("broken.png"), "{}", stderr(&o));
}

#[test]
fn config_file_supplies_values_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    toy_tree(&root, &[("NonDemented", 5), ("VeryMildDemented", 3), ("MildDemented", 2)]);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!("# toy run\ndata = {}\nfraction = 0.8\nseed = 4\nout = {}\n", s(&root), s(&a)),
    )
    .unwrap();
    ok(&["split", "--config", s(&cfg)]);
    assert!(a.exists());
    ok(&["split", "--config", s(&cfg), "--fraction", "0.5", "--out", s(&b)]);
    assert!(fs::read_to_string(&b).unwrap().starts_with("# seed=4 fraction=0.5"));

    fs::write(&cfg, "colour = blue\n").unwrap();
    let o = adnet(&["split", "--config", s(&cfg)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown key"), "{}", stderr(&o));
}
