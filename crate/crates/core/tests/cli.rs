use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn scalenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalenet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let bytes = fs::read(&p).unwrap();
            (p.strip_prefix(dir).unwrap().to_path_buf(), bytes)
        })
        .collect();
    out.sort();
    out
}

fn generate(dir: &Path, count: &str, seed: &str) {
    let o = scalenet(&[
        "generate",
        "--count",
        count,
        "--size",
        "16",
        "--modalities",
        "2",
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path, seed: u64) -> PathBuf {
    let cfg = format!(
        r#"{{
  "variant": "SN31Ave1",
  "modalities": 2,
  "f_width": 2,
  "seed": {seed},
  "out": "run",
  "train": ["data/train"],
  "validation": ["data/val"],
  "training": {{ "max_steps": 4, "eval_every": 2, "augment": true }}
}}
"#
    );
    let p = dir.join(format!("run{seed}.json"));
    fs::write(&p, cfg).unwrap();
    p
}

/// A workspace with 3 training and 2 validation phantoms.
fn workspace() -> TempDir {
    let tmp = TempDir::new().unwrap();
    generate(&tmp.path().join("data/train"), "3", "1");
    generate(&tmp.path().join("data/val"), "2", "2");
    tmp
}

#[test]
fn generate_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, "2", "9");
    generate(&b, "2", "9");
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta, tb);
    assert_eq!(ta.len(), 3, "two volumes and a manifest");
    let manifest = String::from_utf8(fs::read(a.join("manifest.tsv")).unwrap()).unwrap();
    assert_eq!(
        manifest.lines().filter(|l| !l.starts_with('#')).count(),
        2 + 1,
        "{manifest}"
    );
}

#[test]
fn analyze_prints_counts_and_field() {
    let o = scalenet(&[
        "analyze",
        "--variant",
        "SN31Ave1",
        "--modalities",
        "4",
        "--f-width",
        "8",
    ]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("87"), "{s}");
    assert!(s.contains("ratio"), "{s}");
    assert_eq!(
        s,
        stdout(&scalenet(&[
            "analyze",
            "--variant",
            "SN31Ave1",
            "--modalities",
            "4",
            "--f-width",
            "8"
        ]))
    );
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&scalenet(&[])), 2);
    assert_eq!(code(&scalenet(&["analyze", "--variant", "SN99Foo1"])), 2);
    assert_eq!(
        code(&scalenet(&["generate", "--count", "1", "--seed", "x", "--out", "o"])),
        2
    );

    let tmp = workspace();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"variant": "SN31Ave1", "modalities": 2, "f_width": 2, "seed": 1, "out": "o", "train": ["data/train"], "validation": ["data/val"], "training": {"seed": 3}}"#).unwrap();
    assert_eq!(code(&scalenet(&["train", "--config", cfg.to_str().unwrap()])), 2);
    fs::write(&cfg, r#"{"variant": "SN31Ave1", "modalities": 2, "f_width": 2, "out": "o", "train": ["data/train"], "validation": ["data/val"]}"#).unwrap();
    assert_eq!(
        code(&scalenet(&["train", "--config", cfg.to_str().unwrap()])),
        2,
        "missing seed"
    );
    fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(code(&scalenet(&["train", "--config", cfg.to_str().unwrap()])), 2);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let tmp = workspace();
    let ckpt = tmp.path().join("junk.snck");
    fs::write(&ckpt, b"definitely not a checkpoint").unwrap();
    let o = scalenet(&[
        "eval",
        ckpt.to_str().unwrap(),
        tmp.path().join("data/val").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = workspace();
    let root = tmp.path();
    let inputs_before = [read_tree(&root.join("data/train")), read_tree(&root.join("data/val"))];

    let cfg = write_config(root, 5);
    let run = |out: &str| {
        scalenet(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            root.join(out).to_str().unwrap(),
        ])
    };
    let (o1, o2) = (run("run_a"), run("run_b"));
    assert_eq!(code(&o1), 0, "{}", String::from_utf8_lossy(&o1.stderr));
    assert_eq!(code(&o2), 0);
    assert_eq!(stdout(&o1), stdout(&o2));
    for file in ["checkpoint.snck", "train_log.tsv"] {
        assert_eq!(
            fs::read(root.join("run_a").join(file)).unwrap(),
            fs::read(root.join("run_b").join(file)).unwrap(),
            "{file}"
        );
    }
    let resolved = fs::read_to_string(root.join("run_a/resolved_config.json")).unwrap();
    assert!(resolved.contains("\"seed\": 5"), "{resolved}");

    // a second model with another seed to compare against
    let o = scalenet(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "6",
        "--out",
        root.join("run_c").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);

    let ckpt = |run: &str| root.join(run).join("checkpoint.snck").to_str().unwrap().to_string();
    generate(&root.join("data/test"), "6", "3");
    let test = root.join("data/test").to_str().unwrap().to_string();
    let report_dir = root.join("eval_c");
    let o = scalenet(&["eval", &ckpt("run_c"), &test, "--out", report_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(report_dir.join("report.tsv")).unwrap();
    for region in ["whole", "core", "active"] {
        assert!(report.contains(&format!("# mean\t{region}")), "{report}");
    }

    // a reference report with the same subjects and distinct scores
    let reference: String = report
        .lines()
        .filter(|l| !l.starts_with('#'))
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            format!("{}\t{}\t{}\n", f[0], f[1], 3.0 + 7.0 * i as f64 + 0.25)
        })
        .collect();
    let reference_path = root.join("reference.tsv");
    fs::write(&reference_path, &reference).unwrap();
    let compare = || {
        scalenet(&[
            "eval",
            &ckpt("run_a"),
            &test,
            "--compare",
            reference_path.to_str().unwrap(),
            "--one-sided",
        ])
    };
    let o = compare();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert_eq!(s.matches("# wilcoxon").count(), 3, "{s}");
    assert!(s.contains("one-sided"), "{s}");
    assert_eq!(s, stdout(&compare()));

    assert_eq!(
        inputs_before,
        [read_tree(&root.join("data/train")), read_tree(&root.join("data/val"))]
    );
}
