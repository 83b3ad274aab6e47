use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mipw_core::diffusion::{is_trainable, load_checkpoint, DenoiserParams, TrainConfig, TrainMode};
use mipw_core::evalkit::EvalReport;
use mipw_core::scenekit::Manifest;

fn mipw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mipw"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let o = mipw(args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn code(args: &[&str]) -> i32 {
    mipw(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file below `dir` except the config echo (which names the output path).
fn outputs(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("config.txt") {
                v.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    v.sort();
    v
}

const SMALL: &[&str] = &[
    "--set",
    "dim=16",
    "--set",
    "text_dim=8",
    "--set",
    "image_dim=8",
    "--set",
    "mlp_hidden=16",
    "--set",
    "layers=2",
    "--set",
    "time_dim=8",
    "--set",
    "batch=2",
    "--set",
    "log_every=1",
];

fn corpus(dir: &Path, n: &str) -> PathBuf {
    let d = dir.join("data");
    ok(&["gen-data", "--n", n, "--seed", "7", "--out", s(&d)]);
    d
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--ckpt-out", s(out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    mipw(&args)
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["gen-data", "--n", "10", "--seed", "7", "--out", s(&a)]);
    ok(&["gen-data", "--n", "10", "--seed", "7", "--out", s(&b)]);
    let oa = outputs(&a);
    assert_eq!(oa, outputs(&b));
    assert_eq!(
        oa.iter()
            .filter(|(p, _)| p.extension().is_some_and(|e| e == "png"))
            .count(),
        10
    );
    assert!(a.join("config.txt").is_file());
    assert_eq!(
        code(&["gen-data", "--n", "0", "--out", s(&t.path().join("c"))]),
        2
    );
    assert_eq!(
        code(&[
            "gen-data",
            "--n",
            "3",
            "--max-objects",
            "9",
            "--out",
            s(&t.path().join("c"))
        ]),
        2
    );
    assert_eq!(code(&["gen-data", "--out", s(&t.path().join("c"))]), 2);
}

#[test]
fn score_and_select() {
    let t = tempfile::tempdir().unwrap();
    let data = corpus(t.path(), "12");
    let scored = t.path().join("scored");
    ok(&["score", "--manifest", s(&data), "--out", s(&scored)]);
    let m = Manifest::load(&scored).unwrap();
    let all = t.path().join("all");
    ok(&[
        "select",
        "--manifest",
        s(&scored),
        "--k",
        "all",
        "--out",
        s(&all),
    ]);
    let sel = Manifest::load(&all).unwrap();
    assert_eq!(sel.len(), m.len());
    let totals: Vec<f64> = sel
        .records
        .iter()
        .map(|r| r.scores.unwrap().total)
        .collect();
    assert!(totals.windows(2).all(|w| w[0] >= w[1]));
    let mut ids: Vec<u64> = sel.records.iter().map(|r| r.id as u64).collect();
    ids.sort_unstable();
    let mut want: Vec<u64> = m.records.iter().map(|r| r.id as u64).collect();
    want.sort_unstable();
    assert_eq!(ids, want);

    let top = t.path().join("top");
    ok(&[
        "select",
        "--manifest",
        s(&scored),
        "--k",
        "3",
        "--by",
        "pair",
        "--out",
        s(&top),
    ]);
    assert_eq!(Manifest::load(&top).unwrap().len(), 3);
    let bad = t.path().join("bad");
    assert_eq!(
        code(&[
            "select",
            "--manifest",
            s(&scored),
            "--k",
            "13",
            "--out",
            s(&bad)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "select",
            "--manifest",
            s(&scored),
            "--k",
            "2",
            "--by",
            "nope",
            "--out",
            s(&bad)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "select",
            "--manifest",
            s(&data),
            "--k",
            "2",
            "--out",
            s(&bad)
        ]),
        3
    );
}

#[test]
fn train_contracts() {
    let t = tempfile::tempdir().unwrap();
    let data = corpus(t.path(), "8");
    let zero = t.path().join("zero.ckpt");
    assert!(train(&data, &zero, &["--steps", "0", "--seed", "3"])
        .status
        .success());
    let cfg_text = std::fs::read_to_string(t.path().join("zero.config.txt")).unwrap();
    let cfg = TrainConfig::from_kv(&cfg_text).unwrap();
    assert_eq!(
        load_checkpoint(&zero).unwrap(),
        DenoiserParams::init(&cfg.model, 3).unwrap()
    );

    let (a, b) = (t.path().join("a.ckpt"), t.path().join("b.ckpt"));
    assert!(train(&data, &a, &["--steps", "6", "--lr", "1e-3"])
        .status
        .success());
    assert!(train(&data, &b, &["--steps", "6", "--lr", "1e-3"])
        .status
        .success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let log = std::fs::read_to_string(t.path().join("a.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);

    // the echoed config alone reproduces the run
    let c = t.path().join("c.ckpt");
    let echo = t.path().join("a.config.txt");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&echo),
        "--ckpt-out",
        s(&c),
    ]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let ft = t.path().join("ft.ckpt");
    let o = mipw(&[
        "train",
        "--data",
        s(&data),
        "--init",
        s(&a),
        "--mode",
        "finetune",
        "--merge",
        "trained",
        "--steps",
        "5",
        "--lr",
        "1e-2",
        "--ckpt-out",
        s(&ft),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (before, after) = (load_checkpoint(&a).unwrap(), load_checkpoint(&ft).unwrap());
    let mut moved = 0;
    for (x, y) in before.tensors().iter().zip(after.tensors()) {
        let same = x
            .data
            .iter()
            .zip(y.data)
            .all(|(p, q)| p.to_bits() == q.to_bits());
        if is_trainable(&x.name, TrainMode::Finetune) {
            moved += (!same) as usize;
        } else {
            assert!(same, "{} changed", x.name);
        }
    }
    assert!(moved > 0);

    let nan = t.path().join("nan.ckpt");
    let o = train(&data, &nan, &["--steps", "50", "--lr", "1e300"]);
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(load_checkpoint(&nan).unwrap().is_finite());

    assert_eq!(
        train(&data, &nan, &["--set", "colour=red"]).status.code(),
        Some(2)
    );
    assert_eq!(train(&data, &nan, &["--lr", "NaN"]).status.code(), Some(2));
    assert_eq!(
        train(&t.path().join("missing"), &nan, &[]).status.code(),
        Some(3)
    );
}

fn tiny_model(dir: &Path) -> (PathBuf, PathBuf) {
    let data = corpus(dir, "6");
    let ckpt = dir.join("m.ckpt");
    assert!(train(&data, &ckpt, &["--steps", "2"]).status.success());
    (data, ckpt)
}

#[test]
fn sample_contracts() {
    let t = tempfile::tempdir().unwrap();
    let (data, ckpt) = tiny_model(t.path());
    let imgs = data.join("images");
    let r0 = imgs.join("000000.png");
    let r1 = imgs.join("000001.png");
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "sample",
            "--ckpt",
            s(&ckpt),
            "--prompt",
            "a red circle and a blue star",
            "--refs",
            s(&r0),
            s(&r1),
            "--steps",
            "5",
            "--n",
            "2",
            "--seed",
            "4",
            "--out",
            s(out),
        ];
        args.extend_from_slice(extra);
        mipw(&args)
    };
    let (a, b) = (t.path().join("sa"), t.path().join("sb"));
    assert!(run(&a, &[]).status.success());
    assert!(run(&b, &[]).status.success());
    let oa = outputs(&a);
    assert_eq!(oa, outputs(&b));
    for f in [
        "grid.png",
        "latents.bin",
        "samples.csv",
        "sample_00.png",
        "sample_01.png",
    ] {
        assert!(a.join(f).is_file(), "{f}");
    }
    assert_eq!(
        std::fs::read(a.join("latents.bin")).unwrap().len(),
        2 * 64 * 12 * 8
    );

    let bad = t.path().join("bad");
    let many = vec![s(&r0); 5];
    let mut args = vec![
        "sample",
        "--ckpt",
        s(&ckpt),
        "--prompt",
        "a red circle",
        "--out",
        s(&bad),
        "--refs",
    ];
    args.extend(many.iter().copied());
    assert_eq!(code(&args), 2);
    let two = [
        "sample",
        "--ckpt",
        s(&ckpt),
        "--prompt",
        "a red circle",
        "--refs",
        s(&r0),
        s(&r1),
        "--out",
        s(&bad),
    ];
    assert_eq!(code(&two), 2);
    let missing = t.path().join("none.ckpt");
    assert_eq!(
        code(&[
            "sample",
            "--ckpt",
            s(&missing),
            "--prompt",
            "a red circle",
            "--out",
            s(&bad)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "sample",
            "--ckpt",
            s(&ckpt),
            "--prompt",
            "a purple blob",
            "--out",
            s(&bad)
        ]),
        2
    );
}

#[test]
fn verify_eval_report() {
    let t = tempfile::tempdir().unwrap();
    let (data, ckpt) = tiny_model(t.path());
    let v = |out: &Path| {
        mipw(&[
            "verify-relevance",
            "--ckpt",
            s(&ckpt),
            "--n-prompts",
            "4",
            "--min-prompts",
            "4",
            "--steps",
            "4",
            "--out",
            s(out),
        ])
    };
    let (va, vb) = (t.path().join("va"), t.path().join("vb"));
    assert!(v(&va).status.success());
    assert!(v(&vb).status.success());
    assert_eq!(outputs(&va), outputs(&vb));
    let rel = EvalReport::load(&va.join("relevance.csv")).unwrap();
    assert_eq!(rel.rows.len(), 8);
    let summary = std::fs::read_to_string(va.join("summary.txt")).unwrap();
    assert!(summary.contains("uniform") && summary.contains("weighted"));
    let few = t.path().join("few");
    let o = mipw(&[
        "verify-relevance",
        "--ckpt",
        s(&ckpt),
        "--n-prompts",
        "4",
        "--steps",
        "4",
        "--out",
        s(&few),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = mipw(&[
        "verify-relevance",
        "--ckpt",
        s(&ckpt),
        "--n-prompts",
        "4",
        "--min-prompts",
        "4",
        "--noise-scale",
        "0",
        "--out",
        s(&few),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let missing = t.path().join("none.ckpt");
    assert_eq!(
        code(&["verify-relevance", "--ckpt", s(&missing), "--out", s(&few)]),
        2
    );

    let e = |out: &Path, bench: &str| {
        let named = format!("m={}", s(&ckpt));
        mipw(&[
            "eval",
            "--ckpt",
            &named,
            "--bench",
            bench,
            "--seeds",
            "2",
            "--steps",
            "4",
            "--locally-add",
            "--out",
            s(out),
        ])
    };
    let (ea, eb) = (t.path().join("ea"), t.path().join("eb"));
    assert!(e(&ea, "3").status.success());
    assert!(e(&eb, "3").status.success());
    assert_eq!(outputs(&ea), outputs(&eb));
    let rows = EvalReport::load(&ea.join("eval.csv")).unwrap();
    assert_eq!(rows.rows.len(), 3 * 2 * 2);
    let em = t.path().join("em");
    assert!(e(&em, s(&data)).status.success());
    assert_eq!(
        code(&[
            "eval",
            "--ckpt",
            s(&missing),
            "--bench",
            "2",
            "--out",
            s(&em)
        ]),
        2
    );
    assert_eq!(
        code(&[
            "eval",
            "--ckpt",
            s(&ckpt),
            "--bench",
            "/no/such/dir",
            "--out",
            s(&em)
        ]),
        2
    );

    let rep = t.path().join("rep");
    ok(&["report", "--in", s(&ea.join("eval.csv")), "--out", s(&rep)]);
    let table = std::fs::read_to_string(rep.join("tables.md")).unwrap();
    let body_rows = table.lines().filter(|l| l.starts_with("| m")).count();
    assert_eq!(body_rows, 2 + rows.rows.len());
    let summary = std::fs::read_to_string(rep.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(rep.join("image_match.svg").is_file());
    assert_eq!(
        code(&[
            "report",
            "--in",
            s(&t.path().join("nope.csv")),
            "--out",
            s(&rep)
        ]),
        2
    );
}
