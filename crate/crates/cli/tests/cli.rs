use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mmrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmrec"))
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mmrec(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const QUICK: [&str; 6] = [
    "--preset",
    "desk",
    "--set",
    "epochs=2",
    "--set",
    "sdne_epochs=20",
];

fn with_quick<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = QUICK.to_vec();
    v.extend_from_slice(args);
    v
}

#[test]
fn synth_train_evaluate_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &with_quick(&["synth", "--out", "data", "--users", "40", "--items", "30"]),
    );
    for f in [
        "manifest.txt",
        "dataset.tsv",
        "graph.tsv",
        "texts.tsv",
        "ratings.tsv",
        "triples.tsv",
        "config.txt",
    ] {
        assert!(d.join("data").join(f).is_file(), "{f}");
    }
    ok(
        d,
        &with_quick(&["train", "--data", "data", "--out", "m.ckpt"]),
    );
    let log = fs::read_to_string(d.join("m.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    ok(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "data",
            "--out",
            "report.json",
        ],
    );
    let report = fs::read_to_string(d.join("report.json")).unwrap();
    assert!(report.contains("\"auc\"") && report.contains("\"ndcg_gain\": \"binary\""));
    assert!(report.contains("epochs=2"));

    let top = ok(
        d,
        &[
            "predict",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "data",
            "--user",
            "u0001",
            "--top",
            "3",
        ],
    );
    assert_eq!(top.lines().count(), 3);
    let out = mmrec(
        d,
        &[
            "predict",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "data",
            "--user",
            "ghost",
        ],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("ghost"));

    ok(
        d,
        &[
            "export-attention",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "data",
            "--user",
            "u0001",
            "--out",
            "att.tsv",
        ],
    );
    let att = fs::read_to_string(d.join("att.tsv")).unwrap();
    assert!(att.lines().nth(1).unwrap().starts_with("prefer\t0\t"));
    ok(
        d,
        &[
            "export-embeddings",
            "--checkpoint",
            "m.ckpt",
            "--out",
            "emb.txt",
        ],
    );
    assert!(fs::read_to_string(d.join("emb.txt"))
        .unwrap()
        .starts_with("30 16\n"));
}

#[test]
fn commands_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for run in ["a", "b"] {
        ok(
            d,
            &with_quick(&["synth", "--out", run, "--users", "30", "--items", "25"]),
        );
        ok(
            d,
            &with_quick(&["train", "--data", run, "--out", &format!("{run}.ckpt")]),
        );
    }
    for f in [
        "manifest.txt",
        "dataset.tsv",
        "graph.tsv",
        "texts.tsv",
        "triples.tsv",
    ] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        fs::read(d.join("a.ckpt")).unwrap(),
        fs::read(d.join("b.ckpt")).unwrap()
    );
}

#[test]
fn ablate_reports_deltas_and_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &with_quick(&["synth", "--out", "data", "--users", "30", "--items", "25"]),
    );
    ok(
        d,
        &with_quick(&[
            "ablate",
            "--data",
            "data",
            "--variants",
            "full,single_view",
            "--seeds",
            "0,1",
            "--out",
            "ab.json",
            "--plot",
            "ab.csv",
        ]),
    );
    let json = fs::read_to_string(d.join("ab.json")).unwrap();
    assert!(json.contains("\"deltas\"") && json.contains("\"single_view\""));
    assert!(json.contains("\"w1\"") && json.contains("\"ndcg_gain\": \"binary\""));
    let csv = fs::read_to_string(d.join("ab.csv")).unwrap();
    assert!(csv.starts_with("series,x,y\n"));
    assert!(csv.contains("auc,single_view,") && csv.contains("full.w1,1,"));
}

#[test]
fn ingest_artifacts_and_threshold_override() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &with_quick(&["synth", "--out", "raw", "--users", "30", "--items", "25"]),
    );
    let args = [
        "ingest",
        "--ratings",
        "raw/ratings.tsv",
        "--triples",
        "raw/triples.tsv",
        "--texts",
        "raw/texts.tsv",
        "--out",
        "ing",
        "--set",
        "shared_threshold=3",
        "--set",
        "min_records=5",
    ];
    ok(d, &args);
    for f in [
        "manifest.txt",
        "dataset.tsv",
        "graph.tsv",
        "filter_report.txt",
    ] {
        assert!(d.join("ing").join(f).is_file(), "{f}");
    }
    let manifest = fs::read_to_string(d.join("ing/manifest.txt")).unwrap();
    assert!(manifest.contains("shared_threshold=3"));
    assert!(fs::read_to_string(d.join("ing/filter_report.txt"))
        .unwrap()
        .contains("no_edge"));

    let out = mmrec(
        d,
        &[
            "ingest",
            "--ratings",
            "raw/ratings.tsv",
            "--triples",
            "missing.tsv",
            "--texts",
            "raw/texts.tsv",
            "--out",
            "x",
        ],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing.tsv"));
}

#[test]
fn configuration_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = mmrec(d, &["--set", "no_such_key=1", "synth", "--out", "s"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no_such_key"));

    let out = Command::new(env!("CARGO_BIN_EXE_mmrec"))
        .current_dir(d)
        .env("MMREC_BOGUS", "1")
        .args(["synth", "--out", "s"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(stderr(&out).contains("MMREC_BOGUS"));

    fs::write(d.join("run.cfg"), "# desk run\nepochs = 1\nseed=4\n").unwrap();
    ok(
        d,
        &[
            "--preset", "desk", "--config", "run.cfg", "synth", "--out", "s", "--users", "20",
            "--items", "20",
        ],
    );
    let cfg = fs::read_to_string(d.join("s/config.txt")).unwrap();
    assert!(cfg.contains("epochs=1\n") && cfg.contains("seed=4\n"));

    let out = mmrec(d, &["train", "--data", "nowhere", "--out", "m.ckpt"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("mmrec synth"));
}
