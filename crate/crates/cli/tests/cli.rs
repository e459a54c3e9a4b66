use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrn"))
        .args(args)
        .output()
        .expect("run mrn")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_synth_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.txt");
    fs::write(
        &spec,
        "classes = 10\ndim = 4\nitems_per_class = 12\nseed = 2\n",
    )
    .unwrap();
    let out = dir.path().join("data");
    let stdout = ok(&mrn(&["gen-synth", "--spec", s(&spec), "--out", s(&out)]));
    assert!(stdout.contains("120 items"), "{stdout}");
    let bin = fs::read(out.join("synth.mrnd")).unwrap();
    assert_eq!(&bin[..4], b"MRND");
    let manifest = fs::read_to_string(out.join("synth.mrnd.splits")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.ends_with("train")).count(), 6);
}

#[test]
fn train_eval_export_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let ckpt = dir.path().join("model.mrnc");
    fs::write(
        &cfg,
        format!(
            "# tiny run\nqueries = 4\nepisodes = 3\nk = 3\ncheckpoint = {}\n",
            s(&ckpt)
        ),
    )
    .unwrap();
    let stdout = ok(&mrn(&[
        "train",
        "--config",
        s(&cfg),
        "--override",
        "episodes=6",
    ]));
    assert!(stdout.contains("wrote"), "{stdout}");
    assert_eq!(&fs::read(&ckpt).unwrap()[..4], b"MRNC");

    let first = ok(&mrn(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--episodes",
        "20",
        "--seed",
        "3",
    ]));
    assert!(first.contains("5-way 1-shot, 20 episodes"), "{first}");
    let again = ok(&mrn(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--episodes",
        "20",
        "--seed",
        "3",
    ]));
    assert_eq!(first, again);

    let sim = dir.path().join("sim.csv");
    ok(&mrn(&[
        "export-similarity",
        "--checkpoint",
        s(&ckpt),
        "--episode-seed",
        "1",
        "--out",
        s(&sim),
    ]));
    let text = fs::read_to_string(&sim).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("# provenance: s,s,s,s,s,q"), "{header}");
    assert_eq!(text.lines().count(), 1 + 25);
}

#[test]
fn ablate_writes_results_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.cfg");
    fs::write(&cfg, "queries = 3\nepisodes = 4\neval_episodes = 5\n").unwrap();
    let sweep = dir.path().join("sweep.txt");
    fs::write(
        &sweep,
        "variant = mrn, mrn_zero\neval_k = 2, 4\nseeds = 0, 1\n",
    )
    .unwrap();
    let out = dir.path().join("results.csv");
    let stdout = ok(&mrn(&[
        "ablate",
        "--config",
        s(&cfg),
        "--sweep",
        s(&sweep),
        "--out",
        s(&out),
    ]));
    assert!(stdout.contains("8 rows"), "{stdout}");
    let text = fs::read_to_string(&out).unwrap();
    assert!(
        text.starts_with("variant,C,K,k,d,lambda,strategy,metric_DG,seed,episodes,mean_acc,ci95\n")
    );
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&mrn(&["gradcheck"]));
    assert!(stdout.contains("max relative error"), "{stdout}");
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "episodes = 1\n").unwrap();
    let out = mrn(&["train", "--config", s(&cfg), "--override", "lambda=2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));

    let out = mrn(&[
        "eval",
        "--checkpoint",
        s(&cfg),
        "--episodes",
        "1",
        "--seed",
        "0",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error at byte 0"));

    assert!(!mrn(&["train"]).status.success());
}
