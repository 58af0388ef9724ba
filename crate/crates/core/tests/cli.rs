use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[policy]
n_layers = 2
n_heads = 2
d_model = 16
mlp_hidden = 32
[pretrain]
total_steps = 40
warmup_steps = 5
batch_size = 8
[finetune]
total_steps = 30
warmup_steps = 5
batch_size = 8
[data]
pretrain_demos = 4
demos = 6
[select]
k = [3, 5]
m = 2
[eval]
perturbations = ["none"]
"#;

fn headsteer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headsteer"))
        .current_dir(dir)
        .env_remove("HEADSTEER_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stage_by_stage_then_repro() {
    let dir = setup();
    let d = dir.path();
    let c = ["--config", "tiny.toml"];
    for (args, task) in [
        (
            vec!["gen-demos", "--out", "run/pretrain-reach-red.hsdm"],
            "reach-red",
        ),
        (
            vec!["gen-demos", "--out", "run/pretrain-push-blue.hsdm"],
            "push-blue",
        ),
    ] {
        let mut all = c.to_vec();
        all.extend(args);
        all.extend(["--task", task, "--n-demos", "4"]);
        let o = headsteer(d, &all);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for step in [
        vec!["gen-demos"],
        vec!["pretrain"],
        vec!["cache-acts"],
        vec![
            "select-heads",
            "--method",
            "knn",
            "--k",
            "3,5,40",
            "--m",
            "2",
        ],
        vec!["finetune"],
        vec!["eval"],
    ] {
        let mut all = c.to_vec();
        all.extend(step.iter().copied());
        let o = headsteer(d, &all);
        assert!(o.status.success(), "{step:?}: {}", stderr(&o));
    }
    let sel = headsteer::store::read_selection(d.join("run/selection.json")).unwrap();
    assert_eq!(sel.m, 2);
    assert!(matches!(sel.table.k, Some(3 | 5 | 40)));
    for m in ["selection.json", "finetuned.hsck", "report.json"] {
        let o = headsteer(d, &["repro", &format!("run/{m}.manifest.json")]);
        assert!(o.status.success(), "{m}: {}", stderr(&o));
    }

    // tampering with an input is caught before replay
    let demos = d.join("run/demos.hsdm");
    let mut bytes = std::fs::read(&demos).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&demos, bytes).unwrap();
    let o = headsteer(d, &["repro", "run/finetuned.hsck.manifest.json"]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));

    // and a corrupt input fails the stage with the io/corrupt code
    let o = headsteer(d, &["--config", "tiny.toml", "cache-acts"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("Checksum"), "{}", stderr(&o));
}

#[test]
fn exit_codes_by_error_class() {
    let dir = setup();
    let d = dir.path();
    let o = headsteer(d, &["--config", "tiny.toml", "select-heads"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("missing input file"));
    assert_eq!(stderr(&o).lines().count(), 1);

    let o = headsteer(d, &["--config", "tiny.toml", "--m", "9", "gen-demos"]);
    assert_eq!(o.status.code(), Some(2));
    let o = headsteer(d, &["--config", "nope.toml", "gen-demos"]);
    assert_eq!(o.status.code(), Some(3));
    let o = headsteer(d, &["--method", "magic", "gen-demos"]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(
        d.join("bad.toml"),
        "[finetune]\nwarmup_steps = 10\ntotal_steps = 5\n",
    )
    .unwrap();
    let o = headsteer(d, &["--config", "bad.toml", "gen-demos"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_head_baseline_ignores_selection_with_warning() {
    let dir = setup();
    let d = dir.path();
    let o = headsteer(d, &["--config", "tiny.toml", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = headsteer(
        d,
        &[
            "--config",
            "tiny.toml",
            "--variant",
            "full_head_baseline",
            "finetune",
            "--selection",
            "does-not-exist.json",
            "--out",
            "fhb.hsck",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("ignoring selection file"));
    let m = headsteer::pipeline::Manifest::read(&d.join("fhb.hsck.manifest.json")).unwrap();
    assert!(m.stages[0]
        .inputs
        .iter()
        .all(|h| !h.path.ends_with("does-not-exist.json")));
}

#[test]
fn seed_precedence_through_the_binary() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("noseed.toml"), TINY.replace("seed = 3\n", "")).unwrap();
    let seed_of = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_headsteer"));
        cmd.current_dir(d).env_remove("HEADSTEER_SEED");
        if let Some(v) = env {
            cmd.env("HEADSTEER_SEED", v);
        }
        let o = cmd
            .args(extra)
            .args(["gen-demos", "--out", "x.hsdm", "--manifest", "x.json"])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        headsteer::pipeline::Manifest::read(&d.join("x.json"))
            .unwrap()
            .seed
    };
    assert_eq!(seed_of(&["--config", "noseed.toml"], Some("21")), 21);
    assert_eq!(seed_of(&["--config", "tiny.toml"], Some("21")), 3);
    assert_eq!(
        seed_of(&["--config", "tiny.toml", "--seed", "8"], Some("21")),
        8
    );
}
