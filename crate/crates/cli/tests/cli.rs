use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gvsr::data::{read_lexicon, Role, LEXICON};
use gvsr::predict::read_predictions;

fn gvsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gvsr")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = gvsr(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&[
        "synth", "--out", p(dir), "--n-videos", "6", "--n-val", "3", "--n-verbs", "5", "--n-words", "30", "--d-vid",
        "16", "--d-obj", "16",
    ]);
}

#[test]
fn help_lists_config_keys() {
    let text = ok(&["train", "--help"]);
    for key in ["lr", "batch_size", "verb_loss_mode", "theta_role", "M"] {
        assert!(text.contains(key), "{key} missing from help");
    }
    ok(&["--help"]);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(gvsr(&["train", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = gvsr(&["synth", "--out", p(dir.path()), "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    assert_eq!(gvsr(&["synth", "--out", p(dir.path()), "lr=abc"]).status.code(), Some(2));
}

#[test]
fn validate_accepts_synth_and_rejects_damage() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let text = ok(&["validate", "--data", p(dir.path())]);
    assert!(text.contains("0 issues"), "{text}");

    fs::write(dir.path().join(LEXICON), "{ not json").unwrap();
    assert_eq!(gvsr(&["validate", "--data", p(dir.path())]).status.code(), Some(1));
}

#[test]
fn full_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    synth(&data);
    ok(&[
        "train", "--data", p(&data), "--out", p(&run), "--overfit-preset", "--checkpoint-every", "1", "epochs=2",
        "d_model=16", "n_heads=2", "n_layers=1", "batch_size=4",
    ]);
    for f in ["run.cfg", "epochs.jsonl", "epoch-0001.ckpt", "epoch-0002.ckpt", "last.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("last.ckpt");

    let preds = root.path().join("pred.jsonl");
    ok(&["predict", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&preds)]);
    let report = root.path().join("report.json");
    let table = ok(&["eval", "--data", p(&data), "--predictions", p(&preds), "--out", p(&report)]);
    assert!(table.contains("cider"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["videos"], 3);

    let mapped = root.path().join("mapped.jsonl");
    ok(&[
        "predict", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&mapped), "--regime", "pred-gt-map",
        "--split", "all",
    ]);
    let lexicon = read_lexicon(&data.join(LEXICON)).unwrap();
    let mapped = read_predictions(&mapped).unwrap();
    assert_eq!(mapped.len(), 9);
    for v in &mapped {
        for e in &v.events {
            let roles: BTreeSet<Role> = e.roles.iter().map(|r| r.role).collect();
            assert_eq!(&roles, lexicon.roles_for_verb(e.verb).unwrap());
        }
    }

    let csv_path = root.path().join("ground.csv");
    ok(&["ground", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&csv_path), "--regime", "gt-roles"]);
    let csv = fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("video,event,role,frame,box,score"));
    assert!(lines.count() > 0);

    assert_eq!(
        gvsr(&["predict", "--data", p(&data), "--checkpoint", p(&ckpt), "--out", p(&preds), "--regime", "nope"])
            .status
            .code(),
        Some(2)
    );
}
