use std::path::Path;
use std::process::{Command, Output};

const SMALL_CONFIG: &str = r#"
seed = 3
batch_size = 4
steps = 20
checkpoint_every = 10
log_every = 10
val_pairs = 4

[model]
image_size = 64
codec_factor = 4
base_channels = 8
channel_mult = [1, 2]
transformer_blocks = [1, 1]
heads = 2
norm_groups = 4
conv_in_kernel = 1
temb_dim = 16
au_mlp_hidden = 8
au_mlp_channels = 4

[model.schedule]
num_timesteps = 50
"#;

fn facelab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_facelab"))
        .current_dir(dir)
        .env_remove("FACELAB_ESTIMATOR")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = facelab(dir, args);
    assert!(
        out.status.success(),
        "facelab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("small.toml"), SMALL_CONFIG).unwrap();

    let s = ok(dir, &["gen-data", "--pairs", "700", "--identities", "10", "--seed", "5", "--out", "data"]);
    assert!(s.contains("700 pairs"));
    let s = ok(dir, &["train-estimator", "--data", "data", "--out", "est.ckpt", "--epochs", "1"]);
    assert!(s.contains("AU MAE"));
    let s = ok(dir, &["train", "--data", "data", "--config", "small.toml", "--out", "run"]);
    assert!(s.contains("trained 20 steps"));
    let model = dir.join("run").join("model.ckpt");
    assert!(model.exists());

    let img = std::fs::read_dir(dir.join("data"))
        .unwrap()
        .chain(std::fs::read_dir(dir.join("data").join("images")).into_iter().flatten())
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .find(|p| p.extension().is_some_and(|x| x == "png"))
        .expect("dataset has png images");
    let img = img.to_str().unwrap();
    ok(
        dir,
        &[
            "edit", "--ckpt", "run/model.ckpt", "--estimator", "est.ckpt", "--image", img, "--delta", "AU4=-2,AU12=+1",
            "--steps", "2", "--out", "edited.png",
        ],
    );
    let png = std::fs::read(dir.join("edited.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");

    ok(
        dir,
        &[
            "eval", "--ckpt", "run/model.ckpt", "--data", "data", "--estimator", "est.ckpt", "--identities", "1", "--combos",
            "0", "--steps", "2", "--out", "reports",
        ],
    );
    let reports: Vec<_> = std::fs::read_dir(dir.join("reports")).unwrap().filter_map(|e| e.ok()).collect();
    assert!(reports.iter().any(|e| e.path().extension().is_some_and(|x| x == "jsonl")));
}

#[test]
fn missing_checkpoint_is_reported_by_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = facelab(
        tmp.path(),
        &["edit", "--ckpt", "nowhere/model.ckpt", "--image", "x.png", "--delta", "AU4=-6", "--out", "y.png"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/model.ckpt"));
}

#[test]
fn bad_delta_is_rejected_before_loading() {
    let tmp = tempfile::tempdir().unwrap();
    for delta in ["AU12+3", "AU4=-11"] {
        let out = facelab(
            tmp.path(),
            &["edit", "--ckpt", "nowhere.ckpt", "--image", "x.png", "--delta", delta, "--out", "y.png"],
        );
        assert!(!out.status.success());
        assert!(!String::from_utf8_lossy(&out.stderr).contains("nowhere.ckpt"), "{delta}");
    }
}
