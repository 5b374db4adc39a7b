use std::path::Path;
use std::process::{Command, Output};

fn lesionseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesionseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 8] = [
    "--set",
    "image_height=32",
    "--set",
    "image_width=32",
    "--set",
    "synthetic_n=4",
    "--set",
    "eval_interval=1",
];

#[test]
fn train_resume_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec![
        "train",
        "--epochs",
        "2",
        "--checkpoint",
        "run/a.ckpt",
        "--log",
        "run/log.csv",
    ];
    args.extend(SMALL);
    let o = lesionseg(d, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,step,loss,lr,val_jaccard,val_dice,val_accuracy"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("2,2,"));
    assert_eq!(std::fs::read_to_string(d.join("run/log.csv")).unwrap(), out);

    let mut args = vec![
        "train",
        "--epochs",
        "3",
        "--resume",
        "run/a.ckpt",
        "--checkpoint",
        "run/b.ckpt",
    ];
    args.extend(SMALL);
    let o = lesionseg(d, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with("3,3,"));

    let o = lesionseg(
        d,
        &["eval", "--checkpoint", "run/b.ckpt", "--out", "metrics"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("4 samples: jaccard"));
    let csv = std::fs::read_to_string(d.join("metrics/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(d.join("metrics/metrics.json").exists());

    let raw: Vec<f64> = (0..3 * 20 * 30).map(|i| (i % 7) as f64 / 7.0).collect();
    lesionseg::data::save_overlay_png(&d.join("photo.png"), &raw, &[false; 600], 20, 30, [0, 0, 0])
        .unwrap();
    let o = lesionseg(
        d,
        &[
            "infer",
            "--checkpoint",
            "run/b.ckpt",
            "--out",
            "pred",
            "photo.png",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("pred/photo_mask.png").exists());
    assert!(d.join("pred/photo_overlay.png").exists());
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.cfg"),
        "# tiny run\nimage_height = 32\nimage_width = 32\nsynthetic_n = 2\nbatch_size = 2\nepochs = 5\n",
    )
    .unwrap();
    let o = lesionseg(
        d,
        &[
            "train",
            "--config",
            "run.cfg",
            "--epochs",
            "1",
            "--fusion-mode",
            "concat-res",
            "--seed",
            "3",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &["train", "--fusion-mode", "sum"][..],
        &["train", "--set", "unknown_key=1"],
        &["train", "--set", "epochs=0"],
        &["train", "--preset", "huge"],
        &["eval", "--checkpoint", "missing.ckpt"],
        &["infer", "--checkpoint", "missing.ckpt", "x.png"],
    ] {
        let o = lesionseg(d, args);
        assert!(!o.status.success(), "{args:?} should fail");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = lesionseg(dir.path(), &["selftest"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}");
    assert!(out.lines().all(|l| !l.starts_with("FAIL")));
    assert!(out.trim_end().ends_with("0 failed"));
}
