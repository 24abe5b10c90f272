use std::path::{Path, PathBuf};
use std::process::Command;

use irkd_cli::{
    cmd_analyze, cmd_eval, cmd_generate, cmd_plot, cmd_train, parse_epoch_log, render_panel,
    score_map,
};
use irkd_core::checkpoint::Checkpoint;
use irkd_core::dataset::{Dataset, GenerateOptions};
use irkd_core::Error;

fn small_opts() -> GenerateOptions {
    GenerateOptions {
        n_train: 20,
        n_test: 8,
        size: 32,
        seed: 3,
        val_ratio: 0.1,
    }
}

fn write_config(dir: &Path, data: &Path, mode: &str, epochs: usize) -> PathBuf {
    let text = format!(
        "mode = \"{mode}\"\nepochs = {epochs}\nbatch = 4\nbilevel_period = 2\ngn_steps = 1\nseed = 5\n\
         data_dir = {data:?}\nout_dir = {out:?}\ncache_dir = {cache:?}\n",
        data = data.display().to_string(),
        out = dir.join("runs").display().to_string(),
        cache = dir.join("cache").display().to_string(),
    );
    let path = dir.join(format!("{mode}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

fn irkd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_irkd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn generate_train_eval_analyze_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ds = cmd_generate(&data, &small_opts()).unwrap();
    assert_eq!(ds.split.train.len() + ds.split.val.len(), 20);
    assert_eq!(ds.split.test.len(), 8);
    assert_eq!(Dataset::load(&data).unwrap().samples.len(), 28);

    let cfg = write_config(tmp.path(), &data, "full", 2);
    let run = cmd_train(&cfg, None).unwrap();
    for f in [
        "epochs.csv",
        "losses.csv",
        "clusters.json",
        "final.json",
        "ckpt_e0002.json",
        "report.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert_eq!(parse_epoch_log(&log).unwrap().len(), 2);

    let ckpt = run.join("final.json");
    let out = tmp.path().join("eval");
    let report = cmd_eval(&ckpt, &data, "test", &out).unwrap();
    assert_eq!(report.rows[0].0, "Overall");
    assert_eq!(report.rows[0].1.n, 8);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("split,tag,IoU,nIoU,Pd,Fa,n\n"));

    let an = tmp.path().join("analysis");
    let a = cmd_analyze(&ckpt, &data, "test", &an, 2).unwrap();
    assert_eq!(a.panels.len(), 2);
    // input, 3 hooks × (pre, post), attention map, prediction, ground truth
    assert_eq!(a.tiles_per_panel, 2 * 3 + 4);
    assert_eq!(a.attention[0].0, "Overall");
    assert_eq!(a.attention[0].1.n, 8);
    let img = image::open(&a.panels[0]).unwrap();
    assert_eq!(img.height(), 32);
    assert_eq!(img.width() as usize, 10 * 32 + 9 * 2);
    assert!(an.join("attn.csv").is_file());

    let png = tmp.path().join("curves.png");
    assert_eq!(cmd_plot(&run.join("epochs.csv"), &png).unwrap(), 2);
    assert!(image::open(&png).is_ok());
}

#[test]
fn resume_continues_and_rejects_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_generate(&data, &small_opts()).unwrap();
    let cfg = write_config(tmp.path(), &data, "student_only", 2);
    let run = cmd_train(&cfg, None).unwrap();
    let ck = run.join("final.json");

    // More epochs is not a config change.
    let longer = write_config(tmp.path(), &data, "student_only", 3);
    let resumed = cmd_train(&longer, Some(&ck)).unwrap();
    assert_eq!(resumed, run);
    assert_eq!(
        Checkpoint::load(&run.join("final.json"))
            .unwrap()
            .records
            .last()
            .unwrap()
            .epoch,
        3
    );

    let text = std::fs::read_to_string(&longer)
        .unwrap()
        .replace("seed = 5", "seed = 6");
    std::fs::write(&longer, text).unwrap();
    let err = cmd_train(&longer, Some(&ck)).unwrap_err();
    assert!(matches!(err, Error::ConfigHashMismatch { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn analyze_needs_a_full_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_generate(&data, &small_opts()).unwrap();
    let run = cmd_train(&write_config(tmp.path(), &data, "student_only", 1), None).unwrap();
    let err = cmd_analyze(&run.join("final.json"), &data, "test", tmp.path(), 1)
        .err()
        .unwrap();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn plot_rejects_malformed_and_empty_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let png = tmp.path().join("p.png");
    let log = tmp.path().join("epochs.csv");

    std::fs::write(
        &log,
        "epoch,train_IoU,test_IoU\n0,0,0\n1,0.1,0.2\n2,0.2,oops\n",
    )
    .unwrap();
    match cmd_plot(&log, &png) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("expected parse error, got {other:?}"),
    }
    std::fs::write(&log, "epoch,test_IoU\n1,0.2\n").unwrap();
    assert!(matches!(
        cmd_plot(&log, &png),
        Err(Error::Parse { line: 1, .. })
    ));

    std::fs::write(&log, "epoch,train_IoU,test_IoU\n0,0,0\n").unwrap();
    let err = cmd_plot(&log, &png).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(!png.exists());
}

#[test]
fn score_map_and_panel_geometry() {
    let m = score_map(&[0.1, 0.2, 0.3, 0.4], 2, 4, 3);
    assert_eq!(
        m,
        vec![0.1, 0.1, 0.2, 0.1, 0.1, 0.2, 0.3, 0.3, 0.4, 0.3, 0.3, 0.4]
    );
    let img = render_panel(&[vec![0.0, 1.0, 2.0, 3.0], vec![5.0; 4]], 2, 2);
    assert_eq!((img.width(), img.height()), (6, 2));
    assert_eq!(img.get_pixel(0, 0)[0], 0);
    assert_eq!(img.get_pixel(1, 1)[0], 255);
    assert_eq!(img.get_pixel(4, 0)[0], 0);
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "epochs = 1\nbogus_key = 3\n").unwrap();
    assert_eq!(
        irkd(&["train", "--config", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );

    let good = write_config(tmp.path(), &missing, "student_only", 1);
    assert_eq!(
        irkd(&["train", "--config", good.to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );

    let log = tmp.path().join("e.csv");
    std::fs::write(&log, "epoch,train_IoU,test_IoU\n1,x,0\n").unwrap();
    let out = tmp.path().join("e.png");
    assert_eq!(
        irkd(&[
            "plot",
            "--log",
            log.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );

    let data = tmp.path().join("data");
    let gen = irkd(&[
        "generate",
        "--out",
        data.to_str().unwrap(),
        "--n-train",
        "10",
        "--n-test",
        "4",
        "--size",
        "32",
    ]);
    assert!(
        gen.status.success(),
        "{}",
        String::from_utf8_lossy(&gen.stderr)
    );
    assert!(data.join("manifest.json").is_file());
}
