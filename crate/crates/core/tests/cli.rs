use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use matchattn::harness::io::{read_pfm, write_pfm};
use matchattn::Tensor;

fn matchattn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matchattn"))
        .args(args)
        .current_dir(dir)
        .env_remove("MATCHATTN_SEED")
        .output()
        .expect("spawn matchattn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(matchattn(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(matchattn(&["flops", "--layer", "8", "8"], dir.path()).status.code(), Some(2));

    fs::write(dir.path().join("bad.toml"), "tsak = \"stereo\"\n").unwrap();
    let o = matchattn(&["train-toy", "--config", "bad.toml", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tsak"));
}

#[test]
fn missing_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = matchattn(&["eval", "--pred", "nope.pfm", "--gt", "nope.pfm"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flops_layer_prints_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let o = matchattn(&["flops", "--layer", "8", "8", "4", "32", "32", "3", "--out", "."], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    for v in ["262144", "40960", "4096"] {
        assert!(text.contains(v), "{text}");
    }
    assert!(dir.path().join("flops.csv").exists());
}

#[test]
fn generated_ground_truth_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = matchattn(&["gen", "--kind", "two-layer", "--height", "32", "--width", "64", "--seed", "3", "--out", "scene"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["i0.ppm", "i1.ppm", "noc0.pgm", "noc1.pgm", "gt0.pfm", "gt1.pfm"] {
        assert!(dir.path().join("scene").join(f).exists(), "{f}");
    }
    let o = matchattn(
        &["eval", "--pred", "scene/gt0.pfm", "--gt", "scene/gt0.pfm", "--noc", "scene/noc0.pgm", "--out", "m"],
        dir.path(),
    );
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("m/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("region,count,epe,bad_0.5,bad_1,bad_2,bad_3,d1,avg_err"));
    for row in lines {
        let cols: Vec<&str> = row.split(',').collect();
        assert!(cols[2..].iter().all(|c| c.parse::<f64>().unwrap() == 0.0), "{row}");
    }

    let gt = read_pfm(&dir.path().join("scene/gt0.pfm")).unwrap();
    let off = Tensor::new(gt.shape().to_vec(), gt.data().iter().map(|d| d + 2.0).collect()).unwrap();
    write_pfm(&dir.path().join("off.pfm"), &off).unwrap();
    let o = matchattn(&["eval", "--pred", "off.pfm", "--gt", "scene/gt0.pfm"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("all,2048,2,"), "{}", stdout(&o));
}

#[test]
fn train_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "task = \"flow\"\n[scene]\nkind = \"smooth_warp\"\nheight = 32\nwidth = 64\n[train]\nsteps = 2\n",
    )
    .unwrap();
    let o = matchattn(&["train-toy", "--config", "run.toml", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 3);

    let o = matchattn(&["gen", "--kind", "smooth-warp", "--height", "32", "--width", "64", "--out", "scene"], dir.path());
    assert!(o.status.success());
    let o = matchattn(
        &["infer", "--checkpoint", "run/model.mtck", "--left", "scene/i0.ppm", "--right", "scene/i1.ppm", "--out", "pred"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["pred.flo", "pred.csv", "self_rpos_h0.flo"] {
        assert!(dir.path().join("pred").join(f).exists(), "{f}");
    }
    let o = matchattn(&["eval", "--pred", "pred/pred.flo", "--gt", "scene/gt0.flo"], dir.path());
    assert!(o.status.success());
}
