//! End-to-end tests of the `troi` binary surface.

use std::path::Path;
use std::process::{Command, Output};

use troi_core::io::{read_tensor, AnyTensor};
use troi_core::{roi_align, RoiBox};

fn troi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_troi"))
        .args(args)
        .output()
        .expect("failed to spawn troi")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen_video(dir: &Path, seed: &str, frames: &str) {
    let out = troi(&[
        "gen",
        "--seed",
        seed,
        "--frames",
        frames,
        "--height",
        "12",
        "--width",
        "12",
        "--channels",
        "8",
        "--num-boxes",
        "2",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "gen failed: {}", stderr(&out));
}

#[test]
fn sample_plan_prints_indices() {
    let out = troi(&[
        "sample-plan",
        "--video-len",
        "10",
        "--target",
        "5",
        "--t-support",
        "4",
        "--strategy",
        "consecutive",
    ]);
    assert!(out.status.success());
    assert_eq!(stdout(&out).trim(), "3 4 6 7");

    let out = troi(&[
        "sample-plan",
        "--video-len",
        "15",
        "--target",
        "7",
        "--t-support",
        "3",
        "--strategy",
        "uniform",
    ]);
    assert_eq!(stdout(&out).trim(), "0 7 14");

    let out = troi(&[
        "sample-plan",
        "--video-len",
        "10",
        "--target",
        "0",
        "--t-support",
        "4",
        "--strategy",
        "consecutive",
    ]);
    assert_eq!(stdout(&out).trim(), "0 0 1 2");
}

#[test]
fn gen_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    gen_video(&a, "7", "4");
    gen_video(&b, "7", "4");
    for name in ["frame_00000.troi", "frame_00003.troi", "boxes.txt"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between identical gen runs");
    }
    let other = dir.path().join("c");
    gen_video(&other, "8", "4");
    assert_ne!(
        std::fs::read(a.join("frame_00000.troi")).unwrap(),
        std::fs::read(other.join("frame_00000.troi")).unwrap(),
        "different seeds must produce different data"
    );
}

#[test]
fn run_is_reproducible_and_t0_matches_roi_align() {
    let dir = tempfile::tempdir().unwrap();
    let vid = dir.path().join("vid");
    gen_video(&vid, "21", "5");

    // two identical runs agree bitwise
    let out1 = dir.path().join("out1.troi");
    let out2 = dir.path().join("out2.troi");
    for out in [&out1, &out2] {
        let res = troi(&[
            "run",
            vid.to_str().unwrap(),
            "--target",
            "2",
            "--t-support",
            "4",
            "--n-blocks",
            "4",
            "--pool-size",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(res.status.success(), "run failed: {}", stderr(&res));
    }
    assert_eq!(
        std::fs::read(&out1).unwrap(),
        std::fs::read(&out2).unwrap(),
        "identical runs must produce identical output files"
    );

    // T=0 reduces to plain ROI align on the target frame
    let out0 = dir.path().join("out0.troi");
    let res = troi(&[
        "run",
        vid.to_str().unwrap(),
        "--target",
        "2",
        "--t-support",
        "0",
        "--pool-size",
        "3",
        "--out",
        out0.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "run failed: {}", stderr(&res));
    let stacked = match read_tensor(&out0).unwrap() {
        AnyTensor::F64(t) => t,
        _ => panic!("expected f64 output"),
    };
    assert_eq!(stacked.dims()[0], 2, "two proposals expected");

    let frame = match read_tensor(&vid.join("frame_00002.troi")).unwrap() {
        AnyTensor::F64(t) => t,
        _ => panic!("expected f64 frames"),
    };
    let boxes = troi_core::io::read_boxes(&vid.join("boxes.txt")).unwrap();
    let per = 3 * 3 * 8;
    for (i, b) in boxes.iter().enumerate() {
        let expect = roi_align(
            &frame,
            &RoiBox::new(b.x1, b.y1, b.x2, b.y2).unwrap(),
            3,
            3,
            2,
        )
        .unwrap();
        assert_eq!(
            &stacked.data()[i * per..(i + 1) * per],
            expect.data(),
            "proposal {i}: T=0 output must equal plain roi_align bitwise"
        );
    }
}

#[test]
fn run_prints_summary_lines() {
    let dir = tempfile::tempdir().unwrap();
    let vid = dir.path().join("vid");
    gen_video(&vid, "3", "4");
    let out = dir.path().join("out.troi");
    let res = troi(&[
        "run",
        vid.to_str().unwrap(),
        "--target",
        "1",
        "--t-support",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let text = stdout(&res);
    assert!(text.contains("proposal 0: min="));
    assert!(text.contains("attention_entropy="));
    assert!(text.contains("plan (uniform"));
}

#[test]
fn f32_route_works_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let vid = dir.path().join("vid32");
    let out = troi(&[
        "gen",
        "--seed",
        "9",
        "--frames",
        "3",
        "--height",
        "10",
        "--width",
        "10",
        "--channels",
        "8",
        "--num-boxes",
        "1",
        "--dtype",
        "f32",
        "--out",
        vid.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "gen failed: {}", stderr(&out));
    match read_tensor(&vid.join("frame_00000.troi")).unwrap() {
        AnyTensor::F32(t) => assert_eq!(t.dims(), &[10, 10, 8]),
        _ => panic!("gen --dtype f32 must write f32 tensors"),
    }

    let out_path = dir.path().join("out32.troi");
    let res = troi(&[
        "run",
        vid.to_str().unwrap(),
        "--target",
        "1",
        "--t-support",
        "2",
        "--pool-size",
        "3",
        "--dtype",
        "f32",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "run failed: {}", stderr(&res));
    match read_tensor(&out_path).unwrap() {
        AnyTensor::F32(t) => assert_eq!(t.dims(), &[1, 3, 3, 8]),
        _ => panic!("run --dtype f32 must write f32 output"),
    }

    let bench = troi(&[
        "bench",
        "--height",
        "10",
        "--width",
        "10",
        "--channels",
        "8",
        "--t-support",
        "2",
        "--reps",
        "3",
        "--dtype",
        "f32",
    ]);
    assert!(
        bench.status.success(),
        "f32 bench failed: {}",
        stderr(&bench)
    );
}

#[test]
fn bench_reports_speedup_and_agreement() {
    let out = troi(&[
        "bench",
        "--height",
        "10",
        "--width",
        "10",
        "--channels",
        "16",
        "--t-support",
        "2",
        "--reps",
        "3",
    ]);
    assert!(out.status.success(), "bench failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("most_similar_roi_align"));
    assert!(text.contains("tafa_forward"));
    assert!(text.contains("speedup"));
}

#[test]
fn gradcheck_command_passes() {
    let out = troi(&["gradcheck", "--probes", "4", "--seed", "3"]);
    assert!(out.status.success(), "gradcheck failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("tafa_forward"));
    assert!(text.contains("negative control: rejected as expected"));
}

#[test]
fn errors_exit_nonzero_with_prefix() {
    // empty video
    let dir = tempfile::tempdir().unwrap();
    let out = troi(&[
        "gen",
        "--frames",
        "0",
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"), "got: {}", stderr(&out));

    // dims overflow guard (2^17 each axis -> 2^51 elements)
    let out = troi(&[
        "gen",
        "--height",
        "131072",
        "--width",
        "131072",
        "--channels",
        "131072",
        "--out",
        dir.path().join("y").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"));
    assert!(stderr(&out).contains("2^48"));

    // zero bench repetitions
    let out = troi(&[
        "bench",
        "--reps",
        "0",
        "--channels",
        "8",
        "--t-support",
        "2",
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"));

    // missing video directory
    let out = troi(&[
        "run",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        dir.path().join("o.troi").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"));

    // odd support count for a symmetric strategy
    let out = troi(&[
        "sample-plan",
        "--video-len",
        "10",
        "--target",
        "5",
        "--t-support",
        "3",
        "--strategy",
        "consecutive",
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error:"));
}
