use std::path::{Path, PathBuf};
use std::process::Command;

use headsplat::checkpoint::load_checkpoint;
use headsplat::commands::{cmd_eval, cmd_fit, cmd_render, cmd_synth, CHECKPOINT_DIR, FINAL_NEUTRAL, LOSS_LOG};
use headsplat::config::{Group, RunConfig};
use headsplat::formats::image::{decode_raw, read_png};
use headsplat::formats::ply::{read_ply, write_ply, PlyEncoding};
use headsplat::synth::{GT_LANDMARKS, GT_NEUTRAL, GT_SCAN};
use headsplat_core::eval::ScanCloud;
use headsplat_core::math::Quat;
use headsplat_core::model::Pose;
use headsplat_core::Vec3;

fn small(root: &Path, frames: usize) -> RunConfig {
    let mut c = RunConfig {
        seed: 5,
        ..RunConfig::default()
    };
    c.camera.width = 40;
    c.camera.height = 40;
    c.synth.frames = frames;
    c.synth.output = root.join("data");
    c.fit.dataset = root.join("data");
    c.fit.output = root.join("fit");
    c.render.dataset = root.join("data");
    c.render.checkpoint = root.join("fit").join(CHECKPOINT_DIR);
    c.render.output = root.join("render");
    c.eval.mesh = root.join("data").join(GT_NEUTRAL);
    c.eval.scan = root.join("data").join(GT_SCAN);
    c.eval.landmarks = root.join("data").join(GT_LANDMARKS);
    c
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_single_identity_frame_covers_pixels() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path(), 1);
    c.synth.poses = Some(vec![Pose {
        global_translation: [0.0, 0.0, 1.0],
        ..Pose::default()
    }]);
    let r = cmd_synth(&c, None).unwrap();
    assert!(r.coverage[0] > 0);
    let mask = read_png(&tmp.path().join("data/frame_000/mask.png")).unwrap();
    assert!(mask.data.iter().any(|v| *v > 0.5));
}

#[test]
fn synth_is_byte_identical_for_one_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    // identical output path strings so the config echo matches too
    let ca = small(Path::new("data_root"), 2);
    let run = |dir: &Path| {
        let mut c = ca.clone();
        c.synth.output = dir.join("data");
        cmd_synth(&c, None).unwrap();
        let mut t = tree(&dir.join("data"));
        t.retain(|(p, _)| p != Path::new("config.toml"));
        t
    };
    let ta = run(a.path());
    assert!(ta.len() > 10);
    assert_eq!(ta, run(b.path()));
}

#[test]
fn synth_landmarks_follow_per_frame_expressions() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path(), 2);
    let pose = Pose {
        global_translation: [0.0, 0.0, 1.0],
        ..Pose::default()
    };
    c.synth.poses = Some(vec![pose; 2]);
    c.synth.psi = Some(vec![vec![0.0; 10], vec![1.5; 10]]);
    cmd_synth(&c, None).unwrap();
    let f0 = std::fs::read_to_string(tmp.path().join("data/frame_000/landmarks.txt")).unwrap();
    let f1 = std::fs::read_to_string(tmp.path().join("data/frame_001/landmarks.txt")).unwrap();
    assert_ne!(f0, f1);

    c.synth.psi = Some(vec![vec![0.7; 10]; 2]);
    cmd_synth(&c, None).unwrap();
    let f0 = std::fs::read_to_string(tmp.path().join("data/frame_000/landmarks.txt")).unwrap();
    let f1 = std::fs::read_to_string(tmp.path().join("data/frame_001/landmarks.txt")).unwrap();
    assert_eq!(f0, f1);
}

#[test]
fn zero_iterations_writes_initial_state_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path(), 2);
    c.fit.settings.iterations = 0;
    cmd_synth(&c, None).unwrap();
    let s = cmd_fit(&c, None).unwrap();
    assert_eq!(s.iterations, 0);
    assert_eq!(s.initial_l1, s.final_l1);
    let fit = tmp.path().join("fit");
    for f in ["frame_000/color.png", "frame_001/depth.raw", "frame_001/normal.raw", "frame_000/mesh.obj", FINAL_NEUTRAL] {
        assert!(fit.join(f).exists(), "{f} missing");
    }
    assert_eq!(std::fs::read_to_string(fit.join(LOSS_LOG)).unwrap(), "");
    let state = load_checkpoint(&fit.join(CHECKPOINT_DIR)).unwrap();
    assert!(state.beta.iter().all(|b| *b == 0.0));
    let raw = decode_raw(&std::fs::read(fit.join("frame_000/normal.raw")).unwrap()).unwrap();
    assert_eq!((raw.width, raw.height, raw.channels), (40, 40, 3));
}

#[test]
fn short_fit_lowers_l1_and_freeze_pins_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path(), 2);
    c.fit.settings.iterations = 25;
    cmd_synth(&c, None).unwrap();
    let s = cmd_fit(&c, None).unwrap();
    assert!(s.final_l1 < s.initial_l1, "{} !< {}", s.final_l1, s.initial_l1);
    let free = load_checkpoint(&tmp.path().join("fit").join(CHECKPOINT_DIR)).unwrap();
    assert!(free.beta.iter().any(|b| *b != 0.0));

    c.fit.freeze = vec![Group::Shape];
    c.fit.output = tmp.path().join("frozen");
    cmd_fit(&c, None).unwrap();
    let frozen = load_checkpoint(&tmp.path().join("frozen").join(CHECKPOINT_DIR)).unwrap();
    assert!(frozen.beta.iter().all(|b| b.to_bits() == 0));
    assert_eq!(frozen.iteration, 25);
}

#[test]
fn resumed_fit_matches_an_uninterrupted_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path(), 2);
    c.fit.settings.iterations = 6;
    c.fit.settings.t_densify = 3;
    cmd_synth(&c, None).unwrap();
    cmd_fit(&c, None).unwrap();
    let straight = load_checkpoint(&tmp.path().join("fit").join(CHECKPOINT_DIR)).unwrap();

    c.fit.output = tmp.path().join("part");
    c.fit.settings.iterations = 4;
    cmd_fit(&c, None).unwrap();
    c.fit.resume = Some(tmp.path().join("part").join(CHECKPOINT_DIR));
    c.fit.settings.iterations = 6;
    cmd_fit(&c, None).unwrap();
    let resumed = load_checkpoint(&tmp.path().join("part").join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(resumed, straight);

    let strip = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .map(|l| l.split(",\"wall_time\"").next().unwrap().to_string())
            .collect()
    };
    assert_eq!(strip(&tmp.path().join("part").join(LOSS_LOG)), strip(&tmp.path().join("fit").join(LOSS_LOG)));
}

#[test]
fn render_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path(), 2);
    c.fit.settings.iterations = 3;
    cmd_synth(&c, None).unwrap();
    cmd_fit(&c, None).unwrap();
    let state = load_checkpoint(&c.render.checkpoint).unwrap();
    let fit_color = std::fs::read(tmp.path().join("fit/frame_001/color.png")).unwrap();

    c.render.frame = 1;
    cmd_render(&c, None).unwrap();
    let plain = std::fs::read(tmp.path().join("render/color.png")).unwrap();
    assert_eq!(plain, fit_color);
    assert_eq!(
        std::fs::read(tmp.path().join("render/depth.raw")).unwrap(),
        std::fs::read(tmp.path().join("fit/frame_001/depth.raw")).unwrap()
    );

    c.render.psi = Some(state.psi[1].clone());
    cmd_render(&c, None).unwrap();
    assert_eq!(std::fs::read(tmp.path().join("render/color.png")).unwrap(), plain);

    c.render.psi = None;
    c.render.rotate_deg = Some([0.0, 10.0, 0.0]);
    let out = cmd_render(&c, None).unwrap();
    let q = Quat::from_rotation_vector(&Vec3::new(0.0, 10f64.to_radians(), 0.0)).mul(&state.poses[1].global_rotation);
    assert_eq!(out.pose.global_rotation, q);
    let turned = read_png(&tmp.path().join("render/color.png")).unwrap();
    let base = headsplat::formats::image::decode_png(&plain).unwrap();
    assert!(turned.max_abs_diff(&base) > 0.1);

    c.render.psi = Some(vec![0.0; 3]);
    assert_eq!(cmd_render(&c, None).unwrap_err().exit_code(), 1);
}

#[test]
fn eval_examples() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small(tmp.path(), 1);
    cmd_synth(&c, None).unwrap();

    let m = cmd_eval(&c).unwrap();
    assert!(m.median_mm < 1e-6, "median {}", m.median_mm);

    c.eval.metrical = true;
    let m = cmd_eval(&c).unwrap();
    assert_eq!(m.scale, 1.0);
    assert!(m.metrical);

    // the scaled cloud with scaled landmarks keeps non-metrical distances
    let mut base = c.clone();
    base.eval.metrical = false;
    let fit_dir = tmp.path().join("fitz");
    let mut f = c.clone();
    f.fit.output = fit_dir.clone();
    f.fit.settings.iterations = 0;
    cmd_fit(&f, None).unwrap();
    base.eval.mesh = fit_dir.join(FINAL_NEUTRAL);
    let m0 = cmd_eval(&base).unwrap();
    assert!(m0.median_mm > 0.05);

    let scan = read_ply(&base.eval.scan).unwrap();
    let scaled = ScanCloud::new(scan.points.iter().map(|p| p * 3.0).collect());
    let sp = tmp.path().join("scaled.ply");
    write_ply(&sp, &scaled, PlyEncoding::Ascii).unwrap();
    let table = std::fs::read_to_string(&base.eval.landmarks).unwrap();
    let scaled_table: String = table
        .lines()
        .map(|l| {
            if l.starts_with('#') {
                return format!("{l}\n");
            }
            let t: Vec<f64> = l.split_whitespace().map(|x| x.parse().unwrap()).collect();
            format!("{} {} {} {}\n", t[0], t[1] * 3.0, t[2] * 3.0, t[3] * 3.0)
        })
        .collect();
    let lp = tmp.path().join("scaled_landmarks.txt");
    std::fs::write(&lp, scaled_table).unwrap();
    let mut s = base.clone();
    s.eval.scan = sp;
    s.eval.landmarks = lp;
    let m1 = cmd_eval(&s).unwrap();
    assert!((m1.median_mm - m0.median_mm).abs() < 1e-6, "{} vs {}", m1.median_mm, m0.median_mm);
    assert!((m1.mean_mm - m0.mean_mm).abs() < 1e-6);
    assert!((m1.scale * 3.0 - m0.scale).abs() < 1e-9);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_headsplat"))
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let code = |args: &[&str]| bin().current_dir(d).args(args).output().unwrap().status.code().unwrap();

    assert_eq!(code(&["synth", "--output", "data", "--frames", "1", "--width", "32", "--height", "32"]), 0);
    assert!(d.join("data/config.toml").exists());
    // validation: missing dataset, unknown key, bad value
    assert_eq!(code(&["fit", "--dataset", "nowhere"]), 1);
    std::fs::write(d.join("bad.toml"), "[fit.settings]\nlearnin_rates = 1\n").unwrap();
    assert_eq!(code(&["--config", "bad.toml", "fit"]), 1);
    assert_eq!(code(&["synth", "--output", "x", "--frames", "0"]), 1);
    assert!(!d.join("x").exists(), "no partial output on validation failure");
    // runtime: collinear landmarks make the alignment degenerate
    std::fs::write(d.join("line.txt"), "0 0 0 0\n1 1 0 0\n2 2 0 0\n3 3 0 0\n").unwrap();
    assert_eq!(
        code(&["eval", "--mesh", "data/gt_neutral.obj", "--scan", "data/gt_scan.ply", "--landmarks", "line.txt"]),
        2
    );
    // numerical abort: a learning rate that overflows the parameters
    std::fs::write(d.join("blow.toml"), "[fit.settings.learning_rates]\nsplats = 1e300\n").unwrap();
    let out = bin()
        .current_dir(d)
        .args(["--config", "blow.toml", "fit", "--dataset", "data", "--output", "blow", "--iterations", "5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
