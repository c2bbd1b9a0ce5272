//! End-to-end checks of the command-line surface: exit codes, file
//! outputs and flag semantics. Pipeline-level byte determinism lives in
//! the acceptance suite.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use condseg::io::{read_json, read_mask_pgm, read_scene_bundle, write_json, FitDoc};
use condseg::raster::{distmap, hard_mask};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_condseg"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn condseg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small synthetic bundle set for fast CLI tests.
fn synth_scenes(dir: &Path, count: usize, seed: u64) {
    let out = run(bin().args(["synth", "--out"]).arg(dir).args([
        "--count",
        &count.to_string(),
        "--width",
        "200",
        "--height",
        "160",
        "--seed",
        &seed.to_string(),
    ]));
    assert_eq!(code(&out), 0, "synth failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn quick_fit(scene: &Path, fit_path: &Path, extra: &[&str]) -> Output {
    run(bin()
        .args(["fit", "--scene"])
        .arg(scene)
        .args(["--out"])
        .arg(fit_path)
        .args(["--iters", "150", "--restarts", "2", "--seed", "3"])
        .args(extra))
}

#[test]
fn synth_rejects_zero_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().args(["synth", "--out"]).arg(dir.path()).args(["--count", "0"]));
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_is_deterministic_and_respects_occlusion_cap() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for dir in [&a, &b] {
        let out = run(bin().args(["synth", "--out"]).arg(dir).args([
            "--count",
            "3",
            "--width",
            "200",
            "--height",
            "160",
            "--seed",
            "7",
            "--occlusion-max",
            "0.2",
        ]));
        assert_eq!(code(&out), 0);
    }
    for name in ["scene_0000", "scene_0001", "scene_0002"] {
        let scene = read_scene_bundle(&a.join(name)).unwrap();
        assert!(scene.occlusion_fraction <= 0.2);
        for file in ["eye.pgm", "vis_pupil.pgm", "vis_iris_region.pgm", "gt.json"] {
            let (fa, fb) = (a.join(name).join(file), b.join(name).join(file));
            assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap(), "{name}/{file}");
        }
    }
}

#[test]
fn fit_missing_eye_mask_exits_io_and_names_file() {
    let dir = tempfile::tempdir().unwrap();
    synth_scenes(dir.path(), 1, 5);
    let scene = dir.path().join("scene_0000");
    fs::remove_file(scene.join("eye.pgm")).unwrap();
    let out = quick_fit(&scene, &dir.path().join("fit.json"), &[]);
    assert_eq!(code(&out), 1);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("eye.pgm"),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn fit_produces_valid_json_with_contained_pupil() {
    let dir = tempfile::tempdir().unwrap();
    synth_scenes(dir.path(), 1, 9);
    let scene_dir = dir.path().join("scene_0000");
    let fit_path = dir.path().join("fit.json");
    let out = quick_fit(&scene_dir, &fit_path, &[]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let doc: FitDoc = read_json(&fit_path).unwrap();
    assert_eq!(doc.schema_version, 1);
    assert_eq!(doc.tau, 800.0);
    let fit = doc.fit.expect("fit present");
    assert!(fit.iris.final_loss >= 0.0 && fit.pupil.final_loss >= 0.0);

    // Fitted pupil region inside the fitted iris region.
    let scene = read_scene_bundle(&scene_dir).unwrap();
    let (w, h) = scene.eye.shape();
    let p = hard_mask(&fit.pupil.ellipse, w, h).unwrap();
    let i = hard_mask(&fit.iris.ellipse, w, h).unwrap();
    assert!((0..p.data.len()).all(|k| p.data[k] <= 0.5 || i.data[k] > 0.5));
}

#[test]
fn fit_records_tau_and_converges_across_sharpness() {
    let dir = tempfile::tempdir().unwrap();
    synth_scenes(dir.path(), 1, 13);
    let scene = dir.path().join("scene_0000");
    for tau in ["50", "800"] {
        let fit_path = dir.path().join(format!("fit_{tau}.json"));
        // Full iteration budget: the convergence flag needs the step-decay
        // stages to complete.
        let out = run(bin()
            .args(["fit", "--scene"])
            .arg(&scene)
            .args(["--out"])
            .arg(&fit_path)
            .args(["--restarts", "1", "--seed", "3", "--tau", tau]));
        assert_eq!(code(&out), 0);
        let doc: FitDoc = read_json(&fit_path).unwrap();
        assert_eq!(doc.tau, tau.parse::<f64>().unwrap());
        let fit = doc.fit.expect("fit");
        assert!(fit.iris.converged && fit.pupil.converged, "tau {tau}");
    }
}

#[test]
fn batch_fit_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let fits = dir.path().join("fits");
    synth_scenes(&scenes, 2, 21);
    let out = run(bin()
        .args(["fit", "--scenes"])
        .arg(&scenes)
        .args(["--out"])
        .arg(&fits)
        .args(["--iters", "150", "--restarts", "1", "--seed", "3", "--jobs", "2"]));
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let report_path = dir.path().join("report.json");
    let out = run(bin()
        .args(["eval", "--scenes"])
        .arg(&scenes)
        .args(["--fits"])
        .arg(&fits)
        .args(["--out"])
        .arg(&report_path)
        .args(["--baseline", "ransac", "--seed", "3"]));
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("condseg") && stdout.contains("ransac"), "table: {stdout}");

    let report: serde_json::Value = read_json(&report_path).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert!(report["condseg"]["iou_pupil"].as_f64().unwrap() > 0.5);
    assert!(report["ransac"].is_object());
}

#[test]
fn eval_with_ground_truth_as_fits_scores_unit_iou() {
    let dir = tempfile::tempdir().unwrap();
    let scenes_dir = dir.path().join("scenes");
    let fits_dir = dir.path().join("fits");
    synth_scenes(&scenes_dir, 2, 31);
    fs::create_dir_all(&fits_dir).unwrap();
    for name in ["scene_0000", "scene_0001"] {
        let scene = read_scene_bundle(&scenes_dir.join(name)).unwrap();
        let as_result = |e: condseg::Ellipse5D| condseg::FitResult {
            ellipse: e.canonicalize(),
            final_loss: 0.0,
            iters_used: 0,
            restart_index: 0,
            converged: true,
        };
        let doc = FitDoc {
            schema_version: 1,
            tau: 800.0,
            seed: 0,
            fit: Some(condseg::SceneFit {
                roi: scene.iris.bounding_square().unwrap(),
                roi_clipped: false,
                iris: as_result(scene.iris),
                pupil: as_result(scene.pupil),
            }),
            error: None,
        };
        write_json(&doc, &fits_dir.join(format!("{name}.json"))).unwrap();
    }
    let report_path = dir.path().join("report.json");
    let out = run(bin()
        .args(["eval", "--scenes"])
        .arg(&scenes_dir)
        .args(["--fits"])
        .arg(&fits_dir)
        .args(["--out"])
        .arg(&report_path));
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = read_json(&report_path).unwrap();
    assert_eq!(report["condseg"]["iou_pupil"].as_f64().unwrap(), 1.0);
    assert_eq!(report["condseg"]["iou_iris_region"].as_f64().unwrap(), 1.0);
    assert_eq!(report["condseg"]["err_loc_pupil_median"].as_f64().unwrap(), 0.0);
}

#[test]
fn eval_detects_misaligned_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let fits = dir.path().join("fits");
    synth_scenes(&scenes, 2, 41);
    fs::create_dir_all(&fits).unwrap();
    let fit_path = fits.join("scene_0000.json");
    let out = quick_fit(&scenes.join("scene_0000"), &fit_path, &[]);
    assert_eq!(code(&out), 0);
    // scene_0001 has no fit document.
    let out = run(bin()
        .args(["eval", "--scenes"])
        .arg(&scenes)
        .args(["--fits"])
        .arg(&fits)
        .args(["--out"])
        .arg(dir.path().join("report.json")));
    assert_eq!(code(&out), 2);
}

#[test]
fn render_outputs_track_the_field_and_partition_the_eye() {
    let dir = tempfile::tempdir().unwrap();
    synth_scenes(dir.path(), 1, 51);
    let scene_dir = dir.path().join("scene_0000");
    let fit_path = dir.path().join("fit.json");
    assert_eq!(code(&quick_fit(&scene_dir, &fit_path, &[])), 0);

    let prefix = dir.path().join("render").to_string_lossy().into_owned();
    let out = run(bin()
        .args(["render", "--scene"])
        .arg(&scene_dir)
        .args(["--fit"])
        .arg(&fit_path)
        .args(["--out", &prefix, "--png"]));
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    for suffix in [
        "iris_distmap",
        "iris_segmap",
        "iris_hard",
        "pupil_distmap",
        "pupil_segmap",
        "pupil_hard",
        "classes",
    ] {
        assert!(Path::new(&format!("{prefix}_{suffix}.pgm")).exists(), "{suffix}.pgm");
        assert!(Path::new(&format!("{prefix}_{suffix}.png")).exists(), "{suffix}.png");
    }

    // The distmap image minimum sits where the conic field is minimal.
    let doc: FitDoc = read_json(&fit_path).unwrap();
    let fit = doc.fit.unwrap();
    let scene = read_scene_bundle(&scene_dir).unwrap();
    let (w, h) = scene.eye.shape();
    let img = read_mask_pgm(Path::new(&format!("{prefix}_iris_distmap.pgm"))).unwrap();
    let field = distmap(&fit.iris.ellipse, w, h).unwrap();
    let img_argmin = (0..img.data.len()).min_by(|&a, &b| img.data[a].total_cmp(&img.data[b]));
    let field_min = field.min_value();
    let field_at_img_argmin = field.data[img_argmin.unwrap()];
    // Quantization to 8 bits can tie nearby pixels; the chosen pixel must
    // carry a field value within one gray level of the true minimum.
    let gray = (field.max_value() - field_min) / 255.0;
    assert!(field_at_img_argmin <= field_min + gray);

    // The class overlay partitions the eye-region exactly.
    let classes = read_mask_pgm(Path::new(&format!("{prefix}_classes.pgm"))).unwrap();
    for i in 0..classes.data.len() {
        let level = (classes.data[i] * 255.0).round() as u8;
        if scene.eye.data[i] > 0.5 {
            assert!([85, 170, 255].contains(&level), "eye pixel {i} has level {level}");
        } else {
            assert_eq!(level, 0, "background pixel {i}");
        }
    }
}

#[test]
fn render_segmap_band_shrinks_with_tau() {
    let dir = tempfile::tempdir().unwrap();
    synth_scenes(dir.path(), 1, 61);
    let scene_dir = dir.path().join("scene_0000");
    let fit_path = dir.path().join("fit.json");
    assert_eq!(code(&quick_fit(&scene_dir, &fit_path, &[])), 0);

    let band = |tau: &str| -> usize {
        let prefix = dir.path().join(format!("r{tau}")).to_string_lossy().into_owned();
        let out = run(bin()
            .args(["render", "--scene"])
            .arg(&scene_dir)
            .args(["--fit"])
            .arg(&fit_path)
            .args(["--out", &prefix, "--tau", tau]));
        assert_eq!(code(&out), 0);
        let img = read_mask_pgm(Path::new(&format!("{prefix}_iris_segmap.pgm"))).unwrap();
        img.data.iter().filter(|&&v| v > 0.01 && v < 0.99).count()
    };
    let (b50, b200, b1000) = (band("50"), band("200"), band("1000"));
    assert!(b50 > b200 && b200 > b1000, "bands {b50} {b200} {b1000}");
}

#[test]
fn gradcheck_cli_exit_codes() {
    let out = run(bin().args(["gradcheck", "--trials", "3", "--seed", "5"]));
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    assert!(stdout.contains("thetahat"), "per-parameter lines: {stdout}");

    let out = run(bin().args(["gradcheck", "--trials", "2", "--seed", "5", "--corrupt-partial", "1"]));
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn seed_falls_back_to_environment() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let out = run(bin()
        .args(["synth", "--out"])
        .arg(&a)
        .args(["--count", "1", "--width", "200", "--height", "160"])
        .env("CONDSEG_SEED", "77"));
    assert_eq!(code(&out), 0);
    let out = run(bin().args(["synth", "--out"]).arg(&b).args([
        "--count",
        "1",
        "--width",
        "200",
        "--height",
        "160",
        "--seed",
        "77",
    ]));
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(a.join("scene_0000").join("gt.json")).unwrap(),
        fs::read(b.join("scene_0000").join("gt.json")).unwrap()
    );
}
