use std::path::Path;
use std::process::{Command, Output};

fn octden(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octden"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) -> std::path::PathBuf {
    let out = octden(&["synth", "--out", p(dir), "--rows", "128", "--cols", "128", "--frames", "8", "--seed", "7"]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir.join("manifest.toml")
}

#[test]
fn pipeline_on_fixture_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("fixture"));
    for f in ["manifest.toml", "truth.pgm", "reference.pgm", "true_transforms.csv", "provenance.toml"] {
        assert!(tmp.path().join("fixture").join(f).is_file(), "{f}");
    }
    let work = tmp.path().join("work");
    let out = octden(&["pipeline", "--manifest", p(&manifest), "--out", p(&work)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    for f in [
        "stack.toml",
        "transforms.csv",
        "mask.pgm",
        "denoised.pgm",
        "average.pgm",
        "solve_report.csv",
        "metrics.csv",
        "provenance.toml",
    ] {
        assert!(work.join(f).is_file(), "{f} missing");
    }
    for d in ["registered", "sigma", "low_rank", "noise"] {
        for j in 0..8 {
            let f = work.join(d).join(format!("frame_{j:03}.pgm"));
            assert!(f.is_file() && f.with_extension("toml").is_file(), "{}", f.display());
        }
    }

    let transforms = std::fs::read_to_string(work.join("transforms.csv")).unwrap();
    assert_eq!(transforms.lines().count(), 9);
    let metrics = std::fs::read_to_string(work.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("image,region,psnr_db,ssim,fom"));
    for name in ["denoised,image", "average,image", "single,image", "denoised,lesion0"] {
        assert!(metrics.contains(name), "{name} not in metrics");
    }
    let provenance = std::fs::read_to_string(work.join("provenance.toml")).unwrap();
    for table in ["[register]", "[estimate-noise]", "[denoise]", "[evaluate]"] {
        assert!(provenance.contains(table), "{table}");
    }
    assert!(provenance.contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn stages_are_resumable_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("fixture"));
    let run = |work: &Path| {
        let steps: [Vec<&str>; 4] = [
            vec!["register", "--manifest", p(&manifest), "--out", p(work), "--frames", "4"],
            vec!["estimate-noise", "--work", p(work), "--frames", "4"],
            vec!["denoise", "--work", p(work), "--frames", "4", "--max-iters", "20"],
            vec!["evaluate", "--work", p(work), "--frames", "4"],
        ];
        for args in steps {
            let out = octden(&args);
            assert!(out.status.success(), "{args:?}: {}", stderr(&out));
        }
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(&a);
    run(&b);
    for f in ["transforms.csv", "mask.pgm", "denoised.pgm", "average.pgm", "solve_report.csv", "metrics.csv", "sigma/frame_003.pgm", "low_rank/frame_000.pgm"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    assert!(!a.join("registered/frame_004.pgm").exists());
}

#[test]
fn missing_manifest_exits_1_with_named_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.toml");
    let out = octden(&["pipeline", "--manifest", p(&missing), "--out", p(&tmp.path().join("w"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error[io]: "), "{err}");
    assert!(err.contains("absent.toml"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(octden(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(octden(&["denoise", "--work", "x", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(octden(&["register", "--out", "x"]).status.code(), Some(2));
    assert_eq!(octden(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[solver]\nrho = 0.5\n").unwrap();
    let out = octden(&["estimate-noise", "--work", p(tmp.path()), "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error[config]: invalid `solver.rho`"), "{err}");

    let out = octden(&["estimate-noise", "--work", p(tmp.path()), "--set", "noise.outer=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("noise."), "{}", stderr(&out));
}

#[test]
fn too_many_frames_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("fixture"));
    let out = octden(&["register", "--manifest", p(&manifest), "--out", p(&tmp.path().join("w")), "--frames", "9"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[config]: invalid `frames`"), "{}", stderr(&out));
}
