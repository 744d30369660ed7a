//! End-to-end tests of the command-line surface: workflow composition,
//! resolved-config replay, error classes, and output atomicity.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ditail")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin()).current_dir(dir).args(args).output().expect("spawn ditail")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Shared tiny fixture: dataset, trained base, one fine-tuned style model.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn path(&self) -> &Path {
        self.dir.path()
    }
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let p = dir.path();
        ok(p, &["datagen", "--style", "filled", "--n", "24", "--size", "8", "--seed", "1", "--out", "data"]);
        ok(
            p,
            &[
                "train", "--data", "data", "--steps", "60", "--lr", "2e-3", "--layers", "2",
                "--dim", "16", "--t-train", "50", "--sample-steps", "10", "--seed", "2", "--out",
                "base.dtl",
            ],
        );
        ok(
            p,
            &[
                "finetune", "--base", "base.dtl", "--style", "stripes", "--steps", "30", "--seed",
                "3", "--out", "stripes.dtl",
            ],
        );
        Fixture { dir }
    })
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("read {name}: {e}"))
}

#[test]
fn generate_then_ditail_composes_the_transfer_path() {
    let f = fixture();
    let p = f.path();
    ok(
        p,
        &[
            "generate", "--model", "base.dtl", "--prompt", "red circle", "--seed", "7",
            "--omega", "7.5", "--save-latents", "t1.dtrj", "--out", "g1.ppm",
        ],
    );
    ok(
        p,
        &[
            "ditail", "--src-latents", "t1.dtrj", "--target", "stripes.dtl", "--prompt",
            "red circle", "--out", "x1.ppm",
        ],
    );
    assert!(p.join("x1.ppm").exists());
    assert!(p.join("x1.ppm.config.toml").exists());
}

#[test]
fn replay_from_echo_is_bitwise_identical() {
    let f = fixture();
    let p = f.path();
    ok(
        p,
        &[
            "generate", "--model", "base.dtl", "--prompt", "blue square", "--seed", "9",
            "--out", "r1.ppm",
        ],
    );
    // replay: only the echo and a fresh --out
    ok(p, &["generate", "--config", "r1.ppm.config.toml", "--out", "r2.ppm"]);
    assert_eq!(read(p, "r1.ppm"), read(p, "r2.ppm"));

    // flags still override config values
    ok(p, &["generate", "--config", "r1.ppm.config.toml", "--seed", "10", "--out", "r3.ppm"]);
    assert_ne!(read(p, "r1.ppm"), read(p, "r3.ppm"));
}

#[test]
fn matrix_diagonal_matches_generate_outputs() {
    let f = fixture();
    let p = f.path();
    ok(
        p,
        &[
            "matrix", "--models", "base.dtl", "stripes.dtl", "--prompt", "blue square",
            "--seed", "3", "--out", "grid.ppm",
        ],
    );
    ok(
        p,
        &[
            "generate", "--model", "base.dtl", "--prompt", "blue square", "--seed", "3",
            "--out", "d0.ppm",
        ],
    );
    let grid = read(p, "grid.ppm");
    let cell = read(p, "d0.ppm");
    // extract cell (0,0) from the 2x2 grid of 8x8 cells, compare payloads
    let parse = |bytes: &[u8]| -> (usize, Vec<u8>) {
        let text = String::from_utf8_lossy(&bytes[..20]).to_string();
        let mut parts = text.split_ascii_whitespace();
        assert_eq!(parts.next(), Some("P6"));
        let w: usize = parts.next().unwrap().parse().unwrap();
        let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
        (w, bytes[header_end..].to_vec())
    };
    let (gw, gpix) = parse(&grid);
    let (cw, cpix) = parse(&cell);
    assert_eq!(gw, 16);
    assert_eq!(cw, 8);
    for y in 0..8 {
        let grow = &gpix[y * gw * 3..y * gw * 3 + 8 * 3];
        let crow = &cpix[y * 8 * 3..(y + 1) * 8 * 3];
        assert_eq!(grow, crow, "row {y} of the diagonal cell differs");
    }
}

#[test]
fn invert_then_ditail_round_trips_through_files() {
    let f = fixture();
    let p = f.path();
    ok(
        p,
        &[
            "generate", "--model", "base.dtl", "--prompt", "red circle", "--seed", "21",
            "--out", "src.ppm",
        ],
    );
    ok(
        p,
        &[
            "invert", "--model", "base.dtl", "--image", "src.ppm", "--alpha", "2.0", "--beta",
            "0.5", "--out", "inv.dtrj",
        ],
    );
    ok(
        p,
        &[
            "ditail", "--src-latents", "inv.dtrj", "--target", "stripes.dtl", "--prompt",
            "red circle", "--out", "styled.ppm",
        ],
    );
    ok(
        p,
        &[
            "edit", "--image", "src.ppm", "--invert-with", "base.dtl", "--target",
            "stripes.dtl", "--prompt", "blue circle", "--inv-prompt", "red circle", "--out",
            "edited.ppm",
        ],
    );
    assert!(p.join("styled.ppm").exists());
    assert!(p.join("edited.ppm").exists());
}

#[test]
fn metrics_commands_write_reports() {
    let f = fixture();
    let p = f.path();
    ok(
        p,
        &[
            "generate", "--model", "base.dtl", "--prompt", "red circle", "--seed", "31",
            "--out", "m1.ppm",
        ],
    );
    ok(
        p,
        &[
            "generate", "--model", "stripes.dtl", "--prompt", "red circle", "--seed", "31",
            "--out", "m2.ppm",
        ],
    );
    let out = ok(
        p,
        &[
            "metrics", "--kind", "structure", "--image-a", "m1.ppm", "--image-b", "m2.ppm",
            "--probe", "base.dtl", "--out", "structure.toml",
        ],
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("structure:"));
    let report = std::fs::read_to_string(p.join("structure.toml")).unwrap();
    assert!(report.contains("kind = \"structure\""));
    assert!(report.contains("mean ="));

    ok(
        p,
        &[
            "datagen", "--style", "outline", "--n", "6", "--size", "8", "--seed", "5", "--out",
            "setb",
        ],
    );
    let out = ok(
        p,
        &[
            "metrics", "--kind", "frechet", "--set-a", "data", "--set-b", "setb", "--probe",
            "base.dtl", "--out", "frechet.toml",
        ],
    );
    assert!(out.status.success());
    let report = std::fs::read_to_string(p.join("frechet.toml")).unwrap();
    assert!(report.contains("regularized"));
}

#[test]
fn error_lines_are_single_and_machine_parsable() {
    let f = fixture();
    let p = f.path();
    // unknown vocabulary word
    let out = run(
        p,
        &[
            "generate", "--model", "base.dtl", "--prompt", "red dragon", "--seed", "1", "--out",
            "nope.ppm",
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("vocabulary-error:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(!p.join("nope.ppm").exists(), "failed run must not leave outputs");

    // missing checkpoint
    let out = run(p, &["generate", "--model", "missing.dtl", "--out", "nope.ppm"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("io-error:"), "{err}");

    // flag conflict detected before compute: feature mode on a latent trajectory
    ok(
        p,
        &[
            "generate", "--model", "base.dtl", "--prompt", "red circle", "--seed", "41",
            "--save-latents", "lat.dtrj", "--out", "c1.ppm",
        ],
    );
    let out = run(
        p,
        &[
            "ditail", "--src-latents", "lat.dtrj", "--target", "stripes.dtl", "--mode",
            "feature", "--out", "nope2.ppm",
        ],
    );
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("usage-error:"), "{err}");
    assert!(!p.join("nope2.ppm").exists());
    // no temp litter either
    assert!(!p.join("nope2.ppm.tmp").exists());

    // capture-mode without save-latents is a flag conflict
    let out = run(
        p,
        &[
            "generate", "--model", "base.dtl", "--capture-mode", "feature", "--out", "nope3.ppm",
        ],
    );
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("usage-error:"), "{err}");

    // config files with unknown keys are rejected
    std::fs::write(p.join("bad.toml"), "command = \"generate\"\nbogus = 1\n").unwrap();
    let out = run(p, &["generate", "--config", "bad.toml", "--out", "nope4.ppm"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("configuration-error:"), "{err}");
}

#[test]
fn feature_capture_flows_through_files() {
    let f = fixture();
    let p = f.path();
    ok(
        p,
        &[
            "generate", "--model", "base.dtl", "--prompt", "red circle", "--seed", "51",
            "--save-latents", "feat.dtrj", "--capture-mode", "feature", "--out", "f1.ppm",
        ],
    );
    ok(
        p,
        &[
            "ditail", "--src-latents", "feat.dtrj", "--target", "stripes.dtl", "--prompt",
            "red circle", "--mode", "feature", "--out", "f2.ppm",
        ],
    );
    assert!(p.join("f2.ppm").exists());
    // the stored feature payload outweighs the latent payload
    let feat = read(p, "feat.dtrj").len();
    ok(
        p,
        &[
            "generate", "--config", "f1.ppm.config.toml", "--capture-mode", "latent",
            "--save-latents", "lat2.dtrj", "--out", "f3.ppm",
        ],
    );
    let lat = read(p, "lat2.dtrj").len();
    assert!(feat > lat, "feature {feat} vs latent {lat}");
    // same generation either way
    assert_eq!(read(p, "f1.ppm"), read(p, "f3.ppm"));
}
