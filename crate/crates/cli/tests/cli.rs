use std::path::Path;
use std::process::{Command, Output};

fn place(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_place")).args(args).current_dir(dir).env_remove("PLACE_SEED").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = place(dir, args);
    assert!(out.status.success(), "place {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn is_empty(dir: &Path) -> bool {
    std::fs::read_dir(dir).unwrap().next().is_none()
}

#[test]
fn bad_arguments_exit_with_usage_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &["train", "--out", "run", "--no-such-flag"][..],
        &["train", "--out", "run", "--variant", "7"][..],
        &["train", "--out", "run", "--variant", "9"][..],
        &["compute-lcm", "--map", "m.pgm", "--latent", "8by8", "--out", "l"][..],
    ] {
        let out = place(d, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(is_empty(d), "{args:?} left files behind");
    }
    let out = place(d, &["sample", "--out", "s", "--checkpoint", "missing.ckpt", "--map", "missing.pgm"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
    assert!(is_empty(d));
}

#[test]
fn compute_lcm_writes_one_pgm_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--out", "data", "--count", "2", "--seed", "3"]);
    let listed = ok(d, &["compute-lcm", "--map", "data/maps/0001.pgm", "--sidecar", "data/classes.json", "--latent", "5x7", "--out", "lcm"]);
    let paths: Vec<&str> = listed.lines().collect();
    assert!(paths.iter().any(|p| p.ends_with("background_5x7.pgm")), "{listed}");
    for p in paths {
        let bytes = std::fs::read(d.join(p)).unwrap();
        assert!(bytes.starts_with(b"P5\n7 5\n255\n"), "{p}");
    }
}

#[test]
fn gen_data_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--out", "a", "--count", "4", "--seed", "9"]);
    ok(d, &["gen-data", "--out", "b", "--count", "4", "--seed", "9", "--jobs", "2"]);
    ok(d, &["gen-data", "--out", "c", "--count", "4", "--seed", "10"]);
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/images/0002.ppm"), read("b/images/0002.ppm"));
    assert_ne!(read("a/images/0002.ppm"), read("c/images/0002.ppm"));
    let run: serde_json::Value = serde_json::from_slice(&read("a/run.json")).unwrap();
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["config"]["seed"], 9);
}
