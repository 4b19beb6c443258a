#![allow(dead_code)]

use std::path::{Path, PathBuf};

use genprim::splat_io::{serialize_feature_sidecar, serialize_splat_file};
use genprim::synthetic::{torus_cloud, TorusSpec};

/// Small torus splat plus feature sidecar written into `dir`.
pub fn toy_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = TorusSpec { points: 3000, ..Default::default() };
    let cloud = torus_cloud(&spec, 3);
    let splat = dir.join("toy.ply");
    let features = dir.join("toy.sgpf");
    std::fs::write(&splat, serialize_splat_file(&cloud).unwrap()).unwrap();
    std::fs::write(&features, serialize_feature_sidecar(cloud.raw_features.as_ref().unwrap())).unwrap();
    (splat, features)
}

/// Runs the CLI in-process; returns (code, stdout, stderr).
pub fn cli<S: AsRef<str>>(args: &[S]) -> (i32, String, String) {
    let mut argv = vec!["genprim".to_string()];
    argv.extend(args.iter().map(|s| s.as_ref().to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = genprim_service::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

pub fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

/// Trains a tiny 16³/4³ primitive with the CLI and returns the archive path.
pub fn toy_archive(dir: &Path, iters: usize) -> PathBuf {
    let (splat, features) = toy_inputs(dir);
    let out = dir.join("toy.sgpa");
    let (code, _, err) = cli(&[
        "train",
        "--splat",
        &p(&splat),
        "--features",
        &p(&features),
        "--out",
        &p(&out),
        "--resolution",
        "16",
        "--coarse",
        "4",
        "--iters",
        &iters.to_string(),
        "--seed",
        "5",
    ]);
    assert_eq!(code, 0, "{err}");
    out
}
