#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = "\
[data]
count = 4
[vae.train]
steps = 12
[ldm.train]
steps = 12
[ldm.sample]
ddim_steps = 10
[eval]
repeats = 2
diversity_pairs = 10
";

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_inrmotion"));
    // Isolate from the caller's overrides.
    for (k, _) in std::env::vars() {
        if k.starts_with("IMGMOTION_") {
            c.env_remove(k);
        }
    }
    c
}

/// Run `inrmotion --config <cfg> args...`.
pub fn run(cfg: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(cfg).args(args).output().expect("binary runs")
}

pub fn ok(cfg: &Path, args: &[&str]) -> Output {
    let out = run(cfg, args);
    assert!(
        out.status.success(),
        "inrmotion {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    out
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

/// Every file under `dir`, by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Paths of a tiny trained pipeline under `root`.
pub struct Pipeline {
    pub cfg: PathBuf,
    pub data: PathBuf,
    pub vae: PathBuf,
    pub ldm: PathBuf,
}

pub fn tiny_pipeline(root: &Path) -> Pipeline {
    let cfg = write_config(root, TINY);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    ok(&cfg, &["gen-data", "--out", &s(&data)]);
    ok(
        &cfg,
        &["train-vae", "--data", &s(&data), "--out", &s(&root.join("vae"))],
    );
    let vae = root.join("vae/vae.json");
    ok(
        &cfg,
        &[
            "train-ldm",
            "--data",
            &s(&data),
            "--vae",
            &s(&vae),
            "--out",
            &s(&root.join("ldm")),
        ],
    );
    Pipeline {
        cfg,
        data,
        vae,
        ldm: root.join("ldm/ldm.json"),
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
