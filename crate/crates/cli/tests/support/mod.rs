#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub const COMMANDS: [&str; 6] = [
    "simulate",
    "score",
    "calibrate",
    "intervene",
    "compare",
    "report",
];

pub fn demo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo/demo.json")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn headprobe(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headprobe"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("headprobe binary runs")
}

/// Runs every command in order; returns the first failure's stderr.
pub fn run_pipeline(config: &Path, out: &Path, extra: &[&str]) -> Result<(), String> {
    for cmd in COMMANDS {
        let mut args = extra.to_vec();
        args.push(cmd);
        let o = headprobe(config, out, &args);
        if !o.status.success() {
            return Err(format!("{cmd}: {}", String::from_utf8_lossy(&o.stderr)));
        }
    }
    Ok(())
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
    for entry in fs::read_dir(dir).expect("readable dir") {
        let path = entry.expect("dir entry").path();
        if path.is_dir() {
            walk(root, &path, out);
        } else {
            out.push(
                path.strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .replace('\\', "/"),
            );
        }
    }
}

pub fn files(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// `<sha256>  <relative path>` per output file, sorted by path.
pub fn manifest(root: &Path) -> String {
    files(root)
        .iter()
        .map(|rel| {
            let bytes = fs::read(root.join(rel)).expect("readable output");
            format!("{}  {rel}\n", hex::encode(Sha256::digest(&bytes)))
        })
        .collect()
}

/// Top-level text outputs kept verbatim next to the manifest for readable diffs.
pub fn golden_text_files(root: &Path) -> Vec<String> {
    files(root)
        .into_iter()
        .filter(|f| {
            !f.contains('/') && (f.ends_with(".csv") || f.ends_with(".json") || f.ends_with(".md"))
        })
        .collect()
}

/// Compares `out` with the stored goldens; rewrites them when `UPDATE_GOLDEN=1`.
pub fn check_goldens(out: &Path) -> Result<(), String> {
    let dir = golden_dir();
    let got = manifest(out);
    if std::env::var("UPDATE_GOLDEN").as_deref() == Ok("1") {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| e.to_string())?;
        }
        fs::create_dir_all(dir.join("files")).map_err(|e| e.to_string())?;
        fs::write(dir.join("manifest.txt"), &got).map_err(|e| e.to_string())?;
        for f in golden_text_files(out) {
            fs::copy(out.join(&f), dir.join("files").join(&f)).map_err(|e| e.to_string())?;
        }
        return Ok(());
    }
    for f in golden_text_files(out) {
        let want = fs::read_to_string(dir.join("files").join(&f))
            .map_err(|e| format!("golden {f}: {e}"))?;
        let have = fs::read_to_string(out.join(&f)).map_err(|e| e.to_string())?;
        if want != have {
            return Err(format!("{f} differs from golden"));
        }
    }
    let want = fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| format!("golden manifest: {e}"))?;
    if want != got {
        let mismatched: Vec<&str> = got
            .lines()
            .filter(|l| !want.lines().any(|w| w == *l))
            .map(|l| l.split_once("  ").map_or(l, |(_, p)| p))
            .collect();
        return Err(format!("manifest mismatch: {mismatched:?}"));
    }
    Ok(())
}
