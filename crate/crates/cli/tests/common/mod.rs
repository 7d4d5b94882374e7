#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use langadapt::config::RunConfig;
use langadapt_core::io::sha256_file;
use langadapt_core::synth::{write_synthetic, SynthConfig, SynthPaths};

/// Synthetic data under `dir/data` and its tuned run config writing to `dir/run`.
pub fn synthetic(dir: &Path, images_per_class: usize) -> (SynthPaths, RunConfig) {
    let synth = SynthConfig {
        images_per_class,
        ..SynthConfig::default()
    };
    let paths = write_synthetic(&synth, &dir.join("data")).unwrap();
    let cfg = RunConfig::synthetic(&paths, dir.join("run"), synth.seed);
    (paths, cfg)
}

/// A short run for tests that only exercise orchestration.
pub fn quick(mut cfg: RunConfig) -> RunConfig {
    cfg.stage1.epochs = 5;
    cfg.stage2.epochs = 3;
    cfg
}

/// Relative path -> sha of every file below `root`.
pub fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, sha256_file(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
