#![allow(dead_code)]

pub mod oracle;

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use medfuse_core::forge::{forge_corpus, ForgeConfig, GroundTruthManifest};
use medfuse_core::ingest::load_snapshot;
use medfuse_core::DatasetSnapshot;

pub struct Corpus {
    pub dir: tempfile::TempDir,
    pub config: ForgeConfig,
    pub manifest: GroundTruthManifest,
    pub snapshot: DatasetSnapshot,
}

impl Corpus {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }
}

pub fn forge(config: ForgeConfig) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let manifest = forge_corpus(&config, dir.path()).unwrap();
    let snapshot = load_snapshot(dir.path(), "mimic-iv").unwrap();
    Corpus {
        dir,
        config,
        manifest,
        snapshot,
    }
}

/// The 200-subject corpus shared by tests in one binary.
pub fn corpus200() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| forge(ForgeConfig::with_seed(7, 200)))
}

pub fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}
