//! Files of a run directory.
//!
//! ```text
//! OUT/config.toml              resolved config of the last train run
//! OUT/data/                    dataset bundle (index.json, images/, config.toml)
//! OUT/codebook.json            fitted codebook
//! OUT/checkpoints/latest.bin   most recent checkpoint
//! OUT/checkpoints/epoch_NNN.bin
//! OUT/metrics.jsonl            one training step record per line
//! OUT/eval/report.json, OUT/eval/ledger.jsonl
//! OUT/samples/                 frame_N.raw, frame_N.png, story.json
//! OUT/memory/attention.jsonl   inspect-memory records
//! OUT/ablate/                  table.txt, summary.json, reports.jsonl, ARM/config_seedN.toml
//! ```

use std::path::{Path, PathBuf};

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn codebook(&self) -> PathBuf {
        self.root.join("codebook.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn latest(&self) -> PathBuf {
        self.checkpoints().join("latest.bin")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("epoch_{epoch:03}.bin"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn memory(&self) -> PathBuf {
        self.root.join("memory")
    }

    pub fn ablate(&self) -> PathBuf {
        self.root.join("ablate")
    }
}
