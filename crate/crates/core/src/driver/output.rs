//! Run directory layout: `results.csv`, `manifest.txt`, `memory.bin`,
//! `model.bin`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{DataSource, RunConfig};
use crate::driver::analysis::{distance_analysis, DistanceReport};
use crate::driver::metrics::MetricsTable;
use crate::driver::{build_tasks, RunOutcome};
use crate::error::{Error, Result};
use crate::memory::{load_memory, save_memory, MemoryUsage};
use crate::model::{load_params, save_params, ModelConfig, ModelState};
use crate::rng::{stream_at, Stream};

pub const RESULTS_FILE: &str = "results.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MEMORY_FILE: &str = "memory.bin";
pub const MODEL_FILE: &str = "model.bin";

pub fn results_csv(metrics: &MetricsTable, usage: &[MemoryUsage]) -> String {
    let mut s = String::from("task,aa,aia,bwf,episodic_bytes,semantic_bytes\n");
    for k in 0..metrics.tasks() {
        let u = usage.get(k).copied().unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            k + 1,
            metrics.aa[k],
            metrics.aia[k],
            metrics.bwf[k],
            u.episodic_bytes,
            u.semantic_bytes
        );
    }
    s
}

fn blob_hash(hasher: &mut Sha256, content: &[u8]) {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hasher.update(h.finalize());
}

/// Hash over the config echo (without `out_dir`) and every input feature file, each hashed as
/// a git-style blob (`"blob <len>\0" + content`).
pub fn input_hash(cfg: &RunConfig) -> Result<String> {
    let mut h = Sha256::new();
    let hashed = RunConfig {
        out_dir: PathBuf::new(),
        ..cfg.clone()
    };
    blob_hash(&mut h, hashed.to_config_string().as_bytes());
    if cfg.data == DataSource::Features {
        for p in cfg.train_features.iter().chain(&cfg.test_features) {
            blob_hash(&mut h, &fs::read(p)?);
        }
    }
    let digest = h.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

/// Config echo followed by the input hash as a comment, so the manifest
/// itself parses back to the config.
pub fn manifest(cfg: &RunConfig) -> Result<String> {
    Ok(format!("{}# input_hash = sha256:{}\n", cfg.to_config_string(), input_hash(cfg)?))
}

pub fn write_run(dir: &Path, out: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESULTS_FILE), results_csv(&out.metrics, &out.usage))?;
    fs::write(dir.join(MANIFEST_FILE), manifest(&out.config)?)?;
    save_memory(&out.episodic, &out.semantic, &dir.join(MEMORY_FILE))?;
    save_params(&out.model.params, &dir.join(MODEL_FILE))?;
    Ok(())
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(Error::Input(format!("incomplete run directory {}: missing {name}", dir.display())));
    }
    Ok(p)
}

/// Distance analysis on every task of a finished run, using the held-out
/// clips regenerated (or reloaded) from the run's manifest.
pub fn analyze_run(dir: &Path) -> Result<Vec<DistanceReport>> {
    let cfg = RunConfig::load(&require(dir, MANIFEST_FILE)?)?;
    let (episodic, semantic) = load_memory(&require(dir, MEMORY_FILE)?)?;
    let params = load_params(&require(dir, MODEL_FILE)?)?;
    if episodic.is_empty() {
        return Err(Error::Input(format!("run {} has empty episodic memory", dir.display())));
    }
    let tasks = build_tasks(&cfg)?;
    let classes: Vec<Vec<usize>> = tasks.iter().map(|t| t.classes.clone()).collect();
    let model = ModelState::restore(ModelConfig::from_run(&cfg), &classes, params)?;
    let mut rng = stream_at(cfg.seed, Stream::Sampling, 1 << 16);
    tasks
        .iter()
        .map(|t| distance_analysis(&model, &semantic, &t.test.clips, t.id, cfg.sparse_len, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_rows() {
        let mut m = MetricsTable::default();
        m.push(vec![0.5], 4).unwrap();
        m.push(vec![0.25, 1.0], 4).unwrap();
        let u = [
            MemoryUsage {
                episodic_bytes: 10,
                semantic_bytes: 20,
            },
            MemoryUsage {
                episodic_bytes: 30,
                semantic_bytes: 40,
            },
        ];
        let csv = results_csv(&m, &u);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "task,aa,aia,bwf,episodic_bytes,semantic_bytes");
        assert_eq!(lines[1], "1,0.5,0.5,0,10,20");
        assert_eq!(lines[2], "2,0.625,0.5625,0.25,30,40");
    }

    #[test]
    fn manifest_parses_back_to_the_config() {
        let cfg = RunConfig {
            seed: 42,
            alpha: 0.3,
            ..RunConfig::default()
        };
        let m = manifest(&cfg).unwrap();
        assert!(m.contains("# input_hash = sha256:"));
        assert_eq!(RunConfig::parse(&m).unwrap(), cfg);
    }

    #[test]
    fn hash_tracks_config() {
        let a = input_hash(&RunConfig::default()).unwrap();
        let b = input_hash(&RunConfig {
            seed: 1,
            ..RunConfig::default()
        })
        .unwrap();
        assert_eq!(a.len(), 64);
        assert_ne!(a, b);
        let moved = input_hash(&RunConfig {
            out_dir: "elsewhere".into(),
            ..RunConfig::default()
        })
        .unwrap();
        assert_eq!(a, moved);
    }
}
