//! Memory file format (little-endian, no padding):
//!
//! ```text
//! "ESNT" | version u32 = 1 | d u32 | L u32 | l u32 | task_count u32
//! per task: task_id u32 | prompt L·d f32 | clip_count u32
//!   per clip: label u32 | clip_id u64 | l·d f32
//! ```
//!
//! `L` is the prompt length; a run without semantic memory writes `L = 0`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::binio::{put_f32s, put_u32, put_u64, to_u32, Reader};
use crate::error::{Error, Result};
use crate::memory::store::{EpisodicStore, SemanticStore, StoredClip};

pub const MEMORY_MAGIC: &[u8; 4] = b"ESNT";
pub const MEMORY_VERSION: u32 = 1;

pub fn encode_memory(episodic: &EpisodicStore, semantic: &SemanticStore) -> Result<Vec<u8>> {
    if episodic.d != semantic.d {
        return Err(Error::shape("memory file", &[episodic.d], &[semantic.d]));
    }
    let tasks: BTreeSet<usize> = episodic.task_ids().chain(semantic.task_ids()).collect();
    let prompt_len = semantic.prompt_len;
    let mut buf = Vec::new();
    buf.extend_from_slice(MEMORY_MAGIC);
    put_u32(&mut buf, MEMORY_VERSION);
    put_u32(&mut buf, to_u32(episodic.d, "d")?);
    put_u32(&mut buf, to_u32(prompt_len, "prompt length")?);
    put_u32(&mut buf, to_u32(episodic.l, "l")?);
    put_u32(&mut buf, to_u32(tasks.len(), "task count")?);
    for &t in &tasks {
        put_u32(&mut buf, to_u32(t, "task id")?);
        match semantic.raw(t) {
            Some(p) => put_f32s(&mut buf, p),
            None if prompt_len == 0 => {}
            None => return Err(Error::State(format!("task {t} has no prompt to persist"))),
        }
        let clips = episodic.task(t);
        put_u32(&mut buf, to_u32(clips.len(), "clip count")?);
        for c in clips {
            put_u32(&mut buf, to_u32(c.label, "label")?);
            put_u64(&mut buf, c.clip_id);
            put_f32s(&mut buf, &c.features);
        }
    }
    Ok(buf)
}

/// Decodes a memory file. The per-class exemplar limit is not stored; it is
/// recovered as the largest per-class count observed.
pub fn decode_memory(bytes: &[u8]) -> Result<(EpisodicStore, SemanticStore)> {
    let mut r = Reader::new(bytes);
    r.magic(MEMORY_MAGIC)?;
    r.version(MEMORY_VERSION)?;
    let d = r.u32("d")? as usize;
    let prompt_len = r.u32("prompt length")? as usize;
    let l = r.u32("l")? as usize;
    let task_count = r.u32("task count")? as usize;

    let mut semantic = SemanticStore::new(d, prompt_len);
    let mut per_task = Vec::new();
    let mut seen = BTreeSet::new();
    for _ in 0..task_count {
        let at = r.offset();
        let task = r.u32("task id")? as usize;
        if !seen.insert(task) {
            return Err(Error::format(at, format!("task {task} appears twice")));
        }
        if prompt_len > 0 {
            semantic.insert_raw(task, r.f32s(prompt_len * d, "prompt")?);
        }
        let count = r.u32("clip count")? as usize;
        let mut clips = Vec::new();
        for _ in 0..count {
            let label = r.u32("label")? as usize;
            let clip_id = r.u64("clip id")?;
            let features = r.f32s(l * d, "clip features")?;
            clips.push(StoredClip {
                task,
                label,
                clip_id,
                features,
            });
        }
        per_task.push((task, clips));
    }
    r.finish()?;

    let n_per_class = per_task
        .iter()
        .flat_map(|(_, clips)| {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for c in clips {
                *counts.entry(c.label).or_default() += 1;
            }
            counts.into_values()
        })
        .max()
        .unwrap_or(0);
    let mut episodic = EpisodicStore::new(d, l, n_per_class);
    for (task, clips) in per_task {
        if !clips.is_empty() {
            episodic.insert_task(task, clips)?;
        }
    }
    Ok((episodic, semantic))
}

pub fn save_memory(episodic: &EpisodicStore, semantic: &SemanticStore, path: &Path) -> Result<()> {
    fs::write(path, encode_memory(episodic, semantic)?)?;
    Ok(())
}

pub fn load_memory(path: &Path) -> Result<(EpisodicStore, SemanticStore)> {
    decode_memory(&fs::read(path)?)
}
