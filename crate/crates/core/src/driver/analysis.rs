use rand::Rng;

use crate::config::{MrScope, PromptScope, RunConfig};
use crate::data::Clip;
use crate::driver::run_benchmark;
use crate::error::{Error, Result};
use crate::memory::sampling::{nearest_upsample, uniform_indices};
use crate::memory::SemanticStore;
use crate::model::{ModelState, PROMPT_INIT_STD};
use crate::tensor::Tensor;
use crate::training::steps::retrieve_stored;

/// Mean distances between held-out dense clips and three reconstructions.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceReport {
    pub task: usize,
    pub clips: usize,
    /// Dense vs nearest-neighbour upsampled sparse frames.
    pub d_sparse: f64,
    /// Dense vs retrieved with the task's prompt.
    pub d_retrieved: f64,
    /// Dense vs retrieved with a freshly drawn prompt.
    pub d_random: f64,
}

impl DistanceReport {
    pub fn ordering_holds(&self) -> bool {
        self.d_retrieved < self.d_sparse && self.d_retrieved < self.d_random
    }
}

/// Distances on `clips` of task `task`, keeping `l` uniformly spaced frames.
pub fn distance_analysis<R: Rng + ?Sized>(
    model: &ModelState,
    semantic: &SemanticStore,
    clips: &[Clip],
    task: usize,
    l: usize,
    rng: &mut R,
) -> Result<DistanceReport> {
    if clips.is_empty() {
        return Err(Error::Input(format!("task {task}: no clips to analyse")));
    }
    if !model.cfg.uses_prompts() {
        return Err(Error::State("distance analysis needs a prompt-based retrieval module".into()));
    }
    let clip_len = model.cfg.clip_len;
    if model.cfg.retrieved_len() != clip_len {
        return Err(Error::State(format!(
            "retrieved length {} differs from clip length {clip_len}",
            model.cfg.retrieved_len()
        )));
    }
    let idx = uniform_indices(clip_len, l);
    let shape = [model.cfg.prompt_len, model.cfg.d];
    let (mut ds, mut dr, mut dn) = (0.0, 0.0, 0.0);
    for c in clips {
        let sparse = c.features.select_rows(&idx)?;
        ds += c.features.distance(&nearest_upsample(&sparse, clip_len)?)?;
        let ret = retrieve_stored(model, semantic, task, c.label, sparse.clone(), &idx, None)?;
        dr += c.features.distance(&ret)?;
        let fresh = Tensor::normal(&shape, PROMPT_INIT_STD, rng);
        let rnd = retrieve_stored(model, semantic, task, c.label, sparse, &idx, Some(fresh))?;
        dn += c.features.distance(&rnd)?;
    }
    let n = clips.len() as f64;
    Ok(DistanceReport {
        task,
        clips: clips.len(),
        d_sparse: ds / n,
        d_retrieved: dr / n,
        d_random: dn / n,
    })
}

/// The sparse-only arm: episodic memory alone, no retrieval, no prompts.
pub fn baseline_config(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        mr_scope: MrScope::None,
        prompt_scope: PromptScope::None,
        alpha: 0.0,
        beta: 0.0,
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessRow {
    pub l: usize,
    pub full_aia: f64,
    pub baseline_aia: f64,
}

/// Mean final AIA of the full method and the sparse-only baseline at each
/// `l`, over `seeds` consecutive seeds shared by both arms.
pub fn robustness_sweep(cfg: &RunConfig, ls: &[usize], seeds: usize) -> Result<Vec<RobustnessRow>> {
    if seeds == 0 {
        return Err(Error::Input("robustness sweep needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(ls.len());
    for &l in ls {
        if l == 0 || l > cfg.clip_len {
            return Err(Error::Input(format!("l = {l} outside 1..={}", cfg.clip_len)));
        }
        let (mut full, mut base) = (0.0, 0.0);
        for s in 0..seeds as u64 {
            let arm = RunConfig {
                sparse_len: l,
                seed: cfg.seed + s,
                ..cfg.clone()
            };
            full += run_benchmark(&arm)?.metrics.final_aia();
            base += run_benchmark(&baseline_config(&arm))?.metrics.final_aia();
        }
        rows.push(RobustnessRow {
            l,
            full_aia: full / seeds as f64,
            baseline_aia: base / seeds as f64,
        });
    }
    Ok(rows)
}
