//! The task-by-task protocol: incremental stage, memory write, rehearsal,
//! evaluation; plus the analyses and ablation grids built on it.

pub mod ablation;
pub mod analysis;
pub mod metrics;
pub mod output;

pub use ablation::{ablation_arms, run_ablation, AblationRow, AblationTable, Preset};
pub use analysis::{baseline_config, distance_analysis, robustness_sweep, DistanceReport, RobustnessRow};
pub use metrics::{aia, bwf, compute_metrics, Metrics, MetricsTable};
pub use output::{analyze_run, input_hash, manifest, results_csv, write_run};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DataSource, MrScope, PromptScope, RunConfig};
use crate::data::features::load_features;
use crate::data::synth::{gen_task, SynthSpec};
use crate::data::{Clip, FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::memory::{memory_usage_bytes, select_task_memory, EpisodicStore, MemoryUsage, SemanticStore};
use crate::model::{mr_prefix, ModelConfig, ModelState, ENCODER_PREFIX, HEAD_PREFIX};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;
use crate::training::{
    incremental_step, rehearsal_samples, rehearsal_step, Adam, LossBreakdown, LossWeights, TrainSchedule,
};

/// One task: its classes and its train/test clips.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub id: usize,
    pub classes: Vec<usize>,
    pub train: FeatureDataset,
    pub test: FeatureDataset,
}

impl TaskSpec {
    pub fn validate_disjoint(tasks: &[TaskSpec]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in tasks {
            for &c in &t.classes {
                if !seen.insert(c) {
                    return Err(Error::Input(format!("class {c} appears in more than one task")));
                }
            }
            let own: BTreeSet<usize> = t.classes.iter().copied().collect();
            for ds in [&t.train, &t.test] {
                if let Some(c) = ds.clips.iter().find(|c| !own.contains(&c.label)) {
                    return Err(Error::Input(format!("task {}: clip label {} outside its classes", t.id, c.label)));
                }
            }
        }
        Ok(())
    }
}

/// Class ids of task `k`: the first task holds the base classes, the rest
/// `classes_per_task` each, numbered consecutively.
pub fn task_classes(cfg: &RunConfig, k: usize) -> Vec<usize> {
    let base = cfg.base_class_count();
    if k == 0 {
        (0..base).collect()
    } else {
        let start = base + (k - 1) * cfg.classes_per_task;
        (start..start + cfg.classes_per_task).collect()
    }
}

pub fn synth_spec(cfg: &RunConfig) -> SynthSpec {
    SynthSpec {
        d: cfg.d,
        clip_len: cfg.clip_len,
        num_classes: cfg.total_classes(),
        noise_sigma: cfg.noise_sigma,
        position_scale: cfg.position_scale,
        train_per_class: cfg.train_per_class,
        test_per_class: cfg.test_per_class,
        seed: cfg.seed,
    }
}

fn check_features(ds: &FeatureDataset, cfg: &RunConfig, key: &str) -> Result<()> {
    if ds.d != cfg.d {
        return Err(Error::config("d", format!("{key} has d = {}, config says {}", ds.d, cfg.d)));
    }
    if ds.clip_len != cfg.clip_len {
        return Err(Error::config(
            "clip_len",
            format!("{key} has L = {}, config says {}", ds.clip_len, cfg.clip_len),
        ));
    }
    Ok(())
}

pub fn build_tasks(cfg: &RunConfig) -> Result<Vec<TaskSpec>> {
    cfg.validate()?;
    let tasks = match cfg.data {
        DataSource::Synthetic => {
            let spec = synth_spec(cfg);
            (0..cfg.tasks)
                .map(|k| {
                    let classes = task_classes(cfg, k);
                    let data = gen_task(&spec, &classes)?;
                    Ok(TaskSpec {
                        id: k,
                        classes,
                        train: data.train,
                        test: data.test,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        DataSource::Features => {
            let mut out = Vec::new();
            let mut next = 0usize;
            for k in 0..cfg.tasks {
                let train = load_features(&cfg.train_features[k], Split::Train)?;
                let test = load_features(&cfg.test_features[k], Split::Test)?;
                check_features(&train, cfg, "train_features")?;
                check_features(&test, cfg, "test_features")?;
                let classes: Vec<usize> = train.classes().into_iter().collect();
                if classes.is_empty() {
                    return Err(Error::Input(format!("task {k}: training file has no clips")));
                }
                let expected: Vec<usize> = (next..next + classes.len()).collect();
                if classes != expected {
                    return Err(Error::Input(format!(
                        "task {k}: labels must be the consecutive ids {}..{}",
                        next,
                        next + classes.len()
                    )));
                }
                next += classes.len();
                out.push(TaskSpec {
                    id: k,
                    classes,
                    train,
                    test,
                });
            }
            out
        }
    };
    TaskSpec::validate_disjoint(&tasks)?;
    Ok(tasks)
}

/// Top-1 accuracy of encoder + head on dense clips.
pub fn evaluate(model: &ModelState, clips: &[Clip]) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty test set".into()));
    }
    let classes = model.classifier.num_classes(&model.params)?;
    let mut hits = 0usize;
    for c in clips {
        if c.label >= classes {
            return Err(Error::Input(format!("test label {} not covered by the {classes}-class head", c.label)));
        }
        let logits = model.predict(&c.features)?;
        let pred = argmax(logits.data());
        hits += usize::from(pred == c.label);
    }
    Ok(hits as f64 / clips.len() as f64)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Everything a finished run leaves behind.
pub struct RunOutcome {
    pub config: RunConfig,
    pub tasks: Vec<TaskSpec>,
    pub metrics: MetricsTable,
    /// Memory footprint after each task.
    pub usage: Vec<MemoryUsage>,
    pub model: ModelState,
    pub episodic: EpisodicStore,
    pub semantic: SemanticStore,
    /// Mean losses of the last incremental epoch, per task.
    pub final_losses: Vec<LossBreakdown>,
}

impl RunOutcome {
    /// Bytes of retrieval-module weights at 32-bit precision, reported
    /// apart from the episodic/semantic totals.
    pub fn mr_param_bytes(&self) -> u64 {
        self.model.params.scalar_count("mr.") as u64 * 4
    }
}

pub fn run_benchmark(cfg: &RunConfig) -> Result<RunOutcome> {
    let tasks = build_tasks(cfg)?;
    run_tasks(cfg, tasks)
}

fn batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Runs the protocol over already-built tasks.
pub fn run_tasks(cfg: &RunConfig, tasks: Vec<TaskSpec>) -> Result<RunOutcome> {
    cfg.validate()?;
    let mcfg = ModelConfig::from_run(cfg);
    let mut init_rng = stream(cfg.seed, Stream::Init);
    let mut sampling_rng = stream(cfg.seed, Stream::Sampling);
    let mut batch_rng = stream(cfg.seed, Stream::Batching);
    let mut model = ModelState::new(mcfg, &mut init_rng)?;
    let mut episodic = EpisodicStore::new(cfg.d, cfg.sparse_len, cfg.n_per_class);
    let semantic_len = if model.cfg.uses_prompts() { cfg.prompt_length() } else { 0 };
    let mut semantic = SemanticStore::new(cfg.d, semantic_len);
    let weights = LossWeights::new(cfg.alpha, cfg.beta)?;
    let mut metrics = MetricsTable::default();
    let mut usage = Vec::new();
    let mut final_losses = Vec::new();

    for task in &tasks {
        let k = task.id;
        let (row, losses) = learn_task(
            cfg,
            &tasks,
            task,
            weights,
            &mut model,
            &mut episodic,
            &mut semantic,
            &mut Rngs {
                init: &mut init_rng,
                sampling: &mut sampling_rng,
                batching: &mut batch_rng,
            },
        )
        .map_err(|e| e.in_task(k))?;
        metrics.push(row, task.test.len())?;
        let u = memory_usage_bytes(&episodic, &semantic);
        log::info!(
            "task {k}: AA {:.4} AIA {:.4} BWF {:.4} memory {} B",
            metrics.final_aa(),
            metrics.final_aia(),
            metrics.bwf.last().copied().unwrap_or(0.0),
            u.total()
        );
        usage.push(u);
        final_losses.push(losses);
    }
    Ok(RunOutcome {
        config: cfg.clone(),
        tasks,
        metrics,
        usage,
        model,
        episodic,
        semantic,
        final_losses,
    })
}

struct Rngs<'a> {
    init: &'a mut ChaCha8Rng,
    sampling: &'a mut ChaCha8Rng,
    batching: &'a mut ChaCha8Rng,
}

/// One task of the protocol; returns the accuracy row and final losses.
#[allow(clippy::too_many_arguments)]
fn learn_task(
    cfg: &RunConfig,
    tasks: &[TaskSpec],
    task: &TaskSpec,
    weights: LossWeights,
    model: &mut ModelState,
    episodic: &mut EpisodicStore,
    semantic: &mut SemanticStore,
    rngs: &mut Rngs<'_>,
) -> Result<(Vec<f64>, LossBreakdown)> {
    model.prepare_task(task.id, &task.classes, rngs.init)?;
    let losses = incremental_stage(cfg, model, task, weights, rngs.sampling, rngs.batching)?;
    lock_task(model, task);
    write_memory(cfg, model, episodic, semantic, task, rngs.sampling)?;
    rehearsal_stage(cfg, model, episodic, semantic, rngs.batching)?;
    let row = tasks[..=task.id]
        .iter()
        .map(|t| evaluate(model, &t.test.clips))
        .collect::<Result<Vec<_>>>()?;
    Ok((row, losses))
}

fn is_shared(name: &str) -> bool {
    name.starts_with(&format!("{ENCODER_PREFIX}.")) || name.starts_with(&format!("{HEAD_PREFIX}."))
}

fn incremental_stage<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    cfg: &RunConfig,
    model: &mut ModelState,
    task: &TaskSpec,
    weights: LossWeights,
    sampling_rng: &mut R1,
    batch_rng: &mut R2,
) -> Result<LossBreakdown> {
    let k = task.id;
    let mr = model.retriever_key(k).map(|key| format!("{}.", mr_prefix(key)));
    let prompts = model.task_prompt_names(k, &task.classes);
    model.params.set_trainable_where(|n| {
        is_shared(n) || mr.as_deref().is_some_and(|p| n.starts_with(p)) || prompts.iter().any(|p| p == n)
    });
    let sched = TrainSchedule {
        base_lr: cfg.lr,
        epochs: cfg.epochs_incremental,
        batch_size: cfg.batch_size,
    };
    let mut adam = Adam::new();
    let mut last = LossBreakdown::default();
    for epoch in 0..sched.epochs {
        let lr = sched.lr(epoch);
        let mut sum = LossBreakdown::default();
        let mut n = 0.0;
        for b in batches(task.train.len(), sched.batch_size, batch_rng) {
            let clips: Vec<&Clip> = b.iter().map(|&i| &task.train.clips[i]).collect();
            let l = incremental_step(model, &mut adam, lr, k, &task.classes, &clips, weights, sampling_rng)?;
            let w = clips.len() as f64;
            sum.ce += l.ce * w;
            sum.sm += l.sm * w;
            sum.tm += l.tm * w;
            sum.total += l.total * w;
            n += w;
        }
        last = LossBreakdown {
            ce: sum.ce / n,
            sm: sum.sm / n,
            tm: sum.tm / n,
            total: sum.total / n,
        };
        log::debug!("task {k} incremental epoch {epoch}: {last:?}");
    }
    Ok(last)
}

/// Freezes for good whatever belongs to the finished task alone.
fn lock_task(model: &mut ModelState, task: &TaskSpec) {
    if model.cfg.mr_scope == MrScope::Task {
        model.params.freeze_permanently(&format!("{}.", mr_prefix(crate::model::RetrieverKey::Task(task.id))));
    }
    if matches!(model.cfg.prompt_scope, PromptScope::Task | PromptScope::Class) {
        for name in model.task_prompt_names(task.id, &task.classes) {
            model.params.freeze_permanently_exact(&name);
        }
    }
}

/// The prompt written to semantic memory for a task; under class scope the
/// mean of the task's class prompts stands in for them.
fn task_prompt(model: &ModelState, task: &TaskSpec) -> Result<Option<Tensor>> {
    let names = model.task_prompt_names(task.id, &task.classes);
    if names.is_empty() {
        return Ok(None);
    }
    let mut acc = model.params.value(&names[0])?.clone();
    for n in &names[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(model.params.value(n)?.data()) {
            *a += b;
        }
    }
    let scale = 1.0 / names.len() as f64;
    acc.data_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(Some(acc))
}

fn write_memory<R: Rng + ?Sized>(
    cfg: &RunConfig,
    model: &ModelState,
    episodic: &mut EpisodicStore,
    semantic: &mut SemanticStore,
    task: &TaskSpec,
    rng: &mut R,
) -> Result<()> {
    let prompt = task_prompt(model, task)?;
    let attention = |frames: &Tensor| model.encoder.frame_attention(&model.params, frames);
    let delta = select_task_memory(
        task.id,
        &task.train,
        cfg.n_per_class,
        cfg.sparse_len,
        cfg.sampling,
        rng,
        Some(&attention),
        prompt.as_ref(),
    )?;
    delta.commit(episodic, semantic)
}

fn rehearsal_stage<R: Rng + ?Sized>(
    cfg: &RunConfig,
    model: &mut ModelState,
    episodic: &EpisodicStore,
    semantic: &SemanticStore,
    batch_rng: &mut R,
) -> Result<()> {
    model.params.set_trainable_where(is_shared);
    let samples = rehearsal_samples(model, episodic, semantic)?;
    let sched = TrainSchedule {
        base_lr: cfg.lr,
        epochs: cfg.epochs_rehearsal,
        batch_size: cfg.batch_size,
    };
    let mut adam = Adam::new();
    for epoch in 0..sched.epochs {
        let lr = sched.lr(epoch);
        let mut total = 0.0;
        for b in batches(samples.len(), sched.batch_size, batch_rng) {
            let batch: Vec<_> = b.iter().map(|&i| &samples[i]).collect();
            total += rehearsal_step(model, &mut adam, lr, &batch)? * batch.len() as f64;
        }
        log::debug!("rehearsal epoch {epoch}: loss {:.5}", total / samples.len().max(1) as f64);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn task_classes_follow_base_then_increments() {
        let cfg = RunConfig {
            tasks: 6,
            base_classes: Some(51),
            classes_per_task: 10,
            ..RunConfig::default()
        };
        assert_eq!(task_classes(&cfg, 0).len(), 51);
        assert_eq!(task_classes(&cfg, 1), (51..61).collect::<Vec<_>>());
        assert_eq!(task_classes(&cfg, 5), (91..101).collect::<Vec<_>>());
        assert_eq!(cfg.total_classes(), 101);
    }
}
