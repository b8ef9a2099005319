use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::binio::{f32_to_f64s, f64_to_f32s};
use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::memory::sampling::{subsample, SamplingStrategy};
use crate::tensor::Tensor;

/// A temporally sparse exemplar, kept at 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredClip {
    pub task: usize,
    pub label: usize,
    pub clip_id: u64,
    /// Row-major `l×d`.
    pub features: Vec<f32>,
}

impl StoredClip {
    pub fn tensor(&self, d: usize) -> Tensor {
        let rows = self.features.len() / d.max(1);
        Tensor::new(vec![rows, d], f32_to_f64s(&self.features)).expect("stored clip is l×d")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicStore {
    pub d: usize,
    /// Frames kept per clip.
    pub l: usize,
    /// Exemplars per class.
    pub n_per_class: usize,
    tasks: BTreeMap<usize, Vec<StoredClip>>,
}

impl EpisodicStore {
    pub fn new(d: usize, l: usize, n_per_class: usize) -> Self {
        Self {
            d,
            l,
            n_per_class,
            tasks: BTreeMap::new(),
        }
    }

    pub fn contains_task(&self, task: usize) -> bool {
        self.tasks.contains_key(&task)
    }

    pub fn task_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.tasks.keys().copied()
    }

    pub fn task(&self, task: usize) -> &[StoredClip] {
        self.tasks.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every stored clip, ordered by task then insertion.
    pub fn clips(&self) -> impl Iterator<Item = &StoredClip> {
        self.tasks.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.tasks.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert_task(&mut self, task: usize, clips: Vec<StoredClip>) -> Result<()> {
        if self.tasks.contains_key(&task) {
            return Err(Error::State(format!("episodic memory for task {task} already written")));
        }
        let width = self.l * self.d;
        let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
        for c in &clips {
            if c.task != task {
                return Err(Error::State(format!("clip {} tagged with task {}, written under {task}", c.clip_id, c.task)));
            }
            if c.features.len() != width {
                return Err(Error::shape("episodic write", &[c.features.len()], &[width]));
            }
            *per_class.entry(c.label).or_default() += 1;
        }
        if let Some((label, n)) = per_class.iter().find(|(_, &n)| n > self.n_per_class) {
            return Err(Error::State(format!(
                "class {label} has {n} exemplars, limit is {}",
                self.n_per_class
            )));
        }
        self.tasks.insert(task, clips);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticStore {
    pub d: usize,
    pub prompt_len: usize,
    prompts: BTreeMap<usize, Vec<f32>>,
}

impl SemanticStore {
    pub fn new(d: usize, prompt_len: usize) -> Self {
        Self {
            d,
            prompt_len,
            prompts: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn task_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.prompts.keys().copied()
    }

    pub fn prompt(&self, task: usize) -> Option<Tensor> {
        self.prompts.get(&task).map(|p| {
            Tensor::new(vec![self.prompt_len, self.d], f32_to_f64s(p)).expect("prompt is L×d")
        })
    }

    pub(crate) fn raw(&self, task: usize) -> Option<&[f32]> {
        self.prompts.get(&task).map(Vec::as_slice)
    }

    pub fn insert(&mut self, task: usize, prompt: &Tensor) -> Result<()> {
        if self.prompts.contains_key(&task) {
            return Err(Error::State(format!("semantic memory for task {task} already written")));
        }
        if prompt.shape() != [self.prompt_len, self.d] {
            return Err(Error::shape("semantic write", prompt.shape(), &[self.prompt_len, self.d]));
        }
        self.prompts.insert(task, f64_to_f32s(prompt.data()));
        Ok(())
    }

    pub(crate) fn insert_raw(&mut self, task: usize, prompt: Vec<f32>) {
        self.prompts.insert(task, prompt);
    }
}

/// Memory written at the end of one task, before it is committed.
#[derive(Debug, Clone)]
pub struct TaskMemory {
    pub task: usize,
    pub clips: Vec<StoredClip>,
    pub prompt: Option<Tensor>,
}

impl TaskMemory {
    /// Applies the delta. Nothing is written if either store already holds
    /// the task.
    pub fn commit(self, episodic: &mut EpisodicStore, semantic: &mut SemanticStore) -> Result<()> {
        if episodic.contains_task(self.task) || semantic.prompts.contains_key(&self.task) {
            return Err(Error::State(format!("memory for task {} already written", self.task)));
        }
        if let Some(p) = &self.prompt {
            if p.shape() != [semantic.prompt_len, semantic.d] {
                return Err(Error::shape("semantic write", p.shape(), &[semantic.prompt_len, semantic.d]));
            }
        }
        episodic.insert_task(self.task, self.clips)?;
        if let Some(p) = &self.prompt {
            semantic.insert(self.task, p)?;
        }
        Ok(())
    }
}

/// Per-clip attention scores for temporal-attention sampling.
pub type AttentionFn<'a> = &'a dyn Fn(&Tensor) -> Result<Vec<f64>>;

/// Picks up to `n_per_class` clips per class (seeded, without replacement)
/// and keeps `l` frames of each.
#[allow(clippy::too_many_arguments)]
pub fn select_task_memory<R: Rng + ?Sized>(
    task: usize,
    dataset: &FeatureDataset,
    n_per_class: usize,
    l: usize,
    strategy: SamplingStrategy,
    rng: &mut R,
    attention: Option<AttentionFn<'_>>,
    prompt: Option<&Tensor>,
) -> Result<TaskMemory> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in dataset.clips.iter().enumerate() {
        by_class.entry(c.label).or_default().push(i);
    }
    let mut clips = Vec::new();
    for (label, members) in by_class {
        let chosen: Vec<usize> = if members.len() <= n_per_class {
            if members.len() < n_per_class {
                log::warn!(
                    "task {task}: class {label} has {} clips, fewer than {n_per_class}; storing all",
                    members.len()
                );
            }
            members
        } else {
            let mut pick = index::sample(rng, members.len(), n_per_class).into_vec();
            pick.sort_unstable();
            pick.into_iter().map(|i| members[i]).collect()
        };
        for i in chosen {
            let clip = &dataset.clips[i];
            let scores = match (strategy, attention) {
                (SamplingStrategy::TemporalAttention, Some(f)) => Some(f(&clip.features)?),
                _ => None,
            };
            let (sparse, _) = subsample(&clip.features, l, strategy, rng, scores.as_deref())?;
            clips.push(StoredClip {
                task,
                label: clip.label,
                clip_id: clip.clip_id,
                features: f64_to_f32s(sparse.data()),
            });
        }
    }
    Ok(TaskMemory {
        task,
        clips,
        prompt: prompt.cloned(),
    })
}

/// Selects and commits a task's memory in one step.
#[allow(clippy::too_many_arguments)]
pub fn write_task_memory<R: Rng + ?Sized>(
    episodic: &mut EpisodicStore,
    semantic: &mut SemanticStore,
    task: usize,
    dataset: &FeatureDataset,
    strategy: SamplingStrategy,
    rng: &mut R,
    attention: Option<AttentionFn<'_>>,
    prompt: Option<&Tensor>,
) -> Result<()> {
    if episodic.contains_task(task) {
        return Err(Error::State(format!("memory for task {task} already written")));
    }
    let delta = select_task_memory(
        task,
        dataset,
        episodic.n_per_class,
        episodic.l,
        strategy,
        rng,
        attention,
        prompt,
    )?;
    delta.commit(episodic, semantic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{gen_split, SynthSpec};
    use crate::data::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> FeatureDataset {
        let spec = SynthSpec {
            train_per_class: 5,
            ..SynthSpec::default()
        };
        gen_split(&spec, &[0, 1], Split::Train).unwrap()
    }

    #[test]
    fn two_class_toy_with_one_exemplar() {
        let ds = toy();
        let mut ep = EpisodicStore::new(32, 2, 1);
        let mut sem = SemanticStore::new(32, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prompt = Tensor::zeros(&[8, 32]);
        write_task_memory(&mut ep, &mut sem, 0, &ds, SamplingStrategy::Uniform, &mut rng, None, Some(&prompt))
            .unwrap();
        assert_eq!(ep.len(), 2);
        assert_eq!(sem.len(), 1);
        assert!(ep.clips().all(|c| c.task == 0 && c.features.len() == 2 * 32));
    }

    #[test]
    fn stored_rows_equal_source_rows_at_f32() {
        let ds = toy();
        let mut ep = EpisodicStore::new(32, 2, 3);
        let mut sem = SemanticStore::new(32, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        write_task_memory(&mut ep, &mut sem, 4, &ds, SamplingStrategy::Uniform, &mut rng, None, None).unwrap();
        for c in ep.clips() {
            let src = ds.clips.iter().find(|s| s.clip_id == c.clip_id).unwrap();
            let want = src.features.select_rows(&[2, 6]).unwrap().to_f32_precision();
            assert_eq!(c.tensor(32), want);
        }
    }

    #[test]
    fn second_write_of_a_task_is_rejected() {
        let ds = toy();
        let mut ep = EpisodicStore::new(32, 1, 2);
        let mut sem = SemanticStore::new(32, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        write_task_memory(&mut ep, &mut sem, 0, &ds, SamplingStrategy::Random, &mut rng, None, None).unwrap();
        let err = write_task_memory(&mut ep, &mut sem, 0, &ds, SamplingStrategy::Random, &mut rng, None, None);
        assert!(matches!(err, Err(Error::State(_))));
        assert_eq!(ep.len(), 4);
    }

    #[test]
    fn short_classes_store_everything() {
        let ds = toy();
        let mut ep = EpisodicStore::new(32, 1, 9);
        let mut sem = SemanticStore::new(32, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        write_task_memory(&mut ep, &mut sem, 0, &ds, SamplingStrategy::Uniform, &mut rng, None, None).unwrap();
        assert_eq!(ep.len(), 10);
    }

    #[test]
    fn per_class_limit_enforced_on_insert() {
        let mut ep = EpisodicStore::new(1, 1, 1);
        let clip = |id| StoredClip {
            task: 0,
            label: 3,
            clip_id: id,
            features: vec![0.0],
        };
        assert!(matches!(ep.insert_task(0, vec![clip(1), clip(2)]), Err(Error::State(_))));
    }
}
