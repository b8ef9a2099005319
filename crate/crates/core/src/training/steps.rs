use rand::Rng;

use crate::blocks::retrieval::stored_positions;
use crate::config::{MrInput, PromptScope};
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::memory::sampling::random_indices;
use crate::memory::{EpisodicStore, SemanticStore};
use crate::model::ModelState;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::{Adam, LossWeights};

/// One training clip of the incremental stage. `mr_rows` are the frames the
/// retrieval module reads.
#[derive(Debug, Clone)]
pub struct IncrementalSample<'a> {
    pub dense: &'a Tensor,
    pub label: usize,
    pub mr_rows: Vec<usize>,
}

pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub sm: Option<Var>,
    pub tm: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    pub sm: f64,
    pub tm: f64,
    pub total: f64,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            ce: tape.scalar(self.ce),
            sm: self.sm.map_or(0.0, |v| tape.scalar(v)),
            tm: self.tm.map_or(0.0, |v| tape.scalar(v)),
            total: tape.scalar(self.total),
        }
    }
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)))
}

/// `CE + alpha·SM + beta·TM` for a batch of the current task. CE is masked
/// to `active`. Without a retrieval module only CE is built.
pub fn incremental_loss(
    tape: &mut Tape,
    model: &ModelState,
    task: usize,
    active: &[usize],
    samples: &[IncrementalSample<'_>],
    weights: LossWeights,
) -> Result<LossVars> {
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let retriever = model.retriever(task);
    if model.retriever_key(task).is_some() && retriever.is_none() {
        return Err(Error::State(format!("no retrieval module prepared for task {task}")));
    }
    let clip_len = model.cfg.clip_len;
    let out_positions = model.cfg.retrieved_positions();
    let mut zs = Vec::with_capacity(samples.len());
    let mut sms = Vec::new();
    let mut tms = Vec::new();
    for s in samples {
        let dense = tape.constant(s.dense.clone());
        let z = model.encode(tape, dense, None)?;
        zs.push(z);
        let Some(r) = retriever else { continue };
        let sparse = tape.constant(s.dense.select_rows(&s.mr_rows)?);
        let prompt = match model.prompt_name(task, s.label) {
            Some(name) => Some(tape.param(&model.params, &name)?),
            None => None,
        };
        let retrieved = r.retrieve(tape, &model.params, prompt, sparse, &s.mr_rows, clip_len)?;
        if tape.shape(retrieved)[0] == clip_len {
            sms.push(tape.mse(retrieved, dense)?);
        }
        let z_ret = model.encode(tape, retrieved, Some(&out_positions))?;
        tms.push(tape.mse(z_ret, z)?);
    }
    let zb = tape.concat_rows(&zs)?;
    let logits = model.classifier.logits(tape, &model.params, zb)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let ce = tape.masked_cross_entropy(logits, &labels, active)?;
    let sm = mean_of(tape, &sms)?;
    let tm = mean_of(tape, &tms)?;
    let mut total = ce;
    if let Some(v) = sm {
        let w = tape.scale(v, weights.alpha);
        total = tape.add(total, w)?;
    }
    if let Some(v) = tm {
        let w = tape.scale(v, weights.beta);
        total = tape.add(total, w)?;
    }
    Ok(LossVars { total, ce, sm, tm })
}

fn apply(model: &mut ModelState, adam: &mut Adam, tape: &Tape, root: Var, lr: f64) -> Result<()> {
    let grads = tape.backward(root)?;
    model.params.zero_grads();
    grads.accumulate_into(&mut model.params)?;
    adam.step(&mut model.params, lr)?;
    model.params.zero_grads();
    Ok(())
}

/// One optimizer step of the incremental stage. The retrieval module reads
/// a random subset of `l` frames per clip (all frames under dense input).
#[allow(clippy::too_many_arguments)]
pub fn incremental_step<R: Rng + ?Sized>(
    model: &mut ModelState,
    adam: &mut Adam,
    lr: f64,
    task: usize,
    active: &[usize],
    clips: &[&Clip],
    weights: LossWeights,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let clip_len = model.cfg.clip_len;
    let samples: Vec<IncrementalSample<'_>> = clips
        .iter()
        .map(|c| IncrementalSample {
            dense: &c.features,
            label: c.label,
            mr_rows: match model.cfg.mr_input {
                MrInput::Sparse => random_indices(clip_len, model.cfg.sparse_len, rng),
                MrInput::Dense => (0..clip_len).collect(),
            },
        })
        .collect();
    let mut tape = Tape::new();
    let vars = incremental_loss(&mut tape, model, task, active, &samples, weights)?;
    let out = vars.breakdown(&tape);
    if !out.total.is_finite() {
        return Err(Error::NonFinite("incremental loss".into()));
    }
    apply(model, adam, &tape, vars.total, lr)?;
    Ok(out)
}

/// Encoder input rebuilt from memory for one stored clip.
#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalSample {
    pub frames: Tensor,
    pub positions: Vec<usize>,
    pub label: usize,
    pub task: usize,
}

/// Turns every stored clip into encoder input: retrieved dense features
/// from the clip's own task module and prompt, or the sparse frames when the
/// run has no retrieval. Stored frames are taken to sit on the uniform grid.
pub fn rehearsal_samples(
    model: &ModelState,
    episodic: &EpisodicStore,
    semantic: &SemanticStore,
) -> Result<Vec<RehearsalSample>> {
    let d = model.cfg.d;
    let clip_len = model.cfg.clip_len;
    let grid = stored_positions(episodic.l, clip_len);
    let out_positions = model.cfg.retrieved_positions();
    let mut out = Vec::with_capacity(episodic.len());
    for c in episodic.clips() {
        let sparse = c.tensor(d);
        let sample = match model.retriever_key(c.task) {
            None => RehearsalSample {
                frames: sparse,
                positions: grid.clone(),
                label: c.label,
                task: c.task,
            },
            Some(_) => RehearsalSample {
                frames: retrieve_stored(model, semantic, c.task, c.label, sparse, &grid, None)?,
                positions: out_positions.clone(),
                label: c.label,
                task: c.task,
            },
        };
        out.push(sample);
    }
    Ok(out)
}

/// Dense features retrieved for a stored clip with its origin task's module
/// and prompt (or `prompt` instead, when given).
pub fn retrieve_stored(
    model: &ModelState,
    semantic: &SemanticStore,
    task: usize,
    label: usize,
    sparse: Tensor,
    positions: &[usize],
    prompt: Option<Tensor>,
) -> Result<Tensor> {
    let r = model
        .retriever(task)
        .ok_or_else(|| Error::State(format!("missing retrieval module for stored task {task}")))?;
    let prompt = match prompt {
        Some(p) => Some(p),
        None if model.cfg.uses_prompts() => Some(match model.cfg.prompt_scope {
            PromptScope::Class => {
                let name = model.prompt_name(task, label).expect("class prompt");
                model.params.value(&name)?.clone()
            }
            _ => semantic
                .prompt(task)
                .ok_or_else(|| Error::State(format!("missing prompt for stored task {task}")))?,
        }),
        None => None,
    };
    let mut tape = Tape::new();
    let sv = tape.constant(sparse);
    let pv = prompt.map(|p| tape.constant(p));
    let rv = r.retrieve(&mut tape, &model.params, pv, sv, positions, model.cfg.clip_len)?;
    Ok(tape.value(rv).clone())
}

/// Cross-entropy over every class in the head.
pub fn rehearsal_loss(tape: &mut Tape, model: &ModelState, samples: &[&RehearsalSample]) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut zs = Vec::with_capacity(samples.len());
    for s in samples {
        let f = tape.constant(s.frames.clone());
        zs.push(model.encode(tape, f, Some(&s.positions))?);
    }
    let zb = tape.concat_rows(&zs)?;
    let logits = model.classifier.logits(tape, &model.params, zb)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let all: Vec<usize> = (0..model.classifier.num_classes(&model.params)?).collect();
    tape.masked_cross_entropy(logits, &labels, &all)
}

pub fn rehearsal_step(model: &mut ModelState, adam: &mut Adam, lr: f64, samples: &[&RehearsalSample]) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = rehearsal_loss(&mut tape, model, samples)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("rehearsal loss".into()));
    }
    apply(model, adam, &tape, loss, lr)?;
    Ok(value)
}
