//! The learnable state of a run: temporal encoder, classifier head,
//! retrieval modules and semantic prompts, all in one [`ParamSet`].
//!
//! Parameter names: `enc.*`, `head.*`, `mr.global.*` or `mr.t{k}.*`, and
//! `prompt.global.p`, `prompt.t{k}.p` or `prompt.c{c}.p`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{put_u32, put_u64, to_u32, Reader};
use crate::blocks::{Classifier, RetrievalArch, Retriever, TemporalEncoder};
use crate::config::{MrInput, MrScope, PromptScope, RunConfig};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

pub const PROMPT_INIT_STD: f64 = 0.02;
pub const ENCODER_PREFIX: &str = "enc";
pub const HEAD_PREFIX: &str = "head";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub clip_len: usize,
    pub sparse_len: usize,
    pub prompt_len: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub positional: bool,
    pub arch: RetrievalArch,
    pub mr_scope: MrScope,
    pub prompt_scope: PromptScope,
    pub mr_input: MrInput,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            d: cfg.d,
            clip_len: cfg.clip_len,
            sparse_len: cfg.sparse_len,
            prompt_len: cfg.prompt_length(),
            heads: cfg.heads,
            encoder_layers: cfg.encoder_layers,
            positional: cfg.positional,
            arch: cfg.retrieval_arch,
            mr_scope: cfg.mr_scope,
            prompt_scope: cfg.prompt_scope,
            mr_input: cfg.mr_input,
        }
    }

    pub fn uses_prompts(&self) -> bool {
        self.mr_scope != MrScope::None && self.prompt_scope != PromptScope::None && self.arch.uses_prompt()
    }

    /// Rows of a retrieved clip.
    pub fn retrieved_len(&self) -> usize {
        if self.arch.uses_prompt() {
            self.prompt_len
        } else {
            self.clip_len
        }
    }

    /// Frames the retrieval module reads while it is trained.
    pub fn mr_train_len(&self) -> usize {
        match self.mr_input {
            MrInput::Sparse => self.sparse_len,
            MrInput::Dense => self.clip_len,
        }
    }

    /// Time index used by the encoder for each retrieved row: the retrieved
    /// sequence is spread evenly over the clip.
    pub fn retrieved_positions(&self) -> Vec<usize> {
        let n = self.retrieved_len();
        (0..n).map(|i| i * self.clip_len / n).collect()
    }
}

/// Which retrieval module serves a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RetrieverKey {
    Global,
    Task(usize),
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub encoder: TemporalEncoder,
    pub classifier: Classifier,
    retrievers: BTreeMap<RetrieverKey, Retriever>,
}

pub fn mr_prefix(key: RetrieverKey) -> String {
    match key {
        RetrieverKey::Global => "mr.global".into(),
        RetrieverKey::Task(k) => format!("mr.t{k}"),
    }
}

impl ModelState {
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        let max_pos = cfg.positional.then(|| cfg.clip_len);
        let encoder = TemporalEncoder::init(
            &mut params,
            ENCODER_PREFIX,
            cfg.d,
            cfg.heads,
            cfg.encoder_layers,
            max_pos,
            rng,
        )?;
        let classifier = Classifier::init(&mut params, HEAD_PREFIX, cfg.d)?;
        Ok(Self {
            cfg,
            params,
            encoder,
            classifier,
            retrievers: BTreeMap::new(),
        })
    }

    pub fn retriever_key(&self, task: usize) -> Option<RetrieverKey> {
        match self.cfg.mr_scope {
            MrScope::None => None,
            MrScope::Global => Some(RetrieverKey::Global),
            MrScope::Task => Some(RetrieverKey::Task(task)),
        }
    }

    pub fn retriever(&self, task: usize) -> Option<&Retriever> {
        self.retriever_key(task).and_then(|k| self.retrievers.get(&k))
    }

    pub fn has_retrievers(&self) -> bool {
        !self.retrievers.is_empty()
    }

    /// Name of the prompt used for a clip of `label` from `task`.
    pub fn prompt_name(&self, task: usize, label: usize) -> Option<String> {
        if !self.cfg.uses_prompts() {
            return None;
        }
        Some(match self.cfg.prompt_scope {
            PromptScope::None => return None,
            PromptScope::Global => "prompt.global.p".into(),
            PromptScope::Task => format!("prompt.t{task}.p"),
            PromptScope::Class => format!("prompt.c{label}.p"),
        })
    }

    /// Grows the head and creates whatever retrieval module and prompts the
    /// task needs.
    pub fn prepare_task<R: Rng + ?Sized>(&mut self, task: usize, classes: &[usize], rng: &mut R) -> Result<()> {
        let have = self.classifier.num_classes(&self.params)?;
        if classes.iter().any(|&c| c < have) {
            return Err(Error::State(format!("task {task} reuses classes already in the head")));
        }
        let top = classes.iter().copied().max().map_or(have, |c| c + 1);
        self.classifier.grow(&mut self.params, top - have, rng)?;

        if let Some(key) = self.retriever_key(task) {
            if !self.retrievers.contains_key(&key) {
                let r = Retriever::init(
                    self.cfg.arch,
                    &mut self.params,
                    &mr_prefix(key),
                    self.cfg.d,
                    self.cfg.heads,
                    self.cfg.mr_train_len(),
                    self.cfg.clip_len,
                    rng,
                )?;
                self.retrievers.insert(key, r);
            }
        }
        let shape = [self.cfg.prompt_len, self.cfg.d];
        for &c in classes {
            if let Some(name) = self.prompt_name(task, c) {
                if !self.params.contains(&name) {
                    self.params.insert(&name, Tensor::normal(&shape, PROMPT_INIT_STD, rng), true)?;
                }
            }
        }
        Ok(())
    }

    /// Prompts owned by a task (one per class under class scope).
    pub fn task_prompt_names(&self, task: usize, classes: &[usize]) -> Vec<String> {
        let mut names: Vec<String> = classes.iter().filter_map(|&c| self.prompt_name(task, c)).collect();
        names.dedup();
        names
    }

    /// Clip vector `1×d` for `frames` seen at time `positions`.
    pub fn encode(&self, tape: &mut Tape, frames: Var, positions: Option<&[usize]>) -> Result<Var> {
        Ok(self.encoder.encode(tape, &self.params, frames, positions)?.z)
    }

    /// Logits over every class in the head for one clip of dense frames.
    /// Reads only the encoder and the head.
    pub fn predict(&self, frames: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(frames.clone());
        let z = self.encode(&mut tape, f, None)?;
        let logits = self.classifier.logits(&mut tape, &self.params, z)?;
        Ok(tape.value(logits).clone())
    }

    /// Rebuilds the module layout for the given tasks and installs `params`,
    /// which must match that layout name for name and shape for shape.
    pub fn restore(cfg: ModelConfig, tasks: &[Vec<usize>], params: ParamSet) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(cfg, &mut rng)?;
        for (k, classes) in tasks.iter().enumerate() {
            m.prepare_task(k, classes, &mut rng)?;
        }
        let expected: Vec<(&String, &[usize])> = m.params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        let got: Vec<(&String, &[usize])> = params.iter().map(|(n, p)| (n, p.value.shape())).collect();
        if expected != got {
            return Err(Error::State("saved parameters do not match the configured model layout".into()));
        }
        m.params = params;
        Ok(m)
    }
}

pub const MODEL_MAGIC: &[u8; 4] = b"ESPM";
pub const MODEL_VERSION: u32 = 1;

/// Parameter file: `"ESPM" | version u32 | count u32`, then per entry
/// `name_len u32 | name | flags u32 (bit0 trainable, bit1 locked) | ndim u32 |
/// dims u32… | values f64…`, little-endian.
pub fn encode_params(params: &ParamSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut buf, MODEL_VERSION);
    put_u32(&mut buf, to_u32(params.len(), "parameter count")?);
    for (name, p) in params.iter() {
        put_u32(&mut buf, to_u32(name.len(), "name length")?);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, u32::from(p.trainable) | (u32::from(p.is_locked()) << 1));
        let shape = p.value.shape();
        put_u32(&mut buf, to_u32(shape.len(), "rank")?);
        for &s in shape {
            put_u32(&mut buf, to_u32(s, "dimension")?);
        }
        for v in p.value.data() {
            put_u64(&mut buf, v.to_bits());
        }
    }
    Ok(buf)
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    r.version(MODEL_VERSION)?;
    let count = r.u32("parameter count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let at = r.offset();
        let len = r.u32("name length")? as usize;
        let raw = r.bytes(len, "name")?;
        let name = String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, "name is not UTF-8"))?;
        let flags = r.u32("flags")?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::format(r.offset(), "shape overflows"))?;
        let vals = r.u64s(n, "values")?;
        let value = Tensor::new(shape, vals.into_iter().map(f64::from_bits).collect())?;
        params
            .insert(&name, value, flags & 1 == 1)
            .map_err(|_| Error::format(at, format!("duplicate parameter `{name}`")))?;
        if flags & 2 == 2 {
            params.freeze_permanently_exact(&name);
        }
    }
    r.finish()?;
    Ok(params)
}

pub fn save_params(params: &ParamSet, path: &Path) -> Result<()> {
    fs::write(path, encode_params(params)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    decode_params(&fs::read(path)?)
}
