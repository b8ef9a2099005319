//! Run configuration: flat `key = value` lines, `#` starts a comment.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::blocks::RetrievalArch;
use crate::error::{Error, Result};
use crate::memory::SamplingStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrScope {
    None,
    Global,
    Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptScope {
    None,
    Global,
    Task,
    Class,
}

/// Which frames feed the retrieval module while it is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrInput {
    Sparse,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Features,
}

macro_rules! named_enum {
    ($t:ty, $what:literal, { $($v:path => $s:literal),+ $(,)? }) => {
        impl $t {
            pub fn name(self) -> &'static str {
                match self { $($v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(format!(concat!("unknown ", $what, " `{}`"), s)),
                }
            }
        }
    };
}

named_enum!(MrScope, "MR scope", { MrScope::None => "none", MrScope::Global => "global", MrScope::Task => "task" });
named_enum!(PromptScope, "prompt scope", {
    PromptScope::None => "none",
    PromptScope::Global => "global",
    PromptScope::Task => "task",
    PromptScope::Class => "class",
});
named_enum!(MrInput, "MR input", { MrInput::Sparse => "sparse", MrInput::Dense => "dense" });
named_enum!(DataSource, "data source", { DataSource::Synthetic => "synthetic", DataSource::Features => "features" });

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub tasks: usize,
    pub classes_per_task: usize,
    /// Size of the first task; `None` means `classes_per_task`.
    pub base_classes: Option<usize>,
    pub d: usize,
    pub clip_len: usize,
    /// Frames kept per stored clip (`l`).
    pub sparse_len: usize,
    /// `None` means equal to `clip_len`.
    pub prompt_len: Option<usize>,
    pub n_per_class: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub positional: bool,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs_incremental: usize,
    pub epochs_rehearsal: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mr_scope: MrScope,
    pub prompt_scope: PromptScope,
    pub retrieval_arch: RetrievalArch,
    pub sampling: SamplingStrategy,
    pub mr_input: MrInput,
    pub noise_sigma: f64,
    pub position_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub train_features: Vec<PathBuf>,
    pub test_features: Vec<PathBuf>,
    pub ablation_seeds: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic,
            tasks: 3,
            classes_per_task: 4,
            base_classes: None,
            d: 32,
            clip_len: 8,
            sparse_len: 2,
            prompt_len: None,
            n_per_class: 8,
            heads: 2,
            encoder_layers: 3,
            positional: true,
            alpha: 1.0,
            beta: 1.0,
            lr: 1e-3,
            epochs_incremental: 30,
            epochs_rehearsal: 30,
            batch_size: 10,
            seed: 0,
            mr_scope: MrScope::Task,
            prompt_scope: PromptScope::Task,
            retrieval_arch: RetrievalArch::CrossAttention,
            sampling: SamplingStrategy::Uniform,
            mr_input: MrInput::Sparse,
            noise_sigma: 0.1,
            position_scale: 1.0,
            train_per_class: 40,
            test_per_class: 20,
            train_features: Vec::new(),
            test_features: Vec::new(),
            ablation_seeds: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn parse_paths(value: &str) -> Vec<PathBuf> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect()
}

fn join_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

impl RunConfig {
    pub fn base_class_count(&self) -> usize {
        self.base_classes.unwrap_or(self.classes_per_task)
    }

    pub fn prompt_length(&self) -> usize {
        self.prompt_len.unwrap_or(self.clip_len)
    }

    pub fn total_classes(&self) -> usize {
        self.base_class_count() + (self.tasks.saturating_sub(1)) * self.classes_per_task
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = parse_value(key, value)?,
            "tasks" => self.tasks = parse_value(key, value)?,
            "classes_per_task" => self.classes_per_task = parse_value(key, value)?,
            "base_classes" => self.base_classes = parse_auto(key, value)?,
            "d" => self.d = parse_value(key, value)?,
            "clip_len" => self.clip_len = parse_value(key, value)?,
            "l" => self.sparse_len = parse_value(key, value)?,
            "prompt_len" => self.prompt_len = parse_auto(key, value)?,
            "n_per_class" => self.n_per_class = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "encoder_layers" => self.encoder_layers = parse_value(key, value)?,
            "positional" => self.positional = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "epochs_incremental" => self.epochs_incremental = parse_value(key, value)?,
            "epochs_rehearsal" => self.epochs_rehearsal = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "mr_scope" => self.mr_scope = parse_value(key, value)?,
            "prompt_scope" => self.prompt_scope = parse_value(key, value)?,
            "retrieval_arch" => self.retrieval_arch = parse_value(key, value)?,
            "sampling" => self.sampling = parse_value(key, value)?,
            "mr_input" => self.mr_input = parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "position_scale" => self.position_scale = parse_value(key, value)?,
            "train_per_class" => self.train_per_class = parse_value(key, value)?,
            "test_per_class" => self.test_per_class = parse_value(key, value)?,
            "train_features" => self.train_features = parse_paths(value),
            "test_features" => self.test_features = parse_paths(value),
            "ablation_seeds" => self.ablation_seeds = parse_value(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses and validates config text. Keys not given keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", n + 1), format!("expected `key = value`, found `{line}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("base_classes", self.base_class_count()),
            ("d", self.d),
            ("clip_len", self.clip_len),
            ("l", self.sparse_len),
            ("prompt_len", self.prompt_length()),
            ("n_per_class", self.n_per_class),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("epochs_incremental", self.epochs_incremental),
            ("epochs_rehearsal", self.epochs_rehearsal),
            ("batch_size", self.batch_size),
            ("ablation_seeds", self.ablation_seeds),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.sparse_len > self.clip_len {
            return Err(Error::config("l", format!("{} exceeds clip_len {}", self.sparse_len, self.clip_len)));
        }
        if self.d % self.heads != 0 {
            return Err(Error::config("heads", format!("d = {} is not divisible by {} heads", self.d, self.heads)));
        }
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta), ("noise_sigma", self.noise_sigma), ("position_scale", self.position_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be finite and >= 0"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and > 0"));
        }
        if self.mr_scope == MrScope::None && self.prompt_scope != PromptScope::None {
            return Err(Error::config("prompt_scope", "prompts need a retrieval module (mr_scope != none)"));
        }
        if self.mr_scope != MrScope::None
            && self.retrieval_arch.uses_prompt()
            && self.prompt_scope == PromptScope::None
        {
            return Err(Error::config(
                "prompt_scope",
                format!("{} retrieval needs a prompt", self.retrieval_arch),
            ));
        }
        match self.data {
            DataSource::Synthetic => {
                if self.train_per_class == 0 || self.test_per_class == 0 {
                    return Err(Error::config("train_per_class", "clip counts must be positive"));
                }
            }
            DataSource::Features => {
                for (k, files) in [("train_features", &self.train_features), ("test_features", &self.test_features)] {
                    if files.len() != self.tasks {
                        return Err(Error::config(k, format!("{} files for {} tasks", files.len(), self.tasks)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order. Parsing the
    /// output gives back an equal config.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data", self.data.to_string());
        kv("tasks", self.tasks.to_string());
        kv("classes_per_task", self.classes_per_task.to_string());
        kv("base_classes", auto(self.base_classes));
        kv("d", self.d.to_string());
        kv("clip_len", self.clip_len.to_string());
        kv("l", self.sparse_len.to_string());
        kv("prompt_len", auto(self.prompt_len));
        kv("n_per_class", self.n_per_class.to_string());
        kv("heads", self.heads.to_string());
        kv("encoder_layers", self.encoder_layers.to_string());
        kv("positional", self.positional.to_string());
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("lr", self.lr.to_string());
        kv("epochs_incremental", self.epochs_incremental.to_string());
        kv("epochs_rehearsal", self.epochs_rehearsal.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("mr_scope", self.mr_scope.to_string());
        kv("prompt_scope", self.prompt_scope.to_string());
        kv("retrieval_arch", self.retrieval_arch.to_string());
        kv("sampling", self.sampling.to_string());
        kv("mr_input", self.mr_input.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("position_scale", self.position_scale.to_string());
        kv("train_per_class", self.train_per_class.to_string());
        kv("test_per_class", self.test_per_class.to_string());
        if !self.train_features.is_empty() {
            kv("train_features", join_paths(&self.train_features));
        }
        if !self.test_features.is_empty() {
            kv("test_features", join_paths(&self.test_features));
        }
        kv("ablation_seeds", self.ablation_seeds.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.alpha = 0.1 + 0.2;
        cfg.lr = 3.3e-4;
        cfg.prompt_len = Some(16);
        cfg.retrieval_arch = RetrievalArch::Multiply;
        let back = RunConfig::parse(&cfg.to_config_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\ntasks = 1   # one task\nseed=7\n").unwrap();
        assert_eq!((cfg.tasks, cfg.seed), (1, 7));
    }

    fn field_of(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("l = 9"), "l");
        assert_eq!(field_of("tasks = 0"), "tasks");
        assert_eq!(field_of("alpha = -1"), "alpha");
        assert_eq!(field_of("heads = 3"), "heads");
        assert_eq!(field_of("mr_scope = sometimes"), "mr_scope");
        assert_eq!(field_of("colour = blue"), "colour");
        assert_eq!(field_of("seed = 1\nseed = 2"), "seed");
        assert_eq!(field_of("mr_scope = none"), "prompt_scope");
        assert_eq!(field_of("data = features\ntasks = 2\ntrain_features = a"), "train_features");
    }

    #[test]
    fn baseline_is_expressible() {
        let cfg = RunConfig::parse("mr_scope = none\nprompt_scope = none\nalpha = 0\nbeta = 0").unwrap();
        assert_eq!(cfg.mr_scope, MrScope::None);
    }
}
