use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::blocks::RetrievalArch;
use crate::config::{MrInput, MrScope, PromptScope, RunConfig};
use crate::driver::analysis::baseline_config;
use crate::driver::run_benchmark;
use crate::error::{Error, Result};
use crate::memory::SamplingStrategy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Scopes,
    RetrievalArch,
    Losses,
    Sampling,
    InputFeatures,
    PromptLength,
    Robustness,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Scopes,
        Preset::RetrievalArch,
        Preset::Losses,
        Preset::Sampling,
        Preset::InputFeatures,
        Preset::PromptLength,
        Preset::Robustness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Scopes => "scopes",
            Preset::RetrievalArch => "retrieval_arch",
            Preset::Losses => "losses",
            Preset::Sampling => "sampling",
            Preset::InputFeatures => "input_features",
            Preset::PromptLength => "prompt_length",
            Preset::Robustness => "robustness",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.iter().copied().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
            Error::Input(format!("unknown preset `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Named configurations of a preset, in table order.
pub fn ablation_arms(preset: Preset, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let scoped = |mr: MrScope, prompt: PromptScope| {
        with(&|c| {
            c.mr_scope = mr;
            c.prompt_scope = prompt;
            c.retrieval_arch = RetrievalArch::CrossAttention;
        })
    };
    match preset {
        Preset::Scopes => vec![
            ("none/none".into(), baseline_config(base)),
            ("global/global".into(), scoped(MrScope::Global, PromptScope::Global)),
            ("global/task".into(), scoped(MrScope::Global, PromptScope::Task)),
            ("task/task".into(), scoped(MrScope::Task, PromptScope::Task)),
            ("task/class".into(), scoped(MrScope::Task, PromptScope::Class)),
        ],
        Preset::RetrievalArch => RetrievalArch::ALL
            .iter()
            .map(|&a| {
                (
                    a.name().to_string(),
                    with(&|c| {
                        c.retrieval_arch = a;
                        if c.mr_scope == MrScope::None {
                            c.mr_scope = MrScope::Task;
                        }
                        if a.uses_prompt() && c.prompt_scope == PromptScope::None {
                            c.prompt_scope = PromptScope::Task;
                        }
                    }),
                )
            })
            .collect(),
        Preset::Losses => [(false, false), (true, false), (false, true), (true, true)]
            .iter()
            .map(|&(sm, tm)| {
                let label = format!("sm={}/tm={}", on_off(sm), on_off(tm));
                let on = |w: f64| if w > 0.0 { w } else { 1.0 };
                (
                    label,
                    with(&|c| {
                        c.alpha = if sm { on(base.alpha) } else { 0.0 };
                        c.beta = if tm { on(base.beta) } else { 0.0 };
                    }),
                )
            })
            .collect(),
        Preset::Sampling => SamplingStrategy::ALL
            .iter()
            .map(|&s| (s.name().to_string(), with(&|c| c.sampling = s)))
            .collect(),
        Preset::InputFeatures => vec![
            ("dense".into(), with(&|c| c.mr_input = MrInput::Dense)),
            ("sparse".into(), with(&|c| c.mr_input = MrInput::Sparse)),
        ],
        Preset::PromptLength => {
            let l = base.clip_len;
            vec![
                (format!("{l}/sm=off"), with(&|c| {
                    c.prompt_len = Some(l);
                    c.alpha = 0.0;
                })),
                (format!("{}/sm=off", 2 * l), with(&|c| {
                    c.prompt_len = Some(2 * l);
                    c.alpha = 0.0;
                })),
                (format!("{}/sm=off", 3 * l), with(&|c| {
                    c.prompt_len = Some(3 * l);
                    c.alpha = 0.0;
                })),
                (format!("{l}/sm=on"), with(&|c| c.prompt_len = Some(l))),
            ]
        }
        Preset::Robustness => (1..=base.clip_len)
            .flat_map(|l| {
                let full = with(&|c| c.sparse_len = l);
                let baseline = baseline_config(&full);
                [(format!("full/l={l}"), full), (format!("baseline/l={l}"), baseline)]
            })
            .collect(),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    pub aia: f64,
    pub final_aa: f64,
    pub bwf: f64,
    pub episodic_bytes: u64,
    pub semantic_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,aia,final_aa,bwf,episodic_bytes,semantic_bytes\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.arm, r.aia, r.final_aa, r.bwf, r.episodic_bytes, r.semantic_bytes
            );
        }
        s
    }
}

/// Runs every arm of a preset over `base.ablation_seeds` consecutive seeds
/// and reports means. Memory columns come from the first seed.
pub fn run_ablation(preset: Preset, base: &RunConfig) -> Result<AblationTable> {
    base.validate()?;
    let seeds: Vec<u64> = (0..base.ablation_seeds as u64).map(|s| base.seed + s).collect();
    let mut rows = Vec::new();
    for (arm, cfg) in ablation_arms(preset, base) {
        cfg.validate()?;
        let (mut aia, mut aa, mut bwf) = (0.0, 0.0, 0.0);
        let mut mem = None;
        for &seed in &seeds {
            let out = run_benchmark(&RunConfig { seed, ..cfg.clone() })?;
            aia += out.metrics.final_aia();
            aa += out.metrics.final_aa();
            bwf += out.metrics.bwf.last().copied().unwrap_or(0.0);
            mem.get_or_insert(out.usage.last().copied().unwrap_or_default());
        }
        let n = seeds.len() as f64;
        let mem = mem.unwrap_or_default();
        log::info!("{preset} arm {arm}: AIA {:.4}", aia / n);
        rows.push(AblationRow {
            arm,
            aia: aia / n,
            final_aa: aa / n,
            bwf: bwf / n,
            episodic_bytes: mem.episodic_bytes,
            semantic_bytes: mem.semantic_bytes,
        });
    }
    Ok(AblationTable { preset, seeds, rows })
}
