//! Dense-feature retrieval strategies. Cross-attention is the MR module; the
//! rest are the comparison architectures (self-attention, MLP, add/multiply
//! with the prompt, and linear interpolation along time).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::blocks::attention::MhcaBlock;
use crate::blocks::layers::{FfnBlock, LayerNorm, Linear};
use crate::blocks::mr::{MrModule, MR_FFN_RATIO};
use crate::error::{Error, Result};
use crate::memory::sampling::{nearest_source_rows, uniform_indices};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalArch {
    CrossAttention,
    SelfAttention,
    Mlp,
    Add,
    Multiply,
    FeatureInterpolation,
}

impl RetrievalArch {
    pub const ALL: [RetrievalArch; 6] = [
        RetrievalArch::FeatureInterpolation,
        RetrievalArch::Mlp,
        RetrievalArch::Add,
        RetrievalArch::Multiply,
        RetrievalArch::SelfAttention,
        RetrievalArch::CrossAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RetrievalArch::CrossAttention => "cross_attention",
            RetrievalArch::SelfAttention => "self_attention",
            RetrievalArch::Mlp => "mlp",
            RetrievalArch::Add => "add",
            RetrievalArch::Multiply => "multiply",
            RetrievalArch::FeatureInterpolation => "feature_interpolation",
        }
    }

    /// Whether the strategy reads a semantic prompt.
    pub fn uses_prompt(self) -> bool {
        matches!(
            self,
            RetrievalArch::CrossAttention
                | RetrievalArch::SelfAttention
                | RetrievalArch::Add
                | RetrievalArch::Multiply
        )
    }

    /// Whether the strategy has its own weights.
    pub fn has_weights(self) -> bool {
        matches!(
            self,
            RetrievalArch::CrossAttention | RetrievalArch::SelfAttention | RetrievalArch::Mlp
        )
    }
}

impl fmt::Display for RetrievalArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RetrievalArch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown retrieval architecture `{s}`"))
    }
}

/// Self-attention over the concatenated prompt and sparse frames; the
/// trailing sparse rows are dropped from the output.
#[derive(Debug, Clone)]
pub struct SelfAttentionRetriever {
    pub ln_attn: LayerNorm,
    pub mhca: MhcaBlock,
    pub ln_ffn: LayerNorm,
    pub ffn: FfnBlock,
}

/// Flattened sparse frames through three linear layers (GELU between),
/// reshaped to `L×d`. No prompt.
#[derive(Debug, Clone)]
pub struct MlpRetriever {
    pub layers: [Linear; 3],
    pub in_rows: usize,
    pub out_rows: usize,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub enum Retriever {
    CrossAttention(MrModule),
    SelfAttention(SelfAttentionRetriever),
    Mlp(MlpRetriever),
    Add,
    Multiply,
    FeatureInterpolation,
}

impl Retriever {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        arch: RetrievalArch,
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        num_heads: usize,
        sparse_len: usize,
        out_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match arch {
            RetrievalArch::CrossAttention => {
                Retriever::CrossAttention(MrModule::init(params, prefix, d, num_heads, rng)?)
            }
            RetrievalArch::SelfAttention => Retriever::SelfAttention(SelfAttentionRetriever {
                ln_attn: LayerNorm::init(params, &format!("{prefix}.ln_attn"), d)?,
                mhca: MhcaBlock::init(params, &format!("{prefix}.attn"), d, num_heads, rng)?,
                ln_ffn: LayerNorm::init(params, &format!("{prefix}.ln_ffn"), d)?,
                ffn: FfnBlock::init(params, &format!("{prefix}.ffn"), d, MR_FFN_RATIO, rng)?,
            }),
            RetrievalArch::Mlp => {
                let hidden = 4 * d;
                Retriever::Mlp(MlpRetriever {
                    layers: [
                        Linear::init(params, &format!("{prefix}.fc0"), sparse_len * d, hidden, true, rng)?,
                        Linear::init(params, &format!("{prefix}.fc1"), hidden, hidden, true, rng)?,
                        Linear::init(params, &format!("{prefix}.fc2"), hidden, out_len * d, true, rng)?,
                    ],
                    in_rows: sparse_len,
                    out_rows: out_len,
                    d,
                })
            }
            RetrievalArch::Add => Retriever::Add,
            RetrievalArch::Multiply => Retriever::Multiply,
            RetrievalArch::FeatureInterpolation => Retriever::FeatureInterpolation,
        })
    }

    pub fn arch(&self) -> RetrievalArch {
        match self {
            Retriever::CrossAttention(_) => RetrievalArch::CrossAttention,
            Retriever::SelfAttention(_) => RetrievalArch::SelfAttention,
            Retriever::Mlp(_) => RetrievalArch::Mlp,
            Retriever::Add => RetrievalArch::Add,
            Retriever::Multiply => RetrievalArch::Multiply,
            Retriever::FeatureInterpolation => RetrievalArch::FeatureInterpolation,
        }
    }

    /// Produces `out_len×d` dense features from sparse frames. `positions`
    /// are the time indices the sparse rows were taken from, out of
    /// `clip_len`; the attention strategies ignore them.
    pub fn retrieve(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        prompt: Option<Var>,
        sparse: Var,
        positions: &[usize],
        clip_len: usize,
    ) -> Result<Var> {
        let need_prompt = || {
            prompt.ok_or_else(|| Error::State(format!("{} retrieval needs a prompt", self.arch())))
        };
        match self {
            Retriever::CrossAttention(mr) => mr.forward(tape, params, need_prompt()?, sparse),
            Retriever::SelfAttention(sa) => {
                let p = need_prompt()?;
                let lp = tape.shape(p)[0];
                let x = tape.concat_rows(&[p, sparse])?;
                let xn = sa.ln_attn.forward(tape, params, x)?;
                let att = sa.mhca.forward(tape, params, xn, xn)?;
                let x1 = tape.add(att.out, x)?;
                let h = sa.ln_ffn.forward(tape, params, x1)?;
                let f = sa.ffn.forward(tape, params, h)?;
                let x2 = tape.add(f, x1)?;
                let keep: Vec<usize> = (0..lp).collect();
                tape.select_rows(x2, &keep)
            }
            Retriever::Mlp(m) => {
                let s = tape.shape(sparse).to_vec();
                if s[0] != m.in_rows {
                    return Err(Error::shape("mlp retrieval", &s, &[m.in_rows, m.d]));
                }
                let mut h = tape.reshape(sparse, vec![1, m.in_rows * m.d])?;
                for (i, layer) in m.layers.iter().enumerate() {
                    h = layer.forward(tape, params, h)?;
                    if i + 1 < m.layers.len() {
                        h = tape.gelu(h);
                    }
                }
                tape.reshape(h, vec![m.out_rows, m.d])
            }
            Retriever::Add | Retriever::Multiply => {
                let p = need_prompt()?;
                let lp = tape.shape(p)[0];
                check_positions(tape, sparse, positions, clip_len)?;
                let rows = nearest_source_rows(positions.len(), lp);
                let up = tape.select_rows(sparse, &rows)?;
                if matches!(self, Retriever::Add) {
                    tape.add(up, p)
                } else {
                    tape.mul(up, p)
                }
            }
            Retriever::FeatureInterpolation => {
                check_positions(tape, sparse, positions, clip_len)?;
                let m = interpolation_matrix(positions, clip_len)?;
                let mv = tape.constant(m);
                tape.matmul(mv, sparse)
            }
        }
    }
}

fn check_positions(tape: &Tape, sparse: Var, positions: &[usize], clip_len: usize) -> Result<()> {
    if positions.len() != tape.shape(sparse)[0] || positions.iter().any(|&p| p >= clip_len) {
        return Err(Error::Input(format!(
            "sparse positions {positions:?} inconsistent with {} rows of a {clip_len}-frame clip",
            tape.shape(sparse)[0]
        )));
    }
    Ok(())
}

/// `clip_len × l` matrix that linearly interpolates rows sampled at
/// `positions` (strictly increasing) back onto every frame; held constant
/// before the first and after the last sample.
pub fn interpolation_matrix(positions: &[usize], clip_len: usize) -> Result<Tensor> {
    let l = positions.len();
    if l == 0 || positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input(format!("positions {positions:?} must be strictly increasing")));
    }
    let mut m = Tensor::zeros(&[clip_len, l]);
    let data = m.data_mut();
    for t in 0..clip_len {
        let row = &mut data[t * l..(t + 1) * l];
        if t <= positions[0] {
            row[0] = 1.0;
        } else if t >= positions[l - 1] {
            row[l - 1] = 1.0;
        } else {
            let j = positions.iter().rposition(|&p| p <= t).expect("t above first");
            let (a, b) = (positions[j] as f64, positions[j + 1] as f64);
            let w = (t as f64 - a) / (b - a);
            row[j] = 1.0 - w;
            row[j + 1] = w;
        }
    }
    Ok(m)
}

/// Positions assumed for stored sparse clips whose sampling indices were not
/// kept: the uniform grid.
pub fn stored_positions(l: usize, clip_len: usize) -> Vec<usize> {
    uniform_indices(clip_len, l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_hits_samples_and_midpoints() {
        let m = interpolation_matrix(&[2, 6], 8).unwrap();
        assert_eq!(m.row(0), &[1.0, 0.0]);
        assert_eq!(m.row(2), &[1.0, 0.0]);
        assert_eq!(m.row(4), &[0.5, 0.5]);
        assert_eq!(m.row(6), &[0.0, 1.0]);
        assert_eq!(m.row(7), &[0.0, 1.0]);
        assert!(interpolation_matrix(&[3, 3], 8).is_err());
    }

    #[test]
    fn arch_names_round_trip() {
        for a in RetrievalArch::ALL {
            assert_eq!(a.name().parse::<RetrievalArch>().unwrap(), a);
        }
        assert!("conv".parse::<RetrievalArch>().is_err());
    }
}
