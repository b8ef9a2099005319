use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rule for picking which `l` of `L` frames are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingStrategy {
    /// Segment centres, `floor((i + 0.5)·L / l)`.
    Uniform,
    /// Sorted draw without replacement.
    Random,
    /// Top-`l` frames by final-layer temporal-encoder attention, in time order.
    TemporalAttention,
}

impl SamplingStrategy {
    pub const ALL: [SamplingStrategy; 3] = [
        SamplingStrategy::Random,
        SamplingStrategy::TemporalAttention,
        SamplingStrategy::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplingStrategy::Uniform => "uniform",
            SamplingStrategy::Random => "random",
            SamplingStrategy::TemporalAttention => "temporal_attention",
        }
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplingStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown sampling strategy `{s}`"))
    }
}

fn check_len(clip_len: usize, l: usize) -> Result<()> {
    if l == 0 || l > clip_len {
        return Err(Error::Input(format!(
            "cannot keep {l} of {clip_len} frames (need 1 <= l <= L)"
        )));
    }
    Ok(())
}

pub fn uniform_indices(clip_len: usize, l: usize) -> Vec<usize> {
    (0..l).map(|i| (2 * i + 1) * clip_len / (2 * l)).collect()
}

pub fn random_indices<R: Rng + ?Sized>(clip_len: usize, l: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = index::sample(rng, clip_len, l).into_vec();
    idx.sort_unstable();
    idx
}

/// Top-`l` by score (earlier frame wins ties), returned in time order.
pub fn top_attention_indices(scores: &[f64], l: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut idx: Vec<usize> = order.into_iter().take(l).collect();
    idx.sort_unstable();
    idx
}

/// Frame indices to keep. `attention` is required by
/// [`SamplingStrategy::TemporalAttention`] and ignored otherwise.
pub fn subsample_indices<R: Rng + ?Sized>(
    clip_len: usize,
    l: usize,
    strategy: SamplingStrategy,
    rng: &mut R,
    attention: Option<&[f64]>,
) -> Result<Vec<usize>> {
    check_len(clip_len, l)?;
    Ok(match strategy {
        SamplingStrategy::Uniform => uniform_indices(clip_len, l),
        SamplingStrategy::Random => random_indices(clip_len, l, rng),
        SamplingStrategy::TemporalAttention => {
            let scores = attention.ok_or_else(|| {
                Error::Input("temporal-attention sampling needs attention scores".into())
            })?;
            if scores.len() != clip_len {
                return Err(Error::shape("temporal_attention", &[clip_len], &[scores.len()]));
            }
            top_attention_indices(scores, l)
        }
    })
}

/// Keeps `l` rows of an `L×d` clip.
pub fn subsample<R: Rng + ?Sized>(
    frames: &Tensor,
    l: usize,
    strategy: SamplingStrategy,
    rng: &mut R,
    attention: Option<&[f64]>,
) -> Result<(Tensor, Vec<usize>)> {
    let idx = subsample_indices(frames.rows(), l, strategy, rng, attention)?;
    Ok((frames.select_rows(&idx)?, idx))
}

/// Source row for each of `clip_len` output frames when stretching `l` rows
/// by nearest-neighbour interpolation (`floor(t·l / L)`).
pub fn nearest_source_rows(l: usize, clip_len: usize) -> Vec<usize> {
    (0..clip_len).map(|t| t * l / clip_len).collect()
}

pub fn nearest_upsample(sparse: &Tensor, clip_len: usize) -> Result<Tensor> {
    if sparse.rows() == 0 || sparse.is_empty() {
        return Err(Error::Input("cannot upsample zero frames".into()));
    }
    sparse.select_rows(&nearest_source_rows(sparse.rows(), clip_len))
}
