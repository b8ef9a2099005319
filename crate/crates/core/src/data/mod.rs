//! Frame-feature datasets: the synthetic order-coded generator and the
//! on-disk feature format for externally extracted features.

pub mod features;
pub mod synth;

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// One clip: `L×d` frame features plus its label and a unique id.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub features: Tensor,
    pub label: usize,
    pub clip_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub d: usize,
    pub clip_len: usize,
    pub split: Split,
    pub clips: Vec<Clip>,
}

impl FeatureDataset {
    pub fn new(d: usize, clip_len: usize, split: Split, clips: Vec<Clip>) -> Result<Self> {
        let ds = Self {
            d,
            clip_len,
            split,
            clips,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.clips {
            if c.features.shape() != [self.clip_len, self.d] {
                return Err(Error::shape(
                    "feature dataset clip",
                    c.features.shape(),
                    &[self.clip_len, self.d],
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.clips.iter().map(|c| c.label).collect()
    }

    /// Clips whose label is in `labels`, in dataset order.
    pub fn filter_labels(&self, labels: &BTreeSet<usize>) -> FeatureDataset {
        FeatureDataset {
            d: self.d,
            clip_len: self.clip_len,
            split: self.split,
            clips: self
                .clips
                .iter()
                .filter(|c| labels.contains(&c.label))
                .cloned()
                .collect(),
        }
    }
}
