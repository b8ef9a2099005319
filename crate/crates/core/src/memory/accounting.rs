use crate::memory::store::{EpisodicStore, SemanticStore};

/// Bytes per stored value.
pub const BYTES_PER_VALUE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MemoryUsage {
    pub episodic_bytes: u64,
    pub semantic_bytes: u64,
}

impl MemoryUsage {
    pub fn total(&self) -> u64 {
        self.episodic_bytes + self.semantic_bytes
    }

    pub fn total_mib(&self) -> f64 {
        mib(self.total())
    }
}

pub fn mib(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 20) as f64
}

/// MiB rounded to one decimal, as reported in tables.
pub fn mib_rounded(bytes: u64) -> f64 {
    (mib(bytes) * 10.0).round() / 10.0
}

/// Bytes actually held by the stores.
pub fn memory_usage_bytes(episodic: &EpisodicStore, semantic: &SemanticStore) -> MemoryUsage {
    let clip = (episodic.l * episodic.d) as u64 * BYTES_PER_VALUE;
    let prompt = (semantic.prompt_len * semantic.d) as u64 * BYTES_PER_VALUE;
    MemoryUsage {
        episodic_bytes: episodic.len() as u64 * clip,
        semantic_bytes: semantic.len() as u64 * prompt,
    }
}

/// Closed-form budget of a configuration with full exemplar sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryBudget {
    pub classes: u64,
    pub n_per_class: u64,
    pub l: u64,
    pub d: u64,
    pub tasks: u64,
    pub prompt_len: u64,
}

impl MemoryBudget {
    pub fn usage(&self) -> MemoryUsage {
        MemoryUsage {
            episodic_bytes: self.classes * self.n_per_class * self.l * self.d * BYTES_PER_VALUE,
            semantic_bytes: self.tasks * self.prompt_len * self.d * BYTES_PER_VALUE,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_stores_use_nothing() {
        let u = memory_usage_bytes(&EpisodicStore::new(768, 1, 10), &SemanticStore::new(768, 8));
        assert_eq!(u, MemoryUsage::default());
        assert_eq!(u.total(), 0);
    }

    #[test]
    fn ucf_ten_by_five() {
        let b = MemoryBudget {
            classes: 101,
            n_per_class: 10,
            l: 1,
            d: 768,
            tasks: 6,
            prompt_len: 8,
        };
        let u = b.usage();
        assert_eq!((u.episodic_bytes, u.semantic_bytes, u.total()), (3_102_720, 147_456, 3_250_176));
        assert_eq!(mib_rounded(u.total()), 3.1);
    }

    #[test]
    fn ssv2_ten_by_nine() {
        let b = MemoryBudget {
            classes: 174,
            n_per_class: 4,
            l: 4,
            d: 768,
            tasks: 10,
            prompt_len: 8,
        };
        let u = b.usage();
        assert_eq!((u.episodic_bytes, u.semantic_bytes, u.total()), (8_552_448, 245_760, 8_798_208));
        assert_eq!(mib_rounded(u.total()), 8.4);
    }
}
