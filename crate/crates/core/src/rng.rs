use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random sub-streams derived from one run seed. Ablation arms
/// sharing a seed draw identical data and batches and differ only where the
/// arm itself differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Sampling,
    Batching,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 11,
            Stream::Init => 12,
            Stream::Sampling => 13,
            Stream::Batching => 14,
        }
    }
}

pub fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    stream_at(seed, s, 0)
}

/// A stream further split by an index (a task id, say).
pub fn stream_at(seed: u64, s: Stream, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((s.id() << 32) | index);
    r
}
