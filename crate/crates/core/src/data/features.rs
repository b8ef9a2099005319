//! Feature file format (little-endian):
//!
//! ```text
//! "ESFD" | version u32 = 1 | d u32 | L u32 | clip_count u32
//! per clip: label u32 | clip_id u64 | L·d f32
//! ```

use std::fs;
use std::path::Path;

use crate::binio::{f32_to_f64s, f64_to_f32s, put_f32s, put_u32, put_u64, to_u32, Reader};
use crate::data::{Clip, FeatureDataset, Split};
use crate::error::Result;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"ESFD";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(ds: &FeatureDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut buf = Vec::with_capacity(20 + ds.len() * (12 + 4 * ds.clip_len * ds.d));
    buf.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut buf, FEATURE_VERSION);
    put_u32(&mut buf, to_u32(ds.d, "d")?);
    put_u32(&mut buf, to_u32(ds.clip_len, "clip length")?);
    put_u32(&mut buf, to_u32(ds.len(), "clip count")?);
    for c in &ds.clips {
        put_u32(&mut buf, to_u32(c.label, "label")?);
        put_u64(&mut buf, c.clip_id);
        put_f32s(&mut buf, &f64_to_f32s(c.features.data()));
    }
    Ok(buf)
}

pub fn decode_features(bytes: &[u8], split: Split) -> Result<FeatureDataset> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    r.version(FEATURE_VERSION)?;
    let d = r.u32("d")? as usize;
    let clip_len = r.u32("clip length")? as usize;
    let count = r.u32("clip count")? as usize;
    let mut clips = Vec::new();
    for _ in 0..count {
        let label = r.u32("label")? as usize;
        let clip_id = r.u64("clip id")?;
        let data = r.f32s(clip_len * d, "clip features")?;
        clips.push(Clip {
            features: Tensor::new(vec![clip_len, d], f32_to_f64s(&data))?,
            label,
            clip_id,
        });
    }
    r.finish()?;
    FeatureDataset::new(d, clip_len, split, clips)
}

pub fn save_features(ds: &FeatureDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_features(ds)?)?;
    Ok(())
}

pub fn load_features(path: &Path, split: Split) -> Result<FeatureDataset> {
    decode_features(&fs::read(path)?, split)
}
