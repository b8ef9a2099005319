use rand::Rng;

use crate::blocks::attention::MhcaBlock;
use crate::blocks::layers::{FfnBlock, LayerNorm};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

pub const ENCODER_FFN_RATIO: f64 = 4.0;
pub const DEFAULT_ENCODER_LAYERS: usize = 3;
const QUERY_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub mhca: MhcaBlock,
    pub ln_ffn: LayerNorm,
    pub ffn: FfnBlock,
}

/// Clip-level encoder: a learnable query token attends to the frame features
/// through a stack of cross-attention + FFN layers. Without the positional
/// table the encoder is a set function of its frames.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub d: usize,
    pub query: String,
    /// Learned additive embedding per frame position, when enabled.
    pub positions: Option<(String, usize)>,
    pub layers: Vec<EncoderLayer>,
}

pub struct Encoded {
    /// `1×d` clip vector.
    pub z: Var,
    /// Final-layer attention weights, one `1×T` node per head.
    pub last_attention: Vec<Var>,
}

impl TemporalEncoder {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        num_heads: usize,
        n_layers: usize,
        max_positions: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Input("temporal encoder needs at least one layer".into()));
        }
        let query = format!("{prefix}.query");
        params.insert(&query, Tensor::normal(&[1, d], QUERY_INIT_STD, rng), true)?;
        let positions = match max_positions {
            Some(n) => {
                let name = format!("{prefix}.pos");
                params.insert(&name, Tensor::normal(&[n, d], QUERY_INIT_STD, rng), true)?;
                Some((name, n))
            }
            None => None,
        };
        let layers = (0..n_layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                Ok(EncoderLayer {
                    ln_attn: LayerNorm::init(params, &format!("{p}.ln_attn"), d)?,
                    mhca: MhcaBlock::init(params, &format!("{p}.attn"), d, num_heads, rng)?,
                    ln_ffn: LayerNorm::init(params, &format!("{p}.ln_ffn"), d)?,
                    ffn: FfnBlock::init(params, &format!("{p}.ffn"), d, ENCODER_FFN_RATIO, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d,
            query,
            positions,
            layers,
        })
    }

    /// Encodes `T×d` frames. `positions` gives the time index of each frame
    /// (defaults to `0..T`) and only matters when the positional table is on.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        frames: Var,
        positions: Option<&[usize]>,
    ) -> Result<Encoded> {
        let s = tape.shape(frames).to_vec();
        if s.len() != 2 || s[1] != self.d {
            return Err(Error::shape("temporal_encode", &s, &[self.d]));
        }
        if s[0] == 0 {
            return Err(Error::Input("temporal encoder needs at least one frame".into()));
        }
        let keys = match &self.positions {
            Some((name, n)) => {
                let default: Vec<usize>;
                let idx = match positions {
                    Some(p) => p,
                    None => {
                        default = (0..s[0]).collect();
                        &default
                    }
                };
                if idx.len() != s[0] {
                    return Err(Error::shape("temporal_encode positions", &s, &[idx.len()]));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= *n) {
                    return Err(Error::Input(format!(
                        "frame position {bad} beyond positional table of {n}"
                    )));
                }
                let table = tape.param(params, name)?;
                let pos = tape.select_rows(table, idx)?;
                tape.add(frames, pos)?
            }
            None => frames,
        };

        let mut q = tape.param(params, &self.query)?;
        let mut last_attention = Vec::new();
        for layer in &self.layers {
            let qn = layer.ln_attn.forward(tape, params, q)?;
            let kn = layer.ln_attn.forward(tape, params, keys)?;
            let att = layer.mhca.forward(tape, params, qn, kn)?;
            q = tape.add(att.out, q)?;
            let h = layer.ln_ffn.forward(tape, params, q)?;
            let f = layer.ffn.forward(tape, params, h)?;
            q = tape.add(f, q)?;
            last_attention = att.weights;
        }
        Ok(Encoded {
            z: q,
            last_attention,
        })
    }

    /// Total final-layer attention mass per frame, summed over heads.
    pub fn frame_attention(&self, params: &ParamSet, frames: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let f = tape.constant(frames.clone());
        let enc = self.encode(&mut tape, params, f, None)?;
        let mut mass = vec![0.0; frames.rows()];
        for w in enc.last_attention {
            for (m, v) in mass.iter_mut().zip(tape.value(w).data()) {
                *m += v;
            }
        }
        Ok(mass)
    }
}
