use rand::Rng;

use crate::blocks::layers::Linear;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::ParamSet;

/// Multi-head cross-attention from a key/value set onto a query set.
///
/// Query/key/value/output projections carry no bias, so zeroing the value
/// projection makes the block output exactly zero.
#[derive(Debug, Clone)]
pub struct MhcaBlock {
    pub d: usize,
    pub num_heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

/// Output of one attention call. `weights` holds one `M×N` softmax node per
/// head.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MhcaBlock {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || d % num_heads != 0 {
            return Err(Error::Input(format!(
                "model width {d} not divisible by {num_heads} heads"
            )));
        }
        Ok(Self {
            d,
            num_heads,
            wq: Linear::init(params, &format!("{prefix}.wq"), d, d, false, rng)?,
            wk: Linear::init(params, &format!("{prefix}.wk"), d, d, false, rng)?,
            wv: Linear::init(params, &format!("{prefix}.wv"), d, d, false, rng)?,
            wo: Linear::init(params, &format!("{prefix}.wo"), d, d, false, rng)?,
        })
    }

    pub fn head_width(&self) -> usize {
        self.d / self.num_heads
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, queries: Var, keys_values: Var) -> Result<Attended> {
        let (sq, skv) = (tape.shape(queries).to_vec(), tape.shape(keys_values).to_vec());
        if sq.len() != 2 || skv.len() != 2 || sq[1] != self.d || skv[1] != self.d {
            return Err(Error::shape("mhca", &sq, &skv));
        }
        if skv[0] == 0 {
            return Err(Error::Input("attention over an empty key set".into()));
        }
        let q = self.wq.forward(tape, params, queries)?;
        let k = self.wk.forward(tape, params, keys_values)?;
        let v = self.wv.forward(tape, params, keys_values)?;
        let dh = self.head_width();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut heads = Vec::with_capacity(self.num_heads);
        let mut weights = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            weights.push(attn);
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let out = self.wo.forward(tape, params, cat)?;
        Ok(Attended { out, weights })
    }
}
