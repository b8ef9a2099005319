use rand::Rng;

use crate::blocks::attention::MhcaBlock;
use crate::blocks::layers::{FfnBlock, LayerNorm};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::ParamSet;

pub const MR_FFN_RATIO: f64 = 4.0;

/// Memory-retrieval module: the prompt queries the sparse frames through one
/// cross-attention block, followed by a feed-forward block. Both carry
/// residual connections, so the output keeps the prompt's length:
///
/// ```text
/// S' = MHCA(LN_a(P), LN_a(S_sparse)) + P
/// S~ = FFN(LN_f(S')) + S'
/// ```
#[derive(Debug, Clone)]
pub struct MrModule {
    pub prefix: String,
    pub ln_attn: LayerNorm,
    pub mhca: MhcaBlock,
    pub ln_ffn: LayerNorm,
    pub ffn: FfnBlock,
}

impl MrModule {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            prefix: prefix.to_string(),
            ln_attn: LayerNorm::init(params, &format!("{prefix}.ln_attn"), d)?,
            mhca: MhcaBlock::init(params, &format!("{prefix}.attn"), d, num_heads, rng)?,
            ln_ffn: LayerNorm::init(params, &format!("{prefix}.ln_ffn"), d)?,
            ffn: FfnBlock::init(params, &format!("{prefix}.ffn"), d, MR_FFN_RATIO, rng)?,
        })
    }

    pub fn d(&self) -> usize {
        self.mhca.d
    }

    /// Retrieves dense features (`L×d`) from a prompt (`L×d`) and sparse
    /// frames (`l×d`).
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, prompt: Var, sparse: Var) -> Result<Var> {
        let (sp, ss) = (tape.shape(prompt).to_vec(), tape.shape(sparse).to_vec());
        if sp.len() != 2 || ss.len() != 2 || sp[1] != self.d() || ss[1] != self.d() {
            return Err(Error::shape("mr_forward", &sp, &ss));
        }
        if ss[0] == 0 {
            return Err(Error::Input("no sparse frames".into()));
        }
        let pn = self.ln_attn.forward(tape, params, prompt)?;
        let sn = self.ln_attn.forward(tape, params, sparse)?;
        let att = self.mhca.forward(tape, params, pn, sn)?;
        let s1 = tape.add(att.out, prompt)?;
        let h = self.ln_ffn.forward(tape, params, s1)?;
        let f = self.ffn.forward(tape, params, h)?;
        tape.add(f, s1)
    }
}
