use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// `x·W (+ b)` with `W` stored `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = format!("{prefix}.w");
        params.insert(&weight, Tensor::uniform(&[fan_in, fan_out], bound, rng), true)?;
        let bias = if bias {
            let name = format!("{prefix}.b");
            params.insert(&name, Tensor::uniform(&[fan_out], bound, rng), true)?;
            Some(name)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, &self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(params, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = vec![self.weight.clone()];
        v.extend(self.bias.clone());
        v
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn init(params: &mut ParamSet, prefix: &str, d: usize) -> Result<Self> {
        let gamma = format!("{prefix}.gamma");
        let beta = format!("{prefix}.beta");
        params.insert(&gamma, Tensor::filled(&[d], 1.0), true)?;
        params.insert(&beta, Tensor::zeros(&[d]), true)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(params, &self.gamma)?;
        let b = tape.param(params, &self.beta)?;
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Expand `d → r·d`, GELU, contract back to `d`.
#[derive(Debug, Clone)]
pub struct FfnBlock {
    pub expand: Linear,
    pub contract: Linear,
    pub ratio: f64,
}

impl FfnBlock {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        ratio: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = (d as f64 * ratio).round() as usize;
        if hidden == 0 {
            return Err(Error::Input(format!("ffn ratio {ratio} gives zero hidden width")));
        }
        Ok(Self {
            expand: Linear::init(params, &format!("{prefix}.up"), d, hidden, true, rng)?,
            contract: Linear::init(params, &format!("{prefix}.down"), hidden, d, true, rng)?,
            ratio,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let h = self.expand.forward(tape, params, x)?;
        let h = tape.gelu(h);
        self.contract.forward(tape, params, h)
    }
}
