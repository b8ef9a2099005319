//! Central-difference gradient checks for every op and block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    Classifier, FfnBlock, LayerNorm, MhcaBlock, MrModule, RetrievalArch, Retriever, TemporalEncoder,
};
use crate::config::{MrInput, MrScope, PromptScope};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::rng::{stream, Stream};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::{ParamSet, Tensor};
use crate::training::{incremental_loss, IncrementalSample, LossWeights};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub params: Vec<ParamError>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= tol)
    }

    pub fn failures(&self, tol: f64) -> impl Iterator<Item = &ParamError> {
        self.params.iter().filter(move |p| !(p.max_rel_err <= tol))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, params)?;
    let v = tape.scalar(root);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("gradient check loss = {v}")));
    }
    Ok(v)
}

/// Compares the tape's gradient of `f` with central differences for every
/// trainable parameter that `f` reads. Frozen parameters are not reported.
/// `fault` corrupts one backward rule of the analytic pass.
pub fn grad_check<F>(params: &ParamSet, f: F, h: f64, fault: Option<OpKind>) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.set_fault(fault);
    let root = f(&mut tape, params)?;
    if !tape.scalar(root).is_finite() {
        return Err(Error::NonFinite(format!("gradient check loss = {}", tape.scalar(root))));
    }
    let grads = tape.backward(root)?;
    let names: Vec<String> = grads.param_names().map(str::to_string).collect();
    let mut out = Vec::with_capacity(names.len());
    let mut work = params.clone();
    for name in names {
        let n = params.value(&name)?.len();
        let analytic = grads.param(&name).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let x = params.value(&name)?.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = x + h;
            let up = eval(&f, &work)?;
            work.get_mut(&name)?.value.data_mut()[i] = x - h;
            let down = eval(&f, &work)?;
            work.get_mut(&name)?.value.data_mut()[i] = x;
            let e = rel_err(analytic[i], (up - down) / (2.0 * h));
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        out.push(ParamError { name, max_rel_err: worst });
    }
    Ok(GradReport { params: out })
}

/// One named check of the suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradReport,
}

fn reduce(tape: &mut Tape, out: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    tape.mse(out, t)
}

fn target_like<R: Rng + ?Sized>(tape: &Tape, v: Var, rng: &mut R) -> Tensor {
    Tensor::normal(tape.shape(v), 1.0, rng)
}

/// Inputs and loss for a single op at a `rows×cols` shape.
pub fn op_case<R: Rng + ?Sized>(
    kind: OpKind,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<(ParamSet, Box<dyn Fn(&mut Tape, &ParamSet) -> Result<Var>>)> {
    let (r, c) = (rows.max(1), cols.max(2));
    let mut p = ParamSet::new();
    let mut add = |name: &str, shape: &[usize], rng: &mut R| p.insert(name, Tensor::normal(shape, 1.0, rng), true);
    match kind {
        OpKind::MatMul => {
            add("a", &[r, c], rng)?;
            add("b", &[c, r + 1], rng)?;
        }
        OpKind::ConcatRows => {
            add("a", &[r, c], rng)?;
            add("b", &[r + 1, c], rng)?;
        }
        OpKind::ConcatCols => {
            add("a", &[r, c], rng)?;
            add("b", &[r, c + 1], rng)?;
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Mse => {
            add("a", &[r, c], rng)?;
            add("b", &[r, c], rng)?;
        }
        OpKind::AddRow | OpKind::MulRow => {
            add("a", &[r, c], rng)?;
            add("b", &[c], rng)?;
        }
        OpKind::LayerNorm => {
            add("a", &[r, c], rng)?;
            add("g", &[c], rng)?;
            add("b", &[c], rng)?;
        }
        _ => add("a", &[r, c], rng)?,
    }
    let probe = {
        let mut tape = Tape::new();
        let out = apply_op(kind, &mut tape, &p, rng.random::<u64>())?;
        target_like(&tape, out, rng)
    };
    let salt = rng.random::<u64>();
    let f = move |tape: &mut Tape, params: &ParamSet| -> Result<Var> {
        let out = apply_op(kind, tape, params, salt)?;
        if tape.shape(out) == [1] {
            Ok(out)
        } else {
            reduce(tape, out, &probe)
        }
    };
    Ok((p, Box::new(f)))
}

fn apply_op(kind: OpKind, tape: &mut Tape, p: &ParamSet, salt: u64) -> Result<Var> {
    let a = tape.param(p, "a")?;
    let (r, c) = (tape.shape(a)[0], tape.shape(a)[1]);
    match kind {
        OpKind::MatMul => {
            let b = tape.param(p, "b")?;
            tape.matmul(a, b)
        }
        OpKind::Transpose => tape.transpose(a),
        OpKind::Add => {
            let b = tape.param(p, "b")?;
            tape.add(a, b)
        }
        OpKind::Sub => {
            let b = tape.param(p, "b")?;
            tape.sub(a, b)
        }
        OpKind::Mul => {
            let b = tape.param(p, "b")?;
            tape.mul(a, b)
        }
        OpKind::Scale => Ok(tape.scale(a, -1.7)),
        OpKind::AddRow => {
            let b = tape.param(p, "b")?;
            tape.add_row(a, b)
        }
        OpKind::MulRow => {
            let b = tape.param(p, "b")?;
            tape.mul_row(a, b)
        }
        OpKind::Softmax => tape.softmax_rows(a),
        OpKind::LayerNorm => {
            let g = tape.param(p, "g")?;
            let b = tape.param(p, "b")?;
            tape.layer_norm(a, g, b, crate::blocks::layers::LN_EPS)
        }
        OpKind::Gelu => Ok(tape.gelu(a)),
        OpKind::SliceCols => tape.slice_cols(a, 1, c - 1),
        OpKind::ConcatCols => {
            let b = tape.param(p, "b")?;
            tape.concat_cols(&[a, b])
        }
        OpKind::ConcatRows => {
            let b = tape.param(p, "b")?;
            tape.concat_rows(&[a, b])
        }
        OpKind::SelectRows => {
            let idx: Vec<usize> = (0..r + 2).map(|i| (i * 7 + salt as usize) % r).collect();
            tape.select_rows(a, &idx)
        }
        OpKind::Reshape => tape.reshape(a, vec![c, r]),
        OpKind::MaskedCrossEntropy => {
            let active: Vec<usize> = (0..c).filter(|j| j % 2 == (salt as usize) % 2 || *j == 0).collect();
            let labels: Vec<usize> = (0..r).map(|i| active[(i + salt as usize) % active.len()]).collect();
            tape.masked_cross_entropy(a, &labels, &active)
        }
        OpKind::Mse => {
            let b = tape.param(p, "b")?;
            tape.mse(a, b)
        }
        OpKind::Sum => Ok(tape.sum(a)),
    }
}

const D: usize = 4;
const HEADS: usize = 2;
const CLIP: usize = 4;
const SPARSE: usize = 2;

fn input(p: &mut ParamSet, name: &str, rows: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    p.insert(name, Tensor::normal(&[rows, D], 1.0, rng), true)
}

fn check_block<F>(entries: &mut Vec<SuiteEntry>, name: &str, p: &ParamSet, h: f64, fault: Option<OpKind>, f: F) -> Result<()>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    entries.push(SuiteEntry {
        name: name.to_string(),
        report: grad_check(p, f, h, fault)?,
    });
    Ok(())
}

fn probe(rows: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::normal(&[rows, D], 1.0, rng)
}

/// The composite incremental loss on a two-class toy batch, with every
/// module of a task-scoped model trainable.
pub fn composite_case(rng: &mut ChaCha8Rng) -> Result<(ModelState, Vec<Tensor>)> {
    let cfg = ModelConfig {
        d: D,
        clip_len: CLIP,
        sparse_len: SPARSE,
        prompt_len: CLIP,
        heads: HEADS,
        encoder_layers: 2,
        positional: true,
        arch: RetrievalArch::CrossAttention,
        mr_scope: MrScope::Task,
        prompt_scope: PromptScope::Task,
        mr_input: MrInput::Sparse,
    };
    let mut model = ModelState::new(cfg, rng)?;
    model.prepare_task(0, &[0, 1], rng)?;
    for name in model.params.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>() {
        model.params.replace(&name, Tensor::normal(model.params.value(&name)?.shape(), 0.5, rng))?;
    }
    let clips = vec![probe(CLIP, rng), probe(CLIP, rng)];
    Ok((model, clips))
}

/// Every check of the suite: each op at a small shape, every block, and the
/// composite incremental loss.
pub fn run_suite(h: f64, fault: Option<OpKind>) -> Result<Vec<SuiteEntry>> {
    let mut rng = stream(0, Stream::Init);
    let mut entries = Vec::new();

    for kind in OpKind::ALL {
        let (p, f) = op_case(kind, 3, 4, &mut rng)?;
        check_block(&mut entries, &format!("op:{kind}"), &p, h, fault, f)?;
    }

    let mut p = ParamSet::new();
    let block = MhcaBlock::init(&mut p, "mhca", D, HEADS, &mut rng)?;
    input(&mut p, "q_in", 3, &mut rng)?;
    input(&mut p, "kv_in", 5, &mut rng)?;
    let t = probe(3, &mut rng);
    check_block(&mut entries, "mhca", &p, h, fault, |tape, ps| {
        let q = tape.param(ps, "q_in")?;
        let kv = tape.param(ps, "kv_in")?;
        let out = block.forward(tape, ps, q, kv)?.out;
        reduce(tape, out, &t)
    })?;

    let mut p = ParamSet::new();
    let block = FfnBlock::init(&mut p, "ffn", D, 4.0, &mut rng)?;
    input(&mut p, "x", 3, &mut rng)?;
    let t = probe(3, &mut rng);
    check_block(&mut entries, "ffn", &p, h, fault, |tape, ps| {
        let x = tape.param(ps, "x")?;
        let out = block.forward(tape, ps, x)?;
        reduce(tape, out, &t)
    })?;

    let mut p = ParamSet::new();
    let block = LayerNorm::init(&mut p, "ln", D)?;
    p.replace(&block.gamma, Tensor::normal(&[D], 1.0, &mut rng))?;
    p.replace(&block.beta, Tensor::normal(&[D], 1.0, &mut rng))?;
    input(&mut p, "x", 3, &mut rng)?;
    let t = probe(3, &mut rng);
    check_block(&mut entries, "layer_norm", &p, h, fault, |tape, ps| {
        let x = tape.param(ps, "x")?;
        let out = block.forward(tape, ps, x)?;
        reduce(tape, out, &t)
    })?;

    let mut p = ParamSet::new();
    let block = TemporalEncoder::init(&mut p, "enc", D, HEADS, 3, Some(CLIP), &mut rng)?;
    input(&mut p, "frames", 3, &mut rng)?;
    let t = probe(1, &mut rng);
    check_block(&mut entries, "temporal_encoder", &p, h, fault, |tape, ps| {
        let x = tape.param(ps, "frames")?;
        let out = block.encode(tape, ps, x, Some(&[0, 1, 3]))?.z;
        reduce(tape, out, &t)
    })?;

    let mut p = ParamSet::new();
    let block = Classifier::init(&mut p, "head", D)?;
    block.grow(&mut p, 3, &mut rng)?;
    input(&mut p, "z", 2, &mut rng)?;
    check_block(&mut entries, "classifier", &p, h, fault, |tape, ps| {
        let z = tape.param(ps, "z")?;
        let logits = block.logits(tape, ps, z)?;
        tape.masked_cross_entropy(logits, &[0, 2], &[0, 1, 2])
    })?;

    let mut p = ParamSet::new();
    let block = MrModule::init(&mut p, "mr", D, HEADS, &mut rng)?;
    input(&mut p, "prompt", CLIP, &mut rng)?;
    input(&mut p, "sparse", SPARSE, &mut rng)?;
    let t = probe(CLIP, &mut rng);
    check_block(&mut entries, "mr_module", &p, h, fault, |tape, ps| {
        let pr = tape.param(ps, "prompt")?;
        let s = tape.param(ps, "sparse")?;
        let out = block.forward(tape, ps, pr, s)?;
        reduce(tape, out, &t)
    })?;

    for arch in [RetrievalArch::SelfAttention, RetrievalArch::Mlp] {
        let mut p = ParamSet::new();
        let block = Retriever::init(arch, &mut p, "ret", D, HEADS, SPARSE, CLIP, &mut rng)?;
        input(&mut p, "prompt", CLIP, &mut rng)?;
        input(&mut p, "sparse", SPARSE, &mut rng)?;
        let t = probe(CLIP, &mut rng);
        check_block(&mut entries, &format!("retriever:{arch}"), &p, h, fault, |tape, ps| {
            let pr = tape.param(ps, "prompt")?;
            let s = tape.param(ps, "sparse")?;
            let out = block.retrieve(tape, ps, Some(pr), s, &[0, 2], CLIP)?;
            reduce(tape, out, &t)
        })?;
    }

    let (model, clips) = composite_case(&mut rng)?;
    let weights = LossWeights { alpha: 0.7, beta: 1.3 };
    check_block(&mut entries, "composite_loss", &model.params, h, fault, |tape, ps| {
        let mut m = model.clone();
        m.params = ps.clone();
        let samples = [
            IncrementalSample {
                dense: &clips[0],
                label: 0,
                mr_rows: vec![0, 2],
            },
            IncrementalSample {
                dense: &clips[1],
                label: 1,
                mr_rows: vec![1, 3],
            },
        ];
        Ok(incremental_loss(tape, &m, 0, &[0, 1], &samples, weights)?.total)
    })?;

    Ok(entries)
}
