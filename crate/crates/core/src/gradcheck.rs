//! Central finite-difference checks of the reverse-mode gradients.
//!
//! Each case maps a list of input tensors to an output of any shape; the
//! scalar checked is `sum(output * R)` for a fixed random `R`, so every
//! output element contributes with a distinct weight.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::codebook::Codebook;
use crate::codec::{Decoder, Encoder, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{self, Discriminator, LossWeights, SeededExtractor};
use crate::nn::{default_groups, Bound, DownsampleBlock, GroupNorm, NonLocalBlock, ParamStore, ResidualBlock, UpsampleBlock};
use crate::pos_encoding::PositionalEncoding2D;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;
/// Relative rounding assumed for one evaluation of the checked scalar.
pub const ROUNDOFF: f64 = 32.0 * f64::EPSILON;

/// Module names accepted by [`run_suite`].
pub const MODULES: [&str; 6] = [
    "tensor_autodiff",
    "nn_blocks",
    "pos_encoding",
    "codebook_vq",
    "codec",
    "losses",
];

pub type CaseFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync>;

pub struct Case {
    pub module: &'static str,
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
}

impl Case {
    pub fn new(module: &'static str, name: impl Into<String>, inputs: Vec<Tensor>, f: CaseFn) -> Self {
        Self {
            module,
            name: name.into(),
            inputs,
            f,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub name: String,
    pub coords: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Absolute floor used: `max(ABS_TOL, ROUNDOFF * sum|output * R| / STEP)`,
    /// the cancellation error of the central difference.
    pub abs_floor: f64,
    /// Largest `|analytic - numeric| / (abs_floor + REL_TOL * max(|analytic|, |numeric|))`.
    pub worst_ratio: f64,
    /// `(input, coordinate, analytic, numeric)` at the worst ratio.
    pub worst_at: Option<(usize, usize, f64, f64)>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

fn projected(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn evaluate(case: &Case, inputs: &[Tensor], r: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.f)(&tape, &vars)?;
    Ok(projected(&out.value(), r))
}

/// Compares the tape gradient of `sum(f(inputs) * R)` with central
/// differences of step [`STEP`].
pub fn check(case: &Case, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = case.inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = (case.f)(&tape, &vars)?;
    let r = Tensor::randn(&out.shape(), &mut rng);
    let loss = out.mul(tape.constant(r.clone()))?.sum();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let magnitude: f64 = out.value().data().iter().zip(r.data()).map(|(a, b)| (a * b).abs()).sum();
    let abs_floor = ABS_TOL.max(ROUNDOFF * magnitude / STEP);

    let mut outcome = CheckOutcome {
        module: case.module,
        name: case.name.clone(),
        coords: 0,
        abs_floor,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst_ratio: 0.0,
        worst_at: None,
    };
    let mut inputs = case.inputs.clone();
    for i in 0..inputs.len() {
        let mut coords: Vec<usize> = (0..inputs[i].numel()).collect();
        if let Some(limit) = case.max_coords {
            coords.shuffle(&mut rng);
            coords.truncate(limit);
        }
        for j in coords {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + STEP;
            let plus = evaluate(case, &inputs, &r)?;
            inputs[i].data_mut()[j] = orig - STEP;
            let minus = evaluate(case, &inputs, &r)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs();
            let mag = a.abs().max(numeric.abs());
            outcome.coords += 1;
            outcome.max_abs_error = outcome.max_abs_error.max(err);
            if mag > 0.0 {
                outcome.max_rel_error = outcome.max_rel_error.max(err / mag);
            }
            let ratio = err / (abs_floor + REL_TOL * mag);
            if ratio > outcome.worst_ratio || outcome.worst_at.is_none() {
                outcome.worst_ratio = ratio;
                outcome.worst_at = Some((i, j, a, numeric));
            }
        }
    }
    Ok(outcome)
}

/// Runs every case of `module` (all modules when `None`), `per_op` random
/// instances per operation, in parallel.
pub fn run_suite(module: Option<&str>, per_op: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let modules: Vec<&'static str> = match module {
        Some(m) => vec![*MODULES
            .iter()
            .find(|&&k| k == m)
            .ok_or_else(|| Error::config(format!("unknown module {m:?}; expected one of {MODULES:?}")))?],
        None => MODULES.to_vec(),
    };
    let mut all = Vec::new();
    for (k, m) in modules.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        all.extend(cases(m, per_op, &mut rng)?);
    }
    all.par_iter()
        .enumerate()
        .map(|(i, case)| check(case, seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
        .collect()
}

/// Random test cases for one module.
pub fn cases(module: &str, per_op: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut out = Vec::new();
    for _ in 0..per_op {
        match module {
            "tensor_autodiff" => primitive_cases(rng, &mut out),
            "nn_blocks" => block_cases(rng, &mut out)?,
            "pos_encoding" => pe_cases(rng, &mut out)?,
            "codebook_vq" => codebook_cases(rng, &mut out)?,
            "losses" => loss_cases(rng, &mut out)?,
            "codec" => {}
            _ => return Err(Error::config(format!("unknown module {module:?}"))),
        }
    }
    if module == "codec" {
        codec_cases(per_op.div_ceil(4).max(1), rng, &mut out)?;
    }
    Ok(out)
}

fn u(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn d(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

macro_rules! case {
    ($out:expr, $module:expr, $name:expr, $inputs:expr, |$v:ident| $body:expr) => {
        $out.push(Case::new(
            $module,
            $name,
            $inputs,
            Box::new(move |_tape: &Tape, $v: &[Var<'_>]| $body),
        ))
    };
}

fn primitive_cases(rng: &mut ChaCha8Rng, out: &mut Vec<Case>) {
    const M: &str = "tensor_autodiff";
    let s2 = [d(rng, 1, 4), d(rng, 1, 4)];
    let s3 = [d(rng, 1, 3), d(rng, 1, 3), d(rng, 1, 4)];
    let s4 = [d(rng, 1, 2), d(rng, 1, 3), d(rng, 1, 4), d(rng, 1, 4)];

    case!(out, M, format!("add {s3:?}"), vec![u(rng, &s3), u(rng, &s3)], |v| v[0].add(v[1]));
    case!(out, M, format!("sub {s3:?}"), vec![u(rng, &s3), u(rng, &s3)], |v| v[0].sub(v[1]));
    case!(out, M, format!("mul {s3:?}"), vec![u(rng, &s3), u(rng, &s3)], |v| v[0].mul(v[1]));
    let c: f64 = rng.gen_range(-2.0..2.0);
    case!(out, M, format!("scale {s2:?}"), vec![u(rng, &s2)], |v| Ok(v[0].scale(c)));
    case!(out, M, format!("neg {s2:?}"), vec![u(rng, &s2)], |v| Ok(v[0].neg()));
    case!(out, M, format!("add_scalar {s2:?}"), vec![u(rng, &s2)], |v| Ok(v[0].add_scalar(c)));
    case!(out, M, format!("square {s3:?}"), vec![u(rng, &s3)], |v| Ok(v[0].square()));
    case!(out, M, format!("abs {s3:?}"), vec![u(rng, &s3)], |v| Ok(v[0].abs()));
    case!(out, M, format!("relu {s3:?}"), vec![u(rng, &s3)], |v| Ok(v[0].relu()));
    case!(out, M, format!("leaky_relu {s3:?}"), vec![u(rng, &s3)], |v| Ok(v[0].leaky_relu(0.2)));
    case!(out, M, format!("sigmoid {s3:?}"), vec![u(rng, &s3)], |v| Ok(v[0].sigmoid()));
    case!(out, M, format!("swish {s4:?}"), vec![u(rng, &s4)], |v| Ok(v[0].swish()));
    case!(out, M, format!("sum {s3:?}"), vec![u(rng, &s3)], |v| Ok(v[0].sum()));
    case!(out, M, format!("mean {s3:?}"), vec![u(rng, &s3)], |v| Ok(v[0].mean()));

    let (m, k, n) = (d(rng, 1, 4), d(rng, 1, 4), d(rng, 1, 4));
    case!(out, M, format!("matmul {m}x{k}x{n}"), vec![u(rng, &[m, k]), u(rng, &[k, n])], |v| v[0].matmul(v[1]));
    let b = d(rng, 1, 3);
    case!(out, M, format!("bmm {b}x{m}x{k}x{n}"), vec![u(rng, &[b, m, k]), u(rng, &[b, k, n])], |v| v[0]
        .bmm(v[1]));
    let axis = d(rng, 0, 2);
    case!(out, M, format!("softmax {s3:?} axis {axis}"), vec![u(rng, &s3)], |v| v[0].softmax(axis));
    let flat = [s3[0] * s3[1], s3[2]];
    case!(out, M, format!("reshape {s3:?}"), vec![u(rng, &s3)], |v| v[0].reshape(&flat));
    let mut perm = vec![0, 1, 2, 3];
    perm.shuffle(rng);
    case!(out, M, format!("permute {s4:?} {perm:?}"), vec![u(rng, &s4)], |v| v[0].permute(&perm));
    let (a1, a2) = (d(rng, 0, 2), d(rng, 0, 2));
    case!(out, M, format!("transpose {s3:?} {a1}<->{a2}"), vec![u(rng, &s3)], |v| v[0].transpose(a1, a2));
    let mut other = s3;
    other[axis] = d(rng, 1, 3);
    case!(out, M, format!("concat {s3:?}+{other:?} axis {axis}"), vec![u(rng, &s3), u(rng, &other)], |v| {
        Var::concat(&[v[0], v[1]], axis)
    });
    let seed = rng.gen::<u64>();
    case!(out, M, format!("dropout {s4:?}"), vec![u(rng, &s4)], |v| v[0].dropout(
        0.3,
        true,
        &mut ChaCha8Rng::seed_from_u64(seed)
    ));
    let pads = [d(rng, 0, 2), d(rng, 0, 2), d(rng, 0, 2), d(rng, 0, 2)];
    case!(out, M, format!("pad2d {s4:?} {pads:?}"), vec![u(rng, &s4)], |v| v[0].pad2d(
        pads[0], pads[1], pads[2], pads[3]
    ));
    case!(out, M, format!("upsample {s4:?}"), vec![u(rng, &s4)], |v| v[0].upsample_nearest2x());
    let rows: Vec<usize> = (0..d(rng, 1, 6)).map(|_| rng.gen_range(0..s2[0])).collect();
    case!(out, M, format!("gather_rows {s2:?} {rows:?}"), vec![u(rng, &s2)], |v| v[0].gather_rows(&rows));
    let shift: Vec<f64> = (0..s4[1]).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let scale: Vec<f64> = (0..s4[1]).map(|_| rng.gen_range(0.4..1.5)).collect();
    case!(out, M, format!("channel_affine {s4:?}"), vec![u(rng, &s4)], |v| v[0].channel_affine(&shift, &scale));
    case!(out, M, format!("unit_normalize {s4:?}"), vec![u(rng, &s4)], |v| v[0].unit_normalize_channels(1e-10));

    let (cn, cc, cf) = (d(rng, 1, 2), d(rng, 1, 3), d(rng, 1, 3));
    let (kk, stride, pad) = (d(rng, 1, 3), d(rng, 1, 2), d(rng, 0, 1));
    let (h, w) = (d(rng, kk.max(2), 6), d(rng, kk.max(2), 6));
    case!(
        out,
        M,
        format!("conv2d x[{cn},{cc},{h},{w}] w[{cf},{cc},{kk},{kk}] s{stride} p{pad}"),
        vec![u(rng, &[cn, cc, h, w]), u(rng, &[cf, cc, kk, kk]), u(rng, &[cf])],
        |v| v[0].conv2d(v[1], Some(v[2]), stride, pad)
    );
}

/// Uniform `forward(params, x)` over the parameterised blocks.
trait Forward: Send + Sync + 'static {
    fn run<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>>;
}

macro_rules! forward_impl {
    ($($ty:ty),*) => {$(
        impl Forward for $ty {
            fn run<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
                self.forward(p, x)
            }
        }
    )*};
}

forward_impl!(GroupNorm, ResidualBlock, DownsampleBlock, UpsampleBlock, NonLocalBlock, Discriminator);

/// Fixed dropout mask per evaluation so the function is deterministic.
const CODEC_DROPOUT_SEED: u64 = 11;

impl Forward for Encoder {
    fn run<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.forward(p, x, true, &mut ChaCha8Rng::seed_from_u64(CODEC_DROPOUT_SEED))
    }
}

impl Forward for Decoder {
    fn run<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.forward(p, x, true, &mut ChaCha8Rng::seed_from_u64(CODEC_DROPOUT_SEED))
    }
}

/// Inputs are `x` followed by every store entry, so parameters are checked too.
fn block_case<B: Forward>(module: &'static str, name: String, x: Tensor, store: &ParamStore, block: B) -> Case {
    let mut inputs = vec![x];
    inputs.extend(store.entries().iter().map(|e| e.value.clone()));
    Case::new(
        module,
        name,
        inputs,
        Box::new(move |_tape: &Tape, v: &[Var<'_>]| {
            let p = Bound::from_vars(v[1..].to_vec());
            block.run(&p, v[0])
        }),
    )
}

/// Re-draws biases and norm affines so they are not all zero/one.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        if shape.len() == 1 {
            let base = if store.name(id).ends_with("gamma") { 1.0 } else { 0.0 };
            store.set(id, Tensor::uniform(&shape, base - 0.5, base + 0.5, rng))?;
        }
    }
    Ok(())
}

fn block_cases(rng: &mut ChaCha8Rng, out: &mut Vec<Case>) -> Result<()> {
    const M: &str = "nn_blocks";
    let n = d(rng, 1, 2);
    let (h, w) = (d(rng, 1, 4), d(rng, 1, 4));

    let c = [2, 3, 4, 6][d(rng, 0, 3)];
    let mut store = ParamStore::new();
    let gn = GroupNorm::new(&mut store, "gn", c)?;
    randomize(&mut store, rng)?;
    let name = format!("group_norm [{n},{c},{h},{w}] groups {}", default_groups(c));
    let x = u(rng, &[n, c, h, w]);
    out.push(block_case(M, name, x, &store, gn));

    let (cin, cout) = (d(rng, 2, 4), d(rng, 2, 4));
    let mut store = ParamStore::new();
    let res = ResidualBlock::new(&mut store, "res", cin, cout, rng)?;
    randomize(&mut store, rng)?;
    let x = u(rng, &[n, cin, h, w]);
    out.push(block_case(M, format!("residual [{n},{cin},{h},{w}] -> {cout}"), x, &store, res));

    let ch = d(rng, 1, 3);
    let (eh, ew) = (2 * d(rng, 1, 3), 2 * d(rng, 1, 3));
    let mut store = ParamStore::new();
    let down = DownsampleBlock::new(&mut store, "down", ch, rng)?;
    randomize(&mut store, rng)?;
    let x = u(rng, &[n, ch, eh, ew]);
    out.push(block_case(M, format!("downsample [{n},{ch},{eh},{ew}]"), x, &store, down));

    let mut store = ParamStore::new();
    let up = UpsampleBlock::new(&mut store, "up", ch, rng)?;
    randomize(&mut store, rng)?;
    let x = u(rng, &[n, ch, h, w]);
    out.push(block_case(M, format!("upsample [{n},{ch},{h},{w}]"), x, &store, up));

    let ch = d(rng, 2, 4);
    let mut store = ParamStore::new();
    let attn = NonLocalBlock::new(&mut store, "attn", ch, rng)?;
    randomize(&mut store, rng)?;
    let x = u(rng, &[n, ch, h, w]);
    out.push(block_case(M, format!("non_local [{n},{ch},{h},{w}]"), x, &store, attn));
    Ok(())
}

fn pe_cases(rng: &mut ChaCha8Rng, out: &mut Vec<Case>) -> Result<()> {
    const M: &str = "pos_encoding";
    let (n, c, h, w) = (d(rng, 1, 2), 4 * d(rng, 1, 2), d(rng, 1, 4), d(rng, 1, 4));
    let pe = PositionalEncoding2D::build_table(c, h, w)?;
    let train = rng.gen_bool(0.5);
    let seed = rng.gen::<u64>();
    case!(out, M, format!("apply [{n},{c},{h},{w}] train={train}"), vec![u(rng, &[n, c, h, w])], |v| pe
        .apply(v[0], train, &mut ChaCha8Rng::seed_from_u64(seed)));
    Ok(())
}

fn codebook_cases(rng: &mut ChaCha8Rng, out: &mut Vec<Case>) -> Result<()> {
    const M: &str = "codebook_vq";
    let (n, dim, h, w, k) = (d(rng, 1, 2), d(rng, 1, 4), d(rng, 1, 3), d(rng, 1, 3), d(rng, 1, 8));
    let mut store = ParamStore::new();
    let book = Codebook::new(&mut store, "cb", k, dim, rng)?;
    let emb = u(rng, &[k, dim]);
    let z = u(rng, &[n, dim, h, w]);
    let label = format!("z[{n},{dim},{h},{w}] K={k}");

    let (b, e) = (book.clone(), emb.clone());
    case!(out, M, format!("commitment wrt z {label}"), vec![z.clone()], |v| {
        let emb = v[0].tape().constant(e.clone());
        Ok(b.clone().quantize(v[0], emb)?.commitment_loss)
    });
    let (b, zc) = (book.clone(), z.clone());
    case!(out, M, format!("codebook wrt embeddings {label}"), vec![emb.clone()], |v| {
        let z = v[0].tape().constant(zc.clone());
        Ok(b.clone().quantize(z, v[0])?.codebook_loss)
    });
    case!(out, M, format!("z_q wrt embeddings {label}"), vec![emb], |v| {
        let zv = v[0].tape().constant(z.clone());
        Ok(book.clone().quantize(zv, v[0])?.z_q)
    });
    Ok(())
}

fn loss_cases(rng: &mut ChaCha8Rng, out: &mut Vec<Case>) -> Result<()> {
    const M: &str = "losses";
    let s = [d(rng, 1, 2), 3, d(rng, 4, 6), d(rng, 4, 6)];
    case!(out, M, format!("reconstruction_l1 {s:?}"), vec![u(rng, &s), u(rng, &s)], |v| {
        losses::reconstruction_l1(v[0], v[1])
    });
    case!(out, M, format!("reconstruction_mse {s:?}"), vec![u(rng, &s), u(rng, &s)], |v| {
        losses::reconstruction_mse(v[0], v[1])
    });
    let weights = LossWeights {
        beta: rng.gen_range(0.0..1.0),
        ..LossWeights::default()
    };
    let scalar = |rng: &mut ChaCha8Rng| Tensor::scalar(rng.gen_range(0.0..1.0));
    let inputs = vec![u(rng, &s), u(rng, &s), scalar(rng), scalar(rng)];
    case!(out, M, format!("vq_loss {s:?} beta {:.3}", weights.beta), inputs, |v| {
        losses::vq_loss(v[0], v[1], v[2], v[3], &weights)
    });
    let extractor = SeededExtractor::default();
    let (pf, rf) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
    case!(out, M, format!("perceptual {s:?}"), vec![u(rng, &s), u(rng, &s)], |v| {
        losses::perceptual_distance(v[0], v[1], &extractor)
    });
    let extractor = SeededExtractor::default();
    case!(out, M, format!("perceptual_rec {s:?} pf {pf:.2} rf {rf:.2}"), vec![u(rng, &s), u(rng, &s)], |v| {
        losses::perceptual_distance(v[0], v[1], &extractor)?
            .scale(pf)
            .add(losses::reconstruction_l1(v[0], v[1])?.scale(rf))
    });
    let ls = [d(rng, 1, 2), 1, d(rng, 1, 4), d(rng, 1, 4)];
    case!(out, M, format!("generator_adversarial {ls:?}"), vec![u(rng, &ls).map(|x| 2.0 * x)], |v| Ok(
        losses::generator_adversarial_loss(v[0])
    ));
    let hinge = |rng: &mut ChaCha8Rng| u(rng, &ls).map(|x| 2.5 * x);
    case!(out, M, format!("discriminator_hinge {ls:?}"), vec![hinge(rng), hinge(rng)], |v| {
        losses::discriminator_hinge_loss(v[0], v[1])
    });
    let ndf = d(rng, 1, 3);
    let side = [8, 10][d(rng, 0, 1)];
    let mut store = ParamStore::new();
    let disc = Discriminator::new(&mut store, 3, ndf, rng)?;
    randomize(&mut store, rng)?;
    let x = u(rng, &[1, 3, side, side]);
    out.push(block_case(M, format!("discriminator [1,3,{side},{side}] ndf {ndf}"), x, &store, disc));
    Ok(())
}

fn tiny_codec(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        in_channels: 3,
        base_channels: 4,
        channel_multipliers: vec![1, 2],
        num_downsamples: d(rng, 1, 2),
        latent_dim: d(rng, 2, 3),
        codebook_size: 4,
        use_positional_encoding: rng.gen_bool(0.5),
        attn_at_resolutions: vec![4],
        dropout_rate: 0.1,
        small_network: false,
    }
}

fn codec_cases(count: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Case>) -> Result<()> {
    const M: &str = "codec";
    const COORDS: usize = 12;
    for _ in 0..count {
        let cfg = tiny_codec(rng);
        let label = format!(
            "nd={} D={} pe={}",
            cfg.num_downsamples, cfg.latent_dim, cfg.use_positional_encoding
        );
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, rng)?;
        randomize(&mut store, rng)?;
        let mut case = block_case(M, format!("encoder {label}"), u(rng, &[1, 3, 8, 8]), &store, enc);
        case.max_coords = Some(COORDS);
        out.push(case);

        let mut store = ParamStore::new();
        let dec = Decoder::new(&cfg, &mut store, rng)?;
        randomize(&mut store, rng)?;
        let s = cfg.latent_size();
        let z = u(rng, &[1, cfg.latent_dim, s, s]);
        let mut case = block_case(M, format!("decoder {label}"), z, &store, dec);
        case.max_coords = Some(COORDS);
        out.push(case);

        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, rng)?;
        let dec = Decoder::new(&cfg, &mut store, rng)?;
        randomize(&mut store, rng)?;
        let mut inputs = vec![u(rng, &[1, 3, 8, 8])];
        inputs.extend(store.entries().iter().map(|e| e.value.clone()));
        let mut case = Case::new(
            M,
            format!("encode-decode {label}"),
            inputs,
            Box::new(move |_tape: &Tape, v: &[Var<'_>]| {
                let p = Bound::from_vars(v[1..].to_vec());
                dec.run(&p, enc.run(&p, v[0])?)
            }),
        );
        case.max_coords = Some(COORDS);
        out.push(case);
    }
    Ok(())
}
