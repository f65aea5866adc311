//! The relation classifier: per-object transformer aggregation of the
//! `L·H` attention maps into one `h×w` map (learned-query pooling),
//! followed by a joint classification transformer over the two
//! aggregated maps and a timestep-conditioned MLP head.
//!
//! One aggregator (a single weight set) serves both subject and object.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::nn::{linear, positional_encoding, scaled_dot_attention, sinusoid_features};
use crate::synth::{AttentionStack, StackShape};
use crate::tape::{Real, Tape, Var};

/// Architecture of the classifier. Head counts must divide `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub stack: StackShape,
    pub d: usize,
    pub agg_layers: usize,
    pub agg_heads: usize,
    pub pool_layers: usize,
    pub cls_layers: usize,
    pub cls_heads: usize,
    pub t_embed_small: usize,
    pub n_classes: usize,
}

impl ArchConfig {
    /// Paper-scale configuration (d=256, four-layer blocks).
    pub fn paper() -> Self {
        ArchConfig {
            stack: StackShape::desk(),
            d: 256,
            agg_layers: 4,
            agg_heads: 4,
            pool_layers: 4,
            cls_layers: 4,
            cls_heads: 8,
            t_embed_small: 16,
            n_classes: 5,
        }
    }

    /// Desk-scale default: d=64, two-layer blocks, two classification
    /// heads. Narrow per-head slices of the 256-token classification
    /// attention run far below the matmul kernel's efficient range on
    /// one core, so the head count shrinks along with depth and width.
    pub fn desk() -> Self {
        ArchConfig {
            d: 64,
            agg_layers: 2,
            pool_layers: 2,
            cls_layers: 2,
            cls_heads: 2,
            ..Self::paper()
        }
    }

    /// Reduced configuration for 64-bit gradient verification.
    pub fn reduced() -> Self {
        ArchConfig {
            stack: StackShape {
                layers: 2,
                heads: 2,
                rows: 8,
                cols: 8,
                t_total: 50,
            },
            d: 32,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.n_classes != 5 {
            return Err(CoreError::Config("n_classes must be 5".into()));
        }
        for (name, h) in [("agg", self.agg_heads), ("cls", self.cls_heads)] {
            if h == 0 || self.d % h != 0 {
                return Err(CoreError::Config(format!(
                    "{name}_heads ({h}) must divide d ({})",
                    self.d
                )));
            }
        }
        Ok(())
    }

    fn map_len(&self) -> usize {
        self.stack.map_len()
    }

    fn n_maps(&self) -> usize {
        self.stack.n_maps()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    pub w: ArrayD<T>,
    pub b: ArrayD<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams<T> {
    pub ln1_g: ArrayD<T>,
    pub ln1_b: ArrayD<T>,
    pub wq: LinearParams<T>,
    pub wk: LinearParams<T>,
    pub wv: LinearParams<T>,
    pub wo: LinearParams<T>,
    pub ln2_g: ArrayD<T>,
    pub ln2_b: ArrayD<T>,
    pub ff1: LinearParams<T>,
    pub ff2: LinearParams<T>,
}

/// All weights of the aggregation + classification transformers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub token_proj: LinearParams<T>,
    pub phi_proj: LinearParams<T>,
    pub agg: Vec<EncoderLayerParams<T>>,
    pub pool_query: ArrayD<T>,
    pub pool: Vec<EncoderLayerParams<T>>,
    pub map_head: LinearParams<T>,
    pub cls_proj: LinearParams<T>,
    pub cls: Vec<EncoderLayerParams<T>>,
    pub head1: LinearParams<T>,
    pub head2: LinearParams<T>,
}

fn init_linear<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> LinearParams<T> {
    init_linear_gain(rng, fan_in, fan_out, 1.0)
}

fn init_linear_gain<T: Real>(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
) -> LinearParams<T> {
    let a = gain / (fan_in as f64).sqrt();
    LinearParams {
        w: ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| {
            T::from_f64(rng.gen_range(-a..a))
        }),
        b: ArrayD::zeros(IxDyn(&[1, fan_out])),
    }
}

/// Gain on the encoder-layer weight matrices at init. Plain 1/√fan_in
/// puts the stack in the ordered regime: the constant components
/// (positional encodings, φ(t)) dominate the residual stream, the final
/// mean-pool averages the per-token input response down by √tokens, and
/// every input lands on the same argmax. The gain keeps the untrained
/// model input-sensitive; [`OUTPUT_INIT_SCALE`] keeps the resulting
/// logits small so initial predictions stay near uniform.
pub const ENCODER_INIT_GAIN: f64 = 8.0;

/// Down-scaling of the final output layer at init (see
/// [`ENCODER_INIT_GAIN`]); rescaling the last linear layer changes the
/// logit magnitude but never the argmax.
pub const OUTPUT_INIT_SCALE: f64 = 0.05;

fn init_layer<T: Real>(rng: &mut ChaCha8Rng, d: usize) -> EncoderLayerParams<T> {
    let g = ENCODER_INIT_GAIN;
    EncoderLayerParams {
        ln1_g: ArrayD::from_elem(IxDyn(&[1, d]), T::one()),
        ln1_b: ArrayD::zeros(IxDyn(&[1, d])),
        wq: init_linear_gain(rng, d, d, g),
        wk: init_linear_gain(rng, d, d, g),
        wv: init_linear_gain(rng, d, d, g),
        wo: init_linear_gain(rng, d, d, g),
        ln2_g: ArrayD::from_elem(IxDyn(&[1, d]), T::one()),
        ln2_b: ArrayD::zeros(IxDyn(&[1, d])),
        ff1: init_linear_gain(rng, d, 4 * d, g),
        ff2: init_linear_gain(rng, 4 * d, d, g),
    }
}

/// Fan-in scaled uniform initialization (with the encoder gain /
/// output scale described at [`ENCODER_INIT_GAIN`]); positional
/// encodings stay fixed sinusoidal (not learned), so they are not part
/// of the params.
pub fn init_params<T: Real>(arch: &ArchConfig, seed: u64) -> Result<ClassifierParams<T>, CoreError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = arch.d;
    let a = (1.0 / d as f64).sqrt();
    Ok(ClassifierParams {
        token_proj: init_linear(&mut rng, arch.map_len(), d),
        phi_proj: init_linear(&mut rng, d, d),
        agg: (0..arch.agg_layers).map(|_| init_layer(&mut rng, d)).collect(),
        pool_query: ArrayD::from_shape_fn(IxDyn(&[1, d]), |_| T::from_f64(rng.gen_range(-a..a))),
        pool: (0..arch.pool_layers).map(|_| init_layer(&mut rng, d)).collect(),
        map_head: init_linear(&mut rng, d, arch.map_len()),
        cls_proj: init_linear(&mut rng, 2, d),
        cls: (0..arch.cls_layers).map(|_| init_layer(&mut rng, d)).collect(),
        head1: init_linear(&mut rng, d + arch.t_embed_small, d),
        head2: init_linear_gain(&mut rng, d, arch.n_classes, OUTPUT_INIT_SCALE),
    })
}

impl<T: Real> ClassifierParams<T> {
    /// Multiplies every encoder-layer weight matrix (attention and
    /// feed-forward, all three transformers) by `factor`. Gradient
    /// verification uses this to move to a low-curvature point where
    /// finite-difference truncation error is negligible.
    pub fn scale_encoder_weights(&mut self, factor: f64) {
        let f = T::from_f64(factor);
        for layer in self
            .agg
            .iter_mut()
            .chain(self.pool.iter_mut())
            .chain(self.cls.iter_mut())
        {
            for w in [
                &mut layer.wq.w,
                &mut layer.wk.w,
                &mut layer.wv.w,
                &mut layer.wo.w,
                &mut layer.ff1.w,
                &mut layer.ff2.w,
            ] {
                w.mapv_inplace(|v| v * f);
            }
        }
    }

    /// Canonical (name, tensor) enumeration; defines optimizer and
    /// checkpoint order.
    pub fn named(&self) -> Vec<(String, &ArrayD<T>)> {
        let mut out: Vec<(String, &ArrayD<T>)> = Vec::new();
        let mut lin = |out: &mut Vec<(String, &ArrayD<T>)>, name: String, l: &LinearParams<T>| {
            // Safety of lifetime: l borrows from self.
            let l: &LinearParams<T> = unsafe { std::mem::transmute(l) };
            out.push((format!("{name}.w"), &l.w));
            out.push((format!("{name}.b"), &l.b));
        };
        let layer = |out: &mut Vec<(String, &ArrayD<T>)>,
                     lin: &mut dyn FnMut(&mut Vec<(String, &ArrayD<T>)>, String, &LinearParams<T>),
                     name: String,
                     l: &EncoderLayerParams<T>| {
            let l: &EncoderLayerParams<T> = unsafe { std::mem::transmute(l) };
            out.push((format!("{name}.ln1_g"), &l.ln1_g));
            out.push((format!("{name}.ln1_b"), &l.ln1_b));
            lin(out, format!("{name}.wq"), &l.wq);
            lin(out, format!("{name}.wk"), &l.wk);
            lin(out, format!("{name}.wv"), &l.wv);
            lin(out, format!("{name}.wo"), &l.wo);
            out.push((format!("{name}.ln2_g"), &l.ln2_g));
            out.push((format!("{name}.ln2_b"), &l.ln2_b));
            lin(out, format!("{name}.ff1"), &l.ff1);
            lin(out, format!("{name}.ff2"), &l.ff2);
        };
        lin(&mut out, "token_proj".into(), &self.token_proj);
        lin(&mut out, "phi_proj".into(), &self.phi_proj);
        for (i, l) in self.agg.iter().enumerate() {
            layer(&mut out, &mut lin, format!("agg.{i}"), l);
        }
        out.push(("pool_query".into(), &self.pool_query));
        for (i, l) in self.pool.iter().enumerate() {
            layer(&mut out, &mut lin, format!("pool.{i}"), l);
        }
        lin(&mut out, "map_head".into(), &self.map_head);
        lin(&mut out, "cls_proj".into(), &self.cls_proj);
        for (i, l) in self.cls.iter().enumerate() {
            layer(&mut out, &mut lin, format!("cls.{i}"), l);
        }
        lin(&mut out, "head1".into(), &self.head1);
        lin(&mut out, "head2".into(), &self.head2);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        let mut out: Vec<&mut ArrayD<T>> = Vec::new();
        fn lin<'a, T>(out: &mut Vec<&'a mut ArrayD<T>>, l: &'a mut LinearParams<T>) {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        fn layer<'a, T>(out: &mut Vec<&'a mut ArrayD<T>>, l: &'a mut EncoderLayerParams<T>) {
            out.push(&mut l.ln1_g);
            out.push(&mut l.ln1_b);
            lin(out, &mut l.wq);
            lin(out, &mut l.wk);
            lin(out, &mut l.wv);
            lin(out, &mut l.wo);
            out.push(&mut l.ln2_g);
            out.push(&mut l.ln2_b);
            lin(out, &mut l.ff1);
            lin(out, &mut l.ff2);
        }
        lin(&mut out, &mut self.token_proj);
        lin(&mut out, &mut self.phi_proj);
        for l in &mut self.agg {
            layer(&mut out, l);
        }
        out.push(&mut self.pool_query);
        for l in &mut self.pool {
            layer(&mut out, l);
        }
        lin(&mut out, &mut self.map_head);
        lin(&mut out, &mut self.cls_proj);
        for l in &mut self.cls {
            layer(&mut out, l);
        }
        lin(&mut out, &mut self.head1);
        lin(&mut out, &mut self.head2);
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn convert<U: Real>(&self) -> ClassifierParams<U> {
        fn c<T: Real, U: Real>(a: &ArrayD<T>) -> ArrayD<U> {
            a.mapv(|v| U::from_f64(v.to_f64()))
        }
        fn cl<T: Real, U: Real>(l: &LinearParams<T>) -> LinearParams<U> {
            LinearParams { w: c(&l.w), b: c(&l.b) }
        }
        fn ce<T: Real, U: Real>(l: &EncoderLayerParams<T>) -> EncoderLayerParams<U> {
            EncoderLayerParams {
                ln1_g: c(&l.ln1_g),
                ln1_b: c(&l.ln1_b),
                wq: cl(&l.wq),
                wk: cl(&l.wk),
                wv: cl(&l.wv),
                wo: cl(&l.wo),
                ln2_g: c(&l.ln2_g),
                ln2_b: c(&l.ln2_b),
                ff1: cl(&l.ff1),
                ff2: cl(&l.ff2),
            }
        }
        ClassifierParams {
            token_proj: cl(&self.token_proj),
            phi_proj: cl(&self.phi_proj),
            agg: self.agg.iter().map(ce).collect(),
            pool_query: c(&self.pool_query),
            pool: self.pool.iter().map(ce).collect(),
            map_head: cl(&self.map_head),
            cls_proj: cl(&self.cls_proj),
            cls: self.cls.iter().map(ce).collect(),
            head1: cl(&self.head1),
            head2: cl(&self.head2),
        }
    }
}

struct BoundLinear {
    w: Var,
    b: Var,
}

struct BoundLayer {
    ln1_g: Var,
    ln1_b: Var,
    wq: BoundLinear,
    wk: BoundLinear,
    wv: BoundLinear,
    wo: BoundLinear,
    ln2_g: Var,
    ln2_b: Var,
    ff1: BoundLinear,
    ff2: BoundLinear,
}

/// Classifier parameters inserted as leaves on a tape.
pub struct BoundParams {
    token_proj: BoundLinear,
    phi_proj: BoundLinear,
    agg: Vec<BoundLayer>,
    pool_query: Var,
    pool: Vec<BoundLayer>,
    map_head: BoundLinear,
    cls_proj: BoundLinear,
    cls: Vec<BoundLayer>,
    head1: BoundLinear,
    head2: BoundLinear,
}

impl BoundParams {
    /// Leaves in the same canonical order as [`ClassifierParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let lin = |out: &mut Vec<Var>, l: &BoundLinear| {
            out.push(l.w);
            out.push(l.b);
        };
        let layer = |out: &mut Vec<Var>, l: &BoundLayer| {
            out.push(l.ln1_g);
            out.push(l.ln1_b);
            lin(out, &l.wq);
            lin(out, &l.wk);
            lin(out, &l.wv);
            lin(out, &l.wo);
            out.push(l.ln2_g);
            out.push(l.ln2_b);
            lin(out, &l.ff1);
            lin(out, &l.ff2);
        };
        lin(&mut out, &self.token_proj);
        lin(&mut out, &self.phi_proj);
        for l in &self.agg {
            layer(&mut out, l);
        }
        out.push(self.pool_query);
        for l in &self.pool {
            layer(&mut out, l);
        }
        lin(&mut out, &self.map_head);
        lin(&mut out, &self.cls_proj);
        for l in &self.cls {
            layer(&mut out, l);
        }
        lin(&mut out, &self.head1);
        lin(&mut out, &self.head2);
        out
    }
}

pub fn bind<T: Real>(tape: &mut Tape<T>, p: &ClassifierParams<T>) -> BoundParams {
    fn lin<T: Real>(tape: &mut Tape<T>, l: &LinearParams<T>) -> BoundLinear {
        BoundLinear {
            w: tape.leaf(l.w.clone()),
            b: tape.leaf(l.b.clone()),
        }
    }
    fn layer<T: Real>(tape: &mut Tape<T>, l: &EncoderLayerParams<T>) -> BoundLayer {
        BoundLayer {
            ln1_g: tape.leaf(l.ln1_g.clone()),
            ln1_b: tape.leaf(l.ln1_b.clone()),
            wq: lin(tape, &l.wq),
            wk: lin(tape, &l.wk),
            wv: lin(tape, &l.wv),
            wo: lin(tape, &l.wo),
            ln2_g: tape.leaf(l.ln2_g.clone()),
            ln2_b: tape.leaf(l.ln2_b.clone()),
            ff1: lin(tape, &l.ff1),
            ff2: lin(tape, &l.ff2),
        }
    }
    BoundParams {
        token_proj: lin(tape, &p.token_proj),
        phi_proj: lin(tape, &p.phi_proj),
        agg: p.agg.iter().map(|l| layer(tape, l)).collect(),
        pool_query: tape.leaf(p.pool_query.clone()),
        pool: p.pool.iter().map(|l| layer(tape, l)).collect(),
        map_head: lin(tape, &p.map_head),
        cls_proj: lin(tape, &p.cls_proj),
        cls: p.cls.iter().map(|l| layer(tape, l)).collect(),
        head1: lin(tape, &p.head1),
        head2: lin(tape, &p.head2),
    }
}

/// Precomputed constants reused across forward passes.
pub struct ClassifierContext<T> {
    pub arch: ArchConfig,
    pe_agg: Array2<T>,
    pe_cls: Array2<T>,
}

impl<T: Real> ClassifierContext<T> {
    pub fn new(arch: ArchConfig) -> Result<Self, CoreError> {
        arch.validate()?;
        Ok(ClassifierContext {
            pe_agg: positional_encoding(arch.n_maps(), arch.d),
            pe_cls: positional_encoding(arch.map_len(), arch.d),
            arch,
        })
    }
}

fn affine_norm<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    g: Var,
    b: Var,
) -> Result<Var, CoreError> {
    let n = tape.layer_norm(x);
    let scaled = tape.mul_row(n, g)?;
    tape.add_row(scaled, b)
}

fn encoder_layer<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    l: &BoundLayer,
    heads: usize,
) -> Result<Var, CoreError> {
    let a = affine_norm(tape, x, l.ln1_g, l.ln1_b)?;
    let q = linear(tape, a, l.wq.w, l.wq.b)?;
    let k = linear(tape, a, l.wk.w, l.wk.b)?;
    let v = linear(tape, a, l.wv.w, l.wv.b)?;
    let attn = scaled_dot_attention(tape, q, k, v, heads)?;
    let o = linear(tape, attn, l.wo.w, l.wo.b)?;
    let x = tape.add(x, o)?;

    let m = affine_norm(tape, x, l.ln2_g, l.ln2_b)?;
    let h = linear(tape, m, l.ff1.w, l.ff1.b)?;
    let h = tape.relu(h);
    let f = linear(tape, h, l.ff2.w, l.ff2.b)?;
    tape.add(x, f)
}

/// One cross-attention pooling layer: the query row attends over `mem`.
fn pool_layer<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    mem: Var,
    l: &BoundLayer,
) -> Result<Var, CoreError> {
    let a = affine_norm(tape, q, l.ln1_g, l.ln1_b)?;
    let qq = linear(tape, a, l.wq.w, l.wq.b)?;
    let kk = linear(tape, mem, l.wk.w, l.wk.b)?;
    let vv = linear(tape, mem, l.wv.w, l.wv.b)?;
    let attn = scaled_dot_attention(tape, qq, kk, vv, 1)?;
    let o = linear(tape, attn, l.wo.w, l.wo.b)?;
    let q = tape.add(q, o)?;

    let m = affine_norm(tape, q, l.ln2_g, l.ln2_b)?;
    let h = linear(tape, m, l.ff1.w, l.ff1.b)?;
    let h = tape.relu(h);
    let f = linear(tape, h, l.ff2.w, l.ff2.b)?;
    tape.add(q, f)
}

/// Timestep embedding φ(t): sinusoid of t/T through a learned linear map.
fn phi<T: Real>(
    tape: &mut Tape<T>,
    ctx: &ClassifierContext<T>,
    bound: &BoundParams,
    t: u16,
) -> Result<Var, CoreError> {
    let x = t as f64 / ctx.arch.stack.t_total as f64 * 100.0;
    let raw = tape.leaf1_as_row(sinusoid_features(x, ctx.arch.d));
    linear(tape, raw, bound.phi_proj.w, bound.phi_proj.b)
}

/// Aggregates one `[L·H, h·w]` stack into a single `[1, h·w]` map.
///
/// Each map becomes a token; φ(t) is re-added at the input of every
/// aggregation layer; a learned query pools the sequence.
pub fn aggregate<T: Real>(
    tape: &mut Tape<T>,
    ctx: &ClassifierContext<T>,
    bound: &BoundParams,
    stack_tokens: Var,
    t: u16,
) -> Result<Var, CoreError> {
    let arch = &ctx.arch;
    if t >= arch.stack.t_total {
        return Err(CoreError::Config(format!(
            "timestep {t} outside [0, {})",
            arch.stack.t_total
        )));
    }
    let got = tape.value(stack_tokens).shape().to_vec();
    if got != [arch.n_maps(), arch.map_len()] {
        return Err(CoreError::ShapeMismatch {
            context: "aggregate input",
            lhs: got,
            rhs: vec![arch.n_maps(), arch.map_len()],
        });
    }
    let phi_v = phi(tape, ctx, bound, t)?;
    let pe = tape.leaf2(ctx.pe_agg.clone());
    let mut x = linear(tape, stack_tokens, bound.token_proj.w, bound.token_proj.b)?;
    x = tape.add(x, pe)?;
    for layer in &bound.agg {
        x = tape.add_row(x, phi_v)?;
        x = encoder_layer(tape, x, layer, arch.agg_heads)?;
    }
    let mut q = bound.pool_query;
    for layer in &bound.pool {
        q = pool_layer(tape, q, x, layer)?;
    }
    linear(tape, q, bound.map_head.w, bound.map_head.b)
}

/// Joint classification of two aggregated maps into 5 logits.
///
/// Tokens are the `h·w` spatial positions with the two maps stacked as
/// channels; the transformer output is mean-pooled and concatenated
/// with a low-dimensional timestep embedding before the MLP head.
pub fn classify<T: Real>(
    tape: &mut Tape<T>,
    ctx: &ClassifierContext<T>,
    bound: &BoundParams,
    agg_s: Var,
    agg_o: Var,
    t: u16,
) -> Result<Var, CoreError> {
    let arch = &ctx.arch;
    let hw = arch.map_len();
    for (name, v) in [("subject", agg_s), ("object", agg_o)] {
        if tape.value(v).len() != hw {
            return Err(CoreError::Config(format!(
                "{name} aggregated map has wrong size"
            )));
        }
    }
    let s_col = tape.reshape(agg_s, &[hw, 1])?;
    let o_col = tape.reshape(agg_o, &[hw, 1])?;
    let tokens = tape.concat_cols(&[s_col, o_col])?;
    let pe = tape.leaf2(ctx.pe_cls.clone());
    let mut x = linear(tape, tokens, bound.cls_proj.w, bound.cls_proj.b)?;
    x = tape.add(x, pe)?;
    for layer in &bound.cls {
        x = encoder_layer(tape, x, layer, arch.cls_heads)?;
    }
    let pooled = tape.mean_rows(x);
    let t16 = tape.leaf1_as_row(sinusoid_features(t as f64, arch.t_embed_small));
    let feat = tape.concat_cols(&[pooled, t16])?;
    let h = linear(tape, feat, bound.head1.w, bound.head1.b)?;
    let h = tape.relu(h);
    linear(tape, h, bound.head2.w, bound.head2.b)
}

/// Full forward pass: aggregate both stacks, classify, return logits.
pub fn forward_logits<T: Real>(
    tape: &mut Tape<T>,
    ctx: &ClassifierContext<T>,
    bound: &BoundParams,
    stack_s: Var,
    stack_o: Var,
    t: u16,
) -> Result<Var, CoreError> {
    let agg_s = aggregate(tape, ctx, bound, stack_s, t)?;
    let agg_o = aggregate(tape, ctx, bound, stack_o, t)?;
    classify(tape, ctx, bound, agg_s, agg_o, t)
}

/// Probability distribution over the 5 relations for a pair of raw
/// stacks (builds a throwaway tape; no gradients).
pub fn predict<T: Real>(
    ctx: &ClassifierContext<T>,
    params: &ClassifierParams<T>,
    stack_s: &Array2<T>,
    stack_o: &Array2<T>,
    t: u16,
) -> Result<[f64; 5], CoreError> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let s = tape.leaf2(stack_s.clone());
    let o = tape.leaf2(stack_o.clone());
    let logits = forward_logits(&mut tape, ctx, &bound, s, o, t)?;
    let probs = tape.softmax(logits);
    let v = tape.value2(probs);
    let mut out = [0.0; 5];
    for c in 0..5 {
        out[c] = v[[0, c]].to_f64();
    }
    Ok(out)
}

/// Predicts from two [`AttentionStack`]s; the timesteps must agree.
pub fn predict_stacks(
    ctx: &ClassifierContext<f32>,
    params: &ClassifierParams<f32>,
    subject: &AttentionStack,
    object: &AttentionStack,
) -> Result<[f64; 5], CoreError> {
    if subject.t != object.t {
        return Err(CoreError::Contract(
            "subject and object stacks are at different timesteps",
        ));
    }
    predict(ctx, params, &subject.maps, &object.maps, subject.t)
}

pub fn argmax(probs: &[f64; 5]) -> usize {
    probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

const CKPT_MAGIC: &[u8; 5] = b"RCLS1";
const CKPT_VERSION: u32 = 1;

/// A trained classifier: architecture plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub params: ClassifierParams<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        let a = &self.arch;
        for v in [
            a.stack.layers as u32,
            a.stack.heads as u32,
            a.stack.rows as u32,
            a.stack.cols as u32,
            a.stack.t_total as u32,
            a.d as u32,
            a.agg_layers as u32,
            a.agg_heads as u32,
            a.pool_layers as u32,
            a.cls_layers as u32,
            a.cls_heads as u32,
            a.t_embed_small as u32,
            a.n_classes as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let named = self.params.named();
        w.write_all(&(named.len() as u32).to_le_bytes())?;
        for (name, tensor) in named {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(tensor.ndim() as u8).to_le_bytes())?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for v in tensor.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CoreError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(CoreError::Format("bad checkpoint magic".into()));
        }
        fn read_u32(r: &mut impl Read) -> Result<u32, CoreError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(CoreError::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let vals: Vec<u32> = (0..13).map(|_| read_u32(&mut r)).collect::<Result<_, _>>()?;
        let arch = ArchConfig {
            stack: StackShape {
                layers: vals[0] as usize,
                heads: vals[1] as usize,
                rows: vals[2] as usize,
                cols: vals[3] as usize,
                t_total: vals[4] as u16,
            },
            d: vals[5] as usize,
            agg_layers: vals[6] as usize,
            agg_heads: vals[7] as usize,
            pool_layers: vals[8] as usize,
            cls_layers: vals[9] as usize,
            cls_heads: vals[10] as usize,
            t_embed_small: vals[11] as usize,
            n_classes: vals[12] as usize,
        };
        arch.validate()?;

        // Read named blocks into a template built from the arch, so
        // any arch/parameter mismatch is rejected.
        let mut params: ClassifierParams<f32> = init_params(&arch, 0)?;
        let n_blocks = read_u32(&mut r)? as usize;
        let mut loaded: std::collections::HashMap<String, ArrayD<f32>> =
            std::collections::HashMap::new();
        for _ in 0..n_blocks {
            let mut lb = [0u8; 2];
            r.read_exact(&mut lb)?;
            let name_len = u16::from_le_bytes(lb) as usize;
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|_| CoreError::Format("bad block name".into()))?;
            let mut dimb = [0u8; 1];
            r.read_exact(&mut dimb)?;
            let ndim = dimb[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf)?;
            let vals: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), vals)
                .map_err(|_| CoreError::Format("bad block shape".into()))?;
            loaded.insert(name, arr);
        }
        let expected = params.named().len();
        if loaded.len() != expected {
            return Err(CoreError::Format(format!(
                "checkpoint has {} parameter blocks, arch requires {}",
                loaded.len(),
                expected
            )));
        }
        let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let arr = loaded.remove(name).ok_or_else(|| {
                CoreError::Format(format!("checkpoint missing block {name:?}"))
            })?;
            if arr.shape() != slot.shape() {
                return Err(CoreError::Format(format!(
                    "block {name:?} shape {:?} does not match arch ({:?})",
                    arr.shape(),
                    slot.shape()
                )));
            }
            *slot = arr;
        }
        Ok(Checkpoint { arch, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_diff_check;
    use ndarray::Array2;

    fn rand_stack(arch: &ArchConfig, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((arch.n_maps(), arch.map_len()), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn aggregate_output_shape() {
        let arch = ArchConfig::reduced();
        let ctx = ClassifierContext::<f32>::new(arch).unwrap();
        let params = init_params::<f32>(&arch, 1).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let s = tape.leaf2(rand_stack(&arch, 2));
        let out = aggregate(&mut tape, &ctx, &bound, s, 10).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, arch.map_len()]);
    }

    #[test]
    fn aggregate_rejects_out_of_range_timestep() {
        let arch = ArchConfig::reduced();
        let ctx = ClassifierContext::<f32>::new(arch).unwrap();
        let params = init_params::<f32>(&arch, 1).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let s = tape.leaf2(rand_stack(&arch, 2));
        assert!(aggregate(&mut tape, &ctx, &bound, s, arch.stack.t_total).is_err());
    }

    /// Positional encodings must break (layer, head) permutation symmetry.
    #[test]
    fn permuting_token_order_changes_aggregate_output() {
        let arch = ArchConfig::reduced();
        let ctx = ClassifierContext::<f32>::new(arch).unwrap();
        let params = init_params::<f32>(&arch, 3).unwrap();
        let stack = rand_stack(&arch, 4);
        let mut permuted = stack.clone();
        let row0 = stack.row(0).to_owned();
        permuted.row_mut(0).assign(&stack.row(1));
        permuted.row_mut(1).assign(&row0);

        let run = |input: &Array2<f32>| {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params);
            let s = tape.leaf2(input.clone());
            let out = aggregate(&mut tape, &ctx, &bound, s, 10).unwrap();
            tape.value(out).clone()
        };
        assert_ne!(run(&stack), run(&permuted));
    }

    /// Directional relations require subject/object asymmetry.
    #[test]
    fn swapping_channels_changes_logits() {
        let arch = ArchConfig::reduced();
        let ctx = ClassifierContext::<f32>::new(arch).unwrap();
        let params = init_params::<f32>(&arch, 5).unwrap();
        let (a, b) = (rand_stack(&arch, 6), rand_stack(&arch, 7));
        let run = |s: &Array2<f32>, o: &Array2<f32>| {
            predict(&ctx, &params, s, o, 10).unwrap()
        };
        assert_ne!(run(&a, &b), run(&b, &a));
    }

    #[test]
    fn uniform_maps_give_finite_normalized_probabilities() {
        let arch = ArchConfig::reduced();
        let ctx = ClassifierContext::<f32>::new(arch).unwrap();
        let params = init_params::<f32>(&arch, 8).unwrap();
        let uniform = Array2::from_elem((arch.n_maps(), arch.map_len()), 0.5f32);
        for t in [0u16, 25, 49] {
            let p = predict(&ctx, &params, &uniform, &uniform, t).unwrap();
            assert!(p.iter().all(|v| v.is_finite() && *v > 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_stable() {
        let arch = ArchConfig::reduced();
        let a = init_params::<f32>(&arch, 42).unwrap();
        let b = init_params::<f32>(&arch, 42).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f32>(&arch, 43).unwrap();
        assert_ne!(a, c);

        // No blow-up at init.
        let ctx = ClassifierContext::<f32>::new(arch).unwrap();
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &a);
        let s = tape.leaf2(rand_stack(&arch, 1));
        let o = tape.leaf2(rand_stack(&arch, 2));
        let logits = forward_logits(&mut tape, &ctx, &bound, s, o, 10).unwrap();
        for v in tape.value(logits).iter() {
            assert!(v.abs() < 50.0, "logit blow-up at init: {v}");
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let arch = ArchConfig::desk();
        let params = init_params::<f32>(&arch, 0).unwrap();
        let (d, hw, lh) = (arch.d, arch.map_len(), arch.n_maps());
        let _ = lh;
        let lin = |fan_in: usize, fan_out: usize| fan_in * fan_out + fan_out;
        let enc_layer = 2 * d + 4 * lin(d, d) + 2 * d + lin(d, 4 * d) + lin(4 * d, d);
        let expect = lin(hw, d)
            + lin(d, d)
            + arch.agg_layers * enc_layer
            + d
            + arch.pool_layers * enc_layer
            + lin(d, hw)
            + lin(2, d)
            + arch.cls_layers * enc_layer
            + lin(d + arch.t_embed_small, d)
            + lin(d, arch.n_classes);
        assert_eq!(params.n_params(), expect);
    }

    #[test]
    fn end_to_end_determinism() {
        let arch = ArchConfig::reduced();
        let ctx = ClassifierContext::<f32>::new(arch).unwrap();
        let params = init_params::<f32>(&arch, 9).unwrap();
        let (a, b) = (rand_stack(&arch, 10), rand_stack(&arch, 11));
        let p1 = predict(&ctx, &params, &a, &b, 25).unwrap();
        let p2 = predict(&ctx, &params, &a, &b, 25).unwrap();
        for (x, y) in p1.iter().zip(&p2) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    /// The aggregator is a single shared weight set: perturbing it
    /// changes the object-side aggregation as well.
    #[test]
    fn aggregator_weights_are_shared_between_subject_and_object() {
        let arch = ArchConfig::reduced();
        let ctx = ClassifierContext::<f32>::new(arch).unwrap();
        let mut params = init_params::<f32>(&arch, 12).unwrap();
        let stack = rand_stack(&arch, 13);

        let agg_of = |params: &ClassifierParams<f32>, input: &Array2<f32>| {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, params);
            let s = tape.leaf2(input.clone());
            let out = aggregate(&mut tape, &ctx, &bound, s, 10).unwrap();
            tape.value(out).clone()
        };
        let before = agg_of(&params, &stack);
        params.token_proj.w[[0, 0]] += 0.5;
        let after = agg_of(&params, &stack);
        // Same call path serves both sides; one weight set.
        assert_ne!(before, after);
    }

    #[test]
    fn untrained_model_has_no_degenerate_argmax_collapse() {
        let arch = ArchConfig::reduced();
        let ctx = ClassifierContext::<f32>::new(arch).unwrap();
        let params = init_params::<f32>(&arch, 77).unwrap();
        let mut counts = [0usize; 5];
        let n = 1000;
        for i in 0..n {
            let s = rand_stack(&arch, 1000 + i);
            let o = rand_stack(&arch, 5000 + i);
            let p = predict(&ctx, &params, &s, &o, 25).unwrap();
            counts[argmax(&p)] += 1;
        }
        for (c, &k) in counts.iter().enumerate() {
            let f = k as f64 / n as f64;
            assert!(
                (0.05..=0.5).contains(&f),
                "class {c} argmax frequency {f} out of [0.05, 0.5]"
            );
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let arch = ArchConfig::reduced();
        let ctx = ClassifierContext::<f64>::new(arch).unwrap();
        let mut params = init_params::<f64>(&arch, 21).unwrap();
        // Central differences at ε=1e-3 carry an O(ε²·f''') truncation
        // term; verify at a low-curvature parameter point so the
        // comparison tests the backward pass, not the FD remainder.
        params.scale_encoder_weights(1.0 / 16.0);
        let stack_s = rand_stack(&arch, 22).mapv(|v| v as f64);
        let stack_o = rand_stack(&arch, 23).mapv(|v| v as f64);
        let target = 2usize;
        let t = 25u16;

        let flat: Vec<ArrayD<f64>> = params.named().iter().map(|(_, a)| (*a).clone()).collect();
        let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();

        let rebuild = |vals: &[ArrayD<f64>]| -> ClassifierParams<f64> {
            let mut p = params.clone();
            for (slot, v) in p.tensors_mut().into_iter().zip(vals) {
                *slot = v.clone();
            }
            p
        };
        let f = |vals: &[ArrayD<f64>]| -> f64 {
            let p = rebuild(vals);
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &p);
            let s = tape.leaf2(stack_s.clone());
            let o = tape.leaf2(stack_o.clone());
            let logits = forward_logits(&mut tape, &ctx, &bound, s, o, t).unwrap();
            let loss = tape.cross_entropy(logits, target).unwrap();
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let s = tape.leaf2(stack_s.clone());
        let o = tape.leaf2(stack_o.clone());
        let logits = forward_logits(&mut tape, &ctx, &bound, s, o, t).unwrap();
        let loss = tape.cross_entropy(logits, target).unwrap();
        let (grads, _) = tape.backward_wrt(loss, &bound.vars()).unwrap();
        assert_eq!(grads.len(), names.len());

        let err = finite_diff_check(&f, &flat, &grads, 1e-3, 100, 7).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn checkpoint_round_trip_and_arch_mismatch_rejection() {
        let arch = ArchConfig::reduced();
        let params = init_params::<f32>(&arch, 31).unwrap();
        let ckpt = Checkpoint { arch, params };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rcls");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);

        // Truncated file (mismatched parameter payload) must be rejected.
        let bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("trunc.rcls");
        std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Checkpoint::load(&bad).is_err());
    }
}
