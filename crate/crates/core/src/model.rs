//! The deep fusion encoder.
//!
//! For modality `l` with frozen-encoder embeddings `x`:
//!
//! ```text
//! m̂ = normalize(out(token₀(block(fuse(g_l(x), g₃(c_l))))))
//! ```
//!
//! `g₁`, `g₂`, `g₃` are two-layer ReLU projection heads into `d_model`,
//! `c_l` is a learned context row, `block` is one pre-norm transformer
//! block with 4 attention heads shared by both modalities, and `out` maps
//! to `d_out`. Element-wise fusion kinds give a one-token sequence; the
//! attention kind gives the two-token sequence `[embedding, context]` so
//! the embedding token attends to the context inside the block.
//!
//! Parameter structs are generic over their slot type: `Dfe<Tensor<F>>`
//! owns values, `Dfe<Var>` is the same model bound to a [`Graph`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Parameters;
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub const ATTENTION_HEADS: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const TAU_INIT: f64 = 0.1;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Add,
    Multiply,
    Concat,
    Attention,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::Add,
        FusionKind::Multiply,
        FusionKind::Concat,
        FusionKind::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Add => "add",
            FusionKind::Multiply => "multiply",
            FusionKind::Concat => "concat",
            FusionKind::Attention => "attention",
        }
    }

    /// Tokens per fused sequence.
    pub fn seq_len(self) -> usize {
        match self {
            FusionKind::Attention => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(FusionKind::Add),
            "multiply" | "mul" => Ok(FusionKind::Multiply),
            "concat" => Ok(FusionKind::Concat),
            "attention" | "dot" => Ok(FusionKind::Attention),
            other => Err(Error::contract(format!("unknown fusion kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    First,
    Second,
}

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::First => 0,
            Modality::Second => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d1: usize,
    pub d2: usize,
    pub d_ctx: usize,
    pub d_model: usize,
    pub d_out: usize,
    pub fusion: FusionKind,
}

impl ModelConfig {
    /// Desk-scale defaults: `d_ctx = 16`, `d_model = 64`, `d_out = 64`.
    pub fn desk(d1: usize, d2: usize, fusion: FusionKind) -> Self {
        ModelConfig {
            d1,
            d2,
            d_ctx: 16,
            d_model: 64,
            d_out: 64,
            fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d1, self.d2, self.d_ctx, self.d_model, self.d_out];
        if dims.contains(&0) {
            return Err(Error::contract(format!("all dimensions must be ≥ 1: {self:?}")));
        }
        if !self.d_model.is_multiple_of(ATTENTION_HEADS) {
            return Err(Error::contract(format!(
                "d_model {} not divisible by {ATTENTION_HEADS} heads",
                self.d_model
            )));
        }
        Ok(())
    }

    /// Closed-form count of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (dm, dc, dout) = (self.d_model, self.d_ctx, self.d_out);
        let head = |d_in: usize| d_in * dm + dm + dm * dm + dm;
        let heads = head(self.d1) + head(self.d2) + head(dc);
        let contexts = 2 * dc;
        let fusion = match self.fusion {
            FusionKind::Concat => 2 * dm * dm + dm,
            _ => 0,
        };
        // two layer norms, q/k/v/o projections, 4× feed-forward
        let block = 4 * dm + 4 * (dm * dm + dm) + (dm * 4 * dm + 4 * dm) + (4 * dm * dm + dm);
        let out = dm * dout + dout;
        heads + contexts + fusion + block + out + 1
    }
}

// -------------------------------------------------------------------
// Parameter structure

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

/// `w2 · relu(w1 · x + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Row `l − 1` is the context identifier of modality `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextTable<T> {
    pub c: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion<T> {
    pub kind: FusionKind,
    /// `2·d_model → d_model`, present iff `kind` is `Concat`.
    pub down: Option<Linear<T>>,
}

/// Pre-norm transformer block: `h = x + O(attn(LN₁x))`,
/// `y = h + FF₂(relu(FF₁(LN₂h)))`. Q/K/V hold all heads side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dfe<T> {
    pub config: ModelConfig,
    pub g1: ProjectionHead<T>,
    pub g2: ProjectionHead<T>,
    pub g3: ProjectionHead<T>,
    pub contexts: ContextTable<T>,
    pub fusion: Fusion<T>,
    pub block: TransformerBlock<T>,
    pub out: Linear<T>,
    pub log_tau: T,
}

/// All trainable parameters of the encoder.
pub type DfeParameters<F> = Dfe<Tensor<F>>;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

// Generates ordered traversal (`collect`, `collect_mut`) and slot mapping
// (`map_slots`) for a parameter struct. `leaf` fields are slots, `sub`
// fields are nested parameter structs.
macro_rules! slots {
    ($ty:ident { leaf: [$($leaf:ident),*], sub: [$($sub:ident),*] }) => {
        impl<T> $ty<T> {
            pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
                $( out.push((join(prefix, stringify!($leaf)), &self.$leaf)); )*
                $( self.$sub.collect(&join(prefix, stringify!($sub)), out); )*
            }

            pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
                $( out.push((join(prefix, stringify!($leaf)), &mut self.$leaf)); )*
                $( self.$sub.collect_mut(&join(prefix, stringify!($sub)), out); )*
            }

            pub fn map_slots<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $ty<U> {
                $ty {
                    $( $leaf: f(&join(prefix, stringify!($leaf)), &self.$leaf), )*
                    $( $sub: self.$sub.map_slots(&join(prefix, stringify!($sub)), f), )*
                }
            }
        }
    };
}

slots!(Linear { leaf: [w, b], sub: [] });
slots!(ProjectionHead { leaf: [w1, b1, w2, b2], sub: [] });
slots!(ContextTable { leaf: [c], sub: [] });
slots!(TransformerBlock {
    leaf: [ln1_gain, ln1_bias, ln2_gain, ln2_bias],
    sub: [q, k, v, o, ff1, ff2]
});

impl<T> Fusion<T> {
    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        if let Some(d) = &self.down {
            d.collect(&join(prefix, "down"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        if let Some(d) = &mut self.down {
            d.collect_mut(&join(prefix, "down"), out);
        }
    }

    pub fn map_slots<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Fusion<U> {
        Fusion {
            kind: self.kind,
            down: self.down.as_ref().map(|d| d.map_slots(&join(prefix, "down"), f)),
        }
    }
}

impl<T> Dfe<T> {
    /// Every slot with its dotted name, in a fixed canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.g1.collect("g1", &mut out);
        self.g2.collect("g2", &mut out);
        self.g3.collect("g3", &mut out);
        self.contexts.collect("contexts", &mut out);
        self.fusion.collect("fusion", &mut out);
        self.block.collect("block", &mut out);
        self.out.collect("out", &mut out);
        out.push(("log_tau".to_string(), &self.log_tau));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.g1.collect_mut("g1", &mut out);
        self.g2.collect_mut("g2", &mut out);
        self.g3.collect_mut("g3", &mut out);
        self.contexts.collect_mut("contexts", &mut out);
        self.fusion.collect_mut("fusion", &mut out);
        self.block.collect_mut("block", &mut out);
        self.out.collect_mut("out", &mut out);
        out.push(("log_tau".to_string(), &mut self.log_tau));
        out
    }

    pub fn map_slots<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> Dfe<U> {
        Dfe {
            config: self.config,
            g1: self.g1.map_slots("g1", f),
            g2: self.g2.map_slots("g2", f),
            g3: self.g3.map_slots("g3", f),
            contexts: self.contexts.map_slots("contexts", f),
            fusion: self.fusion.map_slots("fusion", f),
            block: self.block.map_slots("block", f),
            out: self.out.map_slots("out", f),
            log_tau: f("log_tau", &self.log_tau),
        }
    }
}

impl<F: Real> Parameters<F> for DfeParameters<F> {
    fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        self.named()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        self.named_mut()
    }

    fn post_update(&mut self) {
        self.clamp_tau();
    }
}

// -------------------------------------------------------------------
// Initialization

/// Fresh parameters: weights uniform in `±√(6 / fan_in)`, biases 0,
/// layer-norm gains 1, contexts `N(0, 1) / √d_ctx`, `log τ = ln 0.1`.
/// Values are drawn in canonical slot order from `seed`.
pub fn init_parameters<F: Real>(config: &ModelConfig, seed: u64) -> Result<DfeParameters<F>> {
    config.validate()?;
    let skeleton = skeleton(config);
    let mut rng = Rng::new(seed);
    let params = skeleton.map_slots(&mut |name, shape: &Vec<usize>| {
        let numel: usize = shape.iter().product();
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let values: Vec<f64> = if name == "log_tau" {
            vec![TAU_INIT.ln()]
        } else if name == "contexts.c" {
            let s = 1.0 / (config.d_ctx as f64).sqrt();
            (0..numel).map(|_| rng.normal() * s).collect()
        } else if leaf.ends_with("gain") {
            vec![1.0; numel]
        } else if shape.len() == 2 {
            let bound = (6.0 / shape[0] as f64).sqrt();
            (0..numel).map(|_| rng.uniform_range(-bound, bound)).collect()
        } else {
            vec![0.0; numel]
        };
        Tensor::from_f64(shape, &values)
            .expect("skeleton shapes are positive")
            .with_grad()
    });
    let c = &params.contexts.c;
    if c.row(0) == c.row(1) {
        return Err(Error::Degenerate("context rows coincide after init".into()));
    }
    Ok(params)
}

/// Shape of every slot for `config`.
pub fn skeleton(config: &ModelConfig) -> Dfe<Vec<usize>> {
    let dm = config.d_model;
    let lin = |i: usize, o: usize| Linear {
        w: vec![i, o],
        b: vec![o],
    };
    let head = |d_in: usize| ProjectionHead {
        w1: vec![d_in, dm],
        b1: vec![dm],
        w2: vec![dm, dm],
        b2: vec![dm],
    };
    Dfe {
        config: *config,
        g1: head(config.d1),
        g2: head(config.d2),
        g3: head(config.d_ctx),
        contexts: ContextTable {
            c: vec![2, config.d_ctx],
        },
        fusion: Fusion {
            kind: config.fusion,
            down: (config.fusion == FusionKind::Concat).then(|| lin(2 * dm, dm)),
        },
        block: TransformerBlock {
            ln1_gain: vec![dm],
            ln1_bias: vec![dm],
            q: lin(dm, dm),
            k: lin(dm, dm),
            v: lin(dm, dm),
            o: lin(dm, dm),
            ln2_gain: vec![dm],
            ln2_bias: vec![dm],
            ff1: lin(dm, 4 * dm),
            ff2: lin(4 * dm, dm),
        },
        out: lin(dm, config.d_out),
        log_tau: vec![],
    }
}

impl<F: Real> DfeParameters<F> {
    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn tau(&self) -> F {
        self.log_tau.item().exp()
    }

    /// Clamps `τ` into `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_tau(&mut self) {
        let lo = F::of(TAU_MIN.ln());
        let hi = F::of(TAU_MAX.ln());
        let v = &mut self.log_tau.data_mut()[0];
        *v = v.max(lo).min(hi);
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<F>) -> Dfe<Var> {
        self.map_slots(&mut |_, t| g.leaf(t))
    }

    /// Registers every parameter as a constant of `g` (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph<F>) -> Dfe<Var> {
        self.map_slots(&mut |_, t| g.constant(t.detached()))
    }

    /// Adds the gradients accumulated on `bound` leaves into `self`.
    pub fn absorb_grads(&mut self, g: &Graph<F>, bound: &Dfe<Var>) -> Result<()> {
        for ((name, t), (_, v)) in self.named_mut().into_iter().zip(bound.named()) {
            if let Some(grad) = g.grad(*v) {
                t.accumulate_grad(grad)
                    .map_err(|e| Error::contract(format!("{name}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.named_mut() {
            t.set_requires_grad(on);
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_mut() {
            t.zero_grad();
        }
    }

    /// Checks that `other` has the same configuration and slot shapes.
    pub fn matches_skeleton(&self, config: &ModelConfig) -> Result<()> {
        let sk = skeleton(config);
        let mine = self.named();
        let want = sk.named();
        if mine.len() != want.len() {
            return Err(Error::Skeleton(format!(
                "{} tensors, expected {}",
                mine.len(),
                want.len()
            )));
        }
        for ((name, t), (wname, shape)) in mine.iter().zip(&want) {
            if name != wname || t.shape() != shape.as_slice() {
                return Err(Error::Skeleton(format!(
                    "{name} {:?} vs expected {wname} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Encodes rows of `x` without recording gradients, in chunks of at
    /// most 256 rows (rows are independent, so chunking is exact).
    pub fn encode(&self, x: &Tensor<F>, modality: Modality) -> Result<Tensor<F>> {
        const CHUNK: usize = 256;
        let n = x.rows();
        let mut data = Vec::with_capacity(n * self.config.d_out);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut g = Graph::new();
            let bound = self.bind_frozen(&mut g);
            let xv = g.constant(x.select_rows(&idx));
            let y = encode_modality(&mut g, &bound, xv, modality)?;
            data.extend_from_slice(g.value(y).data());
        }
        Tensor::new(&[n, self.config.d_out], data)
    }
}

// -------------------------------------------------------------------
// Forward pass

fn linear<F: Real>(g: &mut Graph<F>, l: &Linear<Var>, x: Var) -> Result<Var> {
    let y = g.matmul(x, l.w)?;
    g.add_bias(y, l.b)
}

/// Applies a projection head row-wise to `x[k×d_in]`.
pub fn project<F: Real>(g: &mut Graph<F>, head: &ProjectionHead<Var>, x: Var) -> Result<Var> {
    let h = g.matmul(x, head.w1)?;
    let h = g.add_bias(h, head.b1)?;
    let h = g.relu(h);
    let y = g.matmul(h, head.w2)?;
    g.add_bias(y, head.b2)
}

/// Fuses projected embeddings `e[k×d]` with one projected context row
/// `ctx[1×d]` into a token sequence `[k, T, d]`.
pub fn fuse<F: Real>(g: &mut Graph<F>, fusion: &Fusion<Var>, e: Var, ctx: Var) -> Result<Var> {
    let (k, d) = {
        let s = g.value(e).shape();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "fuse",
                lhs: s.to_vec(),
                rhs: g.value(ctx).shape().to_vec(),
            });
        }
        (s[0], s[1])
    };
    if g.value(ctx).cols() != d || g.value(ctx).numel() != d {
        return Err(Error::Shape {
            op: "fuse",
            lhs: vec![k, d],
            rhs: g.value(ctx).shape().to_vec(),
        });
    }
    let ctx_rows = g.repeat_rows(ctx, k)?;
    match fusion.kind {
        FusionKind::Add => {
            let t = g.add(e, ctx_rows)?;
            g.reshape(t, &[k, 1, d])
        }
        FusionKind::Multiply => {
            let t = g.mul(e, ctx_rows)?;
            g.reshape(t, &[k, 1, d])
        }
        FusionKind::Concat => {
            let down = fusion
                .down
                .as_ref()
                .ok_or_else(|| Error::contract("concat fusion without down-projection"))?;
            let cat = g.concat_cols(e, ctx_rows)?;
            let t = linear(g, down, cat)?;
            g.reshape(t, &[k, 1, d])
        }
        FusionKind::Attention => g.stack_tokens(&[e, ctx_rows]),
    }
}

/// The shared transformer block over token sequences `[k, T, d]`.
pub fn transformer_block<F: Real>(
    g: &mut Graph<F>,
    block: &TransformerBlock<Var>,
    x: Var,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::contract(format!("block input shape {shape:?}")));
    }
    let (k, t, d) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x, &[k * t, d])?;

    let a = g.layer_norm(flat, block.ln1_gain, block.ln1_bias, LAYER_NORM_EPS)?;
    let q = linear(g, &block.q, a)?;
    let kk = linear(g, &block.k, a)?;
    let v = linear(g, &block.v, a)?;
    let q = g.reshape(q, &shape)?;
    let kk = g.reshape(kk, &shape)?;
    let v = g.reshape(v, &shape)?;
    let att = g.attention(q, kk, v, ATTENTION_HEADS)?;
    let att = g.reshape(att, &[k * t, d])?;
    let att = linear(g, &block.o, att)?;
    let h = g.add(flat, att)?;

    let b = g.layer_norm(h, block.ln2_gain, block.ln2_bias, LAYER_NORM_EPS)?;
    let ff = linear(g, &block.ff1, b)?;
    let ff = g.relu(ff);
    let ff = linear(g, &block.ff2, ff)?;
    let y = g.add(h, ff)?;
    g.reshape(y, &shape)
}

/// Maps frozen-encoder embeddings `x[k×d_l]` of one modality to unit-norm
/// latents `[k×d_out]`.
pub fn encode_modality<F: Real>(
    g: &mut Graph<F>,
    model: &Dfe<Var>,
    x: Var,
    modality: Modality,
) -> Result<Var> {
    let (head, d_in) = match modality {
        Modality::First => (&model.g1, model.config.d1),
        Modality::Second => (&model.g2, model.config.d2),
    };
    let xs = g.value(x).shape().to_vec();
    if xs.len() != 2 || xs[1] != d_in {
        return Err(Error::Shape {
            op: "encode_modality",
            lhs: xs,
            rhs: vec![0, d_in],
        });
    }
    let e = project(g, head, x)?;
    let c = g.gather_rows(model.contexts.c, &[modality.index()])?;
    let ctx = project(g, &model.g3, c)?;
    let seq = fuse(g, &model.fusion, e, ctx)?;
    let y = transformer_block(g, &model.block, seq)?;
    let tok = g.token(y, 0)?;
    let z = linear(g, &model.out, tok)?;
    g.l2_normalize(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: FusionKind) -> ModelConfig {
        ModelConfig {
            d1: 5,
            d2: 6,
            d_ctx: 3,
            d_model: 8,
            d_out: 4,
            fusion: kind,
        }
    }

    #[test]
    fn init_is_deterministic_and_tau_is_point_one() {
        let cfg = small(FusionKind::Add);
        let a = init_parameters::<f64>(&cfg, 3).unwrap();
        let b = init_parameters::<f64>(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!((a.tau() - 0.1).abs() < 1e-15);
        let c = init_parameters::<f64>(&cfg, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_dims() {
        let mut cfg = small(FusionKind::Add);
        cfg.d_model = 6;
        assert!(matches!(init_parameters::<f64>(&cfg, 0), Err(Error::Contract(_))));
        cfg.d_model = 8;
        cfg.d_out = 0;
        assert!(init_parameters::<f64>(&cfg, 0).is_err());
    }

    #[test]
    fn param_count_matches_closed_form() {
        for kind in FusionKind::ALL {
            let cfg = ModelConfig::desk(32, 48, kind);
            let p = init_parameters::<f32>(&cfg, 1).unwrap();
            assert_eq!(p.param_count(), cfg.param_count(), "{kind}");
        }
        // hand-summed extents for the add configuration
        let add = ModelConfig::desk(32, 48, FusionKind::Add);
        let g1 = 32 * 64 + 64 + 64 * 64 + 64;
        let g2 = 48 * 64 + 64 + 64 * 64 + 64;
        let g3 = 16 * 64 + 64 + 64 * 64 + 64;
        let block = 2 * 64 + 4 * (64 * 64 + 64) + 2 * 64 + (64 * 256 + 256) + (256 * 64 + 64);
        let out = 64 * 64 + 64;
        assert_eq!(add.param_count(), g1 + g2 + g3 + 32 + block + out + 1);
        assert_eq!(add.param_count(), 72_993);
    }

    #[test]
    fn doubling_d_out_adds_one_output_layer() {
        let base = ModelConfig::desk(32, 48, FusionKind::Add);
        let wide = ModelConfig {
            d_out: 128,
            ..base
        };
        assert_eq!(wide.param_count() - base.param_count(), 64 * 64 + 64);
    }

    #[test]
    fn project_examples() {
        let mut g = Graph::<f64>::new();
        let head = ProjectionHead {
            w1: g.constant(Tensor::zeros(&[3, 2])),
            b1: g.constant(Tensor::zeros(&[2])),
            w2: g.constant(Tensor::zeros(&[2, 2])),
            b2: g.constant(Tensor::from_f64(&[2], &[0.5, -2.0]).unwrap()),
        };
        let x = g.constant(Tensor::from_f64(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap());
        let y = project(&mut g, &head, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -2.0, 0.5, -2.0]);

        let eye = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let head = ProjectionHead {
            w1: g.constant(eye.clone()),
            b1: g.constant(Tensor::zeros(&[2])),
            w2: g.constant(eye),
            b2: g.constant(Tensor::zeros(&[2])),
        };
        let x = g.constant(Tensor::from_f64(&[2, 2], &[0.0, 1.5, 2.0, 3.0]).unwrap());
        let y = project(&mut g, &head, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.5, 2.0, 3.0]);
    }

    #[test]
    fn fuse_examples() {
        let mut g = Graph::<f64>::new();
        let e = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::from_f64(&[1, 2], &[0.5, -1.0]).unwrap());
        let add = Fusion { kind: FusionKind::Add, down: None };
        let y = fuse(&mut g, &add, e, c).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2]);
        assert_eq!(g.value(y).data(), &[1.5, 1.0]);

        let mul = Fusion { kind: FusionKind::Multiply, down: None };
        let y = fuse(&mut g, &mul, e, c).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -2.0]);

        let att = Fusion { kind: FusionKind::Attention, down: None };
        let y = fuse(&mut g, &att, e, c).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 0.5, -1.0]);

        let wide = g.constant(Tensor::zeros(&[1, 3]));
        assert!(fuse(&mut g, &add, e, wide).is_err());
    }

    #[test]
    fn concat_fusion_down_projects() {
        let cfg = small(FusionKind::Concat);
        let p = init_parameters::<f64>(&cfg, 1).unwrap();
        assert_eq!(p.fusion.down.as_ref().unwrap().w.shape(), &[16, 8]);
        let x = Tensor::full(&[3, 5], 0.3);
        let y = p.encode(&x, Modality::First).unwrap();
        assert_eq!(y.shape(), &[3, 4]);
    }

    #[test]
    fn encode_outputs_are_unit_norm_and_row_independent() {
        for kind in FusionKind::ALL {
            let p = init_parameters::<f64>(&small(kind), 11).unwrap();
            let mut rng = Rng::new(5);
            let vals: Vec<f64> = (0..4 * 5).map(|_| rng.normal()).collect();
            let mut x = Tensor::from_f64(&[4, 5], &vals).unwrap();
            // rows 0 and 3 identical
            let r0 = x.row(0).to_vec();
            x.data_mut()[15..20].copy_from_slice(&r0);
            let y = p.encode(&x, Modality::First).unwrap();
            assert_eq!(y.shape(), &[4, 4]);
            for i in 0..4 {
                let n: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
            assert_eq!(y.row(0), y.row(3));
            for i in 0..4 {
                let single = p.encode(&x.select_rows(&[i]), Modality::First).unwrap();
                for (a, b) in single.data().iter().zip(y.row(i)) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn context_identifier_changes_output() {
        let mut cfg = small(FusionKind::Add);
        cfg.d2 = cfg.d1;
        for kind in FusionKind::ALL {
            cfg.fusion = kind;
            let mut p = init_parameters::<f64>(&cfg, 2).unwrap();
            // share the modality heads so only the context differs
            p.g2 = p.g1.clone();
            let x = Tensor::full(&[2, 5], 0.7);
            let a = p.encode(&x, Modality::First).unwrap();
            let b = p.encode(&x, Modality::Second).unwrap();
            let diff = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-6, "{kind}: {diff}");
        }
    }

    #[test]
    fn gradient_flow_and_unused_head() {
        let cfg = small(FusionKind::Attention);
        let mut p = init_parameters::<f64>(&cfg, 9).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let x = g.constant(Tensor::full(&[3, 5], 0.2));
        let y = encode_modality(&mut g, &bound, x, Modality::First).unwrap();
        let w = g.constant(Tensor::from_f64(&[3, 4], &(0..12).map(|i| i as f64).collect::<Vec<_>>()).unwrap());
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        p.absorb_grads(&g, &bound).unwrap();
        let nonzero = |t: &Tensor<f64>| t.grad().unwrap().iter().any(|&v| v != 0.0);
        assert!(nonzero(&p.g1.w1));
        assert!(nonzero(&p.g3.w1));
        assert!(nonzero(&p.contexts.c));
        assert!(nonzero(&p.block.ff1.w));
        assert!(nonzero(&p.out.w));
        assert!(p.g2.named_zero_grad());
        // context row of the unused modality receives nothing
        assert!(p.contexts.c.grad().unwrap()[3..].iter().all(|&v| v == 0.0));
    }

    impl ProjectionHead<Tensor<f64>> {
        fn named_zero_grad(&self) -> bool {
            let mut v = Vec::new();
            self.collect("", &mut v);
            v.iter().all(|(_, t)| t.grad().unwrap().iter().all(|&x| x == 0.0))
        }
    }

    #[test]
    fn both_modalities_share_block_leaves() {
        let cfg = small(FusionKind::Add);
        let p = init_parameters::<f64>(&cfg, 9).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let leaves_after_bind = g.leaf_count();
        let x1 = g.constant(Tensor::full(&[2, 5], 0.2));
        let x2 = g.constant(Tensor::full(&[2, 6], 0.2));
        encode_modality(&mut g, &bound, x1, Modality::First).unwrap();
        encode_modality(&mut g, &bound, x2, Modality::Second).unwrap();
        // only the two inputs were added as leaves: no parameter copies
        assert_eq!(g.leaf_count(), leaves_after_bind + 2);
    }

    #[test]
    fn tau_clamp() {
        let mut p = init_parameters::<f64>(&small(FusionKind::Add), 1).unwrap();
        p.log_tau.data_mut()[0] = 10.0;
        p.clamp_tau();
        assert!((p.tau() - 100.0).abs() < 1e-9);
        p.log_tau.data_mut()[0] = -10.0;
        p.clamp_tau();
        assert!((p.tau() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn skeleton_check() {
        let p = init_parameters::<f64>(&small(FusionKind::Add), 1).unwrap();
        assert!(p.matches_skeleton(&small(FusionKind::Add)).is_ok());
        assert!(matches!(
            p.matches_skeleton(&small(FusionKind::Concat)),
            Err(Error::Skeleton(_))
        ));
    }
}
