//! Window-based multi-head cross attention and the blocks built on it.
//!
//! Queries come from base windows of one stream, keys and values from the
//! paired searching windows of the other. A CAT block wraps the attention in
//! a pre-norm residual block with a GELU MLP; a fusion module runs `k` rounds
//! of two CAT blocks that share parameters and swap their inputs.

use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::params::{join, Linear, Norm};
use crate::scalar::Scalar;
use crate::tensorcore::{Graph, Tensor, TensorId};
use crate::windowing::{merge_node, partition_node, WindowConfig, WindowLayout};

/// MLP hidden width as a multiple of the channel width.
pub const MLP_RATIO: usize = 4;

/// Weights of one CAT block.
///
/// The key projection carries no bias: a key bias shifts every logit of a
/// query row by the same amount and never reaches the softmax output.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub heads: usize,
    pub norm1: Norm<P>,
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub proj: Linear<P>,
    pub norm2: Norm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

impl<P> AttentionParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            heads: self.heads,
            norm1: self.norm1.map(&join(prefix, "norm1"), f),
            query: self.query.map(&join(prefix, "query"), f),
            key: self.key.map(&join(prefix, "key"), f),
            value: self.value.map(&join(prefix, "value"), f),
            proj: self.proj.map(&join(prefix, "proj"), f),
            norm2: self.norm2.map(&join(prefix, "norm2"), f),
            fc1: self.fc1.map(&join(prefix, "fc1"), f),
            fc2: self.fc2.map(&join(prefix, "fc2"), f),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        self.norm1.for_each_mut(&join(prefix, "norm1"), f);
        self.query.for_each_mut(&join(prefix, "query"), f);
        self.key.for_each_mut(&join(prefix, "key"), f);
        self.value.for_each_mut(&join(prefix, "value"), f);
        self.proj.for_each_mut(&join(prefix, "proj"), f);
        self.norm2.for_each_mut(&join(prefix, "norm2"), f);
        self.fc1.for_each_mut(&join(prefix, "fc1"), f);
        self.fc2.for_each_mut(&join(prefix, "fc2"), f);
    }
}

impl<T: Scalar> AttentionParams<Tensor<T>> {
    pub fn init(channels: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        check_heads(channels, heads)?;
        let hidden = MLP_RATIO * channels;
        Ok(Self {
            heads,
            norm1: Norm::init(channels),
            query: Linear::init(channels, channels, true, rng),
            key: Linear::init(channels, channels, false, rng),
            value: Linear::init(channels, channels, true, rng),
            proj: Linear::init(channels, channels, true, rng),
            norm2: Norm::init(channels),
            fc1: Linear::init(channels, hidden, true, rng),
            fc2: Linear::init(hidden, channels, true, rng),
        })
    }

    /// Zeroes the two residual-branch outputs so the block starts as the
    /// identity.
    pub fn zero_residual_branches(&mut self) {
        let c = self.channels();
        self.proj = Linear::zeros(c, c, true);
        self.fc2 = Linear::zeros(MLP_RATIO * c, c, true);
    }

    pub fn channels(&self) -> usize {
        self.norm1.gain.numel()
    }

    /// Closed form: `2·2c` norms, `3c² + 2c` for query/key/value,
    /// `c² + c` output projection, `2·r·c² + r·c + c` MLP.
    pub fn param_count_for(channels: usize) -> usize {
        let c = channels;
        let r = MLP_RATIO;
        4 * c + (3 * c * c + 2 * c) + (c * c + c) + (2 * r * c * c + r * c + c)
    }

    pub fn bind(&self, g: &mut Graph<T>) -> AttentionParams<TensorId> {
        self.map("", &mut |_, t| g.param(t.clone()))
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!(
            "channel width {} is not divisible by {} heads",
            channels, heads
        )));
    }
    Ok(())
}

/// Graph nodes produced by one W-MCA evaluation.
#[derive(Clone, Copy, Debug)]
pub struct WmcaNodes {
    /// `[n, s, c]`.
    pub output: TensorId,
    /// Attention weights `[n, heads, s, μ·s]`.
    pub weights: TensorId,
}

/// `softmax(Q·Kᵀ/√d_head + mask)·V` per window and head, heads concatenated
/// and projected.
///
/// `base` is `[n, s, c]`, `search` is `[n, m, c]`, `key_valid` flags the
/// `n·m` searching slots; invalid keys get `-∞` logits.
pub fn w_mca<T: Scalar>(
    g: &mut Graph<T>,
    base: TensorId,
    search: TensorId,
    key_valid: &[bool],
    p: &AttentionParams<TensorId>,
) -> Result<WmcaNodes> {
    let bs = g.shape(base).to_vec();
    let ss = g.shape(search).to_vec();
    if bs.len() != 3 || ss.len() != 3 {
        return Err(shape_err("w_mca", format!("window sets {:?} and {:?}", bs, ss)));
    }
    if bs[0] != ss[0] {
        return Err(shape_err(
            "w_mca",
            format!("{} base windows vs {} searching windows", bs[0], ss[0]),
        ));
    }
    if bs[2] != ss[2] {
        return Err(shape_err("w_mca", format!("channel widths {} vs {}", bs[2], ss[2])));
    }
    let (n, s, c) = (bs[0], bs[1], bs[2]);
    let m = ss[1];
    if key_valid.len() != n * m {
        return Err(shape_err("w_mca", format!("{} mask flags for {} keys", key_valid.len(), n * m)));
    }
    let heads = p.heads;
    check_heads(c, heads)?;
    let dh = c / heads;

    let q = p.query.apply(g, base)?;
    let q = g.reshape(q, &[n, s, heads, dh])?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let k = p.key.apply(g, search)?;
    let k = g.reshape(k, &[n, m, heads, dh])?;
    let k = g.permute(k, &[0, 2, 3, 1])?;
    let v = p.value.apply(g, search)?;
    let v = g.reshape(v, &[n, m, heads, dh])?;
    let v = g.permute(v, &[0, 2, 1, 3])?;

    let logits = g.matmul(q, k)?;
    let logits = g.scale(logits, T::one() / T::of_usize(dh).sqrt());
    let logits = if key_valid.iter().all(|&v| v) {
        logits
    } else {
        let mask = Tensor::from_fn(vec![n, heads, s, m], |i| {
            let win = i / (heads * s * m);
            if key_valid[win * m + i % m] {
                T::zero()
            } else {
                T::neg_infinity()
            }
        });
        g.add_const(logits, &mask)?
    };
    let weights = g.softmax(logits, 3)?;
    let out = g.matmul(weights, v)?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[n, s, c])?;
    let output = p.proj.apply(g, out)?;
    Ok(WmcaNodes { output, weights })
}

/// Output of one CAT block evaluation.
#[derive(Clone, Debug)]
pub struct CatBlockNodes {
    pub output: TensorId,
    pub weights: TensorId,
    pub base_layout: Arc<WindowLayout>,
    pub search_layout: Arc<WindowLayout>,
}

fn grid_dims<T: Scalar>(g: &Graph<T>, id: TensorId) -> Result<[usize; 3]> {
    let s = g.shape(id);
    if s.len() != 4 {
        return Err(shape_err("cat_block", format!("expected [D, H, W, C] grid, got {:?}", s)));
    }
    Ok([s[0], s[1], s[2]])
}

/// Cross Attention Transformer block: queries from `b`, keys/values from `s`.
///
/// `x = b + merge(W-MCA(WP(LN(b)), WAP(LN(s))))`, `out = x + MLP(LN(x))`.
pub fn cat_block<T: Scalar>(
    g: &mut Graph<T>,
    b: TensorId,
    s: TensorId,
    p: &AttentionParams<TensorId>,
    cfg: &WindowConfig,
) -> Result<CatBlockNodes> {
    if g.shape(b) != g.shape(s) {
        return Err(shape_err("cat_block", format!("{:?} vs {:?}", g.shape(b), g.shape(s))));
    }
    let dims = grid_dims(g, b)?;
    let base_layout = Arc::new(WindowLayout::base(dims, cfg)?);
    let search_layout = Arc::new(WindowLayout::searching(dims, cfg)?);

    let nb = p.norm1.apply(g, b)?;
    let ns = if s == b { nb } else { p.norm1.apply(g, s)? };
    let wb = partition_node(g, nb, &base_layout)?;
    let ws = partition_node(g, ns, &search_layout)?;
    let att = w_mca(g, wb, ws, &search_layout.valid(), p)?;
    let merged = merge_node(g, att.output, &base_layout)?;
    let x = g.add(b, merged)?;

    let h = p.norm2.apply(g, x)?;
    let h = p.fc1.apply(g, h)?;
    let h = g.gelu(h);
    let h = p.fc2.apply(g, h)?;
    let output = g.add(x, h)?;
    Ok(CatBlockNodes {
        output,
        weights: att.weights,
        base_layout,
        search_layout,
    })
}

/// Per-round results of a fusion module: `(m→f, f→m)` block outputs.
pub type FusionTrace = Vec<(CatBlockNodes, CatBlockNodes)>;

/// `k = rounds.len()` rounds of bidirectional exchange. Within a round both
/// directions use the same parameters and read the pre-round features.
pub fn fusion_module<T: Scalar>(
    g: &mut Graph<T>,
    t_m: TensorId,
    t_f: TensorId,
    rounds: &[AttentionParams<TensorId>],
    cfg: &WindowConfig,
) -> Result<(TensorId, TensorId, FusionTrace)> {
    if rounds.is_empty() {
        return Err(Error::InvalidArgument("fusion module needs at least one round".into()));
    }
    let (mut m, mut f) = (t_m, t_f);
    let mut trace = Vec::with_capacity(rounds.len());
    for p in rounds {
        let to_m = cat_block(g, m, f, p, cfg)?;
        let to_f = cat_block(g, f, m, p, cfg)?;
        m = to_m.output;
        f = to_f.output;
        trace.push((to_m, to_f));
    }
    Ok((m, f, trace))
}

/// Self-attention block for the single-stream ablation: a CAT block whose
/// queries and keys come from the same (channel-concatenated) features.
pub fn no_cross_block<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    p: &AttentionParams<TensorId>,
    cfg: &WindowConfig,
) -> Result<CatBlockNodes> {
    cat_block(g, x, x, p, cfg)
}

/// Attention weights captured from one CAT block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump<T> {
    pub heads: usize,
    /// Queries per window, `s`.
    pub rows: usize,
    /// Keys per window, `μ·s`.
    pub cols: usize,
    pub base_origins: Vec<[isize; 3]>,
    pub search_origins: Vec<[isize; 3]>,
    /// Key validity per window slot, `n·cols`.
    pub key_valid: Vec<bool>,
    /// `[n, heads, rows, cols]`.
    pub weights: Tensor<T>,
}

impl<T: Scalar> AttentionDump<T> {
    pub fn capture(g: &Graph<T>, block: &CatBlockNodes) -> Self {
        let w = g.value(block.weights).clone();
        let s = w.shape().to_vec();
        Self {
            heads: s[1],
            rows: s[2],
            cols: s[3],
            base_origins: block.base_layout.origins.clone(),
            search_origins: block.search_layout.origins.clone(),
            key_valid: block.search_layout.valid(),
            weights: w,
        }
    }

    pub fn windows(&self) -> usize {
        self.base_origins.len()
    }

    /// Row-major `[heads, rows, cols]` block for one window.
    pub fn window(&self, i: usize) -> &[T] {
        let len = self.heads * self.rows * self.cols;
        &self.weights.data()[i * len..(i + 1) * len]
    }
}
