//! The X-shaped network: two U-shaped token streams (moving, fixed) that
//! exchange information through a fusion module at every encoder and decoder
//! level, followed by a head that turns both streams into a displacement
//! field.
//!
//! Both streams use the same weights, so exchanging the inputs exchanges the
//! streams exactly. Feature grids are channel-last `[D, H, W, C]`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{fusion_module, no_cross_block, AttentionParams, CatBlockNodes};
use crate::error::{shape_err, Error, Result};
use crate::params::Linear;
use crate::scalar::Scalar;
use crate::tensorcore::{Graph, RowIndex, Tensor, TensorId};
use crate::volume::{DisplacementField, Volume};
use crate::windowing::WindowConfig;

/// Patch edge length of the embedding (and the DVF upsampling factor).
pub const PATCH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Input volume extents (D, H, W).
    pub input: [usize; 3],
    /// Channel width after patch embedding, per stream.
    pub embed_channels: usize,
    /// Number of resolution levels; `levels - 1` merges down to the bottleneck.
    pub levels: usize,
    /// Fusion rounds `k` per level.
    pub rounds: usize,
    pub window: WindowConfig,
    /// Attention heads per level.
    pub heads: Vec<usize>,
    /// Single-stream ablation over the channel-concatenated pair.
    pub no_cross: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input: [16, 16, 16],
            embed_channels: 8,
            levels: 2,
            rounds: 1,
            window: WindowConfig::default(),
            heads: vec![2, 2],
            no_cross: false,
        }
    }
}

impl ArchConfig {
    /// Extent divisor required of the input volume.
    pub fn required_divisor(&self) -> usize {
        PATCH << (self.levels.saturating_sub(1))
    }

    /// Channel width at `level` (the no-cross stream is twice as wide).
    pub fn width(&self, level: usize) -> usize {
        let base = if self.no_cross { 2 * self.embed_channels } else { self.embed_channels };
        base << level
    }

    /// Lattice extents at `level`.
    pub fn grid(&self, level: usize) -> [usize; 3] {
        self.input.map(|e| (e / PATCH) >> level)
    }

    fn in_channels(&self) -> usize {
        if self.no_cross {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds (k) must be at least 1".into());
        }
        if self.embed_channels == 0 {
            return bad("embed_channels must be positive".into());
        }
        let div = self.required_divisor();
        if self.input.iter().any(|&e| e == 0 || e % div != 0) {
            return bad(format!(
                "input extents {:?} must be positive multiples of {} for {} levels",
                self.input, div, self.levels
            ));
        }
        if self.heads.len() != self.levels {
            return bad(format!("{} head counts for {} levels", self.heads.len(), self.levels));
        }
        for (l, &h) in self.heads.iter().enumerate() {
            if h == 0 || !self.width(l).is_multiple_of(h) {
                return bad(format!("level {} width {} not divisible by {} heads", l, self.width(l), h));
            }
        }
        self.window.validate()
    }

    /// Closed-form parameter count.
    ///
    /// With `c_l` the width at level `l`, `A(c)` the CAT block count,
    /// `i` the input channel count and `L` the level count:
    /// `8·i·c₀ + c₀` (embed)
    /// `+ k·Σ_{l<L} A(c_l) + k·Σ_{l<L-1} A(c_l)` (encoder, decoder fusion)
    /// `+ Σ_{l<L-1} [(16c_l² + 2c_l) + (16c_l² + 8c_l) + (2c_l² + c_l)]`
    /// (merge, expand, skip projections) `+ 2·C·3 + 3` (head).
    pub fn param_count(&self) -> usize {
        let a = AttentionParams::<Tensor<f32>>::param_count_for;
        let c0 = self.width(0);
        let mut n = PATCH.pow(3) * self.in_channels() * c0 + c0;
        for l in 0..self.levels {
            let c = self.width(l);
            n += self.rounds * a(c);
            if l + 1 < self.levels {
                n += self.rounds * a(c);
                n += 16 * c * c + 2 * c;
                n += 16 * c * c + 8 * c;
                n += 2 * c * c + c;
            }
        }
        n + 2 * self.embed_channels * 3 + 3
    }
}

/// All learned weights of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub embed: Linear<P>,
    /// `[level][round]`.
    pub encoder: Vec<Vec<AttentionParams<P>>>,
    /// Level `l` → `l + 1`.
    pub merges: Vec<Linear<P>>,
    /// Level `l + 1` → `l`.
    pub expands: Vec<Linear<P>>,
    /// Skip fusion at decoder level `l`.
    pub skips: Vec<Linear<P>>,
    /// `[level][round]`, levels `0..levels-1`.
    pub decoder: Vec<Vec<AttentionParams<P>>>,
    pub head: Linear<P>,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        let fusion = |name: &str, levels: &Vec<Vec<AttentionParams<P>>>, f: &mut _| -> Vec<Vec<AttentionParams<Q>>> {
            levels
                .iter()
                .enumerate()
                .map(|(l, rounds)| {
                    rounds
                        .iter()
                        .enumerate()
                        .map(|(r, p)| p.map(&format!("{name}.{l}.{r}"), f))
                        .collect()
                })
                .collect()
        };
        let linears = |name: &str, ls: &Vec<Linear<P>>, f: &mut _| -> Vec<Linear<Q>> {
            ls.iter().enumerate().map(|(l, p)| p.map(&format!("{name}.{l}"), f)).collect()
        };
        ModelParams {
            embed: self.embed.map("embed", f),
            encoder: fusion("encoder", &self.encoder, f),
            merges: linears("merge", &self.merges, f),
            expands: linears("expand", &self.expands, f),
            skips: linears("skip", &self.skips, f),
            decoder: fusion("decoder", &self.decoder, f),
            head: self.head.map("head", f),
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut P)) {
        fn fusion<P>(name: &str, levels: &mut [Vec<AttentionParams<P>>], f: &mut impl FnMut(&str, &mut P)) {
            for (l, rounds) in levels.iter_mut().enumerate() {
                for (r, p) in rounds.iter_mut().enumerate() {
                    p.for_each_mut(&format!("{name}.{l}.{r}"), f);
                }
            }
        }
        fn linears<P>(name: &str, ls: &mut [Linear<P>], f: &mut impl FnMut(&str, &mut P)) {
            for (l, p) in ls.iter_mut().enumerate() {
                p.for_each_mut(&format!("{name}.{l}"), f);
            }
        }
        self.embed.for_each_mut("embed", f);
        fusion("encoder", &mut self.encoder, f);
        linears("merge", &mut self.merges, f);
        linears("expand", &mut self.expands, f);
        linears("skip", &mut self.skips, f);
        fusion("decoder", &mut self.decoder, f);
        self.head.for_each_mut("head", f);
    }

    /// Leaf names in visiting order.
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.map(&mut |n, _| out.push(n.to_string()));
        out
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Fan-in uniform initialization with a zero DVF head.
    pub fn init(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        let mut p = Self::init_random(cfg, seed)?;
        p.head = Linear::zeros(2 * cfg.embed_channels, 3, true);
        Ok(p)
    }

    /// Fan-in uniform initialization of every weight, head included.
    pub fn init_random(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let embed = Linear::init(PATCH.pow(3) * cfg.in_channels(), cfg.width(0), true, rng);
        let fusion = |levels: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Vec<AttentionParams<Tensor<T>>>>> {
            (0..levels)
                .map(|l| {
                    (0..cfg.rounds)
                        .map(|_| AttentionParams::init(cfg.width(l), cfg.heads[l], rng))
                        .collect()
                })
                .collect()
        };
        let encoder = fusion(cfg.levels, rng)?;
        let inner = cfg.levels - 1;
        let merges = (0..inner)
            .map(|l| Linear::init(8 * cfg.width(l), cfg.width(l + 1), true, rng))
            .collect();
        let expands = (0..inner)
            .map(|l| Linear::init(cfg.width(l + 1), 8 * cfg.width(l), true, rng))
            .collect();
        let skips = (0..inner)
            .map(|l| Linear::init(2 * cfg.width(l), cfg.width(l), true, rng))
            .collect();
        let decoder = fusion(inner, rng)?;
        let head = Linear::init(2 * cfg.embed_channels, 3, true, rng);
        Ok(Self {
            embed,
            encoder,
            merges,
            expands,
            skips,
            decoder,
            head,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ModelParams<TensorId> {
        self.map(&mut |_, t| g.param(t.clone()))
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, t| n += t.numel());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.map(&mut |_, t| ok &= t.is_finite());
        ok
    }
}

/// For each coarse cell, its 2×2×2 fine children in lexicographic order.
fn patch_rows(coarse: [usize; 3]) -> RowIndex {
    let fine = coarse.map(|e| e * 2);
    let mut idx = Vec::with_capacity(fine.iter().product());
    for d in 0..coarse[0] {
        for h in 0..coarse[1] {
            for w in 0..coarse[2] {
                for a in 0..2 {
                    for b in 0..2 {
                        for c in 0..2 {
                            idx.push(Some(((2 * d + a) * fine[1] + 2 * h + b) * fine[2] + 2 * w + c));
                        }
                    }
                }
            }
        }
    }
    Arc::from(idx)
}

/// Inverse of [`patch_rows`]: for each fine voxel, its (cell, child) row.
fn unpatch_rows(coarse: [usize; 3]) -> RowIndex {
    let fine = coarse.map(|e| e * 2);
    let mut idx = vec![None; fine.iter().product()];
    for (row, src) in patch_rows(coarse).iter().enumerate() {
        idx[src.expect("dense")] = Some(row);
    }
    Arc::from(idx)
}

fn dims4<T: Scalar>(g: &Graph<T>, x: TensorId, op: &'static str) -> Result<([usize; 3], usize)> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(shape_err(op, format!("expected [D, H, W, C], got {:?}", s)));
    }
    Ok(([s[0], s[1], s[2]], s[3]))
}

/// Groups 2×2×2 neighborhoods of `[D, H, W, C]` into `[D/2, H/2, W/2, 8C]`.
fn space_to_depth<T: Scalar>(g: &mut Graph<T>, x: TensorId, op: &'static str) -> Result<TensorId> {
    let (dims, c) = dims4(g, x, op)?;
    if dims.iter().any(|e| e % 2 != 0) {
        return Err(shape_err(op, format!("extents {:?} are not even", dims)));
    }
    let coarse = dims.map(|e| e / 2);
    let rows = g.gather_rows(x, patch_rows(coarse), c)?;
    g.reshape(rows, &[coarse[0], coarse[1], coarse[2], 8 * c])
}

/// Non-overlapping 2³ patches of a channel-last volume `[D, H, W, C_in]`,
/// linearly projected.
pub fn patch_embed<T: Scalar>(g: &mut Graph<T>, volume: TensorId, p: &Linear<TensorId>) -> Result<TensorId> {
    let x = space_to_depth(g, volume, "patch_embed")?;
    p.apply(g, x)
}

/// Concatenates 2³ neighbors (`8c`) and projects to `2c`, halving extents.
pub fn patch_merge<T: Scalar>(g: &mut Graph<T>, x: TensorId, p: &Linear<TensorId>) -> Result<TensorId> {
    let x = space_to_depth(g, x, "patch_merge")?;
    p.apply(g, x)
}

/// Projects `c → 8·(c/2)` and rearranges the result into a lattice with
/// doubled extents and `c/2` channels.
pub fn patch_expand<T: Scalar>(g: &mut Graph<T>, x: TensorId, p: &Linear<TensorId>) -> Result<TensorId> {
    let (dims, _) = dims4(g, x, "patch_expand")?;
    let y = p.apply(g, x)?;
    let wide = *g.shape(y).last().expect("rank 4");
    if !wide.is_multiple_of(8) {
        return Err(shape_err("patch_expand", format!("projection width {} is not a multiple of 8", wide)));
    }
    let c = wide / 8;
    let cells: usize = dims.iter().product();
    let rows = g.reshape(y, &[cells * 8, c])?;
    let fine = g.gather_rows(rows, unpatch_rows(dims), c)?;
    g.reshape(fine, &[2 * dims[0], 2 * dims[1], 2 * dims[2], c])
}

/// Trilinear ×2 upsampling of a `[C, D, H, W]` node (half-voxel aligned,
/// border clamped).
pub fn upsample2<T: Scalar>(g: &mut Graph<T>, x: TensorId) -> Result<TensorId> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(shape_err("upsample", format!("expected [C, D, H, W], got {:?}", s)));
    }
    let out = [2 * s[1], 2 * s[2], 2 * s[3]];
    let src = |i: usize| T::of((i as f64 + 0.5) / 2.0 - 0.5);
    let mut coords = Vec::with_capacity(out.iter().product::<usize>() * 3);
    for d in 0..out[0] {
        for h in 0..out[1] {
            for w in 0..out[2] {
                coords.extend([src(d), src(h), src(w)]);
            }
        }
    }
    let coords = g.constant(Tensor::new(vec![out[0], out[1], out[2], 3], coords)?);
    g.grid_sample(x, coords)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Encoder(usize),
    Decoder(usize),
}

/// Stream features after the fusion module of one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    pub stage: Stage,
    pub moving: TensorId,
    /// Equal to `moving` for the single-stream variant.
    pub fixed: TensorId,
}

/// Attention evaluations of one stage: `[round] -> (moving-queries,
/// fixed-queries)`; the single-stream variant stores the same block twice.
#[derive(Clone, Debug)]
pub struct StageAttention {
    pub stage: Stage,
    pub rounds: Vec<(CatBlockNodes, CatBlockNodes)>,
}

#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `[3, D, H, W]`.
    pub dvf: TensorId,
    pub features: Vec<StageFeatures>,
    pub attention: Vec<StageAttention>,
}

fn check_volume<T: Scalar>(g: &Graph<T>, v: TensorId, cfg: &ArchConfig) -> Result<()> {
    if g.shape(v) != cfg.input {
        return Err(shape_err(
            "forward",
            format!("volume {:?} does not match configured input {:?}", g.shape(v), cfg.input),
        ));
    }
    Ok(())
}

fn channel_last<T: Scalar>(g: &mut Graph<T>, v: TensorId) -> Result<TensorId> {
    let s = g.shape(v).to_vec();
    g.reshape(v, &[s[0], s[1], s[2], 1])
}

fn dvf_head<T: Scalar>(g: &mut Graph<T>, features: TensorId, p: &Linear<TensorId>) -> Result<TensorId> {
    let y = p.apply(g, features)?;
    let y = g.permute(y, &[3, 0, 1, 2])?;
    upsample2(g, y)
}

/// Dual-stream forward pass on graph nodes holding `[D, H, W]` volumes.
pub fn xmorpher_forward_nodes<T: Scalar>(
    g: &mut Graph<T>,
    moving: TensorId,
    fixed: TensorId,
    p: &ModelParams<TensorId>,
    cfg: &ArchConfig,
) -> Result<ForwardNodes> {
    if cfg.no_cross {
        return Err(Error::InvalidArgument("config selects the no-cross variant".into()));
    }
    cfg.validate()?;
    check_volume(g, moving, cfg)?;
    check_volume(g, fixed, cfg)?;
    let mv = channel_last(g, moving)?;
    let fv = channel_last(g, fixed)?;
    let mut m = patch_embed(g, mv, &p.embed)?;
    let mut f = patch_embed(g, fv, &p.embed)?;

    let mut features = Vec::new();
    let mut attention = Vec::new();
    let mut skips = Vec::new();
    for l in 0..cfg.levels {
        let (m2, f2, trace) = fusion_module(g, m, f, &p.encoder[l], &cfg.window)?;
        (m, f) = (m2, f2);
        let stage = Stage::Encoder(l);
        features.push(StageFeatures { stage, moving: m, fixed: f });
        attention.push(StageAttention { stage, rounds: trace });
        if l + 1 < cfg.levels {
            skips.push((m, f));
            m = patch_merge(g, m, &p.merges[l])?;
            f = patch_merge(g, f, &p.merges[l])?;
        }
    }
    for l in (0..cfg.levels - 1).rev() {
        let (sm, sf) = skips[l];
        m = patch_expand(g, m, &p.expands[l])?;
        f = patch_expand(g, f, &p.expands[l])?;
        let cm = g.concat(&[m, sm], 3)?;
        let cf = g.concat(&[f, sf], 3)?;
        m = p.skips[l].apply(g, cm)?;
        f = p.skips[l].apply(g, cf)?;
        let (m2, f2, trace) = fusion_module(g, m, f, &p.decoder[l], &cfg.window)?;
        (m, f) = (m2, f2);
        let stage = Stage::Decoder(l);
        features.push(StageFeatures { stage, moving: m, fixed: f });
        attention.push(StageAttention { stage, rounds: trace });
    }
    let both = g.concat(&[m, f], 3)?;
    let dvf = dvf_head(g, both, &p.head)?;
    Ok(ForwardNodes { dvf, features, attention })
}

/// Single-stream ablation: the pair is stacked as two input channels and
/// every fusion module is replaced by self-attention blocks.
pub fn no_cross_forward_nodes<T: Scalar>(
    g: &mut Graph<T>,
    moving: TensorId,
    fixed: TensorId,
    p: &ModelParams<TensorId>,
    cfg: &ArchConfig,
) -> Result<ForwardNodes> {
    if !cfg.no_cross {
        return Err(Error::InvalidArgument("config selects the cross-attention variant".into()));
    }
    cfg.validate()?;
    check_volume(g, moving, cfg)?;
    check_volume(g, fixed, cfg)?;
    let mv = channel_last(g, moving)?;
    let fv = channel_last(g, fixed)?;
    let stacked = g.concat(&[mv, fv], 3)?;
    let mut x = patch_embed(g, stacked, &p.embed)?;

    let mut features = Vec::new();
    let mut attention = Vec::new();
    let mut skips = Vec::new();
    let run = |g: &mut Graph<T>, mut x: TensorId, rounds: &[AttentionParams<TensorId>]| -> Result<(TensorId, Vec<(CatBlockNodes, CatBlockNodes)>)> {
        let mut trace = Vec::new();
        for rp in rounds {
            let blk = no_cross_block(g, x, rp, &cfg.window)?;
            x = blk.output;
            trace.push((blk.clone(), blk));
        }
        Ok((x, trace))
    };
    for l in 0..cfg.levels {
        let (y, trace) = run(g, x, &p.encoder[l])?;
        x = y;
        let stage = Stage::Encoder(l);
        features.push(StageFeatures { stage, moving: x, fixed: x });
        attention.push(StageAttention { stage, rounds: trace });
        if l + 1 < cfg.levels {
            skips.push(x);
            x = patch_merge(g, x, &p.merges[l])?;
        }
    }
    for l in (0..cfg.levels - 1).rev() {
        x = patch_expand(g, x, &p.expands[l])?;
        let c = g.concat(&[x, skips[l]], 3)?;
        x = p.skips[l].apply(g, c)?;
        let (y, trace) = run(g, x, &p.decoder[l])?;
        x = y;
        let stage = Stage::Decoder(l);
        features.push(StageFeatures { stage, moving: x, fixed: x });
        attention.push(StageAttention { stage, rounds: trace });
    }
    let dvf = dvf_head(g, x, &p.head)?;
    Ok(ForwardNodes { dvf, features, attention })
}

/// Dispatches on `cfg.no_cross`.
pub fn forward_nodes<T: Scalar>(
    g: &mut Graph<T>,
    moving: TensorId,
    fixed: TensorId,
    p: &ModelParams<TensorId>,
    cfg: &ArchConfig,
) -> Result<ForwardNodes> {
    if cfg.no_cross {
        no_cross_forward_nodes(g, moving, fixed, p, cfg)
    } else {
        xmorpher_forward_nodes(g, moving, fixed, p, cfg)
    }
}

/// Inference-only forward pass on plain volumes.
pub fn predict<T: Scalar>(
    moving: &Volume<T>,
    fixed: &Volume<T>,
    p: &ModelParams<Tensor<T>>,
    cfg: &ArchConfig,
) -> Result<DisplacementField<T>> {
    let mut g = Graph::new();
    let pv = p.map(&mut |_, t| g.constant(t.clone()));
    let m = g.constant(moving.intensities.clone());
    let f = g.constant(fixed.intensities.clone());
    let out = forward_nodes(&mut g, m, f, &pv, cfg)?;
    DisplacementField::new(g.value(out.dvf).clone())
}
