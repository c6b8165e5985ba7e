//! Unsupervised training loop: Adam on `similarity(warp(m, φ), f) + λ·smooth(φ)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::losses::{similarity_nodes, smoothness_nodes, soft_dice_loss_nodes, Similarity};
use super::transform::spatial_transform_nodes;
use crate::architecture::{forward_nodes, ArchConfig, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorcore::{Graph, Tensor, TensorId};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: usize,
    /// Smoothness weight λ.
    pub lambda: f64,
    pub similarity: Similarity,
    pub seed: u64,
    /// Weight of the auxiliary soft Dice term on warped label maps, 0 disables it.
    pub dice_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            iterations: 200,
            lambda: 1.0,
            similarity: Similarity::Mse,
            seed: 0,
            dice_weight: 0.0,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted and leaves the weights untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.dice_weight >= 0.0 && self.dice_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("dice_weight must be >= 0, got {}", self.dice_weight)));
        }
        if let Similarity::Ncc { radius: 0 } = self.similarity {
            return Err(Error::InvalidArgument("ncc radius must be positive".into()));
        }
        Ok(())
    }
}

/// One loss-log row, recorded before the update of that iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub total: f64,
    pub similarity: f64,
    pub smoothness: f64,
}

impl LossRow {
    pub const CSV_HEADER: &'static str = "iteration,total,similarity,smoothness";
}

impl fmt::Display for LossRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.iteration, self.total, self.similarity, self.smoothness)
    }
}

/// Adam, β = (0.9, 0.999), ε = 1e-8.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `grads` follows the visiting order of [`ModelParams::for_each_mut`].
    pub fn update(&mut self, params: &mut ModelParams<Tensor<T>>, grads: &[Tensor<T>]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        if self.lr == 0.0 {
            return;
        }
        let mut k = 0;
        params.for_each_mut(&mut |_, w| {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = T::of(BETA1) * *mi + T::of(1.0 - BETA1) * gi;
            }
            let v = self.v[k].data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = T::of(BETA2) * *vi + T::of(1.0 - BETA2) * gi * gi;
            }
            let (m, v) = (self.m[k].data(), self.v[k].data());
            for ((wi, &mi), &vi) in w.data_mut().iter_mut().zip(m).zip(v) {
                let mh = mi.as_f64() / c1;
                let vh = vi.as_f64() / c2;
                *wi -= T::of(self.lr * mh / (vh.sqrt() + ADAM_EPS));
            }
            k += 1;
        });
    }
}

struct LossNodes {
    total: TensorId,
    similarity: TensorId,
    smoothness: TensorId,
}

fn one_hot<T: Scalar>(labels: &[u16], set: &[u16], dims: [usize; 3]) -> Tensor<T> {
    let n = labels.len();
    Tensor::from_fn(vec![set.len(), dims[0], dims[1], dims[2]], |i| {
        if labels[i % n] == set[i / n] {
            T::one()
        } else {
            T::zero()
        }
    })
}

fn loss_nodes<T: Scalar>(
    g: &mut Graph<T>,
    p: &ModelParams<TensorId>,
    moving: &Volume<T>,
    fixed: &Volume<T>,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<LossNodes> {
    let m = g.constant(moving.intensities.clone());
    let f = g.constant(fixed.intensities.clone());
    let out = forward_nodes(g, m, f, p, arch)?;
    let warped = spatial_transform_nodes(g, m, out.dvf)?;
    let similarity = similarity_nodes(g, warped, f, cfg.similarity)?;
    let smoothness = smoothness_nodes(g, out.dvf, T::of(cfg.lambda))?;
    let mut total = g.add(similarity, smoothness)?;
    if cfg.dice_weight > 0.0 {
        if let (Some(lm), Some(lf)) = (&moving.labels, &fixed.labels) {
            let mut set: Vec<u16> = lm.iter().chain(lf).copied().filter(|&l| l != 0).collect();
            set.sort_unstable();
            set.dedup();
            if !set.is_empty() {
                let dims = moving.dims();
                let om = g.constant(one_hot(lm, &set, dims));
                let of = g.constant(one_hot(lf, &set, dims));
                let wm = spatial_transform_nodes(g, om, out.dvf)?;
                let dice = soft_dice_loss_nodes(g, wm, of)?;
                let dice = g.scale(dice, T::of(cfg.dice_weight));
                total = g.add(total, dice)?;
            }
        }
    }
    Ok(LossNodes {
        total,
        similarity,
        smoothness,
    })
}

/// Loss terms of one pair without updating anything.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<Tensor<T>>,
    moving: &Volume<T>,
    fixed: &Volume<T>,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<LossRow> {
    let mut g = Graph::new();
    let p = params.map(&mut |_, t| g.constant(t.clone()));
    let nodes = loss_nodes(&mut g, &p, moving, fixed, arch, cfg)?;
    Ok(LossRow {
        iteration: 0,
        total: g.value(nodes.total).item().as_f64(),
        similarity: g.value(nodes.similarity).item().as_f64(),
        smoothness: g.value(nodes.smoothness).item().as_f64(),
    })
}

/// Continues training `params` in place, cycling through `pairs`. `on_row`
/// sees every log row as it is produced.
pub fn fit<T: Scalar>(
    params: &mut ModelParams<Tensor<T>>,
    pairs: &[(Volume<T>, Volume<T>)],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&LossRow),
) -> Result<Vec<LossRow>> {
    cfg.validate()?;
    arch.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one pair".into()));
    }
    let mut adam = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (moving, fixed) = &pairs[it % pairs.len()];
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let nodes = loss_nodes(&mut g, &p, moving, fixed, arch, cfg)?;
        let row = LossRow {
            iteration: it,
            total: g.value(nodes.total).item().as_f64(),
            similarity: g.value(nodes.similarity).item().as_f64(),
            smoothness: g.value(nodes.smoothness).item().as_f64(),
        };
        if !row.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                loss: row.total,
            });
        }
        g.backward(nodes.total)?;
        let mut grads = Vec::new();
        p.map(&mut |_, &id| grads.push(g.grad(id).expect("parameter gradient")));
        adam.update(params, &grads);
        on_row(&row);
        log.push(row);
    }
    Ok(log)
}

/// Seeded zero-head initialization followed by [`fit`].
pub fn train<T: Scalar>(
    pairs: &[(Volume<T>, Volume<T>)],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams<Tensor<T>>, Vec<LossRow>)> {
    let mut params = ModelParams::init(arch, cfg.seed)?;
    let log = fit(&mut params, pairs, arch, cfg, |_| {})?;
    Ok((params, log))
}
