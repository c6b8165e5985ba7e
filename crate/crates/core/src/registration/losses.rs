use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensorcore::{Graph, TensorId};

/// Image similarity term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Similarity {
    #[default]
    Mse,
    /// Local normalized cross-correlation over `(2r+1)^3` windows.
    Ncc { radius: usize },
}

/// Variance product floor of the local NCC.
pub const NCC_EPS: f64 = 1e-5;

fn same_shape<T: Scalar>(g: &Graph<T>, a: TensorId, b: TensorId, op: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

pub fn mse_nodes<T: Scalar>(g: &mut Graph<T>, a: TensorId, b: TensorId) -> Result<TensorId> {
    same_shape(g, a, b, "mse")?;
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Negative mean local NCC (squared form) of two `[D, H, W]` volumes:
/// per voxel `cross² / (var_a · var_b + ε)` over a zero-padded cube of
/// `(2r+1)^3` voxels. Identical non-flat volumes give ≈ -1.
pub fn ncc_nodes<T: Scalar>(g: &mut Graph<T>, a: TensorId, b: TensorId, radius: usize) -> Result<TensorId> {
    same_shape(g, a, b, "ncc")?;
    let win = T::of_usize((2 * radius + 1).pow(3));
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let sa = g.box_sum(a, radius)?;
    let sb = g.box_sum(b, radius)?;
    let saa = g.box_sum(aa, radius)?;
    let sbb = g.box_sum(bb, radius)?;
    let sab = g.box_sum(ab, radius)?;
    // cross = Σab - Σa·Σb/N, var = Σa² - (Σa)²/N
    let sa_sb = g.mul(sa, sb)?;
    let sa_sb = g.scale(sa_sb, T::one() / win);
    let cross = g.sub(sab, sa_sb)?;
    let sa2 = g.mul(sa, sa)?;
    let sa2 = g.scale(sa2, T::one() / win);
    let var_a = g.sub(saa, sa2)?;
    let sb2 = g.mul(sb, sb)?;
    let sb2 = g.scale(sb2, T::one() / win);
    let var_b = g.sub(sbb, sb2)?;
    let num = g.mul(cross, cross)?;
    let den = g.mul(var_a, var_b)?;
    let den = g.offset(den, T::of(NCC_EPS));
    let cc = g.div(num, den)?;
    let m = g.mean(cc);
    Ok(g.scale(m, -T::one()))
}

pub fn similarity_nodes<T: Scalar>(g: &mut Graph<T>, warped: TensorId, fixed: TensorId, kind: Similarity) -> Result<TensorId> {
    match kind {
        Similarity::Mse => mse_nodes(g, warped, fixed),
        Similarity::Ncc { radius } => ncc_nodes(g, warped, fixed, radius),
    }
}

/// `λ ·` mean over the three axes of the mean squared forward difference of
/// a `[3, D, H, W]` field.
pub fn smoothness_nodes<T: Scalar>(g: &mut Graph<T>, phi: TensorId, lambda: T) -> Result<TensorId> {
    let s = g.shape(phi).to_vec();
    if s.len() != 4 || s[0] != 3 {
        return Err(shape_err("smoothness", format!("expected [3, D, H, W], got {:?}", s)));
    }
    let mut terms = Vec::new();
    for axis in 1..4 {
        if s[axis] < 2 {
            continue;
        }
        let hi = g.narrow(phi, axis, 1, s[axis] - 1)?;
        let lo = g.narrow(phi, axis, 0, s[axis] - 1)?;
        let d = g.sub(hi, lo)?;
        let sq = g.mul(d, d)?;
        let m = g.mean(sq);
        terms.push(g.reshape(m, &[1])?);
    }
    if terms.is_empty() {
        let zero = g.scale(phi, T::zero());
        let m = g.mean(zero);
        return Ok(m);
    }
    let stacked = g.concat(&terms, 0)?;
    let m = g.mean(stacked);
    let m = g.scale(m, lambda);
    g.reshape(m, &[])
}

/// `1 -` mean soft Dice between one-hot stacks `[L, D, H, W]`.
pub fn soft_dice_loss_nodes<T: Scalar>(g: &mut Graph<T>, warped: TensorId, fixed: TensorId) -> Result<TensorId> {
    same_shape(g, warped, fixed, "soft_dice")?;
    let s = g.shape(warped).to_vec();
    if s.len() != 4 {
        return Err(shape_err("soft_dice", format!("expected [L, D, H, W], got {:?}", s)));
    }
    let mut scores = Vec::with_capacity(s[0]);
    for l in 0..s[0] {
        let a = g.narrow(warped, 0, l, 1)?;
        let b = g.narrow(fixed, 0, l, 1)?;
        let ab = g.mul(a, b)?;
        let inter = g.sum(ab);
        let sa = g.sum(a);
        let sb = g.sum(b);
        let den = g.add(sa, sb)?;
        let den = g.offset(den, T::of(1e-6));
        let num = g.scale(inter, T::of(2.0));
        let d = g.div(num, den)?;
        scores.push(g.reshape(d, &[1])?);
    }
    let all = g.concat(&scores, 0)?;
    let m = g.mean(all);
    let neg = g.scale(m, -T::one());
    Ok(g.offset(neg, T::one()))
}
