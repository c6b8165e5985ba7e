use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::volume::DisplacementField;

/// Mean Dice coefficient `2|A∩B| / (|A| + |B|)` over `labels`. Labels absent
/// from both maps are left out of the mean; if every label is absent the
/// maps agree and the score is 1.
pub fn dsc(a: &[u16], b: &[u16], labels: &[u16]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("dice needs at least one label".into()));
    }
    if a.len() != b.len() {
        return Err(shape_err("dsc", format!("{} vs {} voxels", a.len(), b.len())));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for &l in labels {
        let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.iter().zip(b) {
            let (ia, ib) = (x == l, y == l);
            na += ia as usize;
            nb += ib as usize;
            both += (ia && ib) as usize;
        }
        if na + nb == 0 {
            continue;
        }
        total += 2.0 * both as f64 / (na + nb) as f64;
        counted += 1;
    }
    Ok(if counted == 0 { 1.0 } else { total / counted as f64 })
}

/// Percentage of interior voxels where `det(I + ∇φ) ≤ 0`, with `∇φ` taken by
/// central differences.
pub fn jacobian_nonpositive_fraction<T: Scalar>(phi: &DisplacementField<T>) -> Result<f64> {
    let dims = phi.dims();
    if dims.iter().any(|&e| e < 3) {
        return Err(Error::InvalidArgument(format!(
            "jacobian needs every extent >= 3, got {:?}",
            dims
        )));
    }
    let comps = [phi.component(0), phi.component(1), phi.component(2)];
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut folded = 0usize;
    let mut interior = 0usize;
    for d in 1..dims[0] - 1 {
        for h in 1..dims[1] - 1 {
            for w in 1..dims[2] - 1 {
                let i = d * strides[0] + h * strides[1] + w;
                let mut j = [[0.0f64; 3]; 3];
                for (r, comp) in comps.iter().enumerate() {
                    for (c, &s) in strides.iter().enumerate() {
                        let grad = (comp[i + s].as_f64() - comp[i - s].as_f64()) / 2.0;
                        j[r][c] = grad + if r == c { 1.0 } else { 0.0 };
                    }
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                folded += (det <= 0.0) as usize;
                interior += 1;
            }
        }
    }
    Ok(100.0 * folded as f64 / interior as f64)
}
