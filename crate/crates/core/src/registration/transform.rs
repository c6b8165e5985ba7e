use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensorcore::{Graph, Tensor, TensorId};
use crate::volume::DisplacementField;

/// `[D, H, W, 3]` lattice of voxel coordinates.
pub fn identity_grid<T: Scalar>(dims: [usize; 3]) -> Tensor<T> {
    let mut data = Vec::with_capacity(dims.iter().product::<usize>() * 3);
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                data.extend([T::of_usize(d), T::of_usize(h), T::of_usize(w)]);
            }
        }
    }
    Tensor::new(vec![dims[0], dims[1], dims[2], 3], data).expect("grid shape")
}

/// `out(x) = image(x + φ(x))` with trilinear interpolation and border clamp.
///
/// `image` is `[D, H, W]` or `[C, D, H, W]`; `phi` is `[3, D, H, W]`. The
/// result has the shape of `image`.
pub fn spatial_transform_nodes<T: Scalar>(g: &mut Graph<T>, image: TensorId, phi: TensorId) -> Result<TensorId> {
    let is = g.shape(image).to_vec();
    let ps = g.shape(phi).to_vec();
    let (channels, dims) = match is.len() {
        3 => (1, [is[0], is[1], is[2]]),
        4 => (is[0], [is[1], is[2], is[3]]),
        _ => return Err(shape_err("spatial_transform", format!("image {:?}", is))),
    };
    if ps != [3, dims[0], dims[1], dims[2]] {
        return Err(shape_err(
            "spatial_transform",
            format!("displacement {:?} for image {:?}", ps, is),
        ));
    }
    let img = g.reshape(image, &[channels, dims[0], dims[1], dims[2]])?;
    let disp = g.permute(phi, &[1, 2, 3, 0])?;
    let base = g.constant(identity_grid(dims));
    let coords = g.add(base, disp)?;
    let out = g.grid_sample(img, coords)?;
    g.reshape(out, &is)
}

/// Warps a `[D, H, W]` intensity volume.
pub fn warp_volume<T: Scalar>(moving: &Tensor<T>, phi: &DisplacementField<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let m = g.constant(moving.clone());
    let p = g.constant(phi.data.clone());
    let out = spatial_transform_nodes(&mut g, m, p)?;
    Ok(g.value(out).clone())
}

/// Label-map warp: each label's indicator is warped trilinearly and every
/// voxel takes the label with the largest interpolated weight (lowest label on
/// ties). Unlike nearest-neighbor lookup this responds to sub-voxel motion.
pub fn warp_labels<T: Scalar>(labels: &[u16], phi: &DisplacementField<T>) -> Result<Vec<u16>> {
    let dims = phi.dims();
    let n: usize = dims.iter().product();
    if labels.len() != n {
        return Err(shape_err("warp_labels", format!("{} labels for field over {:?}", labels.len(), dims)));
    }
    let mut set = labels.to_vec();
    set.sort_unstable();
    set.dedup();
    let one_hot = Tensor::from_fn(vec![set.len(), dims[0], dims[1], dims[2]], |i| {
        if labels[i % n] == set[i / n] {
            1.0
        } else {
            0.0
        }
    });
    let mut g = Graph::<f64>::new();
    let img = g.constant(one_hot);
    let p = g.constant(phi.data.cast());
    let out = spatial_transform_nodes(&mut g, img, p)?;
    let w = g.value(out).data();
    Ok((0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..set.len() {
                if w[k * n + i] > w[best * n + i] {
                    best = k;
                }
            }
            set[best]
        })
        .collect())
}
