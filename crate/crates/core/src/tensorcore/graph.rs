use std::sync::Arc;

use super::kernels;
use super::tensor::{inverse_perm, numel, permute_data, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row index table shared by gather/scatter nodes. `None` selects a zero row.
pub type RowIndex = Arc<[Option<usize>]>;

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, T),
    Offset(TensorId),
    AddConst(TensorId),
    Reshape(TensorId),
    Permute(TensorId, Vec<usize>),
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Narrow {
        input: TensorId,
        axis: usize,
        start: usize,
    },
    Gather {
        input: TensorId,
        index: RowIndex,
        row: usize,
    },
    Scatter {
        input: TensorId,
        index: RowIndex,
        row: usize,
    },
    Sum(TensorId),
    Mean(TensorId),
    MatMul(TensorId, TensorId),
    Softmax {
        input: TensorId,
        axis: usize,
    },
    LayerNorm {
        input: TensorId,
        gain: TensorId,
        bias: TensorId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(TensorId),
    Linear {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    },
    GridSample {
        image: TensorId,
        coords: TensorId,
    },
    BoxSum {
        input: TensorId,
        radius: usize,
    },
}

/// Reverse-mode differentiation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order; `backward` walks it in reverse. Values are immutable
/// once recorded; only gradient buffers change.
pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> TensorId {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        TensorId(self.values.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[TensorId]) -> TensorId {
        let rg = inputs.iter().any(|i| self.requires_grad[i.0]);
        self.push(value, op, rg)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.values[id.0].shape()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.requires_grad[id.0]
    }

    /// Gradient after [`Graph::backward`]. `None` for nodes outside
    /// differentiation; zeros for differentiable nodes the loss never reached.
    pub fn grad(&self, id: TensorId) -> Option<Tensor<T>> {
        if !self.requires_grad[id.0] {
            return None;
        }
        let shape = self.values[id.0].shape().to_vec();
        Some(match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: TensorId, b: TensorId, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<TensorId> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.derived(out, rec, &[a, b]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: TensorId, factor: T) -> TensorId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.derived(out, Op::Scale(a, factor), &[a])
    }

    /// Adds a scalar to every element.
    pub fn offset(&mut self, a: TensorId, shift: T) -> TensorId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| x + shift).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.derived(out, Op::Offset(a), &[a])
    }

    /// Adds a non-differentiable tensor of the same shape (attention masks).
    pub fn add_const(&mut self, a: TensorId, c: &Tensor<T>) -> Result<TensorId> {
        if self.shape(a) != c.shape() {
            return Err(shape_err("add_const", format!("{:?} vs {:?}", self.shape(a), c.shape())));
        }
        let v = self.value(a);
        let data = v.data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.derived(out, Op::AddConst(a), &[a]))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let v = self.value(a);
        if numel(shape) != v.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", v.shape(), shape)));
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.derived(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let out = self.value(a).permute(perm)?;
        Ok(self.derived(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {} for rank {}", axis, base.len())));
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.shape(i);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{:?} vs {:?} on axis {}", s, base, axis)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &i in inputs {
                let len = self.shape(i)[axis] * inner;
                data.extend_from_slice(&self.value(i).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        Ok(self.derived(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("[{}, {}) on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.derived(out, Op::Narrow { input: a, axis, start }, &[a]))
    }

    /// Splits `a` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: TensorId, axis: usize, sizes: &[usize]) -> Result<Vec<TensorId>> {
        let extent = self.shape(a).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != extent {
            return Err(shape_err("split", format!("sizes {:?} for extent {}", sizes, extent)));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Row gather: `a` is viewed as rows of `row` contiguous elements;
    /// output row `j` is input row `index[j]` (zeros for `None`).
    /// Output shape is `[index.len(), row]`.
    pub fn gather_rows(&mut self, a: TensorId, index: RowIndex, row: usize) -> Result<TensorId> {
        let v = self.value(a);
        if row == 0 || !v.numel().is_multiple_of(row) {
            return Err(shape_err("gather", format!("row width {} for {:?}", row, v.shape())));
        }
        let rows_in = v.numel() / row;
        let mut data = vec![T::zero(); index.len() * row];
        for (j, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                if s >= rows_in {
                    return Err(shape_err("gather", format!("row {} out of {}", s, rows_in)));
                }
                data[j * row..(j + 1) * row].copy_from_slice(&v.data()[s * row..(s + 1) * row]);
            }
        }
        let out = Tensor::new(vec![index.len(), row], data)?;
        Ok(self.derived(out, Op::Gather { input: a, index, row }, &[a]))
    }

    /// Row scatter-add, the adjoint of [`Graph::gather_rows`]: input row `j`
    /// is added into output row `index[j]`; `None` rows are dropped.
    /// Output shape is `[rows_out, row]`.
    pub fn scatter_rows(&mut self, a: TensorId, index: RowIndex, row: usize, rows_out: usize) -> Result<TensorId> {
        let v = self.value(a);
        if row == 0 || v.numel() != index.len() * row {
            return Err(shape_err(
                "scatter",
                format!("{} rows of width {} for {:?}", index.len(), row, v.shape()),
            ));
        }
        let mut data = vec![T::zero(); rows_out * row];
        for (j, dst) in index.iter().enumerate() {
            if let Some(d) = *dst {
                if d >= rows_out {
                    return Err(shape_err("scatter", format!("row {} out of {}", d, rows_out)));
                }
                for c in 0..row {
                    data[d * row + c] += v.data()[j * row + c];
                }
            }
        }
        let out = Tensor::new(vec![rows_out, row], data)?;
        Ok(self.derived(out, Op::Scatter { input: a, index, row }, &[a]))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: T = self.value(a).data().iter().copied().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of_usize(v.numel().max(1));
        self.derived(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`. Batch dims must be
    /// equal, or one operand must be a plain matrix (broadcast over batch).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let dims = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..dims.batch {
            let ao = if dims.a_batched { bi * dims.m * dims.k } else { 0 };
            let bo = if dims.b_batched { bi * dims.k * dims.n } else { 0 };
            kernels::mm_nn(
                &va[ao..ao + dims.m * dims.k],
                &vb[bo..bo + dims.k * dims.n],
                &mut out[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n],
                dims.m,
                dims.k,
                dims.n,
            );
        }
        let t = Tensor::new(dims.out_shape.clone(), out)?;
        Ok(self.derived(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {} for rank {}", axis, shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::Softmax { input: a, axis }, &[a]))
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, a: TensorId, gain: TensorId, bias: TensorId, eps: T) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or_else(|| shape_err("layer_norm", "rank 0 input"))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} for width {}", self.shape(gain), self.shape(bias), c),
            ));
        }
        let x = self.value(a).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let tokens = x.len() / c;
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); tokens];
        let mut out = vec![T::zero(); x.len()];
        let cn = T::of_usize(c);
        for t in 0..tokens {
            let row = &x[t * c..(t + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[t] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[t * c + j] = h;
                out[t * c + j] = h * g[j] + b[j];
            }
        }
        let tensor = Tensor::new(shape, out)?;
        Ok(self.derived(
            tensor,
            Op::LayerNorm { input: a, gain, bias, xhat, inv_std },
            &[a, gain, bias],
        ))
    }

    /// GELU, exact erf form.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| kernels::gelu(x)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.derived(out, Op::Gelu(a), &[a])
    }

    /// Affine map over the last axis: `x @ weight + bias`.
    pub fn linear(&mut self, x: TensorId, weight: TensorId, bias: Option<TensorId>) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let c_in = *xs.last().ok_or_else(|| shape_err("linear", "rank 0 input"))?;
        if ws.len() != 2 || ws[0] != c_in {
            return Err(shape_err("linear", format!("input {:?} with weight {:?}", xs, ws)));
        }
        let c_out = ws[1];
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err("linear", format!("bias {:?} for width {}", self.shape(b), c_out)));
            }
        }
        let rows = self.value(x).numel() / c_in;
        let mut out = vec![T::zero(); rows * c_out];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * c_out..(r + 1) * c_out].copy_from_slice(bv);
            }
        }
        kernels::mm_nn(self.value(x).data(), self.value(weight).data(), &mut out, rows, c_in, c_out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = c_out;
        let t = Tensor::new(shape, out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.derived(t, Op::Linear { input: x, weight, bias }, &inputs))
    }

    /// Trilinear sampling of `image` (`[C, D, H, W]`) at absolute voxel
    /// coordinates `coords` (`[.., 3]`, order depth/height/width). Coordinates
    /// clamp to the volume border. Output shape is `[C, ..]`.
    pub fn grid_sample(&mut self, image: TensorId, coords: TensorId) -> Result<TensorId> {
        let is = self.shape(image).to_vec();
        let cs = self.shape(coords).to_vec();
        if is.len() != 4 || cs.last() != Some(&3) {
            return Err(shape_err("grid_sample", format!("image {:?} with coords {:?}", is, cs)));
        }
        let dims = [is[1], is[2], is[3]];
        if dims.contains(&0) {
            return Err(shape_err("grid_sample", "empty image"));
        }
        let points = self.value(coords).numel() / 3;
        let channels = is[0];
        let vol = dims[0] * dims[1] * dims[2];
        let img = self.value(image).data();
        let crd = self.value(coords).data();
        let mut out = vec![T::zero(); channels * points];
        for p in 0..points {
            let s = kernels::TrilinearStencil::new(&crd[p * 3..p * 3 + 3], dims);
            for ch in 0..channels {
                out[ch * points + p] = s.sample(&img[ch * vol..(ch + 1) * vol]);
            }
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(&cs[..cs.len() - 1]);
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::GridSample { image, coords }, &[image, coords]))
    }

    /// Zero-padded box sum over a `(2r+1)^3` cube on the trailing three axes.
    pub fn box_sum(&mut self, a: TensorId, radius: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 3 {
            return Err(shape_err("box_sum", format!("rank {} < 3", shape.len())));
        }
        let out = kernels::box_sum(self.value(a).data(), &shape, radius);
        let t = Tensor::new(shape, out)?;
        Ok(self.derived(t, Op::BoxSum { input: a, radius }, &[a]))
    }

    /// Reverse sweep from a scalar `loss`, replacing any earlier gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.requires_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, f: impl FnOnce(&mut [T])) {
        if !self.requires_grad[id.0] {
            return;
        }
        let n = self.values[id.0].numel();
        let buf = self.grads[id.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf);
    }

    fn propagate(&mut self, node: usize, g: &[T]) {
        let op = self.ops[node].clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, |ga| add_into(ga, g));
                self.accumulate(b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |ga| add_into(ga, g));
                self.accumulate(b, |gb| gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let va = self.values[a.0].data().to_vec();
                let vb = self.values[b.0].data().to_vec();
                self.accumulate(a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                self.accumulate(b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = self.values[b.0].data().to_vec();
                let out = self.values[node].data().to_vec();
                self.accumulate(a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / vb[i];
                    }
                });
                self.accumulate(b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= g[i] * out[i] / vb[i];
                    }
                });
            }
            Op::Scale(a, f) => self.accumulate(a, |ga| {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * f)
            }),
            Op::Offset(a) | Op::AddConst(a) | Op::Reshape(a) => self.accumulate(a, |ga| add_into(ga, g)),
            Op::Permute(a, perm) => {
                let out_shape = self.values[node].shape().to_vec();
                let back = permute_data(g, &out_shape, &inverse_perm(&perm));
                self.accumulate(a, |ga| add_into(ga, &back));
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.values[node].shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis] * inner;
                let mut offset = 0;
                for i in inputs {
                    let len = self.values[i.0].shape()[axis] * inner;
                    self.accumulate(i, |gi| {
                        for o in 0..outer {
                            add_into(&mut gi[o * len..(o + 1) * len], &g[o * total + offset..o * total + offset + len]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.values[input.0].shape().to_vec();
                let len = self.values[node].shape()[axis];
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                self.accumulate(input, |gi| {
                    for o in 0..outer {
                        let base = (o * in_shape[axis] + start) * inner;
                        add_into(&mut gi[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Gather { input, index, row } => self.accumulate(input, |gi| {
                for (j, src) in index.iter().enumerate() {
                    if let Some(s) = *src {
                        add_into(&mut gi[s * row..(s + 1) * row], &g[j * row..(j + 1) * row]);
                    }
                }
            }),
            Op::Scatter { input, index, row } => self.accumulate(input, |gi| {
                for (j, dst) in index.iter().enumerate() {
                    if let Some(d) = *dst {
                        add_into(&mut gi[j * row..(j + 1) * row], &g[d * row..(d + 1) * row]);
                    }
                }
            }),
            Op::Sum(a) => self.accumulate(a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = T::of_usize(self.values[a.0].numel().max(1));
                self.accumulate(a, |ga| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MatMul(a, b) => self.matmul_backward(a, b, g),
            Op::Softmax { input, axis } => {
                let y = self.values[node].data().to_vec();
                let shape = self.values[node].shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                self.accumulate(input, |gi| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                            for j in 0..len {
                                gi[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { input, gain, bias, xhat, inv_std } => {
                let gv = self.values[gain.0].data().to_vec();
                let c = gv.len();
                let tokens = inv_std.len();
                self.accumulate(gain, |gg| {
                    for t in 0..tokens {
                        for j in 0..c {
                            gg[j] += g[t * c + j] * xhat[t * c + j];
                        }
                    }
                });
                self.accumulate(bias, |gb| {
                    for t in 0..tokens {
                        add_into(gb, &g[t * c..(t + 1) * c]);
                    }
                });
                let cn = T::of_usize(c);
                self.accumulate(input, |gi| {
                    for t in 0..tokens {
                        let r = t * c..(t + 1) * c;
                        let dxhat: Vec<T> = g[r.clone()].iter().zip(&gv).map(|(&a, &b)| a * b).collect();
                        let sum_d: T = dxhat.iter().copied().sum();
                        let sum_dx: T = dxhat.iter().zip(&xhat[r.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gi[t * c + j] +=
                                inv_std[t] / cn * (cn * dxhat[j] - sum_d - xhat[t * c + j] * sum_dx);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.values[a.0].data().to_vec();
                self.accumulate(a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * kernels::gelu_grad(x[i]);
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let c_in = self.values[weight.0].shape()[0];
                let c_out = self.values[weight.0].shape()[1];
                let rows = self.values[input.0].numel() / c_in;
                if let Some(b) = bias {
                    self.accumulate(b, |gb| {
                        for r in 0..rows {
                            add_into(gb, &g[r * c_out..(r + 1) * c_out]);
                        }
                    });
                }
                let w = self.values[weight.0].data().to_vec();
                self.accumulate(input, |gi| kernels::mm_nt(g, &w, gi, rows, c_out, c_in));
                let x = self.values[input.0].data().to_vec();
                self.accumulate(weight, |gw| kernels::mm_tn(&x, g, gw, c_in, rows, c_out));
            }
            Op::GridSample { image, coords } => {
                let is = self.values[image.0].shape().to_vec();
                let dims = [is[1], is[2], is[3]];
                let channels = is[0];
                let vol = dims[0] * dims[1] * dims[2];
                let crd = self.values[coords.0].data().to_vec();
                let img = self.values[image.0].data().to_vec();
                let points = crd.len() / 3;
                let stencils: Vec<_> = (0..points)
                    .map(|p| kernels::TrilinearStencil::new(&crd[p * 3..p * 3 + 3], dims))
                    .collect();
                self.accumulate(image, |gi| {
                    for (p, s) in stencils.iter().enumerate() {
                        for ch in 0..channels {
                            s.scatter(&mut gi[ch * vol..(ch + 1) * vol], g[ch * points + p]);
                        }
                    }
                });
                self.accumulate(coords, |gc| {
                    for (p, s) in stencils.iter().enumerate() {
                        for ch in 0..channels {
                            let d = s.coord_grad(&img[ch * vol..(ch + 1) * vol]);
                            for ax in 0..3 {
                                gc[p * 3 + ax] += g[ch * points + p] * d[ax];
                            }
                        }
                    }
                });
            }
            Op::BoxSum { input, radius } => {
                let shape = self.values[node].shape().to_vec();
                let back = kernels::box_sum(g, &shape, radius);
                self.accumulate(input, |gi| add_into(gi, &back));
            }
        }
    }

    fn matmul_backward(&mut self, a: TensorId, b: TensorId, g: &[T]) {
        let dims = matmul_dims(self.shape(a), self.shape(b)).expect("validated in forward");
        let va = self.values[a.0].data().to_vec();
        let vb = self.values[b.0].data().to_vec();
        let (m, k, n) = (dims.m, dims.k, dims.n);
        self.accumulate(a, |ga| {
            for bi in 0..dims.batch {
                let ao = if dims.a_batched { bi * m * k } else { 0 };
                let bo = if dims.b_batched { bi * k * n } else { 0 };
                kernels::mm_nt(&g[bi * m * n..(bi + 1) * m * n], &vb[bo..bo + k * n], &mut ga[ao..ao + m * k], m, n, k);
            }
        });
        self.accumulate(b, |gb| {
            for bi in 0..dims.batch {
                let ao = if dims.a_batched { bi * m * k } else { 0 };
                let bo = if dims.b_batched { bi * k * n } else { 0 };
                kernels::mm_tn(&va[ao..ao + m * k], &g[bi * m * n..(bi + 1) * m * n], &mut gb[bo..bo + k * n], k, m, n);
            }
        });
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", format!("operands must be at least 2-d: {:?} x {:?}", a, b)));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(shape_err("matmul", format!("inner dimensions differ: {:?} x {:?}", a, b)));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch_dims = if ab == bb || bb.is_empty() {
        ab
    } else if ab.is_empty() {
        bb
    } else {
        return Err(shape_err("matmul", format!("batch dimensions differ: {:?} x {:?}", a, b)));
    };
    let mut out_shape = batch_dims.to_vec();
    out_shape.extend([m, n]);
    Ok(MatMulDims {
        batch: batch_dims.iter().product(),
        m,
        k,
        n,
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        out_shape,
    })
}
