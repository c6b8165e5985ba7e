//! Dense loops behind the graph ops.

use crate::scalar::Scalar;

/// `c += a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Interpolation weights for one sampling point with border clamping.
pub(crate) struct TrilinearStencil<T> {
    lo: [usize; 3],
    hi: [usize; 3],
    frac: [T; 3],
    // coordinate lies inside [0, size-1] and the axis has extent > 1
    live: [bool; 3],
    dims: [usize; 3],
}

impl<T: Scalar> TrilinearStencil<T> {
    pub(crate) fn new(coord: &[T], dims: [usize; 3]) -> Self {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        let mut frac = [T::zero(); 3];
        let mut live = [false; 3];
        for ax in 0..3 {
            let size = dims[ax];
            if size == 1 {
                continue;
            }
            let top = T::of_usize(size - 1);
            let c = coord[ax];
            live[ax] = c >= T::zero() && c <= top;
            let clamped = c.max(T::zero()).min(top);
            let base = clamped.floor().to_usize().unwrap_or(0).min(size - 2);
            lo[ax] = base;
            hi[ax] = base + 1;
            frac[ax] = clamped - T::of_usize(base);
        }
        Self {
            lo,
            hi,
            frac,
            live,
            dims,
        }
    }

    fn offset(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    fn corners(&self) -> [(usize, T); 8] {
        let one = T::one();
        let wd = [one - self.frac[0], self.frac[0]];
        let wh = [one - self.frac[1], self.frac[1]];
        let ww = [one - self.frac[2], self.frac[2]];
        let id = [self.lo[0], self.hi[0]];
        let ih = [self.lo[1], self.hi[1]];
        let iw = [self.lo[2], self.hi[2]];
        let mut out = [(0, T::zero()); 8];
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    out[a * 4 + b * 2 + c] = (self.offset(id[a], ih[b], iw[c]), wd[a] * wh[b] * ww[c]);
                }
            }
        }
        out
    }

    pub(crate) fn sample(&self, vol: &[T]) -> T {
        let mut acc = T::zero();
        for (off, w) in self.corners() {
            acc += w * vol[off];
        }
        acc
    }

    pub(crate) fn scatter(&self, grad: &mut [T], g: T) {
        for (off, w) in self.corners() {
            grad[off] += w * g;
        }
    }

    /// Derivative of the sampled value w.r.t. each coordinate.
    pub(crate) fn coord_grad(&self, vol: &[T]) -> [T; 3] {
        let one = T::one();
        let wd = [one - self.frac[0], self.frac[0]];
        let wh = [one - self.frac[1], self.frac[1]];
        let ww = [one - self.frac[2], self.frac[2]];
        let sign = [-one, one];
        let id = [self.lo[0], self.hi[0]];
        let ih = [self.lo[1], self.hi[1]];
        let iw = [self.lo[2], self.hi[2]];
        let mut out = [T::zero(); 3];
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let v = vol[self.offset(id[a], ih[b], iw[c])];
                    out[0] += sign[a] * wh[b] * ww[c] * v;
                    out[1] += wd[a] * sign[b] * ww[c] * v;
                    out[2] += wd[a] * wh[b] * sign[c] * v;
                }
            }
        }
        for ax in 0..3 {
            if !self.live[ax] {
                out[ax] = T::zero();
            }
        }
        out
    }
}

/// Zero-padded `(2r+1)^3` box sum over the trailing three axes, computed as
/// three separable line sums.
pub(crate) fn box_sum<T: Scalar>(data: &[T], shape: &[usize], radius: usize) -> Vec<T> {
    let rank = shape.len();
    let (d, h, w) = (shape[rank - 3], shape[rank - 2], shape[rank - 1]);
    let vol = d * h * w;
    let mut cur = data.to_vec();
    for (ax, (len, stride)) in [(d, h * w), (h, w), (w, 1)].into_iter().enumerate() {
        let mut next = vec![T::zero(); cur.len()];
        for batch in 0..data.len() / vol.max(1) {
            let base = batch * vol;
            for i in 0..vol {
                let coord = match ax {
                    0 => i / (h * w),
                    1 => (i / w) % h,
                    _ => i % w,
                };
                let lo = coord.saturating_sub(radius);
                let hi = (coord + radius).min(len - 1);
                let line0 = base + i - coord * stride;
                let mut acc = T::zero();
                for j in lo..=hi {
                    acc += cur[line0 + j * stride];
                }
                next[base + i] = acc;
            }
        }
        cur = next;
    }
    cur
}
