//! Seeded synthetic registration pairs: a nested-ellipsoid phantom and a
//! smooth random deformation of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::jacobian_nonpositive_fraction;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorcore::Tensor;
use crate::volume::{DisplacementField, Volume};

/// Phantom structures from outermost to innermost: `(label, intensity)`.
pub const STRUCTURES: [(u16, f64); 3] = [(1, 0.35), (2, 0.65), (3, 1.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Largest absolute forward difference of any displacement component.
    pub max_gradient: f64,
    /// Gaussian smoothing width of the random field, in voxels.
    pub sigma: f64,
    /// Standard deviation of additive intensity noise.
    pub noise: f64,
    /// Bound on the random global translation added to the field, per axis.
    pub max_shift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            max_gradient: 0.35,
            sigma: 2.0,
            noise: 0.01,
            max_shift: 1.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_gradient > 0.0 && self.max_gradient < 0.4) {
            return Err(Error::InvalidArgument(format!(
                "max_gradient must lie in (0, 0.4), got {}",
                self.max_gradient
            )));
        }
        if !(self.sigma > 0.0) || !(self.noise >= 0.0) || !(self.max_shift >= 0.0) {
            return Err(Error::InvalidArgument(
                "sigma must be positive, noise and max_shift non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `moving(x) = phantom(x + φ_gt(x))`, `fixed(x) = phantom(x)`; both carry
/// label maps.
#[derive(Clone, Debug)]
pub struct SyntheticPair<T> {
    pub moving: Volume<T>,
    pub fixed: Volume<T>,
    pub phi_gt: DisplacementField<T>,
}

impl<T: Scalar> SyntheticPair<T> {
    pub fn labels(&self) -> Vec<u16> {
        STRUCTURES.iter().map(|s| s.0).collect()
    }
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

struct Phantom {
    shells: Vec<Ellipsoid>,
}

impl Phantom {
    fn random(dims: [usize; 3], rng: &mut impl Rng) -> Self {
        let center: [f64; 3] = std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0 + rng.gen_range(-0.5..0.5));
        let fractions = [0.38, 0.26, 0.14];
        let shells = fractions
            .iter()
            .map(|&f| Ellipsoid {
                center,
                axes: std::array::from_fn(|a| (dims[a] as f64 * f * rng.gen_range(0.85..1.15)).max(0.75)),
            })
            .collect();
        Self { shells }
    }

    fn intensity(&self, p: [f64; 3]) -> f64 {
        let mut prev = 0.0;
        let mut v = 0.0;
        for (shell, &(_, level)) in self.shells.iter().zip(&STRUCTURES) {
            // approximate signed distance in voxels, edge width about one voxel
            let dist = (shell.radius(p) - 1.0) * shell.axes.iter().cloned().fold(f64::INFINITY, f64::min);
            let inside = 1.0 / (1.0 + (2.0 * dist).exp());
            v += (level - prev) * inside;
            prev = level;
        }
        v
    }

    fn label(&self, p: [f64; 3]) -> u16 {
        let mut l = 0;
        for (shell, &(label, _)) in self.shells.iter().zip(&STRUCTURES) {
            if shell.radius(p) < 1.0 {
                l = label;
            }
        }
        l
    }
}

/// Separable Gaussian blur of a `[D, H, W]` array with periodic boundaries.
fn gaussian_blur(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut out = vec![0.0; data.len()];
    for axis in 0..3 {
        for (i, o) in out.iter_mut().enumerate() {
            let pos = (i / strides[axis]) % dims[axis];
            let base = i - pos * strides[axis];
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let q = (pos as isize + k as isize - r).rem_euclid(dims[axis] as isize) as usize;
                acc += w * data[base + q * strides[axis]];
            }
            *o = acc / norm;
        }
        data.copy_from_slice(&out);
    }
}

fn max_forward_difference(field: &[f64], dims: [usize; 3]) -> f64 {
    let n: usize = dims.iter().product();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut m: f64 = 0.0;
    for c in 0..3 {
        let comp = &field[c * n..(c + 1) * n];
        for i in 0..n {
            for a in 0..3 {
                if (i / strides[a]) % dims[a] + 1 < dims[a] {
                    m = m.max((comp[i + strides[a]] - comp[i]).abs());
                }
            }
        }
    }
    m
}

fn random_field(dims: [usize; 3], cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut field = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        let mut comp: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        gaussian_blur(&mut comp, dims, cfg.sigma);
        field.extend(comp);
    }
    let m = max_forward_difference(&field, dims);
    if m > 0.0 {
        let s = cfg.max_gradient / m;
        field.iter_mut().for_each(|v| *v *= s);
    }
    for c in 0..3 {
        let shift = if cfg.max_shift > 0.0 {
            rng.gen_range(-cfg.max_shift..=cfg.max_shift)
        } else {
            0.0
        };
        field[c * n..(c + 1) * n].iter_mut().for_each(|v| *v += shift);
    }
    field
}

/// Deterministic in `seed`. The ground-truth field is a smoothed random field
/// plus a global translation; its non-constant part is shrunk until the
/// Jacobian determinant is positive on every interior voxel.
pub fn synth_pair<T: Scalar>(seed: u64, dims: [usize; 3], cfg: &SynthConfig) -> Result<SyntheticPair<T>> {
    cfg.validate()?;
    if dims.iter().any(|&e| e < 3) {
        return Err(Error::InvalidArgument(format!("synthetic extents must be >= 3, got {:?}", dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phantom = Phantom::random(dims, &mut rng);
    let n: usize = dims.iter().product();
    let mut field = random_field(dims, cfg, &mut rng);
    let shape = vec![3, dims[0], dims[1], dims[2]];
    let phi_gt = loop {
        let phi = DisplacementField::new(Tensor::new(shape.clone(), field.clone())?)?;
        if jacobian_nonpositive_fraction(&phi)? == 0.0 {
            break phi;
        }
        for c in 0..3 {
            let comp = &mut field[c * n..(c + 1) * n];
            let mean = comp.iter().sum::<f64>() / n as f64;
            comp.iter_mut().for_each(|v| *v = mean + 0.8 * (*v - mean));
        }
    };

    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let (mut im, mut lm, mut if_, mut lf) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let mut i = 0;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let x = [d as f64, h as f64, w as f64];
                let warped: [f64; 3] = std::array::from_fn(|a| x[a] + field[a * n + i]);
                let (nm, nf) = if cfg.noise > 0.0 {
                    (noise.sample(&mut rng), noise.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                im.push(T::of(phantom.intensity(warped) + nm));
                lm.push(phantom.label(warped));
                if_.push(T::of(phantom.intensity(x) + nf));
                lf.push(phantom.label(x));
                i += 1;
            }
        }
    }
    let moving = Volume::new(Tensor::new(dims.to_vec(), im)?)?.with_labels(lm)?;
    let fixed = Volume::new(Tensor::new(dims.to_vec(), if_)?)?.with_labels(lf)?;
    Ok(SyntheticPair {
        moving,
        fixed,
        phi_gt: DisplacementField::new(phi_gt.data.cast())?,
    })
}
