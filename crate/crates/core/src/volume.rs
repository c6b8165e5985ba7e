use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensorcore::Tensor;

/// Scalar intensity volume with an optional label map, unit isotropic spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    /// `[D, H, W]`.
    pub intensities: Tensor<T>,
    pub labels: Option<Vec<u16>>,
}

impl<T: Scalar> Volume<T> {
    pub fn new(intensities: Tensor<T>) -> Result<Self> {
        if intensities.rank() != 3 {
            return Err(shape_err("volume", format!("expected [D, H, W], got {:?}", intensities.shape())));
        }
        if !intensities.is_finite() {
            return Err(Error::InvalidArgument("volume intensities must be finite".into()));
        }
        Ok(Self {
            intensities,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.intensities.numel() {
            return Err(shape_err(
                "volume",
                format!("{} labels for {} voxels", labels.len(), self.intensities.numel()),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.intensities.shape();
        [s[0], s[1], s[2]]
    }
}

/// Dense displacement field `[3, D, H, W]` in voxel units, channel order
/// (Δdepth, Δheight, Δwidth).
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> DisplacementField<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(shape_err("displacement field", format!("expected [3, D, H, W], got {:?}", s)));
        }
        Ok(Self { data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            data: Tensor::zeros(vec![3, dims[0], dims[1], dims[2]]),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    /// Component `axis` (0 = depth, 1 = height, 2 = width).
    pub fn component(&self, axis: usize) -> &[T] {
        let n = self.dims().iter().product::<usize>();
        &self.data.data()[axis * n..(axis + 1) * n]
    }
}
