//! Window-size sweep: retrain at each base window size and report
//! registration quality and forward cost.

use std::time::Instant;

use super::metrics::{dsc, jacobian_nonpositive_fraction};
use super::train::{train, TrainConfig};
use super::transform::warp_labels;
use crate::architecture::{predict, ArchConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    /// Cubic base window extent.
    pub size: usize,
    pub dsc: f64,
    pub jac_pct: f64,
    /// Mean wall time of one inference forward pass.
    pub forward_ms: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "size,dsc,jac_pct,forward_ms";

    pub fn csv(&self) -> String {
        format!("{},{:.6},{:.6},{:.3}", self.size, self.dsc, self.jac_pct, self.forward_ms)
    }
}

/// Trains one model per window size on `(moving, fixed)` (both labelled) and
/// evaluates it on the same pair.
pub fn window_sweep<T: Scalar>(
    moving: &Volume<T>,
    fixed: &Volume<T>,
    labels: &[u16],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    sizes: &[usize],
    forward_reps: usize,
) -> Result<Vec<SweepRow>> {
    let (Some(lm), Some(lf)) = (&moving.labels, &fixed.labels) else {
        return Err(Error::InvalidArgument("sweep needs labelled volumes".into()));
    };
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one window size".into()));
    }
    let pair = [(moving.clone(), fixed.clone())];
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut a = arch.clone();
        a.window.base = [size; 3];
        a.validate()?;
        let (params, _) = train(&pair, &a, cfg)?;
        let reps = forward_reps.max(1);
        let start = Instant::now();
        let mut phi = predict(moving, fixed, &params, &a)?;
        for _ in 1..reps {
            phi = predict(moving, fixed, &params, &a)?;
        }
        let forward_ms = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
        rows.push(SweepRow {
            size,
            dsc: dsc(&warp_labels(lm, &phi)?, lf, labels)?,
            jac_pct: jacobian_nonpositive_fraction(&phi)?,
            forward_ms,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::synth::{synth_pair, SynthConfig};
    use crate::windowing::WindowConfig;

    #[test]
    fn one_row_per_size() {
        let p = synth_pair::<f64>(2, [8, 8, 8], &SynthConfig::default()).unwrap();
        let arch = ArchConfig {
            input: [8, 8, 8],
            embed_channels: 4,
            levels: 2,
            rounds: 1,
            window: WindowConfig::default(),
            heads: vec![1, 1],
            no_cross: false,
        };
        let cfg = TrainConfig {
            iterations: 2,
            ..TrainConfig::default()
        };
        let rows = window_sweep(&p.moving, &p.fixed, &p.labels(), &arch, &cfg, &[1, 2], 1).unwrap();
        assert_eq!(rows.iter().map(|r| r.size).collect::<Vec<_>>(), vec![1, 2]);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.dsc) && r.forward_ms >= 0.0));
        assert_eq!(rows[0].csv().split(',').count(), 4);
        let unlabeled = Volume::new(p.moving.intensities.clone()).unwrap();
        assert!(window_sweep(&unlabeled, &p.fixed, &p.labels(), &arch, &cfg, &[1], 1).is_err());
    }
}
