//! Base and searching window partitions of a token lattice.
//!
//! Feature grids are stored channel-last, `[D, H, W, C]`. A base partition
//! tiles the (zero-padded) lattice with non-overlapping `h×w×d` windows. A
//! searching partition produces one enlarged `αh×βw×γd` window per base
//! window, centered on it, so both sets have the same count `n`. Tokens that
//! fall outside the lattice are zero-filled and flagged invalid.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensorcore::{Graph, RowIndex, Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Base window extents along depth, height, width.
    pub base: [usize; 3],
    /// Searching-window magnification per axis; odd so the searching window
    /// centers on its base window.
    pub magnification: [usize; 3],
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            base: [2, 2, 2],
            magnification: [3, 3, 3],
        }
    }
}

impl WindowConfig {
    pub fn new(base: [usize; 3], magnification: [usize; 3]) -> Result<Self> {
        let cfg = Self { base, magnification };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "window extents must be positive, got {:?}",
                self.base
            )));
        }
        if self.magnification.iter().any(|&m| m == 0 || m % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "magnifications must be positive odd integers, got {:?}",
                self.magnification
            )));
        }
        Ok(())
    }

    pub fn searching(&self) -> [usize; 3] {
        [
            self.base[0] * self.magnification[0],
            self.base[1] * self.magnification[1],
            self.base[2] * self.magnification[2],
        ]
    }

    /// Tokens per base window, `s = h·w·d`.
    pub fn base_volume(&self) -> usize {
        self.base.iter().product()
    }

    /// `μ = α·β·γ`.
    pub fn mu(&self) -> usize {
        self.magnification.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Base,
    Searching,
}

/// Index plan mapping window slots to lattice tokens.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub kind: WindowKind,
    /// Unpadded lattice extents.
    pub grid: [usize; 3],
    /// Lattice extents rounded up to whole base windows.
    pub padded: [usize; 3],
    /// Windows along each axis.
    pub counts: [usize; 3],
    /// Extents of one window of this kind.
    pub window: [usize; 3],
    /// Lattice coordinate of each window's first token (may be negative for
    /// searching windows).
    pub origins: Vec<[isize; 3]>,
    /// Source token for every window slot, window-major; `None` is padding.
    pub index: RowIndex,
}

impl WindowLayout {
    pub fn base(grid: [usize; 3], cfg: &WindowConfig) -> Result<Self> {
        Self::build(grid, cfg, WindowKind::Base)
    }

    pub fn searching(grid: [usize; 3], cfg: &WindowConfig) -> Result<Self> {
        Self::build(grid, cfg, WindowKind::Searching)
    }

    fn build(grid: [usize; 3], cfg: &WindowConfig, kind: WindowKind) -> Result<Self> {
        cfg.validate()?;
        if grid.contains(&0) {
            return Err(Error::InvalidArgument(format!("empty feature grid {:?}", grid)));
        }
        let counts: [usize; 3] = std::array::from_fn(|a| grid[a].div_ceil(cfg.base[a]));
        let padded: [usize; 3] = std::array::from_fn(|a| counts[a] * cfg.base[a]);
        let (window, shift): ([usize; 3], [isize; 3]) = match kind {
            WindowKind::Base => (cfg.base, [0; 3]),
            WindowKind::Searching => (
                cfg.searching(),
                std::array::from_fn(|a| ((cfg.magnification[a] - 1) * cfg.base[a] / 2) as isize),
            ),
        };
        let n = counts.iter().product::<usize>();
        let tokens = window.iter().product::<usize>();
        let mut origins = Vec::with_capacity(n);
        let mut index = Vec::with_capacity(n * tokens);
        for wd in 0..counts[0] {
            for wh in 0..counts[1] {
                for ww in 0..counts[2] {
                    let origin = [
                        (wd * cfg.base[0]) as isize - shift[0],
                        (wh * cfg.base[1]) as isize - shift[1],
                        (ww * cfg.base[2]) as isize - shift[2],
                    ];
                    origins.push(origin);
                    for d in 0..window[0] {
                        for h in 0..window[1] {
                            for w in 0..window[2] {
                                let p = [
                                    origin[0] + d as isize,
                                    origin[1] + h as isize,
                                    origin[2] + w as isize,
                                ];
                                let inside = (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < grid[a]);
                                index.push(inside.then(|| {
                                    (p[0] as usize * grid[1] + p[1] as usize) * grid[2] + p[2] as usize
                                }));
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            kind,
            grid,
            padded,
            counts,
            window,
            origins,
            index: Arc::from(index),
        })
    }

    /// Number of windows `n`.
    pub fn count(&self) -> usize {
        self.origins.len()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    /// Per-slot validity flags (false for padding / out-of-lattice tokens).
    pub fn valid(&self) -> Vec<bool> {
        self.index.iter().map(Option::is_some).collect()
    }

    fn grid_tokens(&self) -> usize {
        self.grid.iter().product()
    }

    /// For every lattice token, the window slot holding it. Only defined for
    /// base layouts, where each token appears exactly once.
    pub fn inverse(&self) -> Result<RowIndex> {
        if self.kind != WindowKind::Base {
            return Err(Error::InvalidArgument("merge requires a base window layout".into()));
        }
        let mut inv = vec![None; self.grid_tokens()];
        for (slot, src) in self.index.iter().enumerate() {
            if let Some(s) = *src {
                inv[s] = Some(slot);
            }
        }
        Ok(Arc::from(inv))
    }
}

/// Windows extracted from one feature grid.
#[derive(Clone, Debug)]
pub struct WindowSet<T> {
    pub layout: Arc<WindowLayout>,
    /// `[n, tokens_per_window, C]`.
    pub tokens: Tensor<T>,
}

impl<T: Scalar> WindowSet<T> {
    pub fn kind(&self) -> WindowKind {
        self.layout.kind
    }

    pub fn count(&self) -> usize {
        self.layout.count()
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[2]
    }
}

fn grid_dims<T: Scalar>(grid: &Tensor<T>) -> Result<([usize; 3], usize)> {
    let s = grid.shape();
    if s.len() != 4 {
        return Err(shape_err("window", format!("expected [D, H, W, C] grid, got {:?}", s)));
    }
    if s.contains(&0) {
        return Err(Error::InvalidArgument(format!("empty feature grid {:?}", s)));
    }
    Ok(([s[0], s[1], s[2]], s[3]))
}

fn extract<T: Scalar>(grid: &Tensor<T>, layout: WindowLayout) -> WindowSet<T> {
    let c = grid.shape()[3];
    let mut data = vec![T::zero(); layout.index.len() * c];
    for (slot, src) in layout.index.iter().enumerate() {
        if let Some(s) = *src {
            data[slot * c..(slot + 1) * c].copy_from_slice(&grid.data()[s * c..(s + 1) * c]);
        }
    }
    let shape = vec![layout.count(), layout.tokens_per_window(), c];
    WindowSet {
        tokens: Tensor::new(shape, data).expect("window tokens"),
        layout: Arc::new(layout),
    }
}

/// Non-overlapping base windows (WP).
pub fn window_partition<T: Scalar>(grid: &Tensor<T>, cfg: &WindowConfig) -> Result<WindowSet<T>> {
    let (dims, _) = grid_dims(grid)?;
    Ok(extract(grid, WindowLayout::base(dims, cfg)?))
}

/// Enlarged searching windows, one per base window (WAP).
pub fn window_area_partition<T: Scalar>(grid: &Tensor<T>, cfg: &WindowConfig) -> Result<WindowSet<T>> {
    let (dims, _) = grid_dims(grid)?;
    Ok(extract(grid, WindowLayout::searching(dims, cfg)?))
}

/// Inverse of [`window_partition`]; padding is dropped.
pub fn window_merge<T: Scalar>(ws: &WindowSet<T>, grid: [usize; 3]) -> Result<Tensor<T>> {
    let layout = &ws.layout;
    if layout.grid != grid {
        return Err(shape_err(
            "window_merge",
            format!("layout built for {:?}, asked to merge into {:?}", layout.grid, grid),
        ));
    }
    let expected = [layout.count(), layout.tokens_per_window()];
    if ws.tokens.rank() != 3 || ws.tokens.shape()[..2] != expected {
        return Err(shape_err(
            "window_merge",
            format!("tokens {:?} for {} windows of {}", ws.tokens.shape(), expected[0], expected[1]),
        ));
    }
    let inv = layout.inverse()?;
    let c = ws.channels();
    let mut data = vec![T::zero(); inv.len() * c];
    for (tok, slot) in inv.iter().enumerate() {
        let slot = slot.expect("base layout covers every token");
        data[tok * c..(tok + 1) * c].copy_from_slice(&ws.tokens.data()[slot * c..(slot + 1) * c]);
    }
    Tensor::new(vec![grid[0], grid[1], grid[2], c], data)
}

/// Graph form of the partitions: `[D, H, W, C]` node to `[n, t, C]` node.
pub fn partition_node<T: Scalar>(g: &mut Graph<T>, grid: TensorId, layout: &WindowLayout) -> Result<TensorId> {
    let s = g.shape(grid).to_vec();
    if s.len() != 4 || s[..3] != layout.grid {
        return Err(shape_err("window", format!("grid {:?} for layout over {:?}", s, layout.grid)));
    }
    let c = s[3];
    let rows = g.gather_rows(grid, layout.index.clone(), c)?;
    g.reshape(rows, &[layout.count(), layout.tokens_per_window(), c])
}

/// Graph form of [`window_merge`].
pub fn merge_node<T: Scalar>(g: &mut Graph<T>, windows: TensorId, layout: &WindowLayout) -> Result<TensorId> {
    let s = g.shape(windows).to_vec();
    if s.len() != 3 || s[0] != layout.count() || s[1] != layout.tokens_per_window() {
        return Err(shape_err("window_merge", format!("tokens {:?} for layout", s)));
    }
    let c = s[2];
    let rows = g.gather_rows(windows, layout.inverse()?, c)?;
    g.reshape(rows, &[layout.grid[0], layout.grid[1], layout.grid[2], c])
}
