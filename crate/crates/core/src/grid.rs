//! Layered occupancy grid: static map, forecast people, planner-injected
//! obstacles.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Point2, Trajectory};

/// Slack on geometric membership tests, so cells exactly on a boundary
/// are classified the same way wherever the shape sits.
pub const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("resolution must be positive and finite, got {0}")]
    Resolution(f64),
    #[error("grid must have at least one cell ({width}x{height})")]
    Empty { width: usize, height: usize },
    #[error("static mask has {got} cells, expected {expected}")]
    MaskSize { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub ix: usize,
    pub iy: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LayerFlags {
    pub static_: bool,
    pub predicted: bool,
    pub artificial: bool,
}

impl LayerFlags {
    pub fn any(&self) -> bool {
        self.static_ || self.predicted || self.artificial
    }
}

/// Which layers count as blocked when building a planning mask.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskOptions {
    pub skip_predicted: bool,
    pub skip_artificial: bool,
    /// People whose forecast cells are ignored.
    pub ignored_peds: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    origin: Point2,
    resolution: f64,
    width: usize,
    height: usize,
    static_cells: Vec<bool>,
    predicted: BTreeMap<u64, BTreeSet<usize>>,
    artificial: BTreeMap<u64, BTreeSet<usize>>,
    next_obstacle_id: u64,
}

impl OccupancyGrid {
    pub fn new(origin: Point2, resolution: f64, width: usize, height: usize) -> Result<Self, GridError> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(GridError::Resolution(resolution));
        }
        if width == 0 || height == 0 {
            return Err(GridError::Empty { width, height });
        }
        Ok(Self {
            origin,
            resolution,
            width,
            height,
            static_cells: vec![false; width * height],
            predicted: BTreeMap::new(),
            artificial: BTreeMap::new(),
            next_obstacle_id: 1,
        })
    }

    /// Builds a grid whose static layer is `mask` (row-major, y rows).
    pub fn with_static_mask(
        origin: Point2,
        resolution: f64,
        width: usize,
        height: usize,
        mask: Vec<bool>,
    ) -> Result<Self, GridError> {
        let mut g = Self::new(origin, resolution, width, height)?;
        if mask.len() != width * height {
            return Err(GridError::MaskSize { expected: width * height, got: mask.len() });
        }
        g.static_cells = mask;
        Ok(g)
    }

    pub fn origin(&self) -> Point2 {
        self.origin
    }
    pub fn resolution(&self) -> f64 {
        self.resolution
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn len(&self) -> usize {
        self.width * self.height
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, c: Cell) -> usize {
        c.iy * self.width + c.ix
    }

    #[inline]
    pub fn cell_of_index(&self, i: usize) -> Cell {
        Cell { ix: i % self.width, iy: i / self.width }
    }

    pub fn cell_at(&self, p: Point2) -> Option<Cell> {
        let fx = ((p.x - self.origin.x) / self.resolution).floor();
        let fy = ((p.y - self.origin.y) / self.resolution).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.width as f64 || fy >= self.height as f64 {
            return None;
        }
        Some(Cell { ix: fx as usize, iy: fy as usize })
    }

    /// Signed cell coordinates, possibly outside the grid.
    pub fn cell_coords(&self, p: Point2) -> (i64, i64) {
        (
            ((p.x - self.origin.x) / self.resolution).floor() as i64,
            ((p.y - self.origin.y) / self.resolution).floor() as i64,
        )
    }

    pub fn checked_cell(&self, ix: i64, iy: i64) -> Option<Cell> {
        if ix < 0 || iy < 0 || ix >= self.width as i64 || iy >= self.height as i64 {
            None
        } else {
            Some(Cell { ix: ix as usize, iy: iy as usize })
        }
    }

    pub fn center(&self, c: Cell) -> Point2 {
        Point2::new(
            self.origin.x + (c.ix as f64 + 0.5) * self.resolution,
            self.origin.y + (c.iy as f64 + 0.5) * self.resolution,
        )
    }

    pub fn contains(&self, p: Point2) -> bool {
        self.cell_at(p).is_some()
    }

    pub fn set_static(&mut self, c: Cell, blocked: bool) {
        let i = self.index(c);
        self.static_cells[i] = blocked;
    }

    pub fn is_static(&self, c: Cell) -> bool {
        self.static_cells[self.index(c)]
    }

    pub fn static_mask(&self) -> &[bool] {
        &self.static_cells
    }

    pub fn flags(&self, c: Cell) -> LayerFlags {
        let i = self.index(c);
        LayerFlags {
            static_: self.static_cells[i],
            predicted: self.predicted.values().any(|s| s.contains(&i)),
            artificial: self.artificial.values().any(|s| s.contains(&i)),
        }
    }

    pub fn is_blocked(&self, c: Cell) -> bool {
        self.flags(c).any()
    }

    // --- predicted layer ---

    pub fn mark_predicted(&mut self, ped_id: u64, cells: impl IntoIterator<Item = usize>) {
        self.predicted.entry(ped_id).or_default().extend(cells);
    }

    pub fn clear_predicted(&mut self) {
        self.predicted.clear();
    }

    pub fn clear_predicted_for(&mut self, ped_id: u64) {
        self.predicted.remove(&ped_id);
    }

    pub fn predicted_cells(&self, ped_id: u64) -> Option<&BTreeSet<usize>> {
        self.predicted.get(&ped_id)
    }

    pub fn predicted_layer(&self) -> BTreeSet<usize> {
        self.predicted.values().flatten().copied().collect()
    }

    // --- artificial layer ---

    /// Registers an artificial obstacle and returns its id.
    pub fn add_artificial(&mut self, cells: BTreeSet<usize>) -> u64 {
        let id = self.next_obstacle_id;
        self.next_obstacle_id += 1;
        self.artificial.insert(id, cells);
        id
    }

    /// Adds `cells` to an existing obstacle; returns the ones that were new
    /// to it, or `None` for an unknown id.
    pub fn extend_artificial(&mut self, id: u64, cells: BTreeSet<usize>) -> Option<BTreeSet<usize>> {
        let set = self.artificial.get_mut(&id)?;
        let added: BTreeSet<usize> = cells.into_iter().filter(|&i| set.insert(i)).collect();
        Some(added)
    }

    pub fn retract_artificial(&mut self, id: u64, cells: &BTreeSet<usize>) {
        if let Some(set) = self.artificial.get_mut(&id) {
            set.retain(|i| !cells.contains(i));
        }
    }

    pub fn remove_artificial(&mut self, id: u64) -> Option<BTreeSet<usize>> {
        self.artificial.remove(&id)
    }

    pub fn artificial_cells(&self, id: u64) -> Option<&BTreeSet<usize>> {
        self.artificial.get(&id)
    }

    pub fn artificial_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.artificial.keys().copied()
    }

    pub fn artificial_layer(&self) -> BTreeSet<usize> {
        self.artificial.values().flatten().copied().collect()
    }

    /// Per-cell blocked flags under `opts`.
    pub fn blocked_mask(&self, opts: &MaskOptions) -> Vec<bool> {
        let mut mask = self.static_cells.clone();
        if !opts.skip_predicted {
            for (ped, cells) in &self.predicted {
                if opts.ignored_peds.contains(ped) {
                    continue;
                }
                for &i in cells {
                    mask[i] = true;
                }
            }
        }
        if !opts.skip_artificial {
            for &i in self.artificial.values().flatten() {
                mask[i] = true;
            }
        }
        mask
    }

    /// Cells whose centers lie within `radius` of `p`, boundary included.
    pub fn disc_cells(&self, p: Point2, radius: f64) -> Vec<usize> {
        let r = (radius / self.resolution).ceil() as i64 + 1;
        let (cx, cy) = self.cell_coords(p);
        let mut out = Vec::new();
        for iy in (cy - r)..=(cy + r) {
            for ix in (cx - r)..=(cx + r) {
                if let Some(c) = self.checked_cell(ix, iy) {
                    if self.center(c).distance(&p) <= radius + BOUNDARY_EPS {
                        out.push(self.index(c));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Square patch of static occupancy centred on the cell containing `p`,
    /// row-major from the lowest y row. Cells outside the grid read as 1.
    pub fn static_patch(&self, p: Point2, size: usize) -> Vec<f64> {
        let half = (size / 2) as i64;
        let (cx, cy) = self.cell_coords(p);
        let mut out = Vec::with_capacity(size * size);
        for dy in -half..(size as i64 - half) {
            for dx in -half..(size as i64 - half) {
                let v = match self.checked_cell(cx + dx, cy + dy) {
                    Some(c) if !self.is_static(c) => 0.0,
                    _ => 1.0,
                };
                out.push(v);
            }
        }
        out
    }
}

fn dilate(cells: &BTreeSet<usize>, grid: &OccupancyGrid, k: i64) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for &i in cells {
        let c = grid.cell_of_index(i);
        for dy in -k..=k {
            for dx in -k..=k {
                if let Some(n) = grid.checked_cell(c.ix as i64 + dx, c.iy as i64 + dy) {
                    out.insert(grid.index(n));
                }
            }
        }
    }
    out
}

/// Chebyshev dilation steps for an inflation radius.
pub fn inflation_steps(radius: f64, resolution: f64) -> i64 {
    (radius / resolution - 1e-9).ceil().max(0.0) as i64
}

/// Dilates every layer by `⌈radius / resolution⌉` cells (Chebyshev).
pub fn inflate(grid: &OccupancyGrid, radius: f64) -> OccupancyGrid {
    let k = inflation_steps(radius, grid.resolution);
    if k == 0 {
        return grid.clone();
    }
    let mut out = grid.clone();
    let statics: BTreeSet<usize> = (0..grid.len()).filter(|&i| grid.static_cells[i]).collect();
    for i in dilate(&statics, grid, k) {
        out.static_cells[i] = true;
    }
    for (id, cells) in &grid.predicted {
        out.predicted.insert(*id, dilate(cells, grid, k));
    }
    for (id, cells) in &grid.artificial {
        out.artificial.insert(*id, dilate(cells, grid, k));
    }
    out
}

/// Stamps every predicted point (not the observed history) into the
/// Predicted layer with a disc of `radius`.
pub fn predictions_to_occupancy(preds: &[Trajectory], grid: &OccupancyGrid, radius: f64) -> OccupancyGrid {
    let mut out = grid.clone();
    for traj in preds {
        let mut cells = BTreeSet::new();
        for s in traj.samples() {
            cells.extend(out.disc_cells(s.p, radius));
        }
        if !cells.is_empty() {
            out.mark_predicted(traj.ped_id(), cells);
        }
    }
    out
}
