//! A* on the 8-connected occupancy grid.
//!
//! Step costs are kept as exact (orthogonal, diagonal) counts so that
//! comparisons never suffer rounding; the metric cost is
//! `(orth + diag·√2) · resolution`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point2;
use crate::grid::{Cell, MaskOptions, OccupancyGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("{which} point ({x:.3}, {y:.3}) is outside the grid")]
    OutOfBounds { which: &'static str, x: f64, y: f64 },
    #[error("start cell is blocked")]
    StartBlocked,
    #[error("goal cell is occluded")]
    GoalOccluded,
    #[error("no path between start and goal")]
    NoPath,
    #[error("mask has {got} cells, grid has {expected}")]
    MaskSize { expected: usize, got: usize },
}

/// Exact path length in units of grid steps: `orth + diag·√2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct StepCost {
    pub orth: u32,
    pub diag: u32,
}

impl StepCost {
    pub const ZERO: StepCost = StepCost { orth: 0, diag: 0 };

    pub fn value(&self) -> f64 {
        self.orth as f64 + self.diag as f64 * std::f64::consts::SQRT_2
    }

    fn add(self, o: StepCost) -> StepCost {
        StepCost { orth: self.orth + o.orth, diag: self.diag + o.diag }
    }

    /// Octile distance between two cells.
    pub fn octile(a: Cell, b: Cell) -> StepCost {
        let dx = a.ix.abs_diff(b.ix) as u32;
        let dy = a.iy.abs_diff(b.iy) as u32;
        StepCost { orth: dx.max(dy) - dx.min(dy), diag: dx.min(dy) }
    }
}

impl Ord for StepCost {
    /// Sign of `(o1 - o2) + (d1 - d2)·√2`, decided in integers.
    fn cmp(&self, other: &Self) -> Ordering {
        let x = self.orth as i64 - other.orth as i64;
        let y = self.diag as i64 - other.diag as i64;
        match (x.signum(), y.signum()) {
            (0, 0) => Ordering::Equal,
            (a, b) if a >= 0 && b >= 0 => Ordering::Greater,
            (a, b) if a <= 0 && b <= 0 => Ordering::Less,
            (1, _) => (x * x).cmp(&(2 * y * y)),
            _ => (2 * y * y).cmp(&(x * x)),
        }
    }
}

impl PartialOrd for StepCost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub points: Vec<Point2>,
    pub cells: Vec<Cell>,
    pub steps: StepCost,
    /// Metric length in meters.
    pub cost: f64,
}

impl Path {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Polyline length in meters.
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }

    /// Position after travelling `s` meters along the path, clamped to the
    /// end points.
    pub fn point_at_distance(&self, s: f64) -> Point2 {
        let mut left = s.max(0.0);
        for w in self.points.windows(2) {
            let seg = w[0].distance(&w[1]);
            if left <= seg {
                return if seg > 0.0 { w[0].lerp(&w[1], left / seg) } else { w[0] };
            }
            left -= seg;
        }
        *self.points.last().expect("non-empty path")
    }
}

/// The eight neighbour offsets with their step kinds.
pub const NEIGHBOURS: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

/// Neighbours of `c` reachable in one move: free cells, and diagonals only
/// when both adjacent orthogonal cells are free too.
pub fn moves(grid: &OccupancyGrid, mask: &[bool], c: Cell) -> Vec<(Cell, StepCost)> {
    let free = |ix: i64, iy: i64| grid.checked_cell(ix, iy).filter(|n| !mask[grid.index(*n)]);
    let (x, y) = (c.ix as i64, c.iy as i64);
    let mut out = Vec::with_capacity(8);
    for (dx, dy) in NEIGHBOURS {
        let Some(n) = free(x + dx, y + dy) else { continue };
        if dx != 0 && dy != 0 {
            if free(x + dx, y).is_none() || free(x, y + dy).is_none() {
                continue;
            }
            out.push((n, StepCost { orth: 0, diag: 1 }));
        } else {
            out.push((n, StepCost { orth: 1, diag: 0 }));
        }
    }
    out
}

#[derive(Debug, PartialEq, Eq)]
struct Entry {
    f: StepCost,
    h: StepCost,
    index: usize,
    g: StepCost,
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap pops the maximum
        (other.f, other.h, other.index).cmp(&(self.f, self.h, self.index))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Plans with every layer blocking.
pub fn plan(grid: &OccupancyGrid, start: Point2, goal: Point2) -> Result<Path, PlanError> {
    plan_masked(grid, &grid.blocked_mask(&MaskOptions::default()), start, goal)
}

/// Plans against an explicit blocked mask over `grid`'s cells.
pub fn plan_masked(grid: &OccupancyGrid, mask: &[bool], start: Point2, goal: Point2) -> Result<Path, PlanError> {
    if mask.len() != grid.len() {
        return Err(PlanError::MaskSize { expected: grid.len(), got: mask.len() });
    }
    let s = grid
        .cell_at(start)
        .ok_or(PlanError::OutOfBounds { which: "start", x: start.x, y: start.y })?;
    let t = grid
        .cell_at(goal)
        .ok_or(PlanError::OutOfBounds { which: "goal", x: goal.x, y: goal.y })?;
    if mask[grid.index(s)] {
        return Err(PlanError::StartBlocked);
    }
    if mask[grid.index(t)] {
        return Err(PlanError::GoalOccluded);
    }
    let n = grid.len();
    let mut best: Vec<Option<StepCost>> = vec![None; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let si = grid.index(s);
    best[si] = Some(StepCost::ZERO);
    let h0 = StepCost::octile(s, t);
    open.push(Entry { f: h0, h: h0, index: si, g: StepCost::ZERO });
    let ti = grid.index(t);
    while let Some(e) = open.pop() {
        if closed[e.index] {
            continue;
        }
        closed[e.index] = true;
        if e.index == ti {
            return Ok(reconstruct(grid, &parent, si, ti, e.g));
        }
        let c = grid.cell_of_index(e.index);
        for (nb, step) in moves(grid, mask, c) {
            let ni = grid.index(nb);
            if closed[ni] {
                continue;
            }
            let g = e.g.add(step);
            if best[ni].is_none_or(|b| g < b) {
                best[ni] = Some(g);
                parent[ni] = e.index;
                let h = StepCost::octile(nb, t);
                open.push(Entry { f: g.add(h), h, index: ni, g });
            }
        }
    }
    Err(PlanError::NoPath)
}

fn reconstruct(grid: &OccupancyGrid, parent: &[usize], si: usize, ti: usize, g: StepCost) -> Path {
    let mut idx = vec![ti];
    let mut cur = ti;
    while cur != si {
        cur = parent[cur];
        idx.push(cur);
    }
    idx.reverse();
    let cells: Vec<Cell> = idx.iter().map(|&i| grid.cell_of_index(i)).collect();
    Path {
        points: cells.iter().map(|&c| grid.center(c)).collect(),
        cells,
        steps: g,
        cost: g.value() * grid.resolution(),
    }
}
