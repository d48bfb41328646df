//! Equispaced 1-D / 2-D lattices, stencil neighbourhoods and scalar fields.
//!
//! Nodes are stored row-major with `x` varying fastest: `index = iy * nx + ix`.
//! In 2-D, "north" is the previous row (`iy - 1`) and "east" the next column
//! (`ix + 1`). Every sparse matrix in the crate uses this ordering.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Periodic,
    Dirichlet,
}

/// Placement of nodes along an axis of length `extent`.
///
/// `Cell` puts `n` nodes at `i * extent / n` so that node `n` would coincide
/// with node 0 (the natural periodic layout). `Endpoint` puts nodes at
/// `i * extent / (n - 1)`, covering both ends of the interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Cell,
    Endpoint,
}

impl Spacing {
    /// Default spacing for a boundary rule: `Cell` for periodic, `Endpoint` for Dirichlet.
    pub fn default_for(boundary: Boundary) -> Self {
        match boundary {
            Boundary::Periodic => Spacing::Cell,
            Boundary::Dirichlet => Spacing::Endpoint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Offset {
    Centre,
    Left,
    Right,
    North,
    South,
    East,
    West,
    NorthEast,
    NorthWest,
    SouthEast,
    SouthWest,
}

/// A neighbour slot of a stencil; `None` is a homogeneous Dirichlet ghost (value 0).
pub type Neighbour = Option<usize>;

/// Five-point (2-D) or three-point (1-D) Laplacian stencil of one node.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    entries: [(Offset, Neighbour); 5],
    len: usize,
}

impl Stencil {
    pub fn entries(&self) -> &[(Offset, Neighbour)] {
        &self.entries[..self.len]
    }

    pub fn get(&self, offset: Offset) -> Option<Neighbour> {
        self.entries().iter().find(|(o, _)| *o == offset).map(|(_, n)| *n)
    }

    /// Indices of in-domain neighbours (excluding the centre and ghosts).
    pub fn neighbours(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries()
            .iter()
            .filter(|(o, _)| *o != Offset::Centre)
            .filter_map(|(_, n)| *n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dim: usize,
    n: [usize; 2],
    origin: [f64; 2],
    extent: [f64; 2],
    h: f64,
    boundary: Boundary,
    spacing: Spacing,
}

impl Grid {
    /// Builds a grid with the default spacing for `boundary`.
    pub fn new(dim: usize, n_axis: &[usize], extent: &[f64], boundary: Boundary) -> Result<Self> {
        Self::with_spacing(dim, n_axis, extent, boundary, Spacing::default_for(boundary))
    }

    pub fn with_spacing(
        dim: usize,
        n_axis: &[usize],
        extent: &[f64],
        boundary: Boundary,
        spacing: Spacing,
    ) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2, got {dim}")));
        }
        let n_axis = broadcast(n_axis, dim, "n_axis")?;
        let extent = broadcast(extent, dim, "extent")?;
        let mut n = [1usize; 2];
        let mut ext = [0.0f64; 2];
        for axis in 0..dim {
            if n_axis[axis] < 3 {
                return Err(Error::InvalidGrid(format!(
                    "need at least 3 points per axis for the stencil, got {}",
                    n_axis[axis]
                )));
            }
            if !(extent[axis] > 0.0 && extent[axis].is_finite()) {
                return Err(Error::InvalidGrid(format!("extent must be positive, got {}", extent[axis])));
            }
            n[axis] = n_axis[axis];
            ext[axis] = extent[axis];
        }
        let spacing_of = |axis: usize| match spacing {
            Spacing::Cell => ext[axis] / n[axis] as f64,
            Spacing::Endpoint => ext[axis] / (n[axis] - 1) as f64,
        };
        let h = spacing_of(0);
        if dim == 2 {
            let hy = spacing_of(1);
            if ((hy - h) / h).abs() > 1e-12 {
                return Err(Error::InvalidGrid(format!(
                    "grid spacing must agree across axes (hx = {h}, hy = {hy})"
                )));
            }
        }
        Ok(Self { dim, n, origin: [0.0; 2], extent: ext, h, boundary, spacing })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_axis(&self, axis: usize) -> usize {
        self.n[axis]
    }

    pub fn nx(&self) -> usize {
        self.n[0]
    }

    pub fn ny(&self) -> usize {
        self.n[1]
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn extent(&self, axis: usize) -> f64 {
        self.extent[axis]
    }

    pub fn origin(&self, axis: usize) -> f64 {
        self.origin[axis]
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.n[0] + ix
    }

    /// `(ix, iy)` lattice coordinates of a node.
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.n[0], index / self.n[0])
    }

    /// Physical position `[x, y]` (y = 0 in 1-D).
    pub fn position(&self, index: usize) -> [f64; 2] {
        let (ix, iy) = self.coords(index);
        [self.origin[0] + ix as f64 * self.h, self.origin[1] + iy as f64 * self.h]
    }

    pub fn positions(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(|i| self.position(i))
    }

    pub fn check_index(&self, index: usize) -> Result<()> {
        if index < self.len() {
            Ok(())
        } else {
            Err(Error::IndexOutOfBounds { index, len: self.len() })
        }
    }

    fn shift(&self, axis: usize, i: usize, delta: isize) -> Option<usize> {
        let n = self.n[axis] as isize;
        let j = i as isize + delta;
        if (0..n).contains(&j) {
            Some(j as usize)
        } else {
            match self.boundary {
                Boundary::Periodic => Some(j.rem_euclid(n) as usize),
                Boundary::Dirichlet => None,
            }
        }
    }

    /// Neighbour of `index` displaced by `(dx, dy)` lattice steps, resolved per boundary rule.
    pub fn neighbour(&self, index: usize, dx: isize, dy: isize) -> Neighbour {
        let (ix, iy) = self.coords(index);
        let jx = self.shift(0, ix, dx)?;
        let jy = if self.dim == 2 { self.shift(1, iy, dy)? } else { iy };
        Some(self.index(jx, jy))
    }

    /// Laplacian stencil: `{centre, left, right}` in 1-D, `{centre, N, S, E, W}` in 2-D.
    pub fn stencil(&self, index: usize) -> Result<Stencil> {
        self.check_index(index)?;
        let c = (Offset::Centre, Some(index));
        let mut entries = [c; 5];
        let len = if self.dim == 1 {
            entries[1] = (Offset::Left, self.neighbour(index, -1, 0));
            entries[2] = (Offset::Right, self.neighbour(index, 1, 0));
            3
        } else {
            entries[1] = (Offset::North, self.neighbour(index, 0, -1));
            entries[2] = (Offset::South, self.neighbour(index, 0, 1));
            entries[3] = (Offset::East, self.neighbour(index, 1, 0));
            entries[4] = (Offset::West, self.neighbour(index, -1, 0));
            5
        };
        Ok(Stencil { entries, len })
    }

    /// True when both grids describe the same physical domain.
    pub fn same_domain(&self, other: &Grid) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        self.dim == other.dim
            && (0..self.dim).all(|a| close(self.extent[a], other.extent[a]) && close(self.origin[a], other.origin[a]))
    }

    /// Linear (1-D) / bilinear (2-D) interpolation of nodal values at a physical point.
    pub fn interpolate_at(&self, values: &[f64], point: [f64; 2]) -> f64 {
        let bracket = |axis: usize| -> (usize, usize, f64) {
            let n = self.n[axis];
            let t = (point[axis] - self.origin[axis]) / self.h;
            let periodic_wrap = self.boundary == Boundary::Periodic && self.spacing == Spacing::Cell;
            if periodic_wrap {
                let t = t.rem_euclid(n as f64);
                let i0 = (t.floor() as usize).min(n - 1);
                let frac = t - i0 as f64;
                (i0, (i0 + 1) % n, frac)
            } else {
                let t = t.clamp(0.0, (n - 1) as f64);
                let i0 = (t.floor() as usize).min(n - 2);
                (i0, i0 + 1, t - i0 as f64)
            }
        };
        let (x0, x1, fx) = bracket(0);
        if self.dim == 1 {
            return values[x0] * (1.0 - fx) + values[x1] * fx;
        }
        let (y0, y1, fy) = bracket(1);
        let v = |ix: usize, iy: usize| values[self.index(ix, iy)];
        (v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx) * (1.0 - fy) + (v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx) * fy
    }
}

fn broadcast<T: Copy>(values: &[T], dim: usize, what: &str) -> Result<Vec<T>> {
    match values.len() {
        1 => Ok(vec![values[0]; dim]),
        n if n == dim => Ok(values.to_vec()),
        n => Err(Error::InvalidGrid(format!("{what} has {n} entries for a {dim}-D grid"))),
    }
}

/// Convenience constructor mirroring the operation table: `make_grid(dim, n_axis, extent, boundary)`.
pub fn make_grid(dim: usize, n_axis: &[usize], extent: &[f64], boundary: Boundary) -> Result<Grid> {
    Grid::new(dim, n_axis, extent, boundary)
}

/// Real values on the nodes of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "field has {} values but grid has {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self { grid, values: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = grid.positions().map(f).collect();
        Self { grid, values }
    }

    /// A field that must be strictly positive everywhere (length-scales).
    pub fn positive(grid: Grid, values: Vec<f64>) -> Result<Self> {
        let field = Self::new(grid, values)?;
        field.check_positive()?;
        Ok(field)
    }

    pub fn check_positive(&self) -> Result<()> {
        match self.values.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            Some(node) => Err(Error::NonPositiveLengthScale { node, value: self.values[node] }),
            None => Ok(()),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Resamples onto `target` by (bi)linear interpolation. Both grids must cover the same domain.
    pub fn interpolate_to(&self, target: &Grid) -> Result<Field> {
        if !self.grid.same_domain(target) {
            return Err(Error::GridMismatch("interpolation requires identical domain extents".into()));
        }
        if self.grid == *target {
            return Ok(self.clone());
        }
        let values = target.positions().map(|p| self.grid.interpolate_at(&self.values, p)).collect();
        Ok(Field { grid: *target, values })
    }

    /// Writes `index,x[,y],value` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        if self.grid.dim() == 1 {
            writeln!(out, "index,x,value")?;
        } else {
            writeln!(out, "index,x,y,value")?;
        }
        for (i, v) in self.values.iter().enumerate() {
            let p = self.grid.position(i);
            if self.grid.dim() == 1 {
                writeln!(out, "{i},{},{v}", p[0])?;
            } else {
                writeln!(out, "{i},{},{},{v}", p[0], p[1])?;
            }
        }
        Ok(())
    }

    /// Reads a CSV written by [`Field::write_csv`] back onto `grid`.
    pub fn read_csv<R: BufRead>(grid: Grid, input: R) -> Result<Field> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty field file".into()))??;
        let cols = header.split(',').count();
        let expected = grid.dim() + 2;
        if cols != expected {
            return Err(Error::Parse(format!("expected {expected} columns, header is `{header}`")));
        }
        let mut values = vec![f64::NAN; grid.len()];
        let mut seen = 0usize;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != expected {
                return Err(Error::Parse(format!("line {}: expected {expected} columns", lineno + 2)));
            }
            let index: usize = parts[0]
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: bad index: {e}", lineno + 2)))?;
            grid.check_index(index)?;
            values[index] = parts[expected - 1]
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: bad value: {e}", lineno + 2)))?;
            seen += 1;
        }
        if seen != grid.len() {
            return Err(Error::Parse(format!("expected {} rows, found {seen}", grid.len())));
        }
        Field::new(grid, values)
    }
}
