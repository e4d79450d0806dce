//! Depth-`J` dyadic grid on the unit cube, operator fields, conditional
//! expectations and the (weighted) trace.
//!
//! Cells are stored in Morton order: the level-`n` cube with index `k` owns
//! the contiguous cell range `k << s .. (k + 1) << s`, `s = (J - n) d`. In one
//! dimension this is the natural left-to-right order.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_algebra::{schatten_power, spectral_projection, Interval, MatrixElement};
use crate::weights::Weight;

pub const MAX_DEPTH: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DyadicGrid {
    dim: usize,
    depth: usize,
}

/// A dyadic cube `Q ∈ D_n`, identified by level and Morton index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cube {
    pub level: usize,
    pub index: usize,
}

/// Axis-aligned box `[lo, hi)` in the window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

fn interleave(coords: [usize; 2], dim: usize, bits: usize) -> usize {
    if dim == 1 {
        return coords[0];
    }
    let mut out = 0;
    for b in 0..bits {
        out |= ((coords[0] >> b) & 1) << (2 * b);
        out |= ((coords[1] >> b) & 1) << (2 * b + 1);
    }
    out
}

fn deinterleave(index: usize, dim: usize, bits: usize) -> [usize; 2] {
    if dim == 1 {
        return [index, 0];
    }
    let mut c = [0, 0];
    for b in 0..bits {
        c[0] |= ((index >> (2 * b)) & 1) << b;
        c[1] |= ((index >> (2 * b + 1)) & 1) << b;
    }
    c
}

impl DyadicGrid {
    pub fn new(dim: usize, depth: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidParameter(format!("dimension {dim} not in {{1,2}}")));
        }
        if depth > MAX_DEPTH || depth * dim > 2 * 10 {
            return Err(Error::InvalidParameter(format!(
                "depth {depth} too large for dimension {dim}"
            )));
        }
        Ok(Self { dim, depth })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_cells(&self) -> usize {
        1 << (self.depth * self.dim)
    }

    pub fn cell_volume(&self) -> f64 {
        (2f64).powi(-((self.depth * self.dim) as i32))
    }

    pub fn cell_side(&self) -> f64 {
        (2f64).powi(-(self.depth as i32))
    }

    pub fn num_cubes(&self, level: usize) -> usize {
        1 << (level * self.dim)
    }

    fn shift(&self, level: usize) -> usize {
        (self.depth - level) * self.dim
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level > self.depth {
            return Err(Error::LevelOutOfRange {
                level,
                depth: self.depth,
            });
        }
        Ok(())
    }

    pub fn cubes(&self, level: usize) -> impl Iterator<Item = Cube> {
        (0..self.num_cubes(level)).map(move |index| Cube { level, index })
    }

    /// The level-`n` cube containing a cell.
    pub fn cube_of(&self, cell: usize, level: usize) -> Cube {
        Cube {
            level,
            index: cell >> self.shift(level),
        }
    }

    pub fn cell_range(&self, cube: Cube) -> std::ops::Range<usize> {
        let s = self.shift(cube.level);
        (cube.index << s)..((cube.index + 1) << s)
    }

    pub fn parent(&self, cube: Cube) -> Option<Cube> {
        (cube.level > 0).then(|| Cube {
            level: cube.level - 1,
            index: cube.index >> self.dim,
        })
    }

    pub fn children(&self, cube: Cube) -> impl Iterator<Item = Cube> {
        let dim = self.dim;
        (0..1usize << dim).map(move |c| Cube {
            level: cube.level + 1,
            index: (cube.index << dim) | c,
        })
    }

    pub fn side(&self, level: usize) -> f64 {
        (2f64).powi(-(level as i32))
    }

    pub fn cube_volume(&self, level: usize) -> f64 {
        self.side(level).powi(self.dim as i32)
    }

    /// Integer lattice coordinates of a cube at its own level.
    pub fn cube_coords(&self, cube: Cube) -> [usize; 2] {
        deinterleave(cube.index, self.dim, cube.level)
    }

    pub fn cube_from_coords(&self, level: usize, coords: [usize; 2]) -> Cube {
        Cube {
            level,
            index: interleave(coords, self.dim, level),
        }
    }

    pub fn cube_center(&self, cube: Cube) -> [f64; 2] {
        let c = self.cube_coords(cube);
        let h = self.side(cube.level);
        let mut out = [0.0, 0.0];
        for a in 0..self.dim {
            out[a] = (c[a] as f64 + 0.5) * h;
        }
        out
    }

    pub fn cell_coords(&self, cell: usize) -> [usize; 2] {
        deinterleave(cell, self.dim, self.depth)
    }

    pub fn cell_of_coords(&self, coords: [usize; 2]) -> usize {
        interleave(coords, self.dim, self.depth)
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        self.cube_center(Cube {
            level: self.depth,
            index: cell,
        })
    }

    /// Same-level cubes within `radius` lattice steps in every coordinate,
    /// clipped to the window. `radius = 2` gives the cubes of `5Q`.
    pub fn neighbors(&self, cube: Cube, radius: usize) -> Vec<Cube> {
        let c = self.cube_coords(cube);
        let n = 1usize << cube.level;
        let span = |x: usize| x.saturating_sub(radius)..=(x + radius).min(n - 1);
        let mut out = Vec::new();
        if self.dim == 1 {
            for x in span(c[0]) {
                out.push(self.cube_from_coords(cube.level, [x, 0]));
            }
        } else {
            for y in span(c[1]) {
                for x in span(c[0]) {
                    out.push(self.cube_from_coords(cube.level, [x, y]));
                }
            }
        }
        out
    }

    /// Cube with the centre of `cube` and `factor` times its side, clipped to the window.
    pub fn dilate(&self, cube: Cube, factor: f64) -> Region {
        let centre = self.cube_center(cube);
        let half = 0.5 * factor * self.side(cube.level);
        let mut lo = [0.0, 0.0];
        let mut hi = [1.0, 1.0];
        for a in 0..self.dim {
            lo[a] = (centre[a] - half).max(0.0);
            hi[a] = (centre[a] + half).min(1.0);
        }
        Region { lo, hi }
    }

    /// Cells whose centres lie in the region.
    pub fn cells_in(&self, region: &Region) -> Vec<usize> {
        let h = self.cell_side();
        let n = 1usize << self.depth;
        let axis = |a: usize| {
            let first = ((region.lo[a] / h - 0.5).ceil().max(0.0)) as usize;
            let mut idx: Vec<usize> = Vec::new();
            let mut k = first;
            while k < n && (k as f64 + 0.5) * h < region.hi[a] {
                if (k as f64 + 0.5) * h >= region.lo[a] {
                    idx.push(k);
                }
                k += 1;
            }
            idx
        };
        let xs = axis(0);
        if self.dim == 1 {
            return xs;
        }
        let ys = axis(1);
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for &y in &ys {
            for &x in &xs {
                out.push(self.cell_of_coords([x, y]));
            }
        }
        out.sort_unstable();
        out
    }

    /// Euclidean distance between points of the window.
    pub fn distance(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        let mut s = 0.0;
        for a in 0..self.dim {
            s += (x[a] - y[a]) * (x[a] - y[a]);
        }
        s.sqrt()
    }

    /// Squared distance between two cell centres, in units of the cell side squared.
    pub fn cell_offset_sq(&self, a: usize, b: usize) -> u64 {
        let ca = self.cell_coords(a);
        let cb = self.cell_coords(b);
        let mut s = 0u64;
        for k in 0..self.dim {
            let d = ca[k] as i64 - cb[k] as i64;
            s += (d * d) as u64;
        }
        s
    }
}

/// Running compensated sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Cellwise compensated mean of a block of elements.
fn compensated_mean(values: &[MatrixElement]) -> MatrixElement {
    let m = values[0].dim();
    let mut re = vec![KahanSum::default(); m * m];
    let mut im = vec![KahanSum::default(); m * m];
    for v in values {
        for (k, z) in v.entries().iter().enumerate() {
            re[k].add(z.re);
            im[k].add(z.im);
        }
    }
    let n = values.len() as f64;
    let mut mean = MatrixElement::zeros(m).entries().clone();
    for (k, z) in mean.iter_mut().enumerate() {
        *z = Complex64::new(re[k].value() / n, im[k].value() / n);
    }
    MatrixElement::from_matrix(mean)
}

/// Piecewise-constant matrix-valued function on the depth-`J` cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "FieldJson", try_from = "FieldJson")]
pub struct OperatorField {
    grid: DyadicGrid,
    m: usize,
    values: Vec<MatrixElement>,
}

impl OperatorField {
    pub fn new(grid: DyadicGrid, values: Vec<MatrixElement>) -> Result<Self> {
        if values.len() != grid.num_cells() {
            return Err(Error::DimensionMismatch {
                expected: grid.num_cells(),
                found: values.len(),
            });
        }
        let m = values[0].dim();
        if let Some(bad) = values.iter().find(|v| v.dim() != m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                found: bad.dim(),
            });
        }
        Ok(Self { grid, m, values })
    }

    pub fn from_fn(grid: DyadicGrid, f: impl FnMut(usize) -> MatrixElement) -> Result<Self> {
        Self::new(grid, (0..grid.num_cells()).map(f).collect())
    }

    pub fn constant(grid: DyadicGrid, value: MatrixElement) -> Self {
        let m = value.dim();
        Self {
            grid,
            m,
            values: vec![value; grid.num_cells()],
        }
    }

    pub fn zeros(grid: DyadicGrid, m: usize) -> Self {
        Self::constant(grid, MatrixElement::zeros(m))
    }

    pub fn identity(grid: DyadicGrid, m: usize) -> Self {
        Self::constant(grid, MatrixElement::identity(m))
    }

    /// Scalar (`m = 1`) field from real cell values.
    pub fn from_scalars(grid: DyadicGrid, values: &[f64]) -> Result<Self> {
        Self::new(grid, values.iter().map(|&v| MatrixElement::scalar(1, v)).collect())
    }

    pub fn grid(&self) -> DyadicGrid {
        self.grid
    }

    pub fn matrix_dim(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[MatrixElement] {
        &self.values
    }

    pub fn value(&self, cell: usize) -> &MatrixElement {
        &self.values[cell]
    }

    pub fn into_values(self) -> Vec<MatrixElement> {
        self.values
    }

    /// Value on a cube, assuming the field is constant there.
    pub fn on_cube(&self, cube: Cube) -> &MatrixElement {
        &self.values[self.grid.cell_range(cube).start]
    }

    pub fn map(&self, f: impl Fn(&MatrixElement) -> MatrixElement) -> Self {
        Self {
            grid: self.grid,
            m: self.m,
            values: self.values.iter().map(f).collect(),
        }
    }

    pub fn try_map(&self, f: impl Fn(&MatrixElement) -> Result<MatrixElement>) -> Result<Self> {
        let values = self.values.iter().map(f).collect::<Result<Vec<_>>>()?;
        Self::new(self.grid, values)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Mismatch("fields live on different grids".into()));
        }
        if self.m != other.m {
            return Err(Error::DimensionMismatch {
                expected: self.m,
                found: other.m,
            });
        }
        Ok(())
    }

    pub fn zip_map(
        &self,
        other: &Self,
        f: impl Fn(&MatrixElement, &MatrixElement) -> MatrixElement,
    ) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self {
            grid: self.grid,
            m: self.m,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Cellwise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    /// Cellwise product `a b c`.
    pub fn sandwich(a: &Self, b: &Self, c: &Self) -> Result<Self> {
        a.mul(b)?.mul(c)
    }

    pub fn adjoint(&self) -> Self {
        self.map(|a| a.adjoint())
    }

    pub fn scale(&self, t: f64) -> Self {
        self.map(|a| a.scale(t))
    }

    /// Multiplies each cell by a real scalar.
    pub fn scale_cells(&self, s: &[f64]) -> Self {
        Self {
            grid: self.grid,
            m: self.m,
            values: self.values.iter().zip(s).map(|(a, &t)| a.scale(t)).collect(),
        }
    }

    /// `|f|` cellwise.
    pub fn abs(&self) -> Result<Self> {
        self.try_map(crate::matrix_algebra::abs_op)
    }

    /// `1 - e` cellwise.
    pub fn complement(&self) -> Self {
        let one = MatrixElement::identity(self.m);
        self.map(|e| &one - e)
    }

    pub fn max_distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.max_entry_distance(b))
            .fold(0.0, f64::max)
    }

    pub fn max_entry(&self) -> f64 {
        self.values.iter().map(|a| a.max_entry()).fold(0.0, f64::max)
    }

    /// `‖f‖_∞`: largest cellwise operator norm.
    pub fn sup_norm(&self) -> Result<f64> {
        let mut best = 0.0f64;
        for v in &self.values {
            best = best.max(v.op_norm()?);
        }
        Ok(best)
    }

    pub fn is_hermitian(&self) -> bool {
        self.values.iter().all(|v| v.is_hermitian())
    }

    /// Smallest eigenvalue over all cells (Hermitian fields).
    pub fn min_eigenvalue(&self) -> Result<f64> {
        let mut best = f64::INFINITY;
        for v in &self.values {
            best = best.min(v.min_eigenvalue()?);
        }
        Ok(best)
    }

    pub fn is_positive(&self, tol: f64) -> Result<bool> {
        if !self.is_hermitian() {
            return Ok(false);
        }
        Ok(self.min_eigenvalue()? >= -tol)
    }

    pub fn require_positive(&self, what: &'static str) -> Result<()> {
        let deviation = self.values.iter().map(|v| v.hermitian_deviation()).fold(0.0, f64::max);
        if deviation > 1e-9 * (1.0 + self.max_entry()) {
            return Err(Error::NotHermitian { what, deviation });
        }
        let min_eigenvalue = self.min_eigenvalue()?;
        if min_eigenvalue < -1e-10 * (1.0 + self.max_entry()) {
            return Err(Error::NotPositive { what, min_eigenvalue });
        }
        Ok(())
    }

    /// Cells with a nonzero value.
    pub fn support(&self, tol: f64) -> Vec<usize> {
        (0..self.values.len())
            .filter(|&k| !self.values[k].is_zero(tol))
            .collect()
    }

    /// Whether the field is constant on every level-`n` cube.
    pub fn level_deviation(&self, level: usize) -> f64 {
        let mut worst = 0.0f64;
        for cube in self.grid.cubes(level) {
            let range = self.grid.cell_range(cube);
            let first = &self.values[range.start];
            for k in range {
                worst = worst.max(self.values[k].max_entry_distance(first));
            }
        }
        worst
    }

    /// Repeats each cell onto a finer grid of the same dimension.
    pub fn refine(&self, depth: usize) -> Result<Self> {
        if depth < self.grid.depth {
            return Err(Error::InvalidParameter(format!(
                "cannot refine depth {} to {depth}",
                self.grid.depth
            )));
        }
        let grid = DyadicGrid::new(self.grid.dim, depth)?;
        let s = (depth - self.grid.depth) * self.grid.dim;
        Self::from_fn(grid, |cell| self.values[cell >> s].clone())
    }

    /// The same function seen on the coarser grid of depth `depth`, by cube averages.
    pub fn coarsen(&self, depth: usize) -> Result<Self> {
        let values = cube_averages(self, depth)?;
        Self::new(DyadicGrid::new(self.grid.dim, depth)?, values)
    }

    /// Restriction to a region: values outside are zeroed.
    pub fn restrict_to_cells(&self, cells: &[usize]) -> Self {
        let mut out = Self::zeros(self.grid, self.m);
        for &c in cells {
            out.values[c] = self.values[c].clone();
        }
        out
    }
}

/// `E_n f`: averages over level-`n` cubes.
pub fn conditional_expectation(f: &OperatorField, level: usize) -> Result<OperatorField> {
    let grid = f.grid();
    grid.check_level(level)?;
    if level == grid.depth() {
        return Ok(f.clone());
    }
    let mut values = Vec::with_capacity(grid.num_cells());
    for cube in grid.cubes(level) {
        let range = grid.cell_range(cube);
        let mean = compensated_mean(&f.values[range.clone()]);
        values.extend(std::iter::repeat_n(mean, range.len()));
    }
    OperatorField::new(grid, values)
}

/// Per-cube averages at a level, indexed by cube.
pub fn cube_averages(f: &OperatorField, level: usize) -> Result<Vec<MatrixElement>> {
    let grid = f.grid();
    grid.check_level(level)?;
    Ok(grid
        .cubes(level)
        .map(|cube| compensated_mean(&f.values[grid.cell_range(cube)]))
        .collect())
}

/// Expands per-cube values at a level into a field.
pub fn field_from_cubes(grid: DyadicGrid, level: usize, per_cube: &[MatrixElement]) -> Result<OperatorField> {
    grid.check_level(level)?;
    let block = 1usize << ((grid.depth() - level) * grid.dim());
    let mut values = Vec::with_capacity(grid.num_cells());
    for v in per_cube {
        values.extend(std::iter::repeat_n(v.clone(), block));
    }
    OperatorField::new(grid, values)
}

/// `E_0 f, E_1 f, ..., E_J f`.
pub fn filtration(f: &OperatorField) -> Result<Vec<OperatorField>> {
    (0..=f.grid().depth())
        .map(|n| conditional_expectation(f, n))
        .collect()
}

/// `[df_1, ..., df_J]` with `df_1 = E_1 f` and `df_n = E_n f - E_{n-1} f`.
pub fn martingale_differences(f: &OperatorField) -> Result<Vec<OperatorField>> {
    let levels = filtration(f)?;
    let mut out = Vec::with_capacity(f.grid().depth());
    for n in 1..levels.len() {
        if n == 1 {
            out.push(levels[1].clone());
        } else {
            out.push(levels[n].sub(&levels[n - 1])?);
        }
    }
    Ok(out)
}

/// Smallest `ρ` with `E_n f ≤ ρ E_{n-1} f` for all `n` and cells.
pub fn regularity_check(f: &OperatorField) -> Result<f64> {
    f.require_positive("regularity input")?;
    let grid = f.grid();
    let mut worst = 0.0f64;
    let mut coarse = cube_averages(f, 0)?;
    for n in 1..=grid.depth() {
        let fine = cube_averages(f, n)?;
        for cube in grid.cubes(n) {
            let parent = grid.parent(cube).expect("level ≥ 1 has parents");
            let rho = relative_bound(&fine[cube.index], &coarse[parent.index])?;
            worst = worst.max(rho);
        }
        coarse = fine;
    }
    Ok(worst)
}

/// Smallest `ρ ≥ 0` with `a ≤ ρ b` for positive `a, b`, computed on the range of `b`.
fn relative_bound(a: &MatrixElement, b: &MatrixElement) -> Result<f64> {
    let eig = b.eigh()?;
    let scale = eig.values.last().copied().unwrap_or(0.0).abs().max(a.max_entry());
    if scale == 0.0 {
        return Ok(0.0);
    }
    let cut = 1e-12 * scale;
    let inv_sqrt = eig.reassemble(|x| if x > cut { 1.0 / x.sqrt() } else { 0.0 });
    let range = eig.projection_where(|x| x > cut);
    let outside = &MatrixElement::identity(a.dim()) - &range;
    let leak = (&(&outside * a) * &outside).max_entry();
    if leak > 1e-9 * scale {
        return Ok(f64::INFINITY);
    }
    let rel = &(&inv_sqrt * a) * &inv_sqrt;
    Ok(rel.max_eigenvalue()?.max(0.0))
}

/// The trace `φ` or weighted trace `φ^w`.
#[derive(Clone, Copy, Debug, Default)]
pub struct TraceFunctional<'a> {
    pub weight: Option<&'a Weight>,
}

impl<'a> TraceFunctional<'a> {
    pub fn lebesgue() -> Self {
        Self { weight: None }
    }

    pub fn weighted(w: &'a Weight) -> Self {
        Self { weight: Some(w) }
    }

    fn cell_weight(&self, cell: usize) -> f64 {
        self.weight.map_or(1.0, |w| w.values()[cell])
    }

    fn check(&self, f: &OperatorField) -> Result<()> {
        if let Some(w) = self.weight {
            if w.grid() != f.grid() {
                return Err(Error::Mismatch("weight and field live on different grids".into()));
            }
        }
        Ok(())
    }

    /// `Σ_cells |cell| ν(f w)`.
    pub fn apply(&self, f: &OperatorField) -> Result<Complex64> {
        self.check(f)?;
        let vol = f.grid().cell_volume();
        let mut re = KahanSum::default();
        let mut im = KahanSum::default();
        for (k, v) in f.values().iter().enumerate() {
            let t = v.trace() * self.cell_weight(k);
            re.add(t.re);
            im.add(t.im);
        }
        Ok(Complex64::new(re.value() * vol, im.value() * vol))
    }

    pub fn apply_real(&self, f: &OperatorField) -> Result<f64> {
        Ok(self.apply(f)?.re)
    }

    /// `‖f‖_{L_p^w} = φ(|f|^p w)^{1/p}`.
    pub fn norm(&self, f: &OperatorField, p: f64) -> Result<f64> {
        Ok(self.norm_power(f, p)?.powf(1.0 / p))
    }

    /// `φ(|f|^p w)`.
    pub fn norm_power(&self, f: &OperatorField, p: f64) -> Result<f64> {
        self.check(f)?;
        let vol = f.grid().cell_volume();
        let mut acc = KahanSum::default();
        for (k, v) in f.values().iter().enumerate() {
            acc.add(schatten_power(v, p)? * self.cell_weight(k));
        }
        Ok(acc.value() * vol)
    }
}

/// `‖f‖_{L_p^w}`; `None` means Lebesgue measure.
pub fn weighted_trace(f: &OperatorField, w: Option<&Weight>, p: f64) -> Result<f64> {
    TraceFunctional { weight: w }.norm(f, p)
}

/// Cellwise `χ_{(λ,∞)}(|f|)` of a Hermitian field.
pub fn distribution_projection(f: &OperatorField, lambda: f64) -> Result<OperatorField> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("level {lambda} must be positive")));
    }
    f.try_map(|v| {
        let eig = v.eigh()?;
        Ok(eig.projection_where(|x| Interval::above(lambda).contains(x.abs())))
    })
}

/// `λ φ^w(χ_{(λ,∞)}(|f|))`.
pub fn weak_mass(f: &OperatorField, lambda: f64, w: Option<&Weight>) -> Result<f64> {
    let e = distribution_projection(f, lambda)?;
    Ok(lambda * TraceFunctional { weight: w }.apply_real(&e)?)
}

/// Cellwise `χ_B(f)` for Hermitian `f`.
pub fn spectral_projection_field(f: &OperatorField, interval: Interval) -> Result<OperatorField> {
    f.try_map(|v| spectral_projection(v, interval))
}

/// Sums and squared norms of martingale tails in `L_2^w`:
/// returns `(‖Σ_{n≥l} df_n‖², Σ_{n≥l} ‖df_n‖²)`.
pub fn martingale_tail_energies(
    f: &OperatorField,
    w: Option<&Weight>,
    from_level: usize,
) -> Result<(f64, f64)> {
    let diffs = martingale_differences(f)?;
    let tr = TraceFunctional { weight: w };
    let start = from_level.max(1) - 1;
    let mut tail = OperatorField::zeros(f.grid(), f.matrix_dim());
    let mut sum_sq = 0.0;
    for d in &diffs[start..] {
        tail = tail.add(d)?;
        sum_sq += tr.norm_power(d, 2.0)?;
    }
    Ok((tr.norm_power(&tail, 2.0)?, sum_sq))
}

#[derive(Serialize, Deserialize)]
struct FieldJson {
    d: usize,
    #[serde(rename = "J")]
    depth: usize,
    m: usize,
    cells: Vec<Vec<[f64; 2]>>,
}

impl From<OperatorField> for FieldJson {
    fn from(f: OperatorField) -> Self {
        let cells = f
            .values
            .iter()
            .map(|v| v.to_row_major().iter().map(|z| [z.re, z.im]).collect())
            .collect();
        FieldJson { d: f.grid.dim(), depth: f.grid.depth(), m: f.m, cells }
    }
}

impl TryFrom<FieldJson> for OperatorField {
    type Error = Error;

    fn try_from(doc: FieldJson) -> Result<Self> {
        let grid = DyadicGrid::new(doc.d, doc.depth)?;
        let values = doc
            .cells
            .iter()
            .map(|cell| {
                let entries: Vec<Complex64> = cell.iter().map(|p| Complex64::new(p[0], p[1])).collect();
                MatrixElement::from_row_major(doc.m, &entries)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, values)
    }
}

impl OperatorField {
    /// JSON form `{d, J, m, cells}`; each cell lists its row-major entries as `[re, im]`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("field serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(d: usize, j: usize) -> DyadicGrid {
        DyadicGrid::new(d, j).unwrap()
    }

    fn random_field(g: DyadicGrid, m: usize, seed: u64) -> OperatorField {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        OperatorField::from_fn(g, |_| crate::matrix_algebra::random_general(m, &mut r)).unwrap()
    }

    fn random_positive_field(g: DyadicGrid, m: usize, seed: u64) -> OperatorField {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        OperatorField::from_fn(g, |_| MatrixElement::random_positive(m, &mut r)).unwrap()
    }

    #[test]
    fn morton_cubes_are_unions_of_children() {
        for d in [1, 2] {
            let g = grid(d, 4);
            for n in 0..4 {
                for q in g.cubes(n) {
                    let mut cells: Vec<usize> = g.children(q).flat_map(|c| g.cell_range(c)).collect();
                    cells.sort_unstable();
                    assert_eq!(cells, g.cell_range(q).collect::<Vec<_>>());
                    assert_abs_diff_eq!(g.side(n), (2f64).powi(-(n as i32)));
                }
            }
        }
    }

    #[test]
    fn cube_geometry_matches_cells() {
        let g = grid(2, 3);
        for cell in 0..g.num_cells() {
            let c = g.cell_center(cell);
            let q = g.cube_of(cell, 1);
            let qc = g.cube_center(q);
            assert!((c[0] - qc[0]).abs() < 0.25 && (c[1] - qc[1]).abs() < 0.25);
        }
    }

    #[test]
    fn five_fold_dilation_matches_neighbors() {
        for d in [1, 2] {
            let g = grid(d, 5);
            for q in g.cubes(3) {
                let mut from_neighbors: Vec<usize> =
                    g.neighbors(q, 2).into_iter().flat_map(|c| g.cell_range(c)).collect();
                from_neighbors.sort_unstable();
                assert_eq!(from_neighbors, g.cells_in(&g.dilate(q, 5.0)));
            }
        }
    }

    #[test]
    fn conditional_expectation_examples() {
        let g = grid(1, 2);
        let f = OperatorField::from_scalars(g, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let e1 = conditional_expectation(&f, 1).unwrap();
        let got: Vec<f64> = e1.values().iter().map(|v| v.get(0, 0).re).collect();
        assert_eq!(got, vec![1.5, 1.5, 3.5, 3.5]);
        let c = OperatorField::constant(grid(2, 3), MatrixElement::from_real_diagonal(&[2.0, 5.0]));
        for n in 0..=3 {
            assert!(conditional_expectation(&c, n).unwrap().max_distance(&c) < 1e-15);
        }
        assert!(matches!(
            conditional_expectation(&f, 3),
            Err(Error::LevelOutOfRange { .. })
        ));
    }

    #[test]
    fn martingale_differences_of_constant() {
        let value = MatrixElement::from_real_diagonal(&[1.0, -2.0]);
        let c = OperatorField::constant(grid(1, 4), value.clone());
        let diffs = martingale_differences(&c).unwrap();
        assert_eq!(diffs.len(), 4);
        assert!(diffs[0].max_distance(&c) < 1e-15);
        for d in &diffs[1..] {
            assert!(d.max_entry() < 1e-15);
        }
    }

    #[test]
    fn regularity_examples() {
        let c = OperatorField::constant(grid(1, 3), MatrixElement::identity(2));
        assert_abs_diff_eq!(regularity_check(&c).unwrap(), 1.0, epsilon = 1e-12);
        let f = OperatorField::from_scalars(grid(1, 1), &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(regularity_check(&f).unwrap(), 2.0, epsilon = 1e-12);
        let f = random_positive_field(grid(2, 3), 2, 9);
        assert!(regularity_check(&f).unwrap() <= 4.0 + 1e-8);
        let neg = OperatorField::from_scalars(grid(1, 1), &[1.0, -1.0]).unwrap();
        assert!(matches!(regularity_check(&neg), Err(Error::NotPositive { .. })));
    }

    #[test]
    fn weighted_trace_examples() {
        let g = grid(1, 3);
        let one = OperatorField::identity(g, 2);
        assert_abs_diff_eq!(weighted_trace(&one, None, 1.0).unwrap(), 2.0, epsilon = 1e-14);
        let f = OperatorField::from_scalars(g, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0, -1.0, 2.0]).unwrap();
        let direct: f64 = [1.0f64, 2.0, 0.5, 3.0, 0.0, 1.0, 1.0, 2.0].iter().map(|x| x.powi(3)).sum::<f64>() / 8.0;
        assert_abs_diff_eq!(weighted_trace(&f, None, 3.0).unwrap(), direct.powf(1.0 / 3.0), epsilon = 1e-14);
        let t = -3.5;
        assert_abs_diff_eq!(
            weighted_trace(&f.scale(t), None, 1.0).unwrap(),
            t.abs() * weighted_trace(&f, None, 1.0).unwrap(),
            epsilon = 1e-13
        );
    }

    #[test]
    fn distribution_projection_examples() {
        let g = grid(1, 3);
        let f = OperatorField::from_scalars(g, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0, -1.0, 2.0]).unwrap();
        assert!(distribution_projection(&f, 3.0).unwrap().max_entry() == 0.0);
        let e = distribution_projection(&f, 1.5).unwrap();
        let got: Vec<f64> = e.values().iter().map(|v| v.get(0, 0).re).collect();
        assert_eq!(got, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn distribution_is_non_increasing() {
        let f = random_field(grid(1, 6), 2, 10).map(|v| v.hermitian_part());
        let mut last = f64::INFINITY;
        for k in 1..40 {
            let lambda = 0.05 * k as f64;
            let mass = TraceFunctional::lebesgue()
                .apply_real(&distribution_projection(&f, lambda).unwrap())
                .unwrap();
            assert!(mass <= last);
            last = mass;
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let f = random_field(grid(2, 3), 2, 11);
        let back = OperatorField::from_json(&f.to_json()).unwrap();
        assert_eq!(f, back);
    }

    #[test]
    fn unweighted_tail_energy_is_orthogonal() {
        let f = random_field(grid(1, 7), 2, 12);
        for l in 1..=7 {
            let (norm_sq, sum_sq) = martingale_tail_energies(&f, None, l).unwrap();
            assert!((norm_sq - sum_sq).abs() <= 1e-10 * (1.0 + sum_sq));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn iterated_expectations(seed in any::<u64>(), d in 1usize..3, n in 0usize..5, k in 0usize..5) {
            let f = random_field(grid(d, 4), 2, seed);
            let en = conditional_expectation(&f, n).unwrap();
            let lhs = conditional_expectation(&en, k).unwrap();
            let rhs = conditional_expectation(&f, n.min(k)).unwrap();
            prop_assert!(lhs.max_distance(&rhs) < 1e-12);
        }

        #[test]
        fn differences_telescope(seed in any::<u64>(), d in 1usize..3) {
            let f = random_field(grid(d, 4), 2, seed);
            let diffs = martingale_differences(&f).unwrap();
            let mut sum = OperatorField::zeros(f.grid(), 2);
            for (idx, df) in diffs.iter().enumerate() {
                if idx > 0 {
                    let back = conditional_expectation(df, idx).unwrap();
                    prop_assert!(back.max_entry() < 1e-12);
                }
                sum = sum.add(df).unwrap();
            }
            prop_assert!(sum.max_distance(&f) < 1e-12);
        }

        #[test]
        fn expectation_preserves_trace_and_contracts(seed in any::<u64>(), n in 0usize..6, p in 1.0f64..4.0) {
            let f = random_positive_field(grid(1, 5), 2, seed);
            let en = conditional_expectation(&f, n).unwrap();
            let tr = TraceFunctional::lebesgue();
            prop_assert!((tr.apply_real(&en).unwrap() - tr.apply_real(&f).unwrap()).abs() < 1e-12);
            prop_assert!(en.is_positive(1e-12).unwrap());
            prop_assert!(tr.norm(&en, p).unwrap() <= tr.norm(&f, p).unwrap() + 1e-12);
        }

        #[test]
        fn regularity_bounded_by_two_to_d(seed in any::<u64>(), d in 1usize..3) {
            let j = if d == 1 { 6 } else { 3 };
            let f = random_positive_field(grid(d, j), 2, seed);
            prop_assert!(regularity_check(&f).unwrap() <= (1 << d) as f64 + 1e-8);
        }
    }
}
