//! Precomputed quadrature tables for the lacunary family `T_j = Σ_{i<j} ∫ K ψ_i`
//! and for dense vector operators.
//!
//! Every off-diagonal pair of cells lies in exactly one annulus, so one pass
//! over the `N²` pairs yields all annulus pieces `∫ K ψ_i f` at once and the
//! truncations `T_j f` are their prefix sums.

use nczw_core::dyadic_model::{Cube, DyadicGrid, OperatorField};
use nczw_core::kernels_operators::{annulus_index, psi_partition, Kernel, OperatorMatrix, VectorKernel};
use nczw_core::matrix_algebra::MatrixElement;
use nczw_core::{Error, Result};
use num_complex::Complex64;
use rayon::prelude::*;

const DIAGONAL: u8 = u8::MAX;

#[derive(Clone, Debug)]
pub struct LacunaryFamily {
    grid: DyadicGrid,
    /// Smallest annulus index met by a pair of cells.
    first: i32,
    count: usize,
    /// Row-major `K(c_x, c_y) ψ_i(c_x - c_y) |cell|`.
    weights: Vec<f64>,
    /// Annulus of each pair relative to `first`.
    annulus: Vec<u8>,
}

fn flatten(f: &OperatorField) -> Vec<Complex64> {
    f.values().iter().flat_map(|v| v.to_row_major()).collect()
}

fn unflatten(grid: DyadicGrid, m: usize, data: &[Complex64]) -> Result<OperatorField> {
    let mm = m * m;
    OperatorField::from_fn(grid, |cell| {
        MatrixElement::from_row_major(m, &data[cell * mm..(cell + 1) * mm]).expect("square block")
    })
}

/// Running sums of annulus pieces, that is the truncations they add up to.
pub fn prefix_sums(parts: &[OperatorField]) -> Result<Vec<OperatorField>> {
    let first = parts.first().ok_or_else(|| Error::InvalidParameter("no annulus pieces".into()))?;
    let mut out = Vec::with_capacity(parts.len());
    let mut running = OperatorField::zeros(first.grid(), first.matrix_dim());
    for p in parts {
        running = running.add(p)?;
        out.push(running.clone());
    }
    Ok(out)
}

/// Whether annulus `i` reaches cells outside `5Q` for `Q ∈ D_n`: its outer
/// radius `2^{1-i}√d` exceeds `2ℓ(Q)`.
pub fn reaches_outside(n: usize, i: i32, dim: usize) -> bool {
    4f64.powi(n as i32 - i) * dim as f64 > 1.0
}

impl LacunaryFamily {
    pub fn new(kernel: &Kernel, grid: DyadicGrid) -> Result<Self> {
        if kernel.dim() != grid.dim() {
            return Err(Error::DimensionMismatch { expected: grid.dim(), found: kernel.dim() });
        }
        let n = grid.num_cells();
        let h2 = grid.cell_side() * grid.cell_side();
        let dim = grid.dim();
        let vol = grid.cell_volume();
        let index = |x: usize, y: usize| annulus_index(grid.cell_offset_sq(x, y) as f64 * h2, dim);
        let (mut lo, mut hi) = (i32::MAX, i32::MIN);
        for y in 1..n {
            // Offsets from cell 0 and from the far corner cover every distance.
            for x in [0, n - 1] {
                if x != y {
                    let i = index(x, y);
                    lo = lo.min(i);
                    hi = hi.max(i);
                }
            }
        }
        if n < 2 {
            return Err(Error::InvalidParameter("a single cell has no off-diagonal pairs".into()));
        }
        let count = (hi - lo + 1) as usize;
        if count >= DIAGONAL as usize {
            return Err(Error::InvalidParameter("too many annuli for the grid".into()));
        }
        let rows: Vec<(Vec<f64>, Vec<u8>)> = (0..n)
            .into_par_iter()
            .map(|x| {
                let mut w = vec![0.0; n];
                let mut a = vec![DIAGONAL; n];
                let cx = grid.cell_center(x);
                for y in 0..n {
                    if x == y {
                        continue;
                    }
                    let u2 = grid.cell_offset_sq(x, y) as f64 * h2;
                    let i = annulus_index(u2, dim);
                    let i = i.clamp(lo, hi);
                    a[y] = (i - lo) as u8;
                    w[y] = kernel.eval(cx, grid.cell_center(y)) * psi_partition(i, dim).at_squared(u2) * vol;
                }
                (w, a)
            })
            .collect();
        let mut weights = Vec::with_capacity(n * n);
        let mut annulus = Vec::with_capacity(n * n);
        for (w, a) in rows {
            weights.extend(w);
            annulus.extend(a);
        }
        Ok(Self { grid, first: lo, count, weights, annulus })
    }

    pub fn grid(&self) -> DyadicGrid {
        self.grid
    }

    /// The annulus indices `i` met on the grid, in increasing order.
    pub fn annuli(&self) -> Vec<i32> {
        (0..self.count as i32).map(|k| self.first + k).collect()
    }

    /// The truncation levels `j` with `T_j ≠ 0`; the last one keeps every pair.
    pub fn levels(&self) -> Vec<i32> {
        (1..=self.count as i32).map(|k| self.first + k).collect()
    }

    /// `max_x Σ_y |A(x, y)|`, which bounds `sup_j ‖T_j‖_{∞→∞}`.
    pub fn norm_proxy(&self) -> f64 {
        let n = self.grid.num_cells();
        self.weights
            .chunks(n)
            .map(|row| row.iter().map(|w| w.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn check(&self, f: &OperatorField) -> Result<()> {
        if f.grid() != self.grid {
            return Err(Error::Mismatch("field and operator live on different grids".into()));
        }
        Ok(())
    }

    /// Per-annulus sums `acc[k · m² + t]` at the cell `x`, over sources `ys`.
    fn accumulate(&self, x: usize, data: &[Complex64], mm: usize, ys: impl Iterator<Item = usize>, acc: &mut [Complex64]) {
        let n = self.grid.num_cells();
        let row_w = &self.weights[x * n..(x + 1) * n];
        let row_a = &self.annulus[x * n..(x + 1) * n];
        for y in ys {
            let k = row_a[y];
            if k == DIAGONAL {
                continue;
            }
            let w = row_w[y];
            let src = &data[y * mm..(y + 1) * mm];
            let dst = &mut acc[k as usize * mm..(k as usize + 1) * mm];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * w;
            }
        }
    }

    /// `(∫ K ψ_i f)_i` over [`Self::annuli`].
    pub fn annulus_parts(&self, f: &OperatorField) -> Result<Vec<OperatorField>> {
        self.check(f)?;
        let m = f.matrix_dim();
        let mm = m * m;
        let n = self.grid.num_cells();
        let data = flatten(f);
        // Only cells where `f` is nonzero contribute; the bad parts are sparse.
        let support: Vec<usize> =
            (0..n).filter(|&y| data[y * mm..(y + 1) * mm].iter().any(|z| z.norm_sqr() != 0.0)).collect();
        let per_cell: Vec<Vec<Complex64>> = (0..n)
            .into_par_iter()
            .map(|x| {
                let mut acc = vec![Complex64::new(0.0, 0.0); self.count * mm];
                self.accumulate(x, &data, mm, support.iter().copied(), &mut acc);
                acc
            })
            .collect();
        (0..self.count)
            .map(|k| {
                let slab: Vec<Complex64> =
                    per_cell.iter().flat_map(|acc| acc[k * mm..(k + 1) * mm].iter().copied()).collect();
                unflatten(self.grid, m, &slab)
            })
            .collect()
    }

    /// `(T_j f)_j` over [`Self::levels`].
    pub fn truncations(&self, f: &OperatorField) -> Result<Vec<OperatorField>> {
        prefix_sums(&self.annulus_parts(f)?)
    }

    /// `Σ_n Σ_{Q ∈ D_n} Σ_i |∫_Q K ψ_i(x - y) b_n(y) dy|` over the annuli that
    /// reach outside `5Q`, where `levels[n - 1] = b_n` is Hermitian and has
    /// mean zero on every level-`n` cube. By the cancellation the pieces equal
    /// `∫_Q (K_i(x, y) - K_i(x, c_Q)) b_n(y) dy`.
    pub fn cube_witness(&self, levels: &[OperatorField]) -> Result<OperatorField> {
        let first = levels.first().ok_or_else(|| Error::InvalidParameter("no levels".into()))?;
        let m = first.matrix_dim();
        let mm = m * m;
        let grid = self.grid;
        let dim = grid.dim();
        let mut sources: Vec<(usize, Cube)> = Vec::new();
        let mut data = Vec::with_capacity(levels.len());
        for (idx, b) in levels.iter().enumerate() {
            self.check(b)?;
            let n = idx + 1;
            for cube in grid.cubes(n) {
                if grid.cell_range(cube).any(|c| !b.value(c).is_zero(0.0)) {
                    sources.push((n, cube));
                }
            }
            data.push(flatten(b));
        }
        let annuli = self.annuli();
        let values: Vec<MatrixElement> = (0..grid.num_cells())
            .into_par_iter()
            .map(|x| {
                let mut total = MatrixElement::zeros(m);
                let mut acc = vec![Complex64::new(0.0, 0.0); self.count * mm];
                for &(n, cube) in &sources {
                    acc.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                    self.accumulate(x, &data[n - 1], mm, grid.cell_range(cube), &mut acc);
                    for (k, &i) in annuli.iter().enumerate() {
                        if !reaches_outside(n, i, dim) {
                            continue;
                        }
                        let block = &acc[k * mm..(k + 1) * mm];
                        if block.iter().all(|z| z.norm_sqr() == 0.0) {
                            continue;
                        }
                        let piece = MatrixElement::from_row_major(m, block)?.hermitian_part();
                        let abs = if m == 1 {
                            MatrixElement::scalar(1, piece.get(0, 0).re.abs())
                        } else {
                            piece.apply_hermitian(f64::abs)?
                        };
                        total = &total + &abs;
                    }
                }
                Ok(total)
            })
            .collect::<Result<_>>()?;
        OperatorField::new(grid, values)
    }
}

/// A family of dense untruncated operators, one per component of a vector kernel.
#[derive(Clone, Debug)]
pub struct VectorOperator {
    components: Vec<OperatorMatrix>,
    coarse: Option<CoarseColumns>,
}

/// Column sums of each component over the cubes of one level, row-major
/// `N × #cubes`; they act on fields that are constant on those cubes.
#[derive(Clone, Debug)]
struct CoarseColumns {
    level: usize,
    blocks: Vec<Vec<f64>>,
}

impl VectorOperator {
    pub fn new(kernel: &VectorKernel, grid: DyadicGrid) -> Result<Self> {
        let components = kernel
            .components()
            .iter()
            .map(|k| OperatorMatrix::from_kernel(grid, k, |_| 1.0))
            .collect::<Result<_>>()?;
        Ok(Self { components, coarse: None })
    }

    /// Also keeps the column sums over level-`level` cubes, used by [`Self::apply`]
    /// whenever the input is measurable at that level.
    pub fn with_coarse_level(mut self, level: usize) -> Result<Self> {
        let grid = match self.components.first() {
            Some(a) => a.grid(),
            None => return Ok(self),
        };
        grid.check_level(level)?;
        let n = grid.num_cells();
        let cubes = grid.num_cubes(level);
        let blocks = self
            .components
            .iter()
            .map(|a| {
                let e = a.entries();
                let mut b = vec![0.0; n * cubes];
                for x in 0..n {
                    for cube in grid.cubes(level) {
                        b[x * cubes + cube.index] = grid.cell_range(cube).map(|y| e[(x, y)]).sum();
                    }
                }
                b
            })
            .collect();
        self.coarse = Some(CoarseColumns { level, blocks });
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// `(T_k f)_k`.
    pub fn apply(&self, f: &OperatorField) -> Result<Vec<OperatorField>> {
        if let Some(c) = &self.coarse {
            if f.level_deviation(c.level) == 0.0 {
                return self.apply_coarse(c, f);
            }
        }
        self.components.iter().map(|a| a.apply(f)).collect()
    }

    fn apply_coarse(&self, c: &CoarseColumns, f: &OperatorField) -> Result<Vec<OperatorField>> {
        let grid = f.grid();
        let m = f.matrix_dim();
        let mm = m * m;
        let n = grid.num_cells();
        let cubes = grid.num_cubes(c.level);
        let values: Vec<Complex64> =
            grid.cubes(c.level).flat_map(|q| f.value(grid.cell_range(q).start).to_row_major()).collect();
        c.blocks
            .iter()
            .map(|b| {
                let out: Vec<Complex64> = (0..n)
                    .into_par_iter()
                    .flat_map_iter(|x| {
                        let mut acc = vec![Complex64::new(0.0, 0.0); mm];
                        for (k, &weight) in b[x * cubes..(x + 1) * cubes].iter().enumerate() {
                            for (a, v) in acc.iter_mut().zip(&values[k * mm..(k + 1) * mm]) {
                                *a += v * weight;
                            }
                        }
                        acc
                    })
                    .collect();
                unflatten(grid, m, &out)
            })
            .collect()
    }
}
