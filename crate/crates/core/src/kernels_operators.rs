//! Calderón-Zygmund kernels on the window, truncated and lacunary operators,
//! the averaging operator, Hörmander moduli and norms in column, row and
//! maximal spaces.
//!
//! Operators are discretized by the midpoint rule: the kernel is evaluated
//! at cell centres and the diagonal is excluded. Every radial comparison is
//! made on squared cell-centre distances, which are exact dyadic rationals,
//! so truncations and annulus memberships are decided without rounding.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::dyadic_model::{Cube, DyadicGrid, KahanSum, OperatorField, TraceFunctional};
use crate::error::{Error, Result};
use crate::matrix_algebra::{MatrixElement, HERMITIAN_TOL, PROJECTION_TOL};
use crate::weights::Weight;

/// Declared regularity of a kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Smoothness {
    Lipschitz,
    /// The `L_r`-Hörmander class for the given `r`.
    Hormander(f64),
    Unknown,
}

type KernelFn = Arc<dyn Fn([f64; 2], [f64; 2]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Rule {
    Hilbert,
    Riesz(usize),
    /// `t ∂_t P_t` at the given `t`.
    PoissonDerivative(f64),
    Custom(KernelFn),
}

/// A real scalar kernel `K(x, y)`, defined for `x ≠ y`.
#[derive(Clone)]
pub struct Kernel {
    rule: Rule,
    dim: usize,
    smoothness: Smoothness,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rule = match &self.rule {
            Rule::Hilbert => "hilbert".to_string(),
            Rule::Riesz(j) => format!("riesz:{}", j + 1),
            Rule::PoissonDerivative(t) => format!("poisson-derivative(t={t})"),
            Rule::Custom(_) => "custom".to_string(),
        };
        write!(f, "Kernel({rule}, d={}, {:?})", self.dim, self.smoothness)
    }
}

fn poisson_constant(dim: usize) -> f64 {
    if dim == 1 {
        std::f64::consts::FRAC_1_PI
    } else {
        0.5 * std::f64::consts::FRAC_1_PI
    }
}

impl Kernel {
    /// `1 / (x - y)` on the line.
    pub fn hilbert() -> Self {
        Self { rule: Rule::Hilbert, dim: 1, smoothness: Smoothness::Lipschitz }
    }

    /// `(x_j - y_j) / |x - y|^{d+1}`, with `component` counted from 1.
    pub fn riesz(dim: usize, component: usize) -> Result<Self> {
        check_dim(dim)?;
        if component == 0 || component > dim {
            return Err(Error::InvalidParameter(format!(
                "Riesz component {component} outside 1..={dim}"
            )));
        }
        Ok(Self { rule: Rule::Riesz(component - 1), dim, smoothness: Smoothness::Lipschitz })
    }

    /// `t ∂_t P_t(x - y)` for the Poisson kernel of the upper half-space.
    pub fn poisson_derivative(dim: usize, t: f64) -> Result<Self> {
        check_dim(dim)?;
        if !(t > 0.0) {
            return Err(Error::InvalidParameter(format!("Poisson scale {t} must be positive")));
        }
        Ok(Self { rule: Rule::PoissonDerivative(t), dim, smoothness: Smoothness::Lipschitz })
    }

    pub fn custom(
        dim: usize,
        smoothness: Smoothness,
        rule: impl Fn([f64; 2], [f64; 2]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { rule: Rule::Custom(Arc::new(rule)), dim, smoothness })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn smoothness(&self) -> Smoothness {
        self.smoothness
    }

    /// Whether `K(y, x) = ±K(x, y)` is known, which is the case for the
    /// convolution built-ins.
    pub fn is_convolution_builtin(&self) -> bool {
        !matches!(self.rule, Rule::Custom(_))
    }

    pub fn eval(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        let mut z = [0.0; 2];
        let mut r2 = 0.0;
        for a in 0..self.dim {
            z[a] = x[a] - y[a];
            r2 += z[a] * z[a];
        }
        match &self.rule {
            Rule::Hilbert => 1.0 / z[0],
            Rule::Riesz(j) => z[*j] / r2.powf(0.5 * (self.dim as f64 + 1.0)),
            Rule::PoissonDerivative(t) => {
                let d = self.dim as f64;
                let t2 = t * t;
                poisson_constant(self.dim) * t * (r2 - d * t2) / (t2 + r2).powf(0.5 * (d + 3.0))
            }
            Rule::Custom(k) => k(x, y),
        }
    }

    /// `K^t(x, y) = K(y, x)`.
    pub fn transposed(&self) -> Self {
        let inner = self.clone();
        Self {
            rule: Rule::Custom(Arc::new(move |x, y| inner.eval(y, x))),
            dim: self.dim,
            smoothness: self.smoothness,
        }
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 1 || dim == 2 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("dimension {dim} not supported")))
    }
}

/// A finite family `(K_k)_{k=1..N}` evaluated in `ℓ_2`.
#[derive(Clone, Debug)]
pub struct VectorKernel {
    components: Vec<Kernel>,
    /// Number of retained terms when the family truncates the dyadic-Poisson sequence.
    poisson_terms: Option<usize>,
}

pub const MAX_COMPONENTS: usize = 64;

impl VectorKernel {
    pub fn new(components: Vec<Kernel>) -> Result<Self> {
        if components.is_empty() || components.len() > MAX_COMPONENTS {
            return Err(Error::InvalidParameter(format!(
                "vector kernels need 1..={MAX_COMPONENTS} components, got {}",
                components.len()
            )));
        }
        let dim = components[0].dim;
        if components.iter().any(|k| k.dim != dim) {
            return Err(Error::Mismatch("components live in different dimensions".into()));
        }
        Ok(Self { components, poisson_terms: None })
    }

    pub fn scalar(kernel: Kernel) -> Self {
        Self { components: vec![kernel], poisson_terms: None }
    }

    /// `K_k = t ∂_t P_t` at `t = 2^{-k}`, `k = 1..=terms`.
    pub fn dyadic_poisson(dim: usize, terms: usize) -> Result<Self> {
        let components = (1..=terms)
            .map(|k| Kernel::poisson_derivative(dim, 2f64.powi(-(k as i32))))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self::new(components)?;
        out.poisson_terms = Some(terms);
        Ok(out)
    }

    pub fn components(&self) -> &[Kernel] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim
    }

    pub fn norm(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        self.components.iter().map(|k| k.eval(x, y).powi(2)).sum::<f64>().sqrt()
    }

    pub fn transposed(&self) -> Self {
        Self {
            components: self.components.iter().map(Kernel::transposed).collect(),
            poisson_terms: self.poisson_terms,
        }
    }

    /// `sup |x - y|^d ‖K⃗(x, y)‖` over cell centres: all `x` against a
    /// spread of at most 32 source cells.
    pub fn size_constant(&self, grid: DyadicGrid) -> f64 {
        let n = grid.num_cells();
        let stride = (n / 32).max(1);
        let d = grid.dim() as i32;
        (0..n)
            .step_by(stride)
            .map(|y| {
                let cy = grid.cell_center(y);
                (0..n)
                    .filter(|&x| x != y)
                    .map(|x| {
                        let cx = grid.cell_center(x);
                        grid.distance(cx, cy).powi(d) * self.norm(cx, cy)
                    })
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// For a truncated dyadic-Poisson family: `sup |x - y|^d (Σ_{k>N} K_k²)^{1/2}`
    /// over resolvable distances, summing the next 64 terms. Zero for other families.
    pub fn tail_bound(&self, grid: DyadicGrid) -> f64 {
        let Some(terms) = self.poisson_terms else {
            return 0.0;
        };
        let dim = self.dim();
        let h = grid.cell_side();
        let steps = 1usize << grid.depth();
        (1..=steps)
            .map(|s| {
                let u = s as f64 * h;
                let mut x = [0.0; 2];
                x[0] = u;
                let tail: f64 = (terms + 1..=terms + 64)
                    .map(|k| {
                        let kern = Kernel::poisson_derivative(dim, 2f64.powi(-(k as i32)))
                            .expect("valid dimension");
                        kern.eval(x, [0.0; 2]).powi(2)
                    })
                    .sum();
                u.powi(dim as i32) * tail.sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Kernel selection as given on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelSpec {
    Hilbert,
    /// Component index counted from 1.
    Riesz(usize),
    DyadicPoisson(usize),
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unknown kernel '{s}'"));
        if s == "hilbert" {
            return Ok(Self::Hilbert);
        }
        let (name, arg) = s.split_once(':').ok_or_else(bad)?;
        let n: usize = arg.trim().parse().map_err(|_| bad())?;
        match name {
            "riesz" if n >= 1 => Ok(Self::Riesz(n)),
            "dyadic-poisson" if (1..=MAX_COMPONENTS).contains(&n) => Ok(Self::DyadicPoisson(n)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Hilbert => write!(f, "hilbert"),
            Self::Riesz(j) => write!(f, "riesz:{j}"),
            Self::DyadicPoisson(n) => write!(f, "dyadic-poisson:{n}"),
        }
    }
}

impl KernelSpec {
    pub fn build(&self, dim: usize) -> Result<VectorKernel> {
        match *self {
            Self::Hilbert => {
                if dim != 1 {
                    return Err(Error::InvalidParameter("the Hilbert kernel needs d = 1".into()));
                }
                Ok(VectorKernel::scalar(Kernel::hilbert()))
            }
            Self::Riesz(j) => Ok(VectorKernel::scalar(Kernel::riesz(dim, j)?)),
            Self::DyadicPoisson(n) => VectorKernel::dyadic_poisson(dim, n),
        }
    }
}

// ---------------------------------------------------------------------------
// The dyadic partition of unity.

fn bump(t: f64) -> f64 {
    if t > 1.0 && t < 2.0 {
        (-1.0 / ((t - 1.0) * (2.0 - t))).exp()
    } else {
        0.0
    }
}

/// `ψ(t) = B(t) / Σ_j B(2^j t)` as a function of `t²`, for the `C^∞` bump `B`
/// on `[1, 2]`. Where the normalizing sum underflows the value follows the
/// octave `(1, 2]`, so the partition is exact at octave endpoints.
pub fn psi_of_squared(t2: f64) -> f64 {
    if !(t2 > 0.0) {
        return 0.0;
    }
    let t = t2.sqrt();
    let den: f64 = (-2..=2).map(|j| bump(t * 2f64.powi(j))).sum();
    if den > 0.0 {
        bump(t) / den
    } else if t2 > 1.0 && t2 <= 4.0 {
        1.0
    } else {
        0.0
    }
}

/// `x ↦ ψ(2^i |x| / √d)`.
#[derive(Clone, Copy, Debug)]
pub struct PsiPartition {
    pub index: i32,
    pub dim: usize,
}

pub fn psi_partition(index: i32, dim: usize) -> PsiPartition {
    PsiPartition { index, dim }
}

impl PsiPartition {
    /// Value at a point with squared norm `r2`.
    pub fn at_squared(&self, r2: f64) -> f64 {
        psi_of_squared(4f64.powi(self.index) * r2 / self.dim as f64)
    }

    pub fn at(&self, x: &[f64]) -> f64 {
        self.at_squared(x.iter().map(|v| v * v).sum())
    }
}

/// The unique `i` with `ψ_i(u) ≠ 0` under the octave convention, that is
/// `4^{i-1} u²/d ≤ 1 < 4^i u²/d`.
pub fn annulus_index(r2: f64, dim: usize) -> i32 {
    assert!(r2 > 0.0, "annulus index of the origin");
    let s = r2 / dim as f64;
    let mut i = (-(s.log2()) / 2.0).floor() as i32;
    while 4f64.powi(i) * s <= 1.0 {
        i += 1;
    }
    while 4f64.powi(i - 1) * s > 1.0 {
        i -= 1;
    }
    i
}

/// `j_ε = ⌊log₂(2√d/ε)⌋`, the largest `j` with `4^j ε² ≤ 4d`.
pub fn lacunary_index(eps: f64, dim: usize) -> i32 {
    assert!(eps > 0.0, "truncation radius must be positive");
    let bound = 4.0 * dim as f64;
    let e2 = eps * eps;
    let mut j = (2.0 * (dim as f64).sqrt() / eps).log2().floor() as i32;
    while 4f64.powi(j) * e2 > bound {
        j -= 1;
    }
    while 4f64.powi(j + 1) * e2 <= bound {
        j += 1;
    }
    j
}

// ---------------------------------------------------------------------------
// Discretized operators.

/// A real `N × N` quadrature matrix acting on operator fields cellwise.
#[derive(Clone, Debug)]
pub struct OperatorMatrix {
    grid: DyadicGrid,
    entries: DMatrix<f64>,
}

fn field_to_real(f: &OperatorField) -> DMatrix<f64> {
    let m = f.matrix_dim();
    let cols = 2 * m * m;
    DMatrix::from_fn(f.grid().num_cells(), cols, |cell, c| {
        let k = c / 2;
        let z = f.value(cell).get(k / m, k % m);
        if c % 2 == 0 {
            z.re
        } else {
            z.im
        }
    })
}

fn real_to_field(grid: DyadicGrid, m: usize, data: &DMatrix<f64>) -> Result<OperatorField> {
    OperatorField::from_fn(grid, |cell| {
        let entries: Vec<Complex64> = (0..m * m)
            .map(|k| Complex64::new(data[(cell, 2 * k)], data[(cell, 2 * k + 1)]))
            .collect();
        MatrixElement::from_row_major(m, &entries).expect("square block")
    })
}

impl OperatorMatrix {
    /// `A[x][y] = K(c_x, c_y) · factor(|c_x - c_y|²) · |cell|` off the diagonal.
    pub fn from_kernel(
        grid: DyadicGrid,
        kernel: &Kernel,
        factor: impl Fn(f64) -> f64 + Sync,
    ) -> Result<Self> {
        if kernel.dim() != grid.dim() {
            return Err(Error::DimensionMismatch { expected: grid.dim(), found: kernel.dim() });
        }
        let h2 = grid.cell_side() * grid.cell_side();
        let vol = grid.cell_volume();
        Ok(Self::from_pairs(grid, |x, y| {
            if x == y {
                return 0.0;
            }
            let s = factor(grid.cell_offset_sq(x, y) as f64 * h2);
            if s == 0.0 {
                0.0
            } else {
                kernel.eval(grid.cell_center(x), grid.cell_center(y)) * s * vol
            }
        }))
    }

    fn from_pairs(grid: DyadicGrid, entry: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let n = grid.num_cells();
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|x| (0..n).map(move |y| (x, y)))
            .map(|(x, y)| entry(x, y))
            .collect();
        Self { grid, entries: DMatrix::from_row_slice(n, n, &rows) }
    }

    pub fn grid(&self) -> DyadicGrid {
        self.grid
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn apply(&self, f: &OperatorField) -> Result<OperatorField> {
        if f.grid() != self.grid {
            return Err(Error::Mismatch("operator and field live on different grids".into()));
        }
        let out = &self.entries * field_to_real(f);
        real_to_field(self.grid, f.matrix_dim(), &out)
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self { grid: self.grid, entries: &self.entries - &other.entries }
    }
}

/// The quadrature of `T_ε`: pairs with `|c_x - c_y| > ε`.
pub fn truncated_matrix(kernel: &Kernel, grid: DyadicGrid, eps: f64) -> Result<OperatorMatrix> {
    let e2 = eps * eps;
    OperatorMatrix::from_kernel(grid, kernel, |u2| if u2 > e2 { 1.0 } else { 0.0 })
}

pub fn truncated_apply(kernel: &Kernel, f: &OperatorField, eps: f64) -> Result<OperatorField> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("truncation radius {eps} must be positive")));
    }
    truncated_matrix(kernel, f.grid(), eps)?.apply(f)
}

/// `T_j = Σ_{i<j} ∫ K ψ_i`.
pub fn lacunary_matrix(kernel: &Kernel, grid: DyadicGrid, j: i32) -> Result<OperatorMatrix> {
    let dim = grid.dim();
    OperatorMatrix::from_kernel(grid, kernel, |u2| {
        let i = annulus_index(u2, dim);
        if i < j {
            psi_partition(i, dim).at_squared(u2)
        } else {
            0.0
        }
    })
}

pub fn lacunary_apply(kernel: &Kernel, f: &OperatorField, j: i32) -> Result<OperatorField> {
    lacunary_matrix(kernel, f.grid(), j)?.apply(f)
}

/// The single annulus `∫ K ψ_i`.
pub fn annulus_matrix(kernel: &Kernel, grid: DyadicGrid, i: i32) -> Result<OperatorMatrix> {
    let psi = psi_partition(i, grid.dim());
    OperatorMatrix::from_kernel(grid, kernel, |u2| psi.at_squared(u2))
}

/// `T_{ε,j} = Σ_{i≥j} ∫_{|x-y|>ε} K ψ_i`.
pub fn boundary_matrix(kernel: &Kernel, grid: DyadicGrid, eps: f64, j: i32) -> Result<OperatorMatrix> {
    let dim = grid.dim();
    let e2 = eps * eps;
    OperatorMatrix::from_kernel(grid, kernel, |u2| {
        let i = annulus_index(u2, dim);
        if u2 > e2 && i >= j {
            psi_partition(i, dim).at_squared(u2)
        } else {
            0.0
        }
    })
}

/// `max |T_ε f - T_{j_ε} f - T_{ε,j_ε} f|` entrywise.
pub fn reduction_residual(kernel: &Kernel, f: &OperatorField, eps: f64) -> Result<f64> {
    let grid = f.grid();
    let j = lacunary_index(eps, grid.dim());
    let full = truncated_apply(kernel, f, eps)?;
    let lac = lacunary_apply(kernel, f, j)?;
    let bdry = boundary_matrix(kernel, grid, eps, j)?.apply(f)?;
    Ok(full.max_distance(&lac.add(&bdry)?))
}

/// Quadrature of `M_r f = r^{-d} ∫_{|x-y|≤r} f(y) dy`.
pub fn averaging_matrix(grid: DyadicGrid, r: f64) -> Result<OperatorMatrix> {
    if !(r > 0.0) {
        return Err(Error::InvalidParameter(format!("averaging radius {r} must be positive")));
    }
    let h2 = grid.cell_side() * grid.cell_side();
    let r2 = r * r;
    let c = grid.cell_volume() / r.powi(grid.dim() as i32);
    Ok(OperatorMatrix::from_pairs(grid, |x, y| {
        if grid.cell_offset_sq(x, y) as f64 * h2 <= r2 {
            c
        } else {
            0.0
        }
    }))
}

pub fn averaging_apply(f: &OperatorField, r: f64) -> Result<OperatorField> {
    averaging_matrix(f.grid(), r)?.apply(f)
}

/// Smallest `C` with `|T_{ε,j_ε} f| ≤ C M_ρ f`, `ρ = 2^{1-j_ε}√d`, for a
/// nonnegative scalar `f`.
pub fn sandwich_constant(kernel: &Kernel, f: &OperatorField, eps: f64) -> Result<f64> {
    if f.matrix_dim() != 1 {
        return Err(Error::InvalidParameter("sandwich constants are scalar".into()));
    }
    f.require_positive("sandwich source")?;
    let grid = f.grid();
    let j = lacunary_index(eps, grid.dim());
    let rho = 2f64.powi(1 - j) * (grid.dim() as f64).sqrt();
    let t = boundary_matrix(kernel, grid, eps, j)?.apply(f)?;
    let avg = averaging_apply(f, rho)?;
    let mut c: f64 = 0.0;
    for cell in 0..grid.num_cells() {
        let top = t.value(cell).get(0, 0).re.abs();
        let bottom = avg.value(cell).get(0, 0).re;
        if bottom > 0.0 {
            c = c.max(top / bottom);
        } else if top > 1e-14 {
            return Ok(f64::INFINITY);
        }
    }
    Ok(c)
}

/// Relative `L_1` gap between `E_{J-1} T^{(J)} f` and `T^{(J-1)} E_{J-1} f`.
pub fn richardson_defect(kernel: &Kernel, f: &OperatorField, eps: f64) -> Result<f64> {
    let grid = f.grid();
    if grid.depth() == 0 {
        return Ok(0.0);
    }
    let fine = truncated_apply(kernel, f, eps)?.coarsen(grid.depth() - 1)?;
    let coarse = truncated_apply(kernel, &f.coarsen(grid.depth() - 1)?, eps)?;
    let tr = TraceFunctional::lebesgue();
    let scale = tr.norm(&fine, 1.0)?;
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(tr.norm(&fine.sub(&coarse)?, 1.0)? / scale)
}

/// `T⃗ f = (T_{k,ε} f)_k`; `eps = 0` keeps every off-diagonal pair.
pub fn vector_apply(kernel: &VectorKernel, f: &OperatorField, eps: f64) -> Result<Vec<OperatorField>> {
    kernel
        .components()
        .iter()
        .map(|k| truncated_matrix(k, f.grid(), eps.max(0.0))?.apply(f))
        .collect()
}

// ---------------------------------------------------------------------------
// Hörmander moduli.

/// Which variable the modulus differentiates in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// `K(x, y) - K(x, c_Q)`.
    Standard,
    /// `K(y, x) - K(c_Q, x)`.
    Transposed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulusRow {
    pub cube: Cube,
    pub j: usize,
    pub value: f64,
    pub partial_sum: f64,
    /// The annulus leaves the window, so the value only sees its clipped part.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct HormanderModulus {
    pub r: f64,
    pub orientation: Orientation,
    pub rows: Vec<ModulusRow>,
}

impl HormanderModulus {
    pub fn rows_for(&self, cube: Cube) -> impl Iterator<Item = &ModulusRow> {
        self.rows.iter().filter(move |row| row.cube == cube)
    }

    /// Largest total over the cubes.
    pub fn sup_partial_sum(&self) -> f64 {
        self.rows.iter().map(|row| row.partial_sum).fold(0.0, f64::max)
    }

    /// Decay exponent `a` from a least-squares fit `log₂ m(j) ≈ c - a j`
    /// over the untruncated, nonzero rows of `cube`.
    pub fn decay_exponent(&self, cube: Cube) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows_for(cube)
            .filter(|row| !row.truncated && row.value > 0.0)
            .map(|row| (row.j as f64, row.value.log2()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(-sxy / sxx)
    }

    /// Geometric estimate of `Σ_{j>j_max}` from the fitted decay and the last row.
    pub fn tail_estimate(&self, cube: Cube) -> Option<f64> {
        let a = self.decay_exponent(cube)?;
        if a <= 0.0 {
            return Some(f64::INFINITY);
        }
        let last = self.rows_for(cube).last()?.value;
        let q = 2f64.powf(-a);
        Some(last * q / (1.0 - q))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,index,j,m_r,partial_sum,truncated\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.12e},{:.12e},{}\n",
                row.cube.level, row.cube.index, row.j, row.value, row.partial_sum, row.truncated
            ));
        }
        out
    }
}

/// `sup_{y∈Q} (2^j ℓ)^d ((2^j ℓ)^{-d} ∫_{2^jℓ ≤ |x-c_Q| ≤ 2^{j+1}ℓ} ‖K⃗_Q‖^r dx)^{1/r}`
/// for each cube and `1 ≤ j ≤ j_max`, with `y` ranging over the cell centres of `Q`.
pub fn hormander_modulus(
    kernel: &VectorKernel,
    grid: DyadicGrid,
    r: f64,
    cubes: &[Cube],
    j_max: usize,
    orientation: Orientation,
) -> Result<HormanderModulus> {
    if !(r >= 1.0) {
        return Err(Error::InvalidExponent(r));
    }
    if kernel.dim() != grid.dim() {
        return Err(Error::DimensionMismatch { expected: grid.dim(), found: kernel.dim() });
    }
    for q in cubes {
        grid.check_level(q.level)?;
    }
    let dim = grid.dim();
    let vol = grid.cell_volume();
    let tasks: Vec<(Cube, usize)> =
        cubes.iter().flat_map(|&q| (1..=j_max).map(move |j| (q, j))).collect();
    let values: Vec<(f64, bool)> = tasks
        .par_iter()
        .map(|&(q, j)| {
            let c = grid.cube_center(q);
            let side = grid.side(q.level);
            let inner = 2f64.powi(j as i32) * side;
            let outer = 2.0 * inner;
            let truncated = (0..dim).any(|a| c[a] - outer < 0.0 || c[a] + outer > 1.0);
            let ring: Vec<[f64; 2]> = (0..grid.num_cells())
                .map(|x| grid.cell_center(x))
                .filter(|&x| {
                    let u = grid.distance(x, c);
                    u >= inner && u <= outer
                })
                .collect();
            let scale = inner.powi(dim as i32);
            let best = grid
                .cell_range(q)
                .map(|y| {
                    let y = grid.cell_center(y);
                    let mut acc = KahanSum::default();
                    for &x in &ring {
                        let diff: f64 = kernel
                            .components()
                            .iter()
                            .map(|k| match orientation {
                                Orientation::Standard => k.eval(x, y) - k.eval(x, c),
                                Orientation::Transposed => k.eval(y, x) - k.eval(c, x),
                            })
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt();
                        acc.add(diff.powf(r));
                    }
                    scale * (acc.value() * vol / scale).powf(1.0 / r)
                })
                .fold(0.0, f64::max);
            (best, truncated)
        })
        .collect();
    let mut rows = Vec::with_capacity(tasks.len());
    let mut running = 0.0;
    for (&(cube, j), &(value, truncated)) in tasks.iter().zip(&values) {
        if j == 1 {
            running = 0.0;
        }
        running += value;
        rows.push(ModulusRow { cube, j, value, partial_sum: running, truncated });
    }
    Ok(HormanderModulus { r, orientation, rows })
}

// ---------------------------------------------------------------------------
// Column, row and maximal norms.

fn check_family(family: &[OperatorField]) -> Result<(DyadicGrid, usize)> {
    let first = family
        .first()
        .ok_or_else(|| Error::InvalidParameter("empty family".into()))?;
    let (grid, m) = (first.grid(), first.matrix_dim());
    if family.iter().any(|a| a.grid() != grid || a.matrix_dim() != m) {
        return Err(Error::Mismatch("family members live on different grids".into()));
    }
    Ok((grid, m))
}

/// `tr(s^q)` for positive semidefinite `s`.
fn psd_power_trace(s: &MatrixElement, q: f64) -> Result<f64> {
    Ok(s.eigenvalues()?.iter().map(|&l| l.max(0.0).powf(q)).sum())
}

fn square_sum_norm(family: &[OperatorField], p: f64, w: Option<&Weight>, column: bool) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidExponent(p));
    }
    let (grid, m) = check_family(family)?;
    let mut acc = KahanSum::default();
    for cell in 0..grid.num_cells() {
        let mut s = MatrixElement::zeros(m);
        for a in family {
            let v = a.value(cell);
            s = &s + &if column { v.gram() } else { v.co_gram() };
        }
        let wt = w.map_or(1.0, |w| w.values()[cell]);
        acc.add(psd_power_trace(&s, p / 2.0)? * wt);
    }
    Ok((acc.value() * grid.cell_volume()).powf(1.0 / p))
}

/// `‖(Σ a_k^* a_k)^{1/2}‖_{L_p^w}`.
pub fn column_norm(family: &[OperatorField], p: f64, w: Option<&Weight>) -> Result<f64> {
    square_sum_norm(family, p, w, true)
}

/// `‖(Σ a_k a_k^*)^{1/2}‖_{L_p^w}`.
pub fn row_norm(family: &[OperatorField], p: f64, w: Option<&Weight>) -> Result<f64> {
    square_sum_norm(family, p, w, false)
}

/// The column-row norm. For `p ≥ 2` this is the intersection norm
/// `max(column, row)`. For `p < 2` the sum norm is an infimum over splits
/// `a_k = b_k + c_k`; this returns the best of three fixed splits (all
/// column, all row, and components with `‖a_k‖ ≥` median in the column
/// part), which is an upper bound.
pub fn cr_norm(family: &[OperatorField], p: f64, w: Option<&Weight>) -> Result<f64> {
    let c = column_norm(family, p, w)?;
    let r = row_norm(family, p, w)?;
    if p >= 2.0 {
        return Ok(c.max(r));
    }
    let tr = TraceFunctional { weight: w };
    let norms: Vec<f64> = family.iter().map(|a| tr.norm(a, p)).collect::<Result<_>>()?;
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(sorted.len() - 1) / 2];
    let (big, small): (Vec<_>, Vec<_>) =
        family.iter().zip(&norms).partition(|(_, &n)| n >= median);
    let big: Vec<OperatorField> = big.into_iter().map(|(a, _)| a.clone()).collect();
    let small: Vec<OperatorField> = small.into_iter().map(|(a, _)| a.clone()).collect();
    let mut split = column_norm(&big, p, w)?;
    if !small.is_empty() {
        split += row_norm(&small, p, w)?;
    }
    Ok(c.min(r).min(split))
}

/// Bounds on `‖(a_n)‖_{L_p^w(ℓ_∞)} = inf { ‖b‖ : -b ≤ a_n ≤ b }`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaximalBound {
    pub upper: f64,
    pub lower: f64,
}

pub const MAJORANT_ITERATIONS: usize = 200;

/// Adds the negative part of `b - a` to `b`, so that afterwards `b ≥ a`.
fn lift_above(b: &MatrixElement, a: &MatrixElement) -> Result<MatrixElement> {
    let gap = b - a;
    let eig = gap.eigh()?;
    if eig.values[0] >= 0.0 {
        return Ok(b.clone());
    }
    Ok((b + &eig.reassemble(|x| (-x).max(0.0))).hermitian_part())
}

fn make_feasible(mut b: MatrixElement, values: &[&MatrixElement]) -> Result<MatrixElement> {
    for a in values {
        b = lift_above(&b, a)?;
        b = lift_above(&b, &a.scale(-1.0))?;
    }
    Ok(b)
}

/// A positive `b` with `-b ≤ a_n ≤ b` for all `n`, found by shrinking
/// `(Σ a_n²)^{1/2}` and restoring feasibility after each step; `tr b^p` never
/// increases. For commuting scalars this is `max |a_n|`.
pub fn cell_majorant(values: &[&MatrixElement], p: f64, iterations: usize) -> Result<MatrixElement> {
    let m = values
        .first()
        .map(|a| a.dim())
        .ok_or_else(|| Error::InvalidParameter("empty family".into()))?;
    if m == 1 {
        let top = values.iter().map(|a| a.get(0, 0).re.abs()).fold(0.0, f64::max);
        return Ok(MatrixElement::scalar(1, top));
    }
    let mut sq = MatrixElement::zeros(m);
    for a in values {
        sq = &sq + &a.gram();
    }
    let mut best = make_feasible(sq.sqrt_psd()?, values)?;
    let mut cost = psd_power_trace(&best, p)?;
    let mut step = 0.5;
    for _ in 0..iterations {
        if cost == 0.0 {
            break;
        }
        let trial = make_feasible(best.scale(1.0 - step), values)?;
        let c = psd_power_trace(&trial, p)?;
        if c < cost {
            best = trial;
            cost = c;
        } else {
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
    }
    Ok(best)
}

fn require_hermitian(family: &[OperatorField], what: &'static str) -> Result<()> {
    for a in family {
        for v in a.values() {
            let dev = v.hermitian_deviation();
            if dev > HERMITIAN_TOL * (1.0 + v.max_entry()) {
                return Err(Error::NotHermitian { what, deviation: dev });
            }
        }
    }
    Ok(())
}

pub fn maximal_linfty_bound(
    family: &[OperatorField],
    p: f64,
    w: Option<&Weight>,
    iterations: usize,
) -> Result<MaximalBound> {
    if !(p >= 1.0) {
        return Err(Error::InvalidExponent(p));
    }
    let (grid, _) = check_family(family)?;
    require_hermitian(family, "maximal family")?;
    let tr = TraceFunctional { weight: w };
    let lower = family.iter().map(|a| tr.norm(a, p)).collect::<Result<Vec<_>>>()?;
    let lower = lower.into_iter().fold(0.0, f64::max);
    let costs: Vec<f64> = (0..grid.num_cells())
        .into_par_iter()
        .map(|cell| {
            let values: Vec<&MatrixElement> = family.iter().map(|a| a.value(cell)).collect();
            let b = cell_majorant(&values, p, iterations)?;
            Ok(psd_power_trace(&b, p)? * w.map_or(1.0, |w| w.values()[cell]))
        })
        .collect::<Result<_>>()?;
    let mut acc = KahanSum::default();
    costs.iter().for_each(|&c| acc.add(c));
    let upper = (acc.value() * grid.cell_volume()).powf(1.0 / p);
    Ok(MaximalBound { upper: upper.max(lower), lower })
}

/// Outcome of checking a witness `e` for `Λ_{1,∞}^w` membership at level `λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakCertificate {
    pub passes: bool,
    /// `max_k ‖e a_k e‖_∞`.
    pub compressed_sup: f64,
    /// `λ φ^w(1 - e)`.
    pub mass: f64,
}

pub fn weak_maximal_certificate(
    family: &[OperatorField],
    lambda: f64,
    e: &OperatorField,
    w: Option<&Weight>,
) -> Result<WeakCertificate> {
    let (grid, m) = check_family(family)?;
    if e.grid() != grid || e.matrix_dim() != m {
        return Err(Error::Mismatch("witness and family live on different grids".into()));
    }
    let mut dev: f64 = 0.0;
    for v in e.values() {
        dev = dev.max(v.projection_deviation());
    }
    if dev > PROJECTION_TOL {
        return Err(Error::NotProjection { what: "certificate witness", deviation: dev });
    }
    let mut sup: f64 = 0.0;
    for a in family {
        for cell in 0..grid.num_cells() {
            let ev = e.value(cell);
            sup = sup.max((&(ev * a.value(cell)) * ev).op_norm()?);
        }
    }
    let mass = lambda * TraceFunctional { weight: w }.apply_real(&e.complement())?;
    Ok(WeakCertificate {
        passes: sup <= lambda * (1.0 + 1e-12) + 1e-14,
        compressed_sup: sup,
        mass,
    })
}

// ---------------------------------------------------------------------------
// Annular kernel sums.

fn source_mass(f: &OperatorField, cube: Cube, w: Option<&Weight>) -> Result<Vec<(usize, f64)>> {
    f.grid()
        .cell_range(cube)
        .map(|y| {
            let wt = w.map_or(1.0, |w| w.values()[y]);
            Ok((y, f.value(y).singular_values()?.iter().sum::<f64>() * wt))
        })
        .collect()
}

/// Left side over right side of the dyadic annular estimate for positive `f`
/// and `Q ∈ D_n`:
/// `Σ_{1≤i≤n-1} |Q_i| (|Q_i|^{-1} ∫_Q ‖f(y)‖_1 ∫_{Q_i} |K_{i,Q}(x,y)|^p w(x) dx dy)^{1/p}`
/// against `‖χ_Q f‖_{L_1^w}^{1/p}`, with `K_{i,Q}(x,y) = K_i(x,y) - K_i(x,c_Q)`
/// and `Q_i` the cells within `2^{1-i}√d + ℓ(Q)√d/2` of `c_Q`.
pub fn annular_lemma_ratio(
    kernel: &Kernel,
    f: &OperatorField,
    cube: Cube,
    p: f64,
    w: Option<&Weight>,
) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidExponent(p));
    }
    f.require_positive("annular source")?;
    let grid = f.grid();
    grid.check_level(cube.level)?;
    let dim = grid.dim();
    let rd = (dim as f64).sqrt();
    let vol = grid.cell_volume();
    let c = grid.cube_center(cube);
    let rhs = source_mass(f, cube, w)?;
    let rhs_total: f64 = rhs.iter().map(|t| t.1).sum::<f64>() * vol;
    // The left side pairs ‖f(y)‖_1 unweighted with w(x); the right side weights y.
    let sources: Vec<(usize, f64)> = source_mass(f, cube, None)?;
    let mut lhs = 0.0;
    for i in 1..cube.level as i32 {
        let psi = psi_partition(i, dim);
        let radius = 2f64.powi(1 - i) * rd + grid.side(cube.level) * rd / 2.0;
        let region: Vec<usize> = (0..grid.num_cells())
            .filter(|&x| grid.distance(grid.cell_center(x), c) <= radius)
            .collect();
        let measure = region.len() as f64 * vol;
        let mut acc = KahanSum::default();
        for &(y, mass) in &sources {
            if mass == 0.0 {
                continue;
            }
            let cy = grid.cell_center(y);
            let mut inner = KahanSum::default();
            for &x in &region {
                let cx = grid.cell_center(x);
                let dy = dist_sq(cx, cy, dim);
                let dc = dist_sq(cx, c, dim);
                let ky = if dy > 0.0 { kernel.eval(cx, cy) * psi.at_squared(dy) } else { 0.0 };
                let kc = if dc > 0.0 { kernel.eval(cx, c) * psi.at_squared(dc) } else { 0.0 };
                inner.add((ky - kc).abs().powf(p) * w.map_or(1.0, |w| w.values()[x]));
            }
            acc.add(mass * inner.value() * vol);
        }
        lhs += measure * (acc.value() * vol / measure).powf(1.0 / p);
    }
    if rhs_total == 0.0 {
        return Ok(0.0);
    }
    Ok(lhs / rhs_total.powf(1.0 / p))
}

fn dist_sq(x: [f64; 2], y: [f64; 2], dim: usize) -> f64 {
    (0..dim).map(|a| (x[a] - y[a]).powi(2)).sum()
}

/// The same ratio with annuli `5^{k+1}Q \ 5^k Q`, `k ≥ 1`, and the vector
/// difference `K⃗_Q(x, y) = (K_k(x, y) - K_k(x, c_Q))_k` in `ℓ_2`. Cubes are
/// concentric with `Q`; their volumes are the unclipped `(5^{k+1} ℓ)^d`.
pub fn quintuple_lemma_ratio(
    kernel: &VectorKernel,
    f: &OperatorField,
    cube: Cube,
    p: f64,
    w: Option<&Weight>,
) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidExponent(p));
    }
    f.require_positive("annular source")?;
    let grid = f.grid();
    grid.check_level(cube.level)?;
    let dim = grid.dim();
    let vol = grid.cell_volume();
    let c = grid.cube_center(cube);
    let side = grid.side(cube.level);
    let rhs_total: f64 = source_mass(f, cube, w)?.iter().map(|t| t.1).sum::<f64>() * vol;
    let sources = source_mass(f, cube, None)?;
    let sup_dist = |x: [f64; 2]| (0..dim).map(|a| (x[a] - c[a]).abs()).fold(0.0, f64::max);
    let mut lhs = 0.0;
    let mut k = 1;
    loop {
        let inner_half = 5f64.powi(k) * side / 2.0;
        if inner_half >= 1.0 {
            break;
        }
        let outer_half = 5.0 * inner_half;
        let region: Vec<[f64; 2]> = (0..grid.num_cells())
            .map(|x| grid.cell_center(x))
            .filter(|&x| {
                let s = sup_dist(x);
                s >= inner_half && s < outer_half
            })
            .collect();
        let weights: Vec<f64> = (0..grid.num_cells())
            .filter(|&x| {
                let s = sup_dist(grid.cell_center(x));
                s >= inner_half && s < outer_half
            })
            .map(|x| w.map_or(1.0, |w| w.values()[x]))
            .collect();
        let measure = (2.0 * outer_half).powi(dim as i32);
        let mut acc = KahanSum::default();
        for &(y, mass) in &sources {
            if mass == 0.0 {
                continue;
            }
            let cy = grid.cell_center(y);
            let mut inner = KahanSum::default();
            for (x, &wt) in region.iter().zip(&weights) {
                let diff: f64 = kernel
                    .components()
                    .iter()
                    .map(|kern| (kern.eval(*x, cy) - kern.eval(*x, c)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                inner.add(diff.powf(p) * wt);
            }
            acc.add(mass * inner.value() * vol);
        }
        lhs += measure * (acc.value() * vol / measure).powf(1.0 / p);
        k += 1;
    }
    if rhs_total == 0.0 {
        return Ok(0.0);
    }
    Ok(lhs / rhs_total.powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid1(depth: usize) -> DyadicGrid {
        DyadicGrid::new(1, depth).unwrap()
    }

    fn random_scalar(grid: DyadicGrid, seed: u64) -> OperatorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..grid.num_cells()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        OperatorField::from_scalars(grid, &v).unwrap()
    }

    fn random_hermitian(grid: DyadicGrid, m: usize, seed: u64) -> OperatorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        OperatorField::from_fn(grid, |_| MatrixElement::random_hermitian(m, &mut rng)).unwrap()
    }

    #[test]
    fn partition_sums_to_one_at_point_three() {
        let s: f64 = (-20..=20).map(|i| psi_partition(i, 1).at(&[0.3])).sum();
        assert!((s - 1.0).abs() < 1e-8, "{s}");
    }

    #[test]
    fn partition_of_unity_on_samples() {
        for dim in [1, 2] {
            for k in 1..400 {
                let x = [k as f64 / 397.0, (k % 7) as f64 / 13.0];
                let x = &x[..dim];
                let s: f64 = (-30..=30).map(|i| psi_partition(i, dim).at(x)).sum();
                assert!((s - 1.0).abs() < 1e-8, "d={dim} x={x:?} sum={s}");
            }
            // exact octave endpoints
            for e in -6..6 {
                let r2 = 4f64.powi(e) * dim as f64;
                let s: f64 = (-30..=30).map(|i| psi_partition(i, dim).at_squared(r2)).sum();
                assert!((s - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn psi_vanishes_off_its_octave() {
        for i in -5..5 {
            for k in 1..200 {
                let x = k as f64 / 100.0;
                let t = 2f64.powi(i) * x;
                if !(1.0..=2.0).contains(&t) {
                    assert_eq!(psi_partition(i, 1).at(&[x]), 0.0);
                }
            }
        }
    }

    #[test]
    fn annulus_index_matches_psi_support() {
        for dim in [1, 2] {
            let g = DyadicGrid::new(dim, if dim == 1 { 8 } else { 4 }).unwrap();
            let h2 = g.cell_side().powi(2);
            for off in 1..(g.num_cells() as u64) {
                let u2 = off as f64 * h2;
                let i = annulus_index(u2, dim);
                assert!(psi_partition(i, dim).at_squared(u2) > 0.0);
                assert_eq!(psi_partition(i - 1, dim).at_squared(u2), 0.0);
                assert_eq!(psi_partition(i + 1, dim).at_squared(u2), 0.0);
            }
        }
    }

    #[test]
    fn lacunary_index_values() {
        assert_eq!(lacunary_index(0.5, 1), 2);
        assert_eq!(lacunary_index(0.3, 1), 2);
        assert_eq!(lacunary_index(2f64.powi(-6), 1), 7);
        // 2√2 / 2^-3 = 22.6
        assert_eq!(lacunary_index(0.125, 2), 4);
    }

    #[test]
    fn kernel_spec_parsing() {
        assert_eq!("hilbert".parse::<KernelSpec>().unwrap(), KernelSpec::Hilbert);
        assert_eq!("riesz:2".parse::<KernelSpec>().unwrap(), KernelSpec::Riesz(2));
        assert_eq!(
            "dyadic-poisson:8".parse::<KernelSpec>().unwrap(),
            KernelSpec::DyadicPoisson(8)
        );
        assert!("riesz:0".parse::<KernelSpec>().is_err());
        assert!("dyadic-poisson:65".parse::<KernelSpec>().is_err());
        assert!(KernelSpec::Hilbert.build(2).is_err());
        assert!(KernelSpec::Riesz(3).build(2).is_err());
        for s in ["hilbert", "riesz:1", "dyadic-poisson:4"] {
            assert_eq!(s.parse::<KernelSpec>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn truncated_zero_field() {
        let g = grid1(6);
        let f = OperatorField::zeros(g, 2);
        let t = truncated_apply(&Kernel::hilbert(), &f, 0.05).unwrap();
        assert_eq!(t.max_entry(), 0.0);
    }

    #[test]
    fn hilbert_odd_on_even_data() {
        let g = grid1(8);
        // even about x0 = 1/2, which is a cell boundary: check at the two
        // central cells, whose values must be opposite.
        let f = OperatorField::from_fn(g, |c| {
            let x = g.cell_center(c)[0];
            MatrixElement::scalar(1, (-(x - 0.5).powi(2) * 20.0).exp())
        })
        .unwrap();
        let t = truncated_apply(&Kernel::hilbert(), &f, 0.01).unwrap();
        let n = g.num_cells();
        for k in 0..n {
            let a = t.value(k).get(0, 0).re;
            let b = t.value(n - 1 - k).get(0, 0).re;
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn indicator_matches_direct_scalar_loop() {
        let g = grid1(8);
        let f = OperatorField::from_fn(g, |c| {
            let x = g.cell_center(c)[0];
            MatrixElement::scalar(1, if (0.375..0.625).contains(&x) { 1.0 } else { 0.0 })
        })
        .unwrap();
        let eps = 2f64.powi(-6);
        let t = truncated_apply(&Kernel::hilbert(), &f, eps).unwrap();
        let n = g.num_cells();
        let h = 1.0 / n as f64;
        for i in 0..n {
            let x = (i as f64 + 0.5) * h;
            let mut s = 0.0;
            for j in 0..n {
                let y = (j as f64 + 0.5) * h;
                if (x - y).abs() > eps && (0.375..0.625).contains(&y) {
                    s += h / (x - y);
                }
            }
            assert!((t.value(i).get(0, 0).re - s).abs() < 1e-12, "cell {i}");
        }
    }

    #[test]
    fn reduction_identity_on_random_fields() {
        for (dim, depth) in [(1, 9), (2, 4)] {
            let g = DyadicGrid::new(dim, depth).unwrap();
            let f = random_scalar(g, 7);
            let kernel = Kernel::riesz(dim, 1).unwrap();
            for eps in [0.3, 0.125, 0.05, 2f64.powi(-5)] {
                let res = reduction_residual(&kernel, &f, eps).unwrap();
                assert!(res <= 1e-8, "d={dim} eps={eps}: {res}");
            }
        }
    }

    #[test]
    fn lacunary_low_index_and_nesting() {
        let g = grid1(7);
        let f = random_scalar(g, 3);
        let k = Kernel::hilbert();
        assert_eq!(lacunary_apply(&k, &f, 1).unwrap().max_entry(), 0.0);
        for j in 1..8 {
            let diff = lacunary_apply(&k, &f, j + 1)
                .unwrap()
                .sub(&lacunary_apply(&k, &f, j).unwrap())
                .unwrap();
            let ann = annulus_matrix(&k, g, j).unwrap().apply(&f).unwrap();
            assert!(diff.max_distance(&ann) < 1e-12);
        }
    }

    #[test]
    fn averaging_constants() {
        let g = grid1(6);
        let f = OperatorField::constant(g, MatrixElement::scalar(1, 2.0));
        let r = 0.1;
        let out = averaging_apply(&f, r).unwrap();
        let mid = g.cell_of_coords([32, 0]);
        let cells = (0..g.num_cells())
            .filter(|&y| g.distance(g.cell_center(mid), g.cell_center(y)) <= r)
            .count();
        let expect = 2.0 * cells as f64 * g.cell_volume() / r;
        assert!((out.value(mid).get(0, 0).re - expect).abs() < 1e-12);
        let big = averaging_apply(&f, 1.5).unwrap();
        for v in big.values() {
            assert!((v.get(0, 0).re - 2.0 / 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sandwich_constants_finite_for_hilbert() {
        let g = grid1(9);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..g.num_cells()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let f = OperatorField::from_scalars(g, &v).unwrap();
        for k in 2..8 {
            let c = sandwich_constant(&Kernel::hilbert(), &f, 2f64.powi(-k) * 0.9).unwrap();
            assert!(c.is_finite() && c < 10.0, "{c}");
        }
    }

    #[test]
    fn y_independent_kernel_has_zero_modulus() {
        let g = grid1(8);
        let k = Kernel::custom(1, Smoothness::Lipschitz, |x, _| x[0].sin()).unwrap();
        let cubes: Vec<Cube> = g.cubes(4).collect();
        let m = hormander_modulus(&VectorKernel::scalar(k), g, 2.0, &cubes, 3, Orientation::Standard)
            .unwrap();
        assert_eq!(m.sup_partial_sum(), 0.0);
    }

    #[test]
    fn hilbert_modulus_decays_geometrically() {
        let g = grid1(12);
        let q = g.cube_of(g.cell_of_coords([2048, 0]), 8);
        let m = hormander_modulus(
            &VectorKernel::scalar(Kernel::hilbert()),
            g,
            2.0,
            &[q],
            8,
            Orientation::Standard,
        )
        .unwrap();
        let a = m.decay_exponent(q).unwrap();
        assert!((0.8..=1.2).contains(&a), "exponent {a}");
        let rows: Vec<_> = m.rows_for(q).collect();
        for w in rows.windows(2) {
            assert!(w[1].partial_sum >= w[0].partial_sum);
        }
        assert!(rows.iter().any(|r| r.truncated));
        let tail = m.tail_estimate(q).unwrap();
        let last = rows.iter().filter(|r| !r.truncated).last().unwrap().value;
        assert!(tail <= 2.0 * last.max(rows.last().unwrap().value));
    }

    #[test]
    fn transposed_modulus_agrees_for_builtins() {
        let g = DyadicGrid::new(2, 4).unwrap();
        let cubes: Vec<Cube> = g.cubes(2).take(4).collect();
        for kernel in [
            VectorKernel::scalar(Kernel::riesz(2, 2).unwrap()),
            VectorKernel::dyadic_poisson(2, 3).unwrap(),
        ] {
            let a = hormander_modulus(&kernel, g, 1.5, &cubes, 2, Orientation::Standard).unwrap();
            let b =
                hormander_modulus(&kernel, g, 1.5, &cubes, 2, Orientation::Transposed).unwrap();
            for (x, y) in a.rows.iter().zip(&b.rows) {
                assert!((x.value - y.value).abs() <= 1e-9 * (1.0 + x.value));
            }
        }
    }

    #[test]
    fn csv_has_one_row_per_entry() {
        let g = grid1(8);
        let cubes: Vec<Cube> = g.cubes(3).collect();
        let m = hormander_modulus(
            &VectorKernel::scalar(Kernel::hilbert()),
            g,
            1.0,
            &cubes,
            2,
            Orientation::Standard,
        )
        .unwrap();
        assert_eq!(m.to_csv().lines().count(), 1 + cubes.len() * 2);
    }

    #[test]
    fn norms_of_single_component() {
        let g = grid1(5);
        let a = OperatorField::from_fn(g, |c| {
            let mut rng = ChaCha8Rng::seed_from_u64(c as u64);
            crate::matrix_algebra::random_general(2, &mut rng)
        })
        .unwrap();
        let z = OperatorField::zeros(g, 2);
        for p in [1.0, 1.5, 2.0, 3.0] {
            let expect = TraceFunctional::lebesgue().norm(&a, p).unwrap();
            let got = cr_norm(&[a.clone(), z.clone(), z.clone()], p, None).unwrap();
            assert!((got - expect).abs() < 1e-10 * expect, "p={p}");
        }
        let fam = [a.clone(), a.adjoint(), random_hermitian(g, 2, 5)];
        let c = column_norm(&fam, 2.0, None).unwrap();
        let r = row_norm(&fam, 2.0, None).unwrap();
        assert!((c - r).abs() < 1e-10 * c);
    }

    #[test]
    fn scalar_cr_norm_is_square_function() {
        let g = grid1(6);
        let fam: Vec<OperatorField> = (0..4).map(|s| random_scalar(g, s)).collect();
        for p in [1.0, 2.0, 4.0] {
            let mut acc = 0.0;
            for cell in 0..g.num_cells() {
                let s: f64 = fam.iter().map(|a| a.value(cell).get(0, 0).re.powi(2)).sum();
                acc += s.powf(p / 2.0) * g.cell_volume();
            }
            let expect = acc.powf(1.0 / p);
            let c = column_norm(&fam, p, None).unwrap();
            assert!((c - expect).abs() < 1e-12 * expect);
            if p >= 2.0 {
                assert!((cr_norm(&fam, p, None).unwrap() - expect).abs() < 1e-12 * expect);
            } else {
                assert!(cr_norm(&fam, p, None).unwrap() <= expect * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn maximal_bound_single_and_scalar() {
        let g = grid1(5);
        let w = weights::power(g, 0.5, [0.5, 0.0]).unwrap();
        let a = random_hermitian(g, 2, 9);
        let b = maximal_linfty_bound(&[a.clone()], 1.0, Some(&w), MAJORANT_ITERATIONS).unwrap();
        assert!((b.upper - b.lower).abs() < 1e-8 * b.lower, "{b:?}");

        let fam: Vec<OperatorField> = (0..5).map(|s| random_scalar(g, s + 20)).collect();
        let b = maximal_linfty_bound(&fam, 1.5, Some(&w), MAJORANT_ITERATIONS).unwrap();
        let mut acc = 0.0;
        for cell in 0..g.num_cells() {
            let s = fam.iter().map(|a| a.value(cell).get(0, 0).re.abs()).fold(0.0, f64::max);
            acc += s.powf(1.5) * w.values()[cell] * g.cell_volume();
        }
        let expect = acc.powf(1.0 / 1.5);
        assert!((b.upper - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn pauli_pair_ratio() {
        let g = grid1(2);
        let sx = MatrixElement::from_row_major(
            2,
            &[0.0, 1.0, 1.0, 0.0].map(|x| Complex64::new(x, 0.0)),
        )
        .unwrap();
        let sz = MatrixElement::from_real_diagonal(&[1.0, -1.0]);
        let fam = [OperatorField::constant(g, sx), OperatorField::constant(g, sz)];
        for p in [1.0, 2.0, 3.0] {
            let b = maximal_linfty_bound(&fam, p, None, MAJORANT_ITERATIONS).unwrap();
            let ratio = b.upper / b.lower;
            assert!((1.0 - 1e-9..=2f64.sqrt() + 1e-9).contains(&ratio), "p={p}: {ratio}");
        }
    }

    #[test]
    fn certificate_trivial_witnesses() {
        let g = grid1(4);
        let w = weights::step(g, 1.0, 3.0).unwrap();
        let fam = vec![random_hermitian(g, 2, 1), random_hermitian(g, 2, 2)];
        let lam = 100.0;
        let id = OperatorField::identity(g, 2);
        let c = weak_maximal_certificate(&fam, lam, &id, Some(&w)).unwrap();
        assert!(c.passes && c.mass == 0.0);
        let zero = OperatorField::zeros(g, 2);
        let c = weak_maximal_certificate(&fam, 0.01, &zero, Some(&w)).unwrap();
        let total = TraceFunctional::weighted(&w).apply_real(&id).unwrap();
        assert!(c.passes && (c.mass - 0.01 * total).abs() < 1e-14);
        let bad = OperatorField::constant(g, MatrixElement::scalar(2, 0.5));
        assert!(matches!(
            weak_maximal_certificate(&fam, lam, &bad, None),
            Err(Error::NotProjection { .. })
        ));
    }

    #[test]
    fn scalar_certificate_matches_level_set() {
        let g = grid1(7);
        let w = weights::power(g, 0.3, [0.5, 0.0]).unwrap();
        let fam: Vec<OperatorField> = (0..3).map(|s| random_scalar(g, s + 40)).collect();
        let lam = 0.6;
        let e = OperatorField::from_fn(g, |cell| {
            let s = fam.iter().map(|a| a.value(cell).get(0, 0).re.abs()).fold(0.0, f64::max);
            MatrixElement::scalar(1, if s <= lam { 1.0 } else { 0.0 })
        })
        .unwrap();
        let c = weak_maximal_certificate(&fam, lam, &e, Some(&w)).unwrap();
        assert!(c.passes);
        let mut mass = 0.0;
        for cell in 0..g.num_cells() {
            let s = fam.iter().map(|a| a.value(cell).get(0, 0).re.abs()).fold(0.0, f64::max);
            if s > lam {
                mass += w.values()[cell] * g.cell_volume();
            }
        }
        assert!((c.mass - lam * mass).abs() < 1e-12);
    }

    #[test]
    fn annular_ratios_bounded_and_depth_stable() {
        let ratio_at = |depth: usize, vector: bool| {
            let g = grid1(depth);
            let w = weights::power(g, 0.3, [0.3, 0.0]).unwrap();
            let f = OperatorField::from_fn(g, |c| {
                let x = g.cell_center(c)[0];
                MatrixElement::from_real_diagonal(&[1.0 + x, 2.0 - x])
            })
            .unwrap();
            let q = g.cube_of(g.cell_of_coords([(1 << depth) / 2 + 1, 0]), 5);
            if vector {
                let k = VectorKernel::dyadic_poisson(1, 6).unwrap();
                quintuple_lemma_ratio(&k, &f, q, 1.0, Some(&w)).unwrap()
            } else {
                annular_lemma_ratio(&Kernel::hilbert(), &f, q, 2.0, Some(&w)).unwrap()
            }
        };
        for vector in [false, true] {
            let a = ratio_at(8, vector);
            let b = ratio_at(10, vector);
            assert!(a.is_finite() && a > 0.0 && b > 0.0);
            assert!(a.max(b) <= 2.0 * a.min(b), "vector={vector}: {a} vs {b}");
        }
    }

    #[test]
    fn poisson_family_size_and_tail() {
        let g = grid1(8);
        let k = VectorKernel::dyadic_poisson(1, 8).unwrap();
        let size = k.size_constant(g);
        let tail = k.tail_bound(g);
        assert!(size.is_finite() && size > 0.0);
        assert!(tail < size);
        let k2 = VectorKernel::dyadic_poisson(1, 12).unwrap();
        assert!(k2.tail_bound(g) < tail);
    }

    #[test]
    fn richardson_defect_is_small_for_smooth_data() {
        let g = grid1(9);
        let f = OperatorField::from_fn(g, |c| {
            let x = g.cell_center(c)[0];
            MatrixElement::scalar(1, (6.0 * x).sin())
        })
        .unwrap();
        let d = richardson_defect(&Kernel::hilbert(), &f, 0.125).unwrap();
        assert!(d < 0.05, "{d}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn truncated_is_linear_and_adjoint_covariant(seed in 0u64..1000, s in -2.0f64..2.0) {
            let g = grid1(6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = OperatorField::from_fn(g, |_| crate::matrix_algebra::random_general(2, &mut rng)).unwrap();
            let h = OperatorField::from_fn(g, |_| crate::matrix_algebra::random_general(2, &mut rng)).unwrap();
            let k = Kernel::hilbert();
            let eps = 0.03;
            let lhs = truncated_apply(&k, &f.scale(s).add(&h).unwrap(), eps).unwrap();
            let rhs = truncated_apply(&k, &f, eps).unwrap().scale(s)
                .add(&truncated_apply(&k, &h, eps).unwrap()).unwrap();
            prop_assert!(lhs.max_distance(&rhs) < 1e-10);
            let a = truncated_apply(&k, &f.adjoint(), eps).unwrap();
            let b = truncated_apply(&k, &f, eps).unwrap().adjoint();
            prop_assert!(a.max_distance(&b) < 1e-12);
        }

        #[test]
        fn majorant_is_feasible(seed in 0u64..1000, p in 1.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fam: Vec<MatrixElement> = (0..3).map(|_| MatrixElement::random_hermitian(2, &mut rng)).collect();
            let refs: Vec<&MatrixElement> = fam.iter().collect();
            let b = cell_majorant(&refs, p, 50).unwrap();
            for a in &fam {
                prop_assert!((&b - a).min_eigenvalue().unwrap() > -1e-9);
                prop_assert!((&b + a).min_eigenvalue().unwrap() > -1e-9);
            }
        }

        #[test]
        fn maximal_upper_dominates_lower(seed in 0u64..1000, p in 1.0f64..3.0) {
            let g = grid1(3);
            let fam: Vec<OperatorField> = (0..3).map(|s| random_hermitian(g, 2, seed * 7 + s)).collect();
            let b = maximal_linfty_bound(&fam, p, None, 30).unwrap();
            prop_assert!(b.upper >= b.lower * (1.0 - 1e-12));
        }
    }
}
