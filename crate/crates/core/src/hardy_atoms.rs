//! Martingale square functions, weighted Hardy norms, atoms of the three
//! kinds and the conversions between them, the constructive atomic
//! decomposition, and Rademacher randomization.
//!
//! Square functions use `E_0 := E_1` in the conditional version, so the
//! first term of `s_c` is `|df_1|²`, the same as in `S_c`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dyadic_model::{conditional_expectation, martingale_differences, DyadicGrid, OperatorField, TraceFunctional};
use crate::error::{Error, Result};
use crate::kernels_operators::{column_norm, cr_norm, row_norm};
use crate::matrix_algebra::{random_general, MatrixElement, PROJECTION_TOL};
use crate::stopping_czd::dilated_join;
use crate::weights::Weight;

/// Tolerance of the atom validators.
pub const ATOM_TOL: f64 = 1e-9;

/// Eigenvalues at most this fraction of the largest one count as zero when slicing.
pub const SPECTRAL_FLOOR: f64 = 1e-14;

fn sqrt_field(f: &OperatorField) -> Result<OperatorField> {
    f.try_map(|v| v.hermitian_part().sqrt_psd())
}

/// `S_c, S_r, s_c, s_r` with all partial versions.
#[derive(Clone, Debug)]
pub struct SquareFunctionBundle {
    /// `df_1, ..., df_J`.
    pub differences: Vec<OperatorField>,
    /// `S_{c,n}²`, `n = 1..J`.
    pub column_squares: Vec<OperatorField>,
    pub row_squares: Vec<OperatorField>,
    /// `s_{c,n}²`.
    pub conditional_column_squares: Vec<OperatorField>,
    pub conditional_row_squares: Vec<OperatorField>,
}

pub fn square_functions(f: &OperatorField) -> Result<SquareFunctionBundle> {
    let differences = martingale_differences(f)?;
    let grid = f.grid();
    let m = f.matrix_dim();
    let mut cs = OperatorField::zeros(grid, m);
    let mut rs = cs.clone();
    let mut ccs = cs.clone();
    let mut crs = cs.clone();
    let mut bundle = SquareFunctionBundle {
        differences: Vec::new(),
        column_squares: Vec::new(),
        row_squares: Vec::new(),
        conditional_column_squares: Vec::new(),
        conditional_row_squares: Vec::new(),
    };
    for (k, d) in differences.iter().enumerate() {
        let col = d.map(MatrixElement::gram);
        let row = d.map(MatrixElement::co_gram);
        cs = cs.add(&col)?;
        rs = rs.add(&row)?;
        // `k` is the zero-based index of df_{k+1}; its predictable level is k.
        let level = k.max(1);
        ccs = ccs.add(&conditional_expectation(&col, level)?)?;
        crs = crs.add(&conditional_expectation(&row, level)?)?;
        bundle.column_squares.push(cs.clone());
        bundle.row_squares.push(rs.clone());
        bundle.conditional_column_squares.push(ccs.clone());
        bundle.conditional_row_squares.push(crs.clone());
    }
    bundle.differences = differences;
    Ok(bundle)
}

impl SquareFunctionBundle {
    fn last(v: &[OperatorField]) -> Result<&OperatorField> {
        v.last().ok_or_else(|| Error::InvalidParameter("depth-0 grid has no differences".into()))
    }

    /// `S_{c,n}` for `1 ≤ n ≤ J`.
    pub fn column_partial(&self, n: usize) -> Result<OperatorField> {
        sqrt_field(&self.column_squares[n - 1])
    }

    pub fn conditional_column_partial(&self, n: usize) -> Result<OperatorField> {
        sqrt_field(&self.conditional_column_squares[n - 1])
    }

    pub fn column(&self) -> Result<OperatorField> {
        sqrt_field(Self::last(&self.column_squares)?)
    }

    pub fn row(&self) -> Result<OperatorField> {
        sqrt_field(Self::last(&self.row_squares)?)
    }

    pub fn conditional_column(&self) -> Result<OperatorField> {
        sqrt_field(Self::last(&self.conditional_column_squares)?)
    }

    pub fn conditional_row(&self) -> Result<OperatorField> {
        sqrt_field(Self::last(&self.conditional_row_squares)?)
    }

    /// `‖S_c(f)‖_{L_1^w}`.
    pub fn hardy_norm(&self, w: Option<&Weight>) -> Result<f64> {
        TraceFunctional { weight: w }.norm(&self.column()?, 1.0)
    }

    /// `‖s_c(f)‖_{L_1^w}`.
    pub fn conditional_hardy_norm(&self, w: Option<&Weight>) -> Result<f64> {
        TraceFunctional { weight: w }.norm(&self.conditional_column()?, 1.0)
    }

    /// `min_x λ_min(2^d s_c² - S_c²)`; nonnegative by regularity of the filtration.
    pub fn regularity_margin(&self) -> Result<f64> {
        let s = Self::last(&self.conditional_column_squares)?;
        let big = Self::last(&self.column_squares)?;
        let scale = (1usize << s.grid().dim()) as f64;
        s.scale(scale).sub(big)?.map(|v| v.hermitian_part()).min_eigenvalue()
    }
}

/// `‖f‖_{H_{1w}^c} / ‖f‖_{h_{1w}^c}`; `None` when both vanish.
pub fn hardy_ratio(f: &OperatorField, w: Option<&Weight>) -> Result<Option<f64>> {
    let b = square_functions(f)?;
    let top = b.hardy_norm(w)?;
    let bottom = b.conditional_hardy_norm(w)?;
    Ok(if bottom > 0.0 { Some(top / bottom) } else { None })
}

/// Smallest and largest `‖f‖_{H}/‖f‖_{h}` over a suite.
pub fn hardy_equivalence_ratio(fields: &[OperatorField], w: Option<&Weight>) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for f in fields {
        if let Some(r) = hardy_ratio(f, w)? {
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    if hi == 0.0 {
        return Err(Error::InvalidParameter("suite has no nonzero martingale".into()));
    }
    Ok((lo, hi))
}

// ---------------------------------------------------------------------------
// Atoms.

fn l2(f: &OperatorField, w: &Weight) -> Result<f64> {
    TraceFunctional::weighted(w).norm(f, 2.0)
}

fn mass(e: &OperatorField, w: &Weight) -> Result<f64> {
    TraceFunctional::weighted(w).apply_real(e)
}

fn contract(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(what()))
    }
}

fn check_mean_zero(y: &OperatorField, level: usize, what: &str) -> Result<()> {
    let defect = conditional_expectation(y, level)?.max_entry();
    contract(defect <= ATOM_TOL * (1.0 + y.max_entry()), || {
        format!("{what}: E_{level} defect {defect:.3e}")
    })
}

fn check_measurable(b: &OperatorField, level: usize, what: &str) -> Result<()> {
    let defect = b.level_deviation(level);
    contract(defect <= ATOM_TOL * (1.0 + b.max_entry()), || {
        format!("{what}: not level-{level} measurable ({defect:.3e})")
    })
}

/// A column `(1,2)`-atom: `a = a e`, `E_k a = 0`, `‖a‖_{L_2^w} ≤ φ(ew)^{-1/2}`,
/// with `e` a level-`k` projection field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimpleAtom {
    pub level: usize,
    pub projection: OperatorField,
    pub value: OperatorField,
}

impl SimpleAtom {
    pub fn validate(&self, w: &Weight) -> Result<()> {
        let (a, e, k) = (&self.value, &self.projection, self.level);
        contract(k >= 1, || "atom level must be at least 1".into())?;
        if a.grid() != e.grid() || a.matrix_dim() != e.matrix_dim() {
            return Err(Error::Mismatch("atom and projection live on different grids".into()));
        }
        let dev = e.values().iter().map(MatrixElement::projection_deviation).fold(0.0, f64::max);
        if dev > PROJECTION_TOL {
            return Err(Error::NotProjection { what: "atom support", deviation: dev });
        }
        check_measurable(e, k, "atom support")?;
        let scale = 1.0 + a.max_entry();
        let right = a.max_distance(&a.mul(e)?);
        contract(right <= ATOM_TOL * scale, || format!("a != a e ({right:.3e})"))?;
        check_mean_zero(a, k, "atom")?;
        let mu = mass(e, w)?;
        let norm = l2(a, w)?;
        if mu == 0.0 {
            return contract(norm <= ATOM_TOL, || "nonzero atom on an empty support".into());
        }
        contract(norm <= mu.powf(-0.5) * (1.0 + ATOM_TOL), || {
            format!("‖a‖ = {norm} exceeds φ(ew)^(-1/2) = {}", mu.powf(-0.5))
        })
    }

    /// `p_Q` for each level-`k` cube, in cube order.
    pub fn cube_projections(&self) -> Result<Vec<MatrixElement>> {
        crate::dyadic_model::cube_averages(&self.projection, self.level)
    }

    /// `φ(ηw) / φ(ew)` with `η = ⋁_Q p_Q χ_{5Q}`.
    pub fn eta_mass_ratio(&self, w: &Weight) -> Result<f64> {
        let grid = self.projection.grid();
        let items: Vec<_> = grid.cubes(self.level).zip(self.cube_projections()?).collect();
        let eta = dilated_join(grid, self.projection.matrix_dim(), &items)?;
        let base = mass(&self.projection, w)?;
        Ok(if base == 0.0 { 0.0 } else { mass(&eta, w)? / base })
    }
}

/// A column crude atom `a = y b`: `E_k y = 0`, `‖y‖_{L_2^w} ≤ 1`, `b` level-`k`
/// measurable with `‖b‖_{L_2^w} ≤ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrudeAtom {
    pub level: usize,
    pub y: OperatorField,
    pub b: OperatorField,
}

impl CrudeAtom {
    pub fn value(&self) -> Result<OperatorField> {
        self.y.mul(&self.b)
    }

    pub fn validate(&self, w: &Weight) -> Result<()> {
        contract(self.level >= 1, || "atom level must be at least 1".into())?;
        check_mean_zero(&self.y, self.level, "crude factor y")?;
        check_measurable(&self.b, self.level, "crude factor b")?;
        let ny = l2(&self.y, w)?;
        let nb = l2(&self.b, w)?;
        contract(ny <= 1.0 + ATOM_TOL, || format!("‖y‖ = {ny} > 1"))?;
        contract(nb <= 1.0 + ATOM_TOL, || format!("‖b‖ = {nb} > 1"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgebraicTerm {
    pub level: usize,
    pub a: OperatorField,
    pub b: OperatorField,
}

/// `z = Σ_k a_k b_k` with `E_{k} a_k = 0`, `Σ ‖a_k‖² ≤ 1`, `b_k` level-`k`
/// measurable and `‖(Σ |b_k|²)^{1/2}‖_{L_2^w} ≤ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgebraicAtom {
    pub terms: Vec<AlgebraicTerm>,
}

impl AlgebraicAtom {
    pub fn value(&self) -> Result<OperatorField> {
        let first = self
            .terms
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty algebraic atom".into()))?;
        let mut z = OperatorField::zeros(first.a.grid(), first.a.matrix_dim());
        for t in &self.terms {
            z = z.add(&t.a.mul(&t.b)?)?;
        }
        Ok(z)
    }

    /// `(Σ ‖a_k‖², ‖(Σ|b_k|²)^{1/2}‖²)`.
    pub fn energies(&self, w: &Weight) -> Result<(f64, f64)> {
        let mut sa = 0.0;
        let bs: Vec<OperatorField> = self.terms.iter().map(|t| t.b.clone()).collect();
        for t in &self.terms {
            sa += l2(&t.a, w)?.powi(2);
        }
        let sb = if bs.is_empty() { 0.0 } else { column_norm(&bs, 2.0, Some(w))?.powi(2) };
        Ok((sa, sb))
    }

    pub fn validate(&self, w: &Weight) -> Result<()> {
        for t in &self.terms {
            contract(t.level >= 1, || "atom level must be at least 1".into())?;
            check_mean_zero(&t.a, t.level, "algebraic factor a")?;
            check_measurable(&t.b, t.level, "algebraic factor b")?;
        }
        let (sa, sb) = self.energies(w)?;
        contract(sa <= 1.0 + ATOM_TOL, || format!("Σ‖a_k‖² = {sa} > 1"))?;
        contract(sb <= 1.0 + ATOM_TOL, || format!("‖(Σ|b_k|²)^(1/2)‖² = {sb} > 1"))
    }
}

/// Any atom, serialized with a `kind` tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Atom {
    Simple(SimpleAtom),
    Crude(CrudeAtom),
    Algebraic(AlgebraicAtom),
}

impl Atom {
    pub fn validate(&self, w: &Weight) -> Result<()> {
        match self {
            Self::Simple(a) => a.validate(w),
            Self::Crude(a) => a.validate(w),
            Self::Algebraic(a) => a.validate(w),
        }
    }

    pub fn value(&self) -> Result<OperatorField> {
        match self {
            Self::Simple(a) => Ok(a.value.clone()),
            Self::Crude(a) => a.value(),
            Self::Algebraic(a) => a.value(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Simple(_) => "simple",
            Self::Crude(_) => "crude",
            Self::Algebraic(_) => "algebraic",
        }
    }
}

/// `z = Σ λ_k y_k` with `y_k = a_k b_k / (‖a_k‖ ‖b_k‖)` and `λ_k = ‖a_k‖ ‖b_k‖`.
/// Terms with a zero factor are dropped.
pub fn algebraic_to_crude(z: &AlgebraicAtom, w: &Weight) -> Result<Vec<(f64, CrudeAtom)>> {
    let mut out = Vec::new();
    for t in &z.terms {
        let na = l2(&t.a, w)?;
        let nb = l2(&t.b, w)?;
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        out.push((
            na * nb,
            CrudeAtom { level: t.level, y: t.a.scale(1.0 / na), b: t.b.scale(1.0 / nb) },
        ));
    }
    Ok(out)
}

/// Index `k` with `x ∈ [l^k, l^{k+1})`.
fn slice_index(x: f64, l: f64) -> i32 {
    let mut k = (x.ln() / l.ln()).floor() as i32;
    while l.powi(k) > x {
        k -= 1;
    }
    while l.powi(k + 1) <= x {
        k += 1;
    }
    k
}

/// Splits a crude atom into simple atoms along the spectral slices
/// `e_k = χ_{[l^k, l^{k+1})}(|b|)`. A non-positive `b` is first written as
/// `b = u |b|` cube by cube and `u` is absorbed into `y`.
pub fn crude_to_simple(atom: &CrudeAtom, l: f64, w: &Weight) -> Result<Vec<(f64, SimpleAtom)>> {
    if !(l > 1.0) {
        return Err(Error::InvalidParameter(format!("slice ratio {l} must exceed 1")));
    }
    let grid = atom.b.grid();
    let level = atom.level;
    let block = 1usize << ((grid.depth() - level) * grid.dim());
    // Polar decomposition per level-k cube.
    let mut unitary = Vec::with_capacity(grid.num_cells());
    let mut modulus = Vec::with_capacity(grid.num_cells());
    for cube in grid.cubes(level) {
        let b = atom.b.value(grid.cell_range(cube).start);
        let svd = b.entries().clone().svd(true, true);
        let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        let sigma = nalgebra::DMatrix::from_diagonal(&svd.singular_values.map(|s| s.into()));
        let polar = MatrixElement::from_matrix(&u * &vt);
        let abs = MatrixElement::from_matrix(vt.adjoint() * sigma * &vt).hermitian_part();
        for _ in 0..block {
            unitary.push(polar.clone());
            modulus.push(abs.clone());
        }
    }
    let unitary = OperatorField::new(grid, unitary)?;
    let modulus = OperatorField::new(grid, modulus)?;
    let ay = atom.y.mul(&unitary)?.mul(&modulus)?;

    let top = modulus.values().iter().map(|v| v.max_entry()).fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(Vec::new());
    }
    let floor = SPECTRAL_FLOOR * top;
    let eigs = modulus.values().iter().map(|v| v.eigh()).collect::<Result<Vec<_>>>()?;
    let mut indices: Vec<i32> = eigs
        .iter()
        .flat_map(|e| e.values.iter().filter(|&&x| x > floor).map(|&x| slice_index(x, l)))
        .collect();
    indices.sort_unstable();
    indices.dedup();
    let mut out = Vec::new();
    for k in indices {
        let e = OperatorField::new(
            grid,
            eigs.iter()
                .map(|eig| eig.projection_where(|x| x > floor && slice_index(x, l) == k))
                .collect(),
        )?;
        let piece = ay.mul(&e)?;
        let np = l2(&piece, w)?;
        let mu = mass(&e, w)?;
        if np == 0.0 || mu == 0.0 {
            continue;
        }
        let lambda = np * mu.sqrt();
        out.push((lambda, SimpleAtom { level, projection: e, value: piece.scale(1.0 / lambda) }));
    }
    Ok(out)
}

/// `‖a‖_{H_{1w}^c} = φ^w(S_c(a))`.
pub fn atom_hardy_norm(atom: &SimpleAtom, w: &Weight) -> Result<f64> {
    square_functions(&atom.value)?.hardy_norm(Some(w))
}

// ---------------------------------------------------------------------------
// The constructive decomposition.

/// How `s_n` is made invertible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regularizer {
    /// `δ = factor · ‖f‖_{L_2^w}`.
    Relative(f64),
    Absolute(f64),
}

impl Default for Regularizer {
    fn default() -> Self {
        Self::Relative(1e-8)
    }
}

/// `f = E_1 f + λ z` with `z` an algebraic atom built from
/// `α_l = Σ_{n≥l+1} df_n s_n^{-1} (s_{l+1} - s_l)^{1/2}` and
/// `β_l = (s_{l+1} - s_l)^{1/2}`.
#[derive(Clone, Debug)]
pub struct AtomicDecomposition {
    pub first_level: OperatorField,
    /// `α_l`, `l = 1..J-1`.
    pub alphas: Vec<OperatorField>,
    pub betas: Vec<OperatorField>,
    pub delta: f64,
    /// `Σ ‖α_l‖²_{L_2^w}`.
    pub alpha_energy: f64,
    /// `‖(Σ |β_l|²)^{1/2}‖²_{L_2^w}`.
    pub beta_energy: f64,
    /// `‖f - E_1 f‖_{h_{1w}^c}`.
    pub conditional_hardy_norm: f64,
    pub lambda: f64,
    pub atom: AlgebraicAtom,
}

impl AtomicDecomposition {
    /// `E_1 f + Σ α_l β_l`.
    pub fn reconstruct(&self) -> Result<OperatorField> {
        let mut out = self.first_level.clone();
        for (a, b) in self.alphas.iter().zip(&self.betas) {
            out = out.add(&a.mul(b)?)?;
        }
        Ok(out)
    }

    /// `λ / ‖f‖_h`, the constant of the decomposition.
    pub fn constant(&self) -> f64 {
        if self.conditional_hardy_norm == 0.0 {
            0.0
        } else {
            self.lambda / self.conditional_hardy_norm
        }
    }

    /// `‖E_1 f‖_{L_1^w} + λ`, an upper bound for the atomic norm.
    pub fn atomic_norm_bound(&self, w: &Weight) -> Result<f64> {
        Ok(TraceFunctional::weighted(w).norm(&self.first_level, 1.0)? + self.lambda)
    }
}

pub fn atomic_decompose(f: &OperatorField, w: &Weight, reg: Regularizer) -> Result<AtomicDecomposition> {
    let grid = f.grid();
    let m = f.matrix_dim();
    let depth = grid.depth();
    if depth == 0 {
        return Err(Error::InvalidParameter("depth-0 grid has no martingale".into()));
    }
    let first_level = conditional_expectation(f, 1)?;
    let g = f.sub(&first_level)?;
    let delta = match reg {
        Regularizer::Relative(t) => t * l2(f, w)?,
        Regularizer::Absolute(d) => d,
    };
    if !(delta >= 0.0) {
        return Err(Error::InvalidParameter(format!("regularizer {delta} must be nonnegative")));
    }
    let bundle = square_functions(&g)?;
    let conditional_hardy_norm = bundle.conditional_hardy_norm(Some(w))?;
    let d2 = delta * delta;
    // s[n] for n = 1..=J; s_1 = 0.
    let mut s = vec![OperatorField::zeros(grid, m)];
    for n in 2..=depth {
        let sq = &bundle.conditional_column_squares[n - 1];
        s.push(sqrt_field(&sq.map(|v| &v.hermitian_part() + &MatrixElement::scalar(m, d2)))?);
    }
    let mut inverses = vec![OperatorField::zeros(grid, m)];
    for (n, sn) in s.iter().enumerate().skip(1) {
        let inv = sn.try_map(|v| {
            let eig = v.eigh()?;
            let top = eig.values.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
            if eig.values[0] <= 1e-12 * top || eig.values[0] <= 0.0 {
                return Err(Error::Singular(format!(
                    "s_{} is singular; use a positive regularizer",
                    n + 1
                )));
            }
            Ok(eig.reassemble(|x| 1.0 / x))
        });
        inverses.push(inv?);
    }
    // tails[l] = Σ_{n ≥ l+1} df_n s_n^{-1}, for l = 1..J-1.
    let diffs = &bundle.differences;
    let mut tails = vec![OperatorField::zeros(grid, m); depth + 1];
    for n in (2..=depth).rev() {
        let term = diffs[n - 1].mul(&inverses[n - 1])?;
        tails[n - 1] = tails[n].add(&term)?;
    }
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    for l in 1..depth {
        let gap = s[l].sub(&s[l - 1])?;
        let beta = gap.try_map(|v| {
            let h = v.hermitian_part();
            h.apply_hermitian(|x| x.max(0.0).sqrt())
        })?;
        alphas.push(tails[l].mul(&beta)?);
        betas.push(beta);
    }
    let alpha_energy: f64 = alphas.iter().map(|a| l2(a, w).map(|x| x * x)).sum::<Result<f64>>()?;
    let beta_energy = if betas.is_empty() {
        0.0
    } else {
        column_norm(&betas, 2.0, Some(w))?.powi(2)
    };
    let (na, nb) = (alpha_energy.sqrt(), beta_energy.sqrt());
    let lambda = na * nb;
    let terms = alphas
        .iter()
        .zip(&betas)
        .enumerate()
        .filter(|_| lambda > 0.0)
        .map(|(i, (a, b))| AlgebraicTerm { level: i + 1, a: a.scale(1.0 / na), b: b.scale(1.0 / nb) })
        .collect();
    Ok(AtomicDecomposition {
        first_level,
        alphas,
        betas,
        delta,
        alpha_energy,
        beta_energy,
        conditional_hardy_norm,
        lambda,
        atom: AlgebraicAtom { terms },
    })
}

// ---------------------------------------------------------------------------
// Generators.

fn random_projection(m: usize, rank: usize, rng: &mut impl Rng) -> Result<MatrixElement> {
    if rank == 0 {
        return Ok(MatrixElement::zeros(m));
    }
    let eig = MatrixElement::random_hermitian(m, rng).eigh()?;
    let diag: Vec<f64> = (0..m).map(|i| if i < rank { 1.0 } else { 0.0 }).collect();
    let v = MatrixElement::from_matrix(eig.vectors.clone());
    Ok((&(&v * &MatrixElement::from_real_diagonal(&diag)) * &v.adjoint()).hermitian_part())
}

fn random_general_field(grid: DyadicGrid, m: usize, rng: &mut impl Rng) -> Result<OperatorField> {
    OperatorField::from_fn(grid, |_| random_general(m, rng))
}

/// A random simple atom: a level `k < J`, a projection on a random subset of
/// level-`k` cubes, and `a = (r - E_k r) e` rescaled to a random fraction of
/// the size bound.
pub fn random_simple_atom(grid: DyadicGrid, m: usize, w: &Weight, rng: &mut impl Rng) -> Result<SimpleAtom> {
    if grid.depth() < 2 {
        return Err(Error::InvalidParameter("atoms need depth at least 2".into()));
    }
    let level = rng.gen_range(1..grid.depth());
    let cubes = grid.num_cubes(level);
    let chosen = rng.gen_range(0..cubes);
    let mut per_cube = Vec::with_capacity(cubes);
    for c in 0..cubes {
        let rank = if c == chosen || rng.gen_bool(0.3) { rng.gen_range(1..=m) } else { 0 };
        per_cube.push(random_projection(m, rank, rng)?);
    }
    let e = crate::dyadic_model::field_from_cubes(grid, level, &per_cube)?;
    let r = random_general_field(grid, m, rng)?;
    let a = r.sub(&conditional_expectation(&r, level)?)?.mul(&e)?;
    let norm = l2(&a, w)?;
    let target = rng.gen_range(0.5..1.0) * mass(&e, w)?.powf(-0.5);
    let value = if norm > 0.0 { a.scale(target / norm) } else { a };
    Ok(SimpleAtom { level, projection: e, value })
}

fn random_mean_zero(grid: DyadicGrid, m: usize, level: usize, rng: &mut impl Rng) -> Result<OperatorField> {
    let r = random_general_field(grid, m, rng)?;
    r.sub(&conditional_expectation(&r, level)?)
}

fn random_measurable(grid: DyadicGrid, m: usize, level: usize, rng: &mut impl Rng) -> Result<OperatorField> {
    conditional_expectation(&random_general_field(grid, m, rng)?, level)
}

pub fn random_crude_atom(grid: DyadicGrid, m: usize, w: &Weight, rng: &mut impl Rng) -> Result<CrudeAtom> {
    if grid.depth() < 2 {
        return Err(Error::InvalidParameter("atoms need depth at least 2".into()));
    }
    let level = rng.gen_range(1..grid.depth());
    let y = random_mean_zero(grid, m, level, rng)?;
    let b = random_measurable(grid, m, level, rng)?;
    let sy = rng.gen_range(0.5..1.0) / l2(&y, w)?;
    let sb = rng.gen_range(0.5..1.0) / l2(&b, w)?;
    Ok(CrudeAtom { level, y: y.scale(sy), b: b.scale(sb) })
}

/// `terms` pairs at random levels, normalized so that both energies equal `scale²`.
pub fn random_algebraic_atom(
    grid: DyadicGrid,
    m: usize,
    terms: usize,
    w: &Weight,
    rng: &mut impl Rng,
) -> Result<AlgebraicAtom> {
    if grid.depth() < 2 || terms == 0 {
        return Err(Error::InvalidParameter("algebraic atoms need depth ≥ 2 and a term".into()));
    }
    let mut out = Vec::with_capacity(terms);
    for _ in 0..terms {
        let level = rng.gen_range(1..grid.depth());
        out.push(AlgebraicTerm {
            level,
            a: random_mean_zero(grid, m, level, rng)?,
            b: random_measurable(grid, m, level, rng)?,
        });
    }
    let mut atom = AlgebraicAtom { terms: out };
    let (sa, sb) = atom.energies(w)?;
    let scale = rng.gen_range(0.5..1.0f64);
    for t in &mut atom.terms {
        t.a = t.a.scale(scale / sa.sqrt());
        t.b = t.b.scale(scale / sb.sqrt());
    }
    Ok(atom)
}

/// Which generator a suite entry used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomKind {
    Simple,
    Crude,
    Algebraic,
}

/// `count` atoms cycling through the three kinds; entry `i` uses its own
/// generator seeded from `(seed, i)`.
pub fn atom_suite(grid: DyadicGrid, m: usize, w: &Weight, count: usize, seed: u64) -> Result<Vec<Atom>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            Ok(match i % 3 {
                0 => Atom::Simple(random_simple_atom(grid, m, w, &mut rng)?),
                1 => Atom::Crude(random_crude_atom(grid, m, w, &mut rng)?),
                _ => Atom::Algebraic(random_algebraic_atom(grid, m, 3, w, &mut rng)?),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Rademacher randomization.

/// `Σ ε_k a_k`.
pub fn rademacher_randomize(fields: &[OperatorField], signs: &[f64]) -> Result<OperatorField> {
    if fields.is_empty() || fields.len() != signs.len() {
        return Err(Error::DimensionMismatch { expected: fields.len(), found: signs.len() });
    }
    if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
        return Err(Error::InvalidParameter("signs must be ±1".into()));
    }
    let mut out = fields[0].scale(signs[0]);
    for (a, &s) in fields.iter().zip(signs).skip(1) {
        out = out.add(&a.scale(s))?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SignSampling {
    /// All `2^N` patterns, `N ≤ 12`.
    Exhaustive,
    MonteCarlo { samples: usize, seed: u64 },
}

pub const MAX_EXHAUSTIVE_SIGNS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KhintchineNorm {
    Lp(f64),
    /// `L_{1,∞}`.
    Weak,
}

fn sign_patterns(n: usize, sampling: SignSampling) -> Result<Vec<Vec<f64>>> {
    match sampling {
        SignSampling::Exhaustive => {
            if n > MAX_EXHAUSTIVE_SIGNS {
                return Err(Error::InvalidParameter(format!(
                    "exhaustive signs need N ≤ {MAX_EXHAUSTIVE_SIGNS}, got {n}"
                )));
            }
            Ok((0..1usize << n)
                .map(|bits| (0..n).map(|k| if bits >> k & 1 == 1 { -1.0 } else { 1.0 }).collect())
                .collect())
        }
        SignSampling::MonteCarlo { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..samples.max(1))
                .map(|_| (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect())
                .collect())
        }
    }
}

/// `sup_λ λ μ(|x| > λ)` for a distribution given as `(singular value, mass)` pairs.
fn weak_norm(mut pairs: Vec<(f64, f64)>) -> f64 {
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut acc = 0.0;
    let mut best: f64 = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            acc += pairs[i].1;
            i += 1;
        }
        best = best.max(v * acc);
    }
    best
}

fn singular_masses(f: &OperatorField, w: Option<&Weight>, share: f64) -> Result<Vec<(f64, f64)>> {
    let vol = f.grid().cell_volume() * share;
    let mut out = Vec::new();
    for (cell, v) in f.values().iter().enumerate() {
        let wt = w.map_or(1.0, |w| w.values()[cell]) * vol;
        out.extend(v.singular_values()?.into_iter().map(|s| (s, wt)));
    }
    Ok(out)
}

/// `‖Σ ε_k a_k‖` in `L_p(L_∞(0,1) ⊗ M, w)` against the column-row norm of the
/// family. For `p = 2` the ratio is `1` exactly under exhaustive signs. The
/// weak form compares with the smaller of the weak column and row square
/// functions.
pub fn khintchine_ratio(
    fields: &[OperatorField],
    norm: KhintchineNorm,
    w: Option<&Weight>,
    sampling: SignSampling,
) -> Result<f64> {
    let patterns = sign_patterns(fields.len(), sampling)?;
    let share = 1.0 / patterns.len() as f64;
    let tr = TraceFunctional { weight: w };
    match norm {
        KhintchineNorm::Lp(p) => {
            let mut acc = 0.0;
            for signs in &patterns {
                acc += tr.norm_power(&rademacher_randomize(fields, signs)?, p)? * share;
            }
            let bottom = cr_norm(fields, p, w)?;
            Ok(if bottom == 0.0 { 1.0 } else { acc.powf(1.0 / p) / bottom })
        }
        KhintchineNorm::Weak => {
            let mut pairs = Vec::new();
            for signs in &patterns {
                pairs.extend(singular_masses(&rademacher_randomize(fields, signs)?, w, share)?);
            }
            let top = weak_norm(pairs);
            let col = weak_square_function(fields, w, true)?;
            let row = weak_square_function(fields, w, false)?;
            let bottom = col.min(row);
            Ok(if bottom == 0.0 { 1.0 } else { top / bottom })
        }
    }
}

fn weak_square_function(fields: &[OperatorField], w: Option<&Weight>, column: bool) -> Result<f64> {
    let grid = fields[0].grid();
    let m = fields[0].matrix_dim();
    let mut s = OperatorField::zeros(grid, m);
    for a in fields {
        s = s.add(&a.map(if column { MatrixElement::gram } else { MatrixElement::co_gram }))?;
    }
    Ok(weak_norm(singular_masses(&sqrt_field(&s)?, w, 1.0)?))
}

/// `‖(a_k)‖_{L_2^w(ℓ_2)}²`, the right side of the `p = 2` identity.
pub fn l2_family_energy(fields: &[OperatorField], w: Option<&Weight>) -> Result<f64> {
    Ok(column_norm(fields, 2.0, w)?.powi(2).max(row_norm(fields, 2.0, w)?.powi(2)))
}
