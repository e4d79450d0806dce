//! Cuculescu stopping projections, the Calderón-Zygmund splitting `f = g + b_d + b_off`,
//! and the dilated projections `ζ`, `η`.

use crate::dyadic_model::{cube_averages, field_from_cubes, Cube, DyadicGrid, OperatorField, TraceFunctional};
use crate::error::{Error, Result};
use crate::matrix_algebra::{lattice_join_all, spectral_projection, Interval, MatrixElement};
use crate::weights::Weight;

/// Allowed commutator and order defects of the stopping recursion.
pub const STOPPING_TOL: f64 = 1e-10;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StoppingDiagnostics {
    /// `max ‖[q_n, q_{n-1} f_n q_{n-1}]‖` over levels and cubes.
    pub max_commutator: f64,
    /// `max λ_max(q_n f_n q_n - λ q_n)`.
    pub max_excess: f64,
    /// `max ‖[q_{n-1}, χ_{[0,λ]}(q_{n-1} f_n q_{n-1})]‖`.
    pub max_factor_commutator: f64,
}

/// Stopping projections `q_0 = 1 ≥ q_1 ≥ ... ≥ q_J` at height `λ`.
#[derive(Clone, Debug)]
pub struct StoppingFamily {
    lambda: f64,
    source: OperatorField,
    /// `q_cubes[n][k]` is `q_Q` for the level-`n` cube with index `k`.
    q_cubes: Vec<Vec<MatrixElement>>,
    /// `f_n` on each level-`n` cube.
    averages: Vec<Vec<MatrixElement>>,
    diagnostics: StoppingDiagnostics,
}

/// Runs the recursion `q_n = q_{n-1} χ_{[0,λ]}(q_{n-1} f_n q_{n-1})` cube by cube.
///
/// The construction does not involve a weight; weighted quantities are read off
/// afterwards by [`level_set_bound`].
pub fn cuculescu(f: &OperatorField, lambda: f64) -> Result<StoppingFamily> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("height {lambda} must be positive")));
    }
    f.require_positive("stopping input")?;
    let grid = f.grid();
    let m = f.matrix_dim();
    let one = MatrixElement::identity(m);
    let mut q_cubes = vec![vec![one.clone()]];
    let mut averages = vec![cube_averages(f, 0)?];
    let mut diag = StoppingDiagnostics::default();
    for n in 1..=grid.depth() {
        let fn_cubes = cube_averages(f, n)?;
        let mut level = Vec::with_capacity(fn_cubes.len());
        for cube in grid.cubes(n) {
            let parent = grid.parent(cube).expect("level ≥ 1");
            let prev = &q_cubes[n - 1][parent.index];
            let middle = &(prev * &fn_cubes[cube.index]) * prev;
            let chi = spectral_projection(&middle, Interval::closed(0.0, lambda))?;
            diag.max_factor_commutator = diag.max_factor_commutator.max(prev.commutator(&chi).max_entry());
            let q = (prev * &chi).hermitian_part();
            diag.max_commutator = diag.max_commutator.max(q.commutator(&middle).max_entry());
            let excess = &(&(&q * &fn_cubes[cube.index]) * &q) - &q.scale(lambda);
            diag.max_excess = diag.max_excess.max(excess.max_eigenvalue()?);
            level.push(q);
        }
        q_cubes.push(level);
        averages.push(fn_cubes);
    }
    let scale = 1.0 + lambda + f.max_entry();
    if diag.max_commutator > STOPPING_TOL * scale || diag.max_factor_commutator > STOPPING_TOL * scale {
        return Err(Error::Contract(format!(
            "stopping projections fail to commute (defect {:e}); eigensolver trouble",
            diag.max_commutator.max(diag.max_factor_commutator)
        )));
    }
    if diag.max_excess > STOPPING_TOL * scale {
        return Err(Error::Contract(format!(
            "q_n f_n q_n exceeds λ q_n by {:e}",
            diag.max_excess
        )));
    }
    Ok(StoppingFamily {
        lambda,
        source: f.clone(),
        q_cubes,
        averages,
        diagnostics: diag,
    })
}

impl StoppingFamily {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn grid(&self) -> DyadicGrid {
        self.source.grid()
    }

    pub fn source(&self) -> &OperatorField {
        &self.source
    }

    pub fn diagnostics(&self) -> &StoppingDiagnostics {
        &self.diagnostics
    }

    pub fn depth(&self) -> usize {
        self.grid().depth()
    }

    /// `q_Q` for a cube at any level `0..=J`.
    pub fn q_cube(&self, cube: Cube) -> &MatrixElement {
        &self.q_cubes[cube.level][cube.index]
    }

    /// `p_Q = q_{Q̂} - q_Q` for a cube at level `≥ 1`.
    pub fn p_cube(&self, cube: Cube) -> MatrixElement {
        let parent = self.grid().parent(cube).expect("p_Q needs level ≥ 1");
        self.q_cube(parent) - self.q_cube(cube)
    }

    /// `f_n` on a level-`n` cube.
    pub fn average(&self, cube: Cube) -> &MatrixElement {
        &self.averages[cube.level][cube.index]
    }

    pub fn q_field(&self, level: usize) -> Result<OperatorField> {
        self.grid().check_level(level)?;
        field_from_cubes(self.grid(), level, &self.q_cubes[level])
    }

    pub fn p_field(&self, level: usize) -> Result<OperatorField> {
        if level == 0 {
            return Err(Error::InvalidParameter("p_n starts at level 1".into()));
        }
        let per_cube: Vec<MatrixElement> = self.grid().cubes(level).map(|c| self.p_cube(c)).collect();
        field_from_cubes(self.grid(), level, &per_cube)
    }

    pub fn average_field(&self, level: usize) -> Result<OperatorField> {
        field_from_cubes(self.grid(), level, &self.averages[level])
    }

    /// Terminal projection `q = q_J`.
    pub fn terminal(&self) -> Result<OperatorField> {
        self.q_field(self.depth())
    }

    /// Cubes with `p_Q ≠ 0`, coarse to fine.
    pub fn bad_cubes(&self) -> Vec<Cube> {
        let grid = self.grid();
        let mut out = Vec::new();
        for n in 1..=grid.depth() {
            for cube in grid.cubes(n) {
                if self.p_cube(cube).real_trace() > 0.5 {
                    out.push(cube);
                }
            }
        }
        out
    }
}

/// `λ φ^w(1 - q) / ([w]_{A_1} ‖f‖_{L_1^w})`.
pub fn level_set_bound(sf: &StoppingFamily, f: &OperatorField, w: &Weight) -> Result<f64> {
    let tr = TraceFunctional::weighted(w);
    let norm = tr.norm(f, 1.0)?;
    if norm == 0.0 {
        return Err(Error::InvalidParameter("zero field has no level-set ratio".into()));
    }
    let mass = tr.apply_real(&sf.terminal()?.complement())?;
    Ok(sf.lambda() * mass / (w.a1() * norm))
}

/// The splitting `f = g + b_d + b_off` with its per-level pieces.
#[derive(Clone, Debug)]
pub struct CZParts {
    pub lambda: f64,
    pub source: OperatorField,
    pub good: OperatorField,
    pub diagonal: OperatorField,
    pub off_diagonal: OperatorField,
    /// `b_{d,k} = p_k (f - f_k) p_k`, `k = 1..=J`.
    pub diagonal_levels: Vec<OperatorField>,
    /// `b_{off,k} = p_k (f - f_k) q_k`, `k = 1..=J`.
    pub off_diagonal_levels: Vec<OperatorField>,
}

pub fn cz_decompose(f: &OperatorField, sf: &StoppingFamily) -> Result<CZParts> {
    if f != sf.source() {
        return Err(Error::Mismatch("stopping family was built from a different field".into()));
    }
    let grid = f.grid();
    let m = f.matrix_dim();
    let q = sf.terminal()?;
    let mut good = OperatorField::sandwich(&q, f, &q)?;
    let mut diagonal = OperatorField::zeros(grid, m);
    let mut off_diagonal = OperatorField::zeros(grid, m);
    let mut diagonal_levels = Vec::with_capacity(grid.depth());
    let mut off_diagonal_levels = Vec::with_capacity(grid.depth());
    for k in 1..=grid.depth() {
        let pk = sf.p_field(k)?;
        let qk = sf.q_field(k)?;
        let fk = sf.average_field(k)?;
        let oscillation = f.sub(&fk)?;
        good = good.add(&OperatorField::sandwich(&pk, &fk, &pk)?)?;
        let bd = OperatorField::sandwich(&pk, &oscillation, &pk)?;
        let boff = OperatorField::sandwich(&pk, &oscillation, &qk)?;
        diagonal = diagonal.add(&bd)?;
        off_diagonal = off_diagonal.add(&boff.add(&boff.adjoint())?)?;
        diagonal_levels.push(bd);
        off_diagonal_levels.push(boff);
    }
    Ok(CZParts {
        lambda: sf.lambda(),
        source: f.clone(),
        good,
        diagonal,
        off_diagonal,
        diagonal_levels,
        off_diagonal_levels,
    })
}

impl CZParts {
    /// `‖g + b_d + b_off - f‖` (max entry).
    pub fn reconstruction_error(&self) -> Result<f64> {
        let sum = self.good.add(&self.diagonal)?.add(&self.off_diagonal)?;
        Ok(sum.max_distance(&self.source))
    }

    /// Distance between `b_off` and `Σ_k p_k f q_k + q_k f p_k`.
    pub fn off_diagonal_forms_gap(&self, sf: &StoppingFamily) -> Result<f64> {
        let grid = self.source.grid();
        let mut alt = OperatorField::zeros(grid, self.source.matrix_dim());
        for k in 1..=grid.depth() {
            let term = OperatorField::sandwich(&sf.p_field(k)?, &self.source, &sf.q_field(k)?)?;
            alt = alt.add(&term.add(&term.adjoint())?)?;
        }
        Ok(alt.max_distance(&self.off_diagonal))
    }

    /// `max_k max(‖E_k b_{d,k}‖, ‖E_k b_{off,k}‖)`.
    pub fn cancellation_defect(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for (idx, (bd, boff)) in self.diagonal_levels.iter().zip(&self.off_diagonal_levels).enumerate() {
            let k = idx + 1;
            worst = worst.max(crate::dyadic_model::conditional_expectation(bd, k)?.max_entry());
            worst = worst.max(crate::dyadic_model::conditional_expectation(boff, k)?.max_entry());
        }
        Ok(worst)
    }
}

/// Ratios controlling the good and diagonal parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoodBadRatios {
    /// `‖g‖_{L_1^w} / ([w]_{A_1} ‖f‖_{L_1^w})`
    pub good_l1: f64,
    /// `‖g‖_∞ / λ`
    pub good_sup: f64,
    /// `Σ_k ‖b_{d,k}‖_{L_1^w} / ‖f‖_{L_1^w}`
    pub diagonal_sum: f64,
}

pub fn good_bad_bounds(parts: &CZParts, w: &Weight) -> Result<GoodBadRatios> {
    let tr = TraceFunctional::weighted(w);
    let norm = tr.norm(&parts.source, 1.0)?;
    if norm == 0.0 {
        return Err(Error::InvalidParameter("zero field has no ratios".into()));
    }
    let mut bd_sum = 0.0;
    for bd in &parts.diagonal_levels {
        bd_sum += tr.norm(bd, 1.0)?;
    }
    Ok(GoodBadRatios {
        good_l1: tr.norm(&parts.good, 1.0)? / (w.a1() * norm),
        good_sup: parts.good.sup_norm()? / parts.lambda,
        diagonal_sum: bd_sum / norm,
    })
}

/// `ζ = 1 - ⋁_Q p_Q χ_{5Q}` over every level.
#[derive(Clone, Debug)]
pub struct DilationProjections {
    pub zeta: OperatorField,
}

fn join_field(grid: DyadicGrid, m: usize, per_cell: Vec<Vec<MatrixElement>>) -> Result<OperatorField> {
    let values = per_cell
        .into_iter()
        .map(|ps| {
            if ps.is_empty() {
                Ok(MatrixElement::zeros(m))
            } else {
                let refs: Vec<&MatrixElement> = ps.iter().collect();
                lattice_join_all(&refs)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    OperatorField::new(grid, values)
}

/// `⋁ p_Q χ_{5Q}` over the given cubes and projections.
pub fn dilated_join(grid: DyadicGrid, m: usize, items: &[(Cube, MatrixElement)]) -> Result<OperatorField> {
    let mut per_cell: Vec<Vec<MatrixElement>> = vec![Vec::new(); grid.num_cells()];
    for (cube, p) in items {
        for near in grid.neighbors(*cube, 2) {
            for cell in grid.cell_range(near) {
                per_cell[cell].push(p.clone());
            }
        }
    }
    join_field(grid, m, per_cell)
}

fn dilated_union(sf: &StoppingFamily, cubes: &[Cube]) -> Result<OperatorField> {
    let items: Vec<(Cube, MatrixElement)> = cubes.iter().map(|&c| (c, sf.p_cube(c))).collect();
    dilated_join(sf.grid(), sf.source().matrix_dim(), &items)
}

pub fn zeta_projection(sf: &StoppingFamily) -> Result<DilationProjections> {
    let union = dilated_union(sf, &sf.bad_cubes())?;
    Ok(DilationProjections {
        zeta: union.complement(),
    })
}

/// `η = ⋁_{Q ∈ D_k} p_Q χ_{5Q}` for a single level.
pub fn eta_projection(sf: &StoppingFamily, level: usize) -> Result<OperatorField> {
    if level == 0 || level > sf.depth() {
        return Err(Error::LevelOutOfRange {
            level,
            depth: sf.depth(),
        });
    }
    let cubes: Vec<Cube> = sf.bad_cubes().into_iter().filter(|c| c.level == level).collect();
    dilated_union(sf, &cubes)
}

/// `λ φ^w(1 - ζ) / ([w]_{A_1} ‖f‖_{L_1^w})`.
pub fn zeta_mass_ratio(sf: &StoppingFamily, dp: &DilationProjections, w: &Weight) -> Result<f64> {
    let tr = TraceFunctional::weighted(w);
    let norm = tr.norm(sf.source(), 1.0)?;
    let mass = tr.apply_real(&dp.zeta.complement())?;
    Ok(sf.lambda() * mass / (w.a1() * norm))
}

/// `max ‖ζ(x) p_Q‖` over bad cubes `Q` and cells `x ∈ 5Q`.
pub fn zeta_projection_defect(sf: &StoppingFamily, dp: &DilationProjections) -> Result<f64> {
    let grid = sf.grid();
    let mut worst = 0.0f64;
    for cube in sf.bad_cubes() {
        let p = sf.p_cube(cube);
        for near in grid.neighbors(cube, 2) {
            for x in grid.cell_range(near) {
                worst = worst.max((dp.zeta.value(x) * &p).max_entry());
            }
        }
    }
    Ok(worst)
}

/// `max ‖ζ(x) b(y) ζ(x)‖` for `b ∈ {b_{d,n}, b_{off,n} + b_{off,n}^*}` and `y` in the
/// cube with the centre of `Q_{x,n}` and `factor` times its side.
pub fn zeta_bad_part_defect(
    sf: &StoppingFamily,
    parts: &CZParts,
    dp: &DilationProjections,
    factor: f64,
) -> Result<f64> {
    let grid = sf.grid();
    let reach = (0.5 * factor).ceil() as usize + 1;
    let mut worst = 0.0f64;
    for cube in sf.bad_cubes() {
        let n = cube.level;
        let bd = &parts.diagonal_levels[n - 1];
        let boff = &parts.off_diagonal_levels[n - 1];
        let ys: Vec<usize> = grid.cell_range(cube).collect();
        let sym: Vec<MatrixElement> = ys
            .iter()
            .map(|&y| boff.value(y) + &boff.value(y).adjoint())
            .collect();
        for home in grid.neighbors(cube, reach) {
            let region = grid.dilate(home, factor);
            let inside: Vec<usize> = (0..ys.len())
                .filter(|&i| {
                    let c = grid.cell_center(ys[i]);
                    (0..grid.dim()).all(|a| c[a] >= region.lo[a] && c[a] < region.hi[a])
                })
                .collect();
            if inside.is_empty() {
                continue;
            }
            for x in grid.cell_range(home) {
                let z = dp.zeta.value(x);
                for &i in &inside {
                    worst = worst.max((&(z * bd.value(ys[i])) * z).max_entry());
                    worst = worst.max((&(z * &sym[i]) * z).max_entry());
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic_model::conditional_expectation;
    use crate::weights;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(d: usize, j: usize) -> DyadicGrid {
        DyadicGrid::new(d, j).unwrap()
    }

    /// Positive field supported in the middle third.
    fn random_positive(g: DyadicGrid, m: usize, seed: u64) -> OperatorField {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        OperatorField::from_fn(g, |c| {
            let centre = g.cell_center(c);
            let inside = (0..g.dim()).all(|a| centre[a] > 1.0 / 3.0 && centre[a] < 2.0 / 3.0);
            let v = MatrixElement::random_positive(m, &mut r);
            if inside {
                v.scale(4.0)
            } else {
                MatrixElement::zeros(m)
            }
        })
        .unwrap()
    }

    fn scalar_values(f: &OperatorField) -> Vec<f64> {
        f.values().iter().map(|v| v.get(0, 0).re).collect()
    }

    /// `q_n(x) = 1` iff `max_{1≤k≤n} f_k(x) ≤ λ`.
    fn scalar_oracle(values: &[f64], g: DyadicGrid, lambda: f64) -> Vec<Vec<f64>> {
        let f = OperatorField::from_scalars(g, values).unwrap();
        let mut running = vec![f64::NEG_INFINITY; g.num_cells()];
        let mut out = Vec::new();
        for n in 1..=g.depth() {
            let fn_ = conditional_expectation(&f, n).unwrap();
            for (k, r) in running.iter_mut().enumerate() {
                *r = r.max(fn_.value(k).get(0, 0).re);
            }
            out.push(running.iter().map(|&r| if r <= lambda { 1.0 } else { 0.0 }).collect());
        }
        out
    }

    #[test]
    fn scalar_stopping_matches_maximal_function() {
        let g = grid(1, 8);
        for seed in 0..10 {
            let f = random_positive(g, 1, seed);
            for lambda in [0.5, 1.0, 2.0, 4.0] {
                let sf = cuculescu(&f, lambda).unwrap();
                let oracle = scalar_oracle(&scalar_values(&f), g, lambda);
                for n in 1..=8 {
                    assert_eq!(scalar_values(&sf.q_field(n).unwrap()), oracle[n - 1]);
                }
            }
        }
    }

    #[test]
    fn high_threshold_stops_nothing() {
        let f = random_positive(grid(1, 6), 2, 1);
        let lambda = f.sup_norm().unwrap() * 1.01;
        let sf = cuculescu(&f, lambda).unwrap();
        assert!(sf.terminal().unwrap().max_distance(&OperatorField::identity(f.grid(), 2)) < 1e-12);
        assert!(sf.bad_cubes().is_empty());
        let parts = cz_decompose(&f, &sf).unwrap();
        assert!(parts.good.max_distance(&f) < 1e-12);
        assert!(parts.diagonal.max_entry() < 1e-12 && parts.off_diagonal.max_entry() < 1e-12);
        let w = weights::constant(f.grid(), 1.0).unwrap();
        assert_eq!(level_set_bound(&sf, &f, &w).unwrap(), 0.0);
        let ratios = good_bad_bounds(&parts, &w).unwrap();
        assert!(ratios.good_sup <= 1.0);
        let dp = zeta_projection(&sf).unwrap();
        assert!(dp.zeta.max_distance(&OperatorField::identity(f.grid(), 2)) < 1e-12);
    }

    #[test]
    fn diagonal_field_stops_entrywise() {
        let g = grid(1, 6);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        use rand::Rng;
        let a: Vec<f64> = (0..64).map(|_| r.gen_range(0.0..3.0)).collect();
        let b: Vec<f64> = (0..64).map(|_| r.gen_range(0.0..3.0)).collect();
        let f = OperatorField::from_fn(g, |c| MatrixElement::from_real_diagonal(&[a[c], b[c]])).unwrap();
        let lambda = 1.7;
        let sf = cuculescu(&f, lambda).unwrap();
        let oa = scalar_oracle(&a, g, lambda);
        let ob = scalar_oracle(&b, g, lambda);
        for n in 1..=6 {
            let q = sf.q_field(n).unwrap();
            for c in 0..64 {
                assert_abs_diff_eq!(q.value(c).get(0, 0).re, oa[n - 1][c], epsilon = 1e-12);
                assert_abs_diff_eq!(q.value(c).get(1, 1).re, ob[n - 1][c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn scalar_off_diagonal_vanishes() {
        let f = random_positive(grid(1, 7), 1, 3);
        let sf = cuculescu(&f, 1.0).unwrap();
        let parts = cz_decompose(&f, &sf).unwrap();
        assert!(parts.off_diagonal.max_entry() < 1e-14);
        let w = weights::constant(f.grid(), 1.0).unwrap();
        let ratios = good_bad_bounds(&parts, &w).unwrap();
        assert!(ratios.good_sup <= 2.0 + 1e-12);
        assert!(level_set_bound(&sf, &f, &w).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn mismatched_source_rejected() {
        let f = random_positive(grid(1, 5), 2, 4);
        let other = random_positive(grid(1, 5), 2, 5);
        let sf = cuculescu(&f, 1.0).unwrap();
        assert!(matches!(cz_decompose(&other, &sf), Err(Error::Mismatch(_))));
        let neg = f.scale(-1.0);
        assert!(cuculescu(&neg, 1.0).is_err());
    }

    #[test]
    fn single_bad_cube_zeta_is_dilation() {
        let g = grid(1, 6);
        let mut values = vec![0.0; 64];
        for v in values.iter_mut().take(36).skip(32) {
            *v = 10.0;
        }
        let f = OperatorField::from_scalars(g, &values).unwrap();
        // Mean over the window is 40/64; average over [1/2, 9/16) is 10 > λ.
        let lambda = 4.0;
        let sf = cuculescu(&f, lambda).unwrap();
        let bad = sf.bad_cubes();
        assert_eq!(bad.len(), 1);
        let dp = zeta_projection(&sf).unwrap();
        let expected: Vec<usize> = g
            .neighbors(bad[0], 2)
            .into_iter()
            .flat_map(|c| g.cell_range(c))
            .collect();
        for c in 0..64 {
            let z = dp.zeta.value(c).get(0, 0).re;
            assert_eq!(z, if expected.contains(&c) { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn zeta_lemmas_exact_in_one_dimension() {
        let f = random_positive(grid(1, 8), 2, 6);
        for lambda in [0.5, 1.5, 3.0] {
            let sf = cuculescu(&f, lambda).unwrap();
            let parts = cz_decompose(&f, &sf).unwrap();
            let dp = zeta_projection(&sf).unwrap();
            assert!(zeta_projection_defect(&sf, &dp).unwrap() <= 1e-12);
            assert!(zeta_bad_part_defect(&sf, &parts, &dp, 5.0).unwrap() <= 1e-12);
            let w = weights::constant(f.grid(), 1.0).unwrap();
            assert!(zeta_mass_ratio(&sf, &dp, &w).unwrap() <= 5.0 * 8.0);
        }
    }

    fn suite() -> impl Strategy<Value = (OperatorField, f64)> {
        (any::<u64>(), prop::sample::select(vec![1usize, 2, 4]), 0.3f64..6.0, 1usize..3)
            .prop_map(|(seed, m, lambda, d)| {
                let g = grid(d, if d == 1 { 6 } else { 3 });
                (random_positive(g, m, seed), lambda)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn stopping_contract((f, lambda) in suite()) {
            let sf = cuculescu(&f, lambda).unwrap();
            let g = f.grid();
            let m = f.matrix_dim();
            for n in 1..=g.depth() {
                let q = sf.q_field(n).unwrap();
                prop_assert!(q.level_deviation(n) == 0.0);
                let prev = sf.q_field(n - 1).unwrap();
                // q_n ≤ q_{n-1}: q_{n-1} q_n = q_n
                prop_assert!(prev.mul(&q).unwrap().max_distance(&q) < 1e-10);
            }
            let d = sf.diagnostics();
            prop_assert!(d.max_commutator <= 1e-10 && d.max_excess <= 1e-10);
            let mut sum = OperatorField::zeros(g, m);
            for n in 1..=g.depth() {
                sum = sum.add(&sf.p_field(n).unwrap()).unwrap();
            }
            let one_minus_q = sf.terminal().unwrap().complement();
            prop_assert!(sum.max_distance(&one_minus_q) < 1e-10);
            for n in 1..=g.depth() {
                for cube in g.cubes(n) {
                    prop_assert!((&sf.p_cube(cube) * sf.q_cube(cube)).max_entry() < 1e-10);
                }
            }
        }

        #[test]
        fn decomposition_identities((f, lambda) in suite()) {
            let sf = cuculescu(&f, lambda).unwrap();
            let parts = cz_decompose(&f, &sf).unwrap();
            prop_assert!(parts.reconstruction_error().unwrap() < 1e-10);
            prop_assert!(parts.off_diagonal_forms_gap(&sf).unwrap() < 1e-9);
            prop_assert!(parts.cancellation_defect().unwrap() < 1e-10);
            let w = weights::constant(f.grid(), 1.0).unwrap();
            let r = good_bad_bounds(&parts, &w).unwrap();
            let d = f.grid().dim() as i32;
            if lambda >= crate::dyadic_model::cube_averages(&f, 0).unwrap()[0].op_norm().unwrap() {
                prop_assert!(r.good_sup <= 2f64.powi(d) + 1e-9);
            }
            prop_assert!(r.diagonal_sum <= 4.0 * (1.0 + w.a1()));
        }

        #[test]
        fn p_mass_adds_up((f, lambda) in suite()) {
            let sf = cuculescu(&f, lambda).unwrap();
            let w = weights::cascade(f.grid(), 2.0, 3).unwrap();
            let tr = TraceFunctional::weighted(&w);
            let mut total = 0.0;
            for n in 1..=f.grid().depth() {
                total += tr.apply_real(&sf.p_field(n).unwrap()).unwrap();
            }
            let direct = tr.apply_real(&sf.terminal().unwrap().complement()).unwrap();
            prop_assert!((total - direct).abs() < 1e-10);
        }

        #[test]
        fn trace_monotone_in_height((f, lambda) in suite(), bump in 0.0f64..3.0) {
            let low = cuculescu(&f, lambda).unwrap();
            let high = cuculescu(&f, lambda + bump).unwrap();
            let tr = TraceFunctional::lebesgue();
            let ml = tr.apply_real(&low.terminal().unwrap().complement()).unwrap();
            let mh = tr.apply_real(&high.terminal().unwrap().complement()).unwrap();
            prop_assert!(mh <= ml + 1e-10);
            if f.matrix_dim() == 1 {
                let ql = low.terminal().unwrap();
                let qh = high.terminal().unwrap();
                for c in 0..f.grid().num_cells() {
                    prop_assert!(ql.value(c).get(0, 0).re <= qh.value(c).get(0, 0).re);
                }
            }
        }

        #[test]
        fn zeta_kills_bad_projections((f, lambda) in suite()) {
            let sf = cuculescu(&f, lambda).unwrap();
            let dp = zeta_projection(&sf).unwrap();
            prop_assert!(zeta_projection_defect(&sf, &dp).unwrap() <= 1e-12);
            prop_assert!(dp.zeta.values().iter().all(|z| z.is_projection()));
        }
    }
}
