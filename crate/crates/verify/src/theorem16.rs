//! Column square-function norms of vector operators on atoms, and the
//! atomic route for general fields.

use std::collections::BTreeMap;

use nczw_core::dyadic_model::{conditional_expectation, OperatorField, TraceFunctional};
use nczw_core::hardy_atoms::{
    algebraic_to_crude, atom_suite, atomic_decompose, crude_to_simple, AlgebraicAtom, AlgebraicTerm, Atom, CrudeAtom,
    Regularizer, SimpleAtom,
};
use nczw_core::kernels_operators::column_norm;
use nczw_core::weights::Weight;
use nczw_core::Result;
use rayon::prelude::*;
use serde::Serialize;

use crate::lacunary::VectorOperator;

/// `‖(T_k a)_k‖_{L_1^w(ℓ_2^c)}`.
pub fn column_image_norm(operator: &VectorOperator, a: &OperatorField, w: &Weight) -> Result<f64> {
    if a.max_entry() == 0.0 {
        return Ok(0.0);
    }
    column_norm(&operator.apply(a)?, 1.0, Some(w))
}

#[derive(Clone, Debug, Serialize)]
pub struct AtomSweep {
    pub count: usize,
    /// Largest `‖Ta‖_{L_1^w(ℓ_2^c)}` by atom kind.
    pub by_kind: BTreeMap<String, f64>,
    pub max: f64,
}

pub fn theorem16_atom_sweep(operator: &VectorOperator, atoms: &[Atom], w: &Weight) -> Result<AtomSweep> {
    let norms: Vec<f64> = atoms
        .par_iter()
        .map(|a| column_image_norm(operator, &a.value()?, w))
        .collect::<Result<_>>()?;
    let mut by_kind = BTreeMap::new();
    for (a, &n) in atoms.iter().zip(&norms) {
        let slot = by_kind.entry(a.kind().to_string()).or_insert(0.0f64);
        *slot = slot.max(n);
    }
    Ok(AtomSweep { count: atoms.len(), by_kind, max: norms.iter().copied().fold(0.0, f64::max) })
}

fn l2(f: &OperatorField, w: &Weight) -> Result<f64> {
    TraceFunctional::weighted(w).norm(f, 2.0)
}

/// Multiplies `f` by `target / ‖f‖_{L_2^w}`.
fn renormalize(f: &OperatorField, w: &Weight, target: f64) -> Result<OperatorField> {
    let n = l2(f, w)?;
    Ok(if n == 0.0 { f.clone() } else { f.scale(target / n) })
}

/// Carries an atom drawn against `coarse` to the grid of `fine`: every factor
/// is refined and rescaled so that each size condition is met with the same
/// fraction as before. Cancellation and measurability survive refinement.
pub fn refine_atom(atom: &Atom, coarse: &Weight, fine: &Weight) -> Result<Atom> {
    let depth = fine.grid().depth();
    let up = |f: &OperatorField| f.refine(depth);
    Ok(match atom {
        Atom::Simple(a) => {
            let tr = |w: &Weight, e: &OperatorField| TraceFunctional::weighted(w).apply_real(e);
            let fill = l2(&a.value, coarse)? * tr(coarse, &a.projection)?.sqrt();
            let projection = up(&a.projection)?;
            let mu = tr(fine, &projection)?;
            let target = if mu > 0.0 { fill / mu.sqrt() } else { 0.0 };
            let value = renormalize(&up(&a.value)?, fine, target)?;
            Atom::Simple(SimpleAtom { level: a.level, projection, value })
        }
        Atom::Crude(a) => Atom::Crude(CrudeAtom {
            level: a.level,
            y: renormalize(&up(&a.y)?, fine, l2(&a.y, coarse)?)?,
            b: renormalize(&up(&a.b)?, fine, l2(&a.b, coarse)?)?,
        }),
        Atom::Algebraic(z) => {
            let (sa, sb) = z.energies(coarse)?;
            let mut terms: Vec<AlgebraicTerm> = z
                .terms
                .iter()
                .map(|t| Ok(AlgebraicTerm { level: t.level, a: up(&t.a)?, b: up(&t.b)? }))
                .collect::<Result<_>>()?;
            let (fa, fb) = AlgebraicAtom { terms: terms.clone() }.energies(fine)?;
            let (ka, kb) = ((sa / fa).sqrt(), (sb / fb).sqrt());
            for t in &mut terms {
                t.a = t.a.scale(if fa > 0.0 { ka } else { 1.0 });
                t.b = t.b.scale(if fb > 0.0 { kb } else { 1.0 });
            }
            Atom::Algebraic(AlgebraicAtom { terms })
        }
    })
}

/// `count` atoms drawn on the grid of `coarse` and carried to the grid of
/// `fine`, so that the suite describes the same atoms at every depth.
pub fn refined_atom_suite(coarse: &Weight, fine: &Weight, m: usize, count: usize, seed: u64) -> Result<Vec<Atom>> {
    atom_suite(coarse.grid(), m, coarse, count, seed)?
        .iter()
        .map(|a| refine_atom(a, coarse, fine))
        .collect()
}

/// The atomic route `f - E_1 f = λ Σ_k μ_k Σ_s ν_{k,s} a_{k,s}` for one field.
#[derive(Clone, Debug, Serialize)]
pub struct AtomicRoute {
    /// `‖T(f - E_1 f)‖_{L_1^w(ℓ_2^c)}`.
    pub image: f64,
    /// `λ Σ_k μ_k Σ_s ν_{k,s} ‖T a_{k,s}‖`.
    pub bound: f64,
    /// `Σ_k μ_k` from the algebraic-to-crude step.
    pub crude_sum: f64,
    /// Largest `Σ_s ν_{k,s}` from the crude-to-simple step.
    pub simple_sum: f64,
    /// `max ‖T a‖` over the simple atoms met on the route.
    pub atom_max: f64,
    /// `‖E_1 f + Σ α_l β_l - f‖`.
    pub reconstruction: f64,
    /// Number of simple atoms on the route.
    pub atoms: usize,
}

impl AtomicRoute {
    /// The triangle inequality over the atoms, allowing for the regularized
    /// reconstruction.
    pub fn holds(&self, tol: f64) -> bool {
        self.image <= self.bound * (1.0 + tol) + tol
    }
}

pub fn atomic_route(operator: &VectorOperator, f: &OperatorField, w: &Weight, slice: f64) -> Result<AtomicRoute> {
    let dec = atomic_decompose(f, w, Regularizer::default())?;
    let reconstruction = dec.reconstruct()?.max_distance(f);
    let tail = f.sub(&conditional_expectation(f, 1)?)?;
    let image = column_image_norm(operator, &tail, w)?;
    let crude = algebraic_to_crude(&dec.atom, w)?;
    let simple: Vec<(f64, Vec<(f64, Atom)>)> = crude
        .iter()
        .map(|(mu, c)| {
            let pieces = crude_to_simple(c, slice, w)?;
            Ok((*mu, pieces.into_iter().map(|(nu, s)| (nu, Atom::Simple(s))).collect()))
        })
        .collect::<Result<_>>()?;
    let flat: Vec<&Atom> = simple.iter().flat_map(|(_, p)| p.iter().map(|(_, a)| a)).collect();
    let norms: Vec<f64> = flat
        .par_iter()
        .map(|a| column_image_norm(operator, &a.value()?, w))
        .collect::<Result<_>>()?;
    let mut bound = 0.0;
    let mut simple_sum = 0.0f64;
    let mut k = 0;
    for (mu, pieces) in &simple {
        let mut nu_sum = 0.0;
        for (nu, _) in pieces {
            bound += dec.lambda * mu * nu * norms[k];
            nu_sum += nu;
            k += 1;
        }
        simple_sum = simple_sum.max(nu_sum);
    }
    Ok(AtomicRoute {
        image,
        bound,
        crude_sum: crude.iter().fold(0.0, |acc, c| acc + c.0),
        simple_sum,
        atom_max: norms.iter().copied().fold(0.0, f64::max),
        reconstruction,
        atoms: norms.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::FieldRecipe;
    use nczw_core::dyadic_model::DyadicGrid;
    use nczw_core::kernels_operators::{Kernel, Smoothness, VectorKernel};
    use nczw_core::weights::WeightSpec;
    use proptest::prelude::*;

    fn weight(grid: DyadicGrid, spec: &str) -> Weight {
        spec.parse::<WeightSpec>().unwrap().build(grid).unwrap()
    }

    #[test]
    fn zero_atom_has_zero_image() {
        let grid = DyadicGrid::new(1, 5).unwrap();
        let op = VectorOperator::new(&VectorKernel::dyadic_poisson(1, 3).unwrap(), grid).unwrap();
        let w = weight(grid, "const:1");
        assert_eq!(column_image_norm(&op, &OperatorField::zeros(grid, 2), &w).unwrap(), 0.0);
    }

    #[test]
    fn sweep_counts_every_kind() {
        let grid = DyadicGrid::new(1, 6).unwrap();
        let op = VectorOperator::new(&VectorKernel::dyadic_poisson(1, 3).unwrap(), grid).unwrap();
        let w = weight(grid, "power:0.5");
        let atoms = atom_suite(grid, 2, &w, 30, 9).unwrap();
        let sweep = theorem16_atom_sweep(&op, &atoms, &w).unwrap();
        assert_eq!(sweep.count, 30);
        assert_eq!(sweep.by_kind.len(), 3);
        assert!(sweep.max > 0.0 && sweep.max.is_finite());
    }

    #[test]
    fn scalar_identity_kernel_norm_is_the_weighted_l1_norm() {
        // A single kernel with one nonzero entry per row maps each cell to its
        // left neighbour, so the image norm is a shifted weighted L_1 norm.
        let grid = DyadicGrid::new(1, 4).unwrap();
        let h = grid.cell_side();
        let shift = Kernel::custom(1, Smoothness::Lipschitz, move |x, y| {
            if (y[0] - x[0] - h).abs() < 0.5 * h { 1.0 / h } else { 0.0 }
        })
        .unwrap();
        let op = VectorOperator::new(&VectorKernel::scalar(shift), grid).unwrap();
        let w = weight(grid, "const:1");
        let f = FieldRecipe { dim: 1, m: 1, base_depth: 4, seed: 2 }.build(grid).unwrap();
        let n = grid.num_cells();
        let expected: f64 = (0..n - 1).map(|x| f.value(x + 1).get(0, 0).re.abs()).sum::<f64>() * h;
        assert!((column_image_norm(&op, &f, &w).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn refined_atoms_stay_atoms() {
        let coarse_grid = DyadicGrid::new(1, 4).unwrap();
        let fine_grid = DyadicGrid::new(1, 7).unwrap();
        let spec: WeightSpec = "power:0.5".parse().unwrap();
        let (coarse, fine) = (spec.build(coarse_grid).unwrap(), spec.build(fine_grid).unwrap());
        let atoms = refined_atom_suite(&coarse, &fine, 2, 12, 4).unwrap();
        for (a, b) in atoms.iter().zip(atom_suite(coarse_grid, 2, &coarse, 12, 4).unwrap()) {
            a.validate(&fine).unwrap();
            assert_eq!(a.kind(), b.kind());
            assert_eq!(a.value().unwrap().grid(), fine_grid);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn atomic_route_bounds_the_image(seed in 0u64..1000, m in prop::sample::select(vec![1usize, 2])) {
            let grid = DyadicGrid::new(1, 6).unwrap();
            let op = VectorOperator::new(&VectorKernel::dyadic_poisson(1, 3).unwrap(), grid).unwrap();
            let w = weight(grid, "step:1,3");
            let f = FieldRecipe { dim: 1, m, base_depth: 4, seed }.build(grid).unwrap();
            let route = atomic_route(&op, &f, &w, 2.0).unwrap();
            prop_assert!(route.reconstruction < 1e-8 * (1.0 + f.max_entry()));
            prop_assert!(route.crude_sum <= 1.0 + 1e-9);
            prop_assert!(route.simple_sum <= 2.0 + 1e-9);
            prop_assert!(route.holds(1e-8), "{} > {}", route.image, route.bound);
        }
    }
}
