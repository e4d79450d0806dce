//! Random positive test fields that describe the same function at every depth.

use nczw_core::dyadic_model::{DyadicGrid, OperatorField};
use nczw_core::matrix_algebra::MatrixElement;
use nczw_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A positive field drawn cell by cell at `base_depth` and refined to any
/// finer grid. Values vanish outside the middle third of the window and
/// spread over three decades inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldRecipe {
    pub dim: usize,
    pub m: usize,
    pub base_depth: usize,
    pub seed: u64,
}

impl FieldRecipe {
    pub fn base(&self) -> Result<OperatorField> {
        let grid = DyadicGrid::new(self.dim, self.base_depth)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.m as u64);
        OperatorField::from_fn(grid, |cell| {
            let c = grid.cell_center(cell);
            let inside = (0..self.dim).all(|a| c[a] > 1.0 / 3.0 && c[a] < 2.0 / 3.0);
            // Draw unconditionally so that every cell consumes the same randomness.
            let value = MatrixElement::random_positive(self.m, &mut rng);
            let scale = 10f64.powf(rng.gen_range(-1.5..1.5));
            let keep = rng.gen_bool(0.8);
            if inside && keep {
                value.scale(scale)
            } else {
                MatrixElement::zeros(self.m)
            }
        })
    }

    pub fn build(&self, grid: DyadicGrid) -> Result<OperatorField> {
        let base = self.base()?;
        if base.values().iter().all(|v| v.max_entry() == 0.0) {
            // Deterministic fallback so that no recipe is identically zero.
            let centre = base.grid().cell_of_coords([(1 << self.base_depth) / 2; 2]);
            let mut values = base.into_values();
            values[centre] = MatrixElement::identity(self.m);
            return OperatorField::new(DyadicGrid::new(self.dim, self.base_depth)?, values)?.refine(grid.depth());
        }
        base.refine(grid.depth())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nczw_core::dyadic_model::conditional_expectation;

    #[test]
    fn refinement_preserves_the_function() {
        let r = FieldRecipe { dim: 1, m: 2, base_depth: 4, seed: 5 };
        let f6 = r.build(DyadicGrid::new(1, 6).unwrap()).unwrap();
        let f8 = r.build(DyadicGrid::new(1, 8).unwrap()).unwrap();
        assert!(f6.is_positive(1e-12).unwrap());
        assert_eq!(f8.coarsen(6).unwrap().max_distance(&f6), 0.0);
        assert!(conditional_expectation(&f8, 4).unwrap().max_distance(&f8) < 1e-12);
    }

    #[test]
    fn support_in_middle_third() {
        let r = FieldRecipe { dim: 2, m: 1, base_depth: 3, seed: 1 };
        let grid = DyadicGrid::new(2, 4).unwrap();
        let f = r.build(grid).unwrap();
        for cell in f.support(0.0) {
            let c = grid.cell_center(cell);
            assert!(c[0] > 1.0 / 3.0 && c[0] < 2.0 / 3.0 && c[1] > 1.0 / 3.0 && c[1] < 2.0 / 3.0);
        }
        assert!(!f.support(0.0).is_empty());
    }
}
