//! Grid-scale checks of the kernel hypotheses.

use nczw_core::dyadic_model::DyadicGrid;
use nczw_core::kernels_operators::{hormander_modulus, Orientation, VectorKernel};
use nczw_core::{Error, Result};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct Hypotheses {
    pub size_constant: f64,
    /// Exponent of the smoothness modulus.
    pub exponent: f64,
    /// Largest partial sum of the modulus over both orientations.
    pub modulus_sum: f64,
}

impl Hypotheses {
    pub fn hold(&self) -> bool {
        self.size_constant.is_finite() && self.modulus_sum.is_finite()
    }
}

/// Size constant and smoothness partial sums at `exponent`, for the cube
/// holding the centre of the window at level `min(J, 4)`.
pub fn check_hypotheses(kernel: &VectorKernel, grid: DyadicGrid, exponent: f64) -> Result<Hypotheses> {
    if grid.depth() < 2 {
        return Err(Error::InvalidParameter("grid too coarse for the truncation range".into()));
    }
    let level = grid.depth().min(4);
    let centre = grid.cube_of(grid.cell_of_coords([(1 << grid.depth()) / 2; 2]), level);
    let j_max = (level - 1).max(1);
    let mut modulus_sum = 0.0f64;
    for orientation in [Orientation::Standard, Orientation::Transposed] {
        let m = hormander_modulus(kernel, grid, exponent, &[centre], j_max, orientation)?;
        modulus_sum = modulus_sum.max(m.sup_partial_sum());
    }
    Ok(Hypotheses { size_constant: kernel.size_constant(grid), exponent, modulus_sum })
}
