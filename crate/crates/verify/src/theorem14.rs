//! Randomized weak-type ratios for vector kernels and the three-part split
//! behind them.

use nczw_core::dyadic_model::{OperatorField, TraceFunctional};
use nczw_core::hardy_atoms::{khintchine_ratio, rademacher_randomize, KhintchineNorm, SignSampling, MAX_EXHAUSTIVE_SIGNS};
use nczw_core::stopping_czd::{cuculescu, cz_decompose, zeta_projection};
use nczw_core::weights::Weight;
use nczw_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::lacunary::VectorOperator;
use crate::theorem12::{tail_mass, weak_sup};

/// Sign patterns for `n` terms: all of them when `n` is small enough and
/// exhaustive sampling is asked for, seeded draws otherwise.
pub fn sign_patterns(n: usize, sampling: SignSampling) -> Vec<Vec<f64>> {
    match sampling {
        SignSampling::Exhaustive if n <= MAX_EXHAUSTIVE_SIGNS => (0..1usize << n)
            .map(|bits| (0..n).map(|k| if bits >> k & 1 == 1 { -1.0 } else { 1.0 }).collect())
            .collect(),
        SignSampling::Exhaustive => sign_patterns(n, SignSampling::MonteCarlo { samples: 4096, seed: 0 }),
        SignSampling::MonteCarlo { samples, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..samples.max(1))
                .map(|_| (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect())
                .collect()
        }
    }
}

/// One height on the three-part path; every mass is divided by `‖f‖_{L_1^w}`.
#[derive(Clone, Debug, Serialize)]
pub struct PathBound {
    pub lambda: f64,
    /// `λ φ̃^w(χ_{(λ,∞)}(|T̃f|))`.
    pub direct: f64,
    /// `λ φ̃^w(χ_{(λ/3,∞)}(|T̃h|))` for `h = g, b_d, b_off`.
    pub parts: [f64; 3],
    /// The same for `ζ T̃h ζ`, `h = b_d, b_off`.
    pub compressed: [f64; 2],
    /// `λ φ^w(1 - ζ)`.
    pub zeta: f64,
    /// `I + II_ζ + III_ζ + 4 λ φ^w(1 - ζ)`.
    pub bound: f64,
    /// The singular-value inequalities behind the path hold at this height.
    pub sound: bool,
}

pub struct WeakRun<'a> {
    operator: &'a VectorOperator,
    weight: &'a Weight,
    patterns: Vec<Vec<f64>>,
    f: OperatorField,
    images: Vec<OperatorField>,
    norm: f64,
}

impl<'a> WeakRun<'a> {
    pub fn new(operator: &'a VectorOperator, f: &OperatorField, weight: &'a Weight, sampling: SignSampling) -> Result<Self> {
        f.require_positive("weak-type input")?;
        let norm = TraceFunctional::weighted(weight).norm(f, 1.0)?;
        if norm == 0.0 {
            return Err(Error::InvalidParameter("zero field has no weak ratio".into()));
        }
        Ok(Self {
            operator,
            weight,
            patterns: sign_patterns(operator.len(), sampling),
            f: f.clone(),
            images: operator.apply(f)?,
            norm,
        })
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn images(&self) -> &[OperatorField] {
        &self.images
    }

    pub fn pattern_count(&self) -> usize {
        self.patterns.len()
    }

    /// `(σ, w |cell| / #patterns)` over every singular value of every `Σ ε_k a_k`,
    /// optionally compressed by `zeta`.
    fn samples(&self, images: &[OperatorField], zeta: Option<&OperatorField>) -> Result<Vec<(f64, f64)>> {
        let grid = self.f.grid();
        let share = grid.cell_volume() / self.patterns.len() as f64;
        let weights = self.weight.values();
        let per_pattern: Vec<Vec<(f64, f64)>> = self
            .patterns
            .par_iter()
            .map(|signs| {
                let mut sum = rademacher_randomize(images, signs)?;
                if let Some(z) = zeta {
                    sum = OperatorField::sandwich(z, &sum, z)?;
                }
                let mut out = Vec::with_capacity(grid.num_cells() * sum.matrix_dim());
                for (cell, v) in sum.values().iter().enumerate() {
                    let mass = weights[cell] * share;
                    out.extend(v.singular_values()?.into_iter().map(|s| (s, mass)));
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(per_pattern.into_iter().flatten().collect())
    }

    /// `sup_λ λ φ̃^w(χ_{(λ,∞)}(|T̃f|)) / ‖f‖_{L_1^w}` over all heights.
    pub fn weak_ratio(&self) -> Result<f64> {
        Ok(weak_sup(self.samples(&self.images, None)?) / self.norm)
    }

    /// `λ φ̃^w(χ_{(λ,∞)}(|T̃f|)) / ‖f‖_{L_1^w}` at each height.
    pub fn grid_ratios(&self, heights: &[f64]) -> Result<Vec<f64>> {
        let samples = self.samples(&self.images, None)?;
        Ok(heights.iter().map(|&l| l * tail_mass(&samples, l) / self.norm).collect())
    }

    /// `E‖Σ ε_k T_k f‖_{L_2^w}` against `‖(T_k f)‖_{L_2^w(ℓ_2)}` under all
    /// sign patterns, as `|ratio - 1|`.
    pub fn khintchine_gap(&self) -> Result<f64> {
        if self.images.iter().all(|a| a.max_entry() == 0.0) {
            return Ok(0.0);
        }
        let r = khintchine_ratio(&self.images, KhintchineNorm::Lp(2.0), Some(self.weight), SignSampling::Exhaustive)?;
        Ok((r - 1.0).abs())
    }

    pub fn path(&self, lambda: f64) -> Result<PathBound> {
        let sf = cuculescu(&self.f, lambda)?;
        let parts = cz_decompose(&self.f, &sf)?;
        let zeta = zeta_projection(&sf)?.zeta;
        let third = lambda / 3.0;
        let scale = |samples: &[(f64, f64)], t: f64| lambda * tail_mass(samples, t) / self.norm;

        let direct = scale(&self.samples(&self.images, None)?, lambda);
        let mut split = [0.0; 3];
        let mut compressed = [0.0; 2];
        for (k, h) in [&parts.good, &parts.diagonal, &parts.off_diagonal].into_iter().enumerate() {
            let images = self.operator.apply(h)?;
            split[k] = scale(&self.samples(&images, None)?, third);
            if k > 0 {
                compressed[k - 1] = scale(&self.samples(&images, Some(&zeta))?, third);
            }
        }
        let zeta_mass = lambda * TraceFunctional::weighted(self.weight).apply_real(&zeta.complement())? / self.norm;
        let slack = 1e-12 * (1.0 + split.iter().sum::<f64>());
        let sound = direct <= split.iter().sum::<f64>() + slack
            && (1..3).all(|k| split[k] <= compressed[k - 1] + 2.0 * zeta_mass + slack);
        Ok(PathBound {
            lambda,
            direct,
            parts: split,
            compressed,
            zeta: zeta_mass,
            bound: split[0] + compressed[0] + compressed[1] + 4.0 * zeta_mass,
            sound,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::FieldRecipe;
    use crate::lacunary::LacunaryFamily;
    use crate::theorem12::{scalar_weak_oracle, CertificateRun};
    use nczw_core::dyadic_model::DyadicGrid;
    use nczw_core::kernels_operators::{Kernel, Smoothness, VectorKernel};
    use nczw_core::weights::WeightSpec;
    use proptest::prelude::*;

    fn weight(grid: DyadicGrid, spec: &str) -> Weight {
        spec.parse::<WeightSpec>().unwrap().build(grid).unwrap()
    }

    #[test]
    fn exhaustive_patterns_are_distinct() {
        let p = sign_patterns(3, SignSampling::Exhaustive);
        assert_eq!(p.len(), 8);
        let mut q = p.clone();
        q.sort_by(|a, b| a.partial_cmp(b).unwrap());
        q.dedup();
        assert_eq!(q.len(), 8);
        assert_eq!(sign_patterns(13, SignSampling::Exhaustive).len(), 4096);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let grid = DyadicGrid::new(1, 5).unwrap();
        let zero = Kernel::custom(1, Smoothness::Lipschitz, |_, _| 0.0).unwrap();
        let op = VectorOperator::new(&VectorKernel::new(vec![zero.clone(), zero]).unwrap(), grid).unwrap();
        let w = weight(grid, "const:1");
        let f = FieldRecipe { dim: 1, m: 2, base_depth: 4, seed: 1 }.build(grid).unwrap();
        let run = WeakRun::new(&op, &f, &w, SignSampling::Exhaustive).unwrap();
        assert_eq!(run.weak_ratio().unwrap(), 0.0);
        assert_eq!(run.khintchine_gap().unwrap(), 0.0);
    }

    #[test]
    fn single_kernel_stays_below_the_maximal_oracle() {
        let grid = DyadicGrid::new(1, 7).unwrap();
        let w = weight(grid, "const:1");
        let op = VectorOperator::new(&VectorKernel::scalar(Kernel::hilbert()), grid).unwrap();
        let family = LacunaryFamily::new(&Kernel::hilbert(), grid).unwrap();
        for seed in 0..4 {
            let f = FieldRecipe { dim: 1, m: 1, base_depth: 4, seed }.build(grid).unwrap();
            let weak = WeakRun::new(&op, &f, &w, SignSampling::Exhaustive).unwrap().weak_ratio().unwrap();
            let oracle = scalar_weak_oracle(&CertificateRun::new(&family, &f, &w).unwrap()).unwrap();
            assert!(weak > 0.0 && weak <= oracle * (1.0 + 1e-12), "{weak} vs {oracle}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10))]

        #[test]
        fn khintchine_identity_is_exact(seed in 0u64..1000, m in prop::sample::select(vec![1usize, 2, 4]), n in 1usize..6) {
            let grid = DyadicGrid::new(1, 5).unwrap();
            let w = weight(grid, "power:0.5");
            let op = VectorOperator::new(&VectorKernel::dyadic_poisson(1, n).unwrap(), grid).unwrap();
            let f = FieldRecipe { dim: 1, m, base_depth: 3, seed }.build(grid).unwrap();
            let run = WeakRun::new(&op, &f, &w, SignSampling::Exhaustive).unwrap();
            prop_assert!(run.khintchine_gap().unwrap() <= 1e-12);
        }

        #[test]
        fn the_split_path_is_sound(seed in 0u64..1000, m in prop::sample::select(vec![1usize, 2]), t in 0.0f64..1.0) {
            let grid = DyadicGrid::new(1, 6).unwrap();
            let w = weight(grid, "step:1,3");
            let op = VectorOperator::new(&VectorKernel::dyadic_poisson(1, 3).unwrap(), grid).unwrap();
            let f = FieldRecipe { dim: 1, m, base_depth: 4, seed }.build(grid).unwrap();
            let run = WeakRun::new(&op, &f, &w, SignSampling::Exhaustive).unwrap();
            let lambda = run.norm() * (4.0 * f.sup_norm().unwrap() / run.norm()).powf(t);
            let path = run.path(lambda).unwrap();
            prop_assert!(path.sound);
            prop_assert!(path.direct <= path.bound * (1.0 + 1e-12) + 1e-12);
        }
    }
}
