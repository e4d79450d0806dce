//! Scalar dyadic weights: `A_p` characteristics, reverse Hölder constants,
//! the integrability exponent `r_w`, and generators.
//!
//! Every supremum runs over the dyadic cubes of the grid. Weights built from a
//! closed-form profile keep it, so reverse Hölder moments are integrated
//! exactly instead of from the cell averages.

use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dyadic_model::{conditional_expectation, Cube, DyadicGrid, OperatorField};
use crate::error::{Error, Result};
use crate::matrix_algebra::MatrixElement;

/// Reverse Hölder constant accepted by [`Weight::find_rw`].
pub const RH_THRESHOLD: f64 = 4.0;

/// `|x - x0|^{-α}`, kept alongside the discretized weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerProfile {
    pub alpha: f64,
    pub centre: [f64; 2],
}

impl PowerProfile {
    /// `∫_a^b |x - x0|^{-s} dx`, infinite when the singularity is not integrable.
    fn segment_moment(&self, a: f64, b: f64, s: f64) -> f64 {
        let x0 = self.centre[0];
        let antiderivative = |t: f64| -> f64 {
            if t <= 0.0 {
                return 0.0;
            }
            if (1.0 - s).abs() < 1e-12 {
                t.ln()
            } else {
                t.powf(1.0 - s) / (1.0 - s)
            }
        };
        let touches = x0 >= a && x0 <= b;
        if touches && s >= 1.0 {
            return f64::INFINITY;
        }
        if x0 <= a {
            antiderivative(b - x0) - antiderivative(a - x0)
        } else if x0 >= b {
            antiderivative(x0 - a) - antiderivative(x0 - b)
        } else {
            antiderivative(x0 - a) + antiderivative(b - x0)
        }
    }

    /// `∫_cell w^s`.
    pub fn cell_moment(&self, grid: &DyadicGrid, cell: usize, s: f64) -> f64 {
        let h = grid.cell_side();
        let c = grid.cell_coords(cell);
        let lo = [c[0] as f64 * h, c[1] as f64 * h];
        let exponent = self.alpha * s;
        if grid.dim() == 1 {
            return self.segment_moment(lo[0], lo[0] + h, exponent);
        }
        let touches = (0..2).all(|a| self.centre[a] >= lo[a] && self.centre[a] <= lo[a] + h);
        if touches && exponent >= 2.0 {
            return f64::INFINITY;
        }
        const SUB: usize = 16;
        let sub = h / SUB as f64;
        let floor = 1e-3 * sub;
        let mut acc = 0.0;
        for i in 0..SUB {
            for j in 0..SUB {
                let x = lo[0] + (i as f64 + 0.5) * sub - self.centre[0];
                let y = lo[1] + (j as f64 + 0.5) * sub - self.centre[1];
                let r = (x * x + y * y).sqrt().max(floor);
                acc += r.powf(-exponent);
            }
        }
        acc * sub * sub
    }
}

/// Weight generator specification, parsed from `const:c`, `step:a,b`,
/// `power:alpha,x0` or `cascade:R,seed`.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightSpec {
    Constant(f64),
    Step(f64, f64),
    Power { alpha: f64, centre: f64 },
    Cascade { ratio: f64, seed: u64 },
}

impl FromStr for WeightSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unrecognized weight spec `{s}`"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|a| a.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        match (kind, nums.as_slice()) {
            ("const", [c]) => Ok(Self::Constant(*c)),
            ("step", [a, b]) => Ok(Self::Step(*a, *b)),
            ("power", [alpha]) => Ok(Self::Power {
                alpha: *alpha,
                centre: 0.5,
            }),
            ("power", [alpha, x0]) => Ok(Self::Power {
                alpha: *alpha,
                centre: *x0,
            }),
            ("cascade", [r, seed]) if *seed >= 0.0 && seed.fract() == 0.0 => Ok(Self::Cascade {
                ratio: *r,
                seed: *seed as u64,
            }),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for WeightSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "const:{c}"),
            Self::Step(a, b) => write!(f, "step:{a},{b}"),
            Self::Power { alpha, centre } => write!(f, "power:{alpha},{centre}"),
            Self::Cascade { ratio, seed } => write!(f, "cascade:{ratio},{seed}"),
        }
    }
}

impl WeightSpec {
    pub fn build(&self, grid: DyadicGrid) -> Result<Weight> {
        match *self {
            Self::Constant(c) => constant(grid, c),
            Self::Step(a, b) => step(grid, a, b),
            Self::Power { alpha, centre } => power(grid, alpha, [centre; 2]),
            Self::Cascade { ratio, seed } => cascade(grid, ratio, seed),
        }
    }
}

/// Positive scalar weight on the grid, frozen after construction.
#[derive(Clone, Debug)]
pub struct Weight {
    grid: DyadicGrid,
    values: Vec<f64>,
    profile: Option<PowerProfile>,
    a1: f64,
    a2: f64,
    rw: OnceLock<Option<f64>>,
}

impl PartialEq for Weight {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid && self.values == other.values && self.profile == other.profile
    }
}

/// Per-level cube means of cell data, levels `0..=J`.
fn level_means(grid: &DyadicGrid, cell_values: Vec<f64>) -> Vec<Vec<f64>> {
    let branching = 1usize << grid.dim();
    let mut levels = vec![cell_values];
    for _ in 0..grid.depth() {
        let finer = levels.last().expect("nonempty");
        let coarser: Vec<f64> = finer
            .chunks(branching)
            .map(|c| c.iter().sum::<f64>() / branching as f64)
            .collect();
        levels.push(coarser);
    }
    levels.reverse();
    levels
}

/// Per-level cube minima of cell data, levels `0..=J`.
fn level_minima(grid: &DyadicGrid, cell_values: &[f64]) -> Vec<Vec<f64>> {
    let branching = 1usize << grid.dim();
    let mut levels = vec![cell_values.to_vec()];
    for _ in 0..grid.depth() {
        let finer = levels.last().expect("nonempty");
        let coarser: Vec<f64> = finer
            .chunks(branching)
            .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
            .collect();
        levels.push(coarser);
    }
    levels.reverse();
    levels
}

impl Weight {
    pub fn new(grid: DyadicGrid, values: Vec<f64>) -> Result<Self> {
        Self::with_profile(grid, values, None)
    }

    fn with_profile(grid: DyadicGrid, values: Vec<f64>, profile: Option<PowerProfile>) -> Result<Self> {
        if values.len() != grid.num_cells() {
            return Err(Error::DimensionMismatch {
                expected: grid.num_cells(),
                found: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidParameter(format!("weight value {bad} is not positive")));
        }
        let mut w = Self {
            grid,
            values,
            profile,
            a1: 0.0,
            a2: 0.0,
            rw: OnceLock::new(),
        };
        w.a1 = w.ap_characteristic(1.0)?;
        w.a2 = w.ap_characteristic(2.0)?;
        Ok(w)
    }

    pub fn grid(&self) -> DyadicGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn profile(&self) -> Option<&PowerProfile> {
        self.profile.as_ref()
    }

    /// Cached dyadic `[w]_{A_1}`.
    pub fn a1(&self) -> f64 {
        self.a1
    }

    /// Cached dyadic `[w]_{A_2}`.
    pub fn a2(&self) -> f64 {
        self.a2
    }

    /// `w(S)` for a set of cells.
    pub fn measure(&self, cells: impl IntoIterator<Item = usize>) -> f64 {
        cells.into_iter().map(|c| self.values[c]).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn to_field(&self) -> OperatorField {
        OperatorField::from_scalars(self.grid, &self.values).expect("weight matches its grid")
    }

    /// Dyadic `[w]_{A_p}`; `p = 1` uses the cell minimum as essential infimum.
    pub fn ap_characteristic(&self, p: f64) -> Result<f64> {
        if !(p >= 1.0) {
            return Err(Error::InvalidExponent(p));
        }
        let means = level_means(&self.grid, self.values.clone());
        if p == 1.0 {
            let minima = level_minima(&self.grid, &self.values);
            let mut best = 1.0f64;
            for (mean_level, min_level) in means.iter().zip(&minima) {
                for (m, lo) in mean_level.iter().zip(min_level) {
                    best = best.max(m / lo);
                }
            }
            return Ok(best);
        }
        let dual = self.values.iter().map(|v| v.powf(1.0 / (1.0 - p))).collect();
        let dual_means = level_means(&self.grid, dual);
        let mut best = 1.0f64;
        for (mean_level, dual_level) in means.iter().zip(&dual_means) {
            for (m, dm) in mean_level.iter().zip(dual_level) {
                best = best.max(m * dm.powf(p - 1.0));
            }
        }
        Ok(best)
    }

    fn cell_moment(&self, cell: usize, q: f64) -> f64 {
        match &self.profile {
            Some(profile) => profile.cell_moment(&self.grid, cell, q),
            None => self.values[cell].powf(q) * self.grid.cell_volume(),
        }
    }

    /// Best dyadic reverse Hölder constant `sup_Q (avg_Q w^q)^{1/q} / avg_Q w`.
    pub fn reverse_holder(&self, q: f64) -> Result<f64> {
        if !(q > 1.0) {
            return Err(Error::InvalidParameter(format!("reverse Hölder exponent {q} must exceed 1")));
        }
        let vol = self.grid.cell_volume();
        let moments = (0..self.grid.num_cells()).map(|c| self.cell_moment(c, q) / vol).collect();
        let means = level_means(&self.grid, self.values.clone());
        let q_means = level_means(&self.grid, moments);
        let mut best = 1.0f64;
        for (mean_level, q_level) in means.iter().zip(&q_means) {
            for (m, mq) in mean_level.iter().zip(q_level) {
                best = best.max(mq.powf(1.0 / q) / m);
            }
        }
        Ok(best)
    }

    /// Largest `q` on the grid with reverse Hölder constant at most `threshold`.
    pub fn find_rw_on(&self, q_grid: &[f64], threshold: f64) -> Result<f64> {
        let mut best: Option<f64> = None;
        for &q in q_grid {
            if self.reverse_holder(q)? <= threshold && best.is_none_or(|b| q > b) {
                best = Some(q);
            }
        }
        best.ok_or_else(|| {
            Error::InvalidParameter("weight too rough: no reverse Hölder exponent on the grid qualifies".into())
        })
    }

    /// `r_w` on [`default_q_grid`] at [`RH_THRESHOLD`], cached.
    pub fn find_rw(&self) -> Result<f64> {
        let cached = self
            .rw
            .get_or_init(|| self.find_rw_on(&default_q_grid(), RH_THRESHOLD).ok());
        cached.ok_or_else(|| {
            Error::InvalidParameter("weight too rough: no reverse Hölder exponent on the grid qualifies".into())
        })
    }

    /// `r_w' = r_w / (r_w - 1)`.
    pub fn rw_conjugate(&self) -> Result<f64> {
        let r = self.find_rw()?;
        Ok(r / (r - 1.0))
    }

    /// `sup_n ‖E_n(w) / w‖_∞`.
    pub fn martingale_a1_check(&self) -> Result<f64> {
        let field = self.to_field();
        let mut best = 0.0f64;
        for n in 0..=self.grid.depth() {
            let en = conditional_expectation(&field, n)?;
            for (k, v) in en.values().iter().enumerate() {
                best = best.max(v.get(0, 0).re / self.values[k]);
            }
        }
        Ok(best)
    }

    /// `max (|S|/|Q|)(w(Q)/w(S))` over the given pairs.
    pub fn measure_doubling_check(&self, pairs: &[(Vec<usize>, Cube)]) -> Result<f64> {
        let mut best = 0.0f64;
        for (subset, cube) in pairs {
            let range = self.grid.cell_range(*cube);
            if subset.is_empty() || subset.iter().any(|c| !range.contains(c)) {
                return Err(Error::InvalidParameter("subset must be a nonempty part of its cube".into()));
            }
            let ratio_volume = subset.len() as f64 / range.len() as f64;
            let ratio = ratio_volume * self.measure(range) / self.measure(subset.iter().copied());
            best = best.max(ratio);
        }
        Ok(best)
    }

    /// `E_n w` as a weight.
    pub fn smoothed(&self, level: usize) -> Result<Self> {
        let en = conditional_expectation(&self.to_field(), level)?;
        Self::new(self.grid, en.values().iter().map(|v| v.get(0, 0).re).collect())
    }

    pub fn to_json(&self) -> String {
        self.to_field().to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let field = OperatorField::from_json(text)?;
        if field.matrix_dim() != 1 {
            return Err(Error::Serialization("weights are stored with m = 1".into()));
        }
        Self::new(field.grid(), field.values().iter().map(|v| v.get(0, 0).re).collect())
    }
}

/// `q ∈ {1.05, 1.10, ..., 4.00}`.
pub fn default_q_grid() -> Vec<f64> {
    (1..=60).map(|k| 1.0 + 0.05 * k as f64).collect()
}

/// Random pairs `(S, Q)` with `Q` dyadic and `S` a nonempty union of its cells.
pub fn random_doubling_pairs(grid: DyadicGrid, count: usize, rng: &mut impl Rng) -> Vec<(Vec<usize>, Cube)> {
    (0..count)
        .map(|_| {
            let level = rng.gen_range(0..=grid.depth());
            let index = rng.gen_range(0..grid.num_cubes(level));
            let cube = Cube { level, index };
            let range = grid.cell_range(cube);
            let keep = rng.gen_range(0.05..1.0);
            let mut subset: Vec<usize> = range.clone().filter(|_| rng.gen_bool(keep)).collect();
            if subset.is_empty() {
                subset.push(rng.gen_range(range));
            }
            (subset, cube)
        })
        .collect()
}

pub fn constant(grid: DyadicGrid, c: f64) -> Result<Weight> {
    Weight::new(grid, vec![c; grid.num_cells()])
}

/// `a` on `x_1 < 1/2`, `b` on `x_1 ≥ 1/2`.
pub fn step(grid: DyadicGrid, a: f64, b: f64) -> Result<Weight> {
    let values = (0..grid.num_cells())
        .map(|c| if grid.cell_center(c)[0] < 0.5 { a } else { b })
        .collect();
    Weight::new(grid, values)
}

/// Cell averages of `|x - x0|^{-α}`, `0 ≤ α < d`.
pub fn power(grid: DyadicGrid, alpha: f64, centre: [f64; 2]) -> Result<Weight> {
    if !(alpha >= 0.0 && alpha < grid.dim() as f64) {
        return Err(Error::InvalidParameter(format!(
            "power exponent {alpha} must lie in [0, {})",
            grid.dim()
        )));
    }
    if alpha == 0.0 {
        return constant(grid, 1.0);
    }
    let profile = PowerProfile { alpha, centre };
    let vol = grid.cell_volume();
    let values = (0..grid.num_cells())
        .map(|c| profile.cell_moment(&grid, c, 1.0) / vol)
        .collect();
    Weight::with_profile(grid, values, Some(profile))
}

/// Multiplicative cascade: each child multiplies its parent by `R^{t 2^{1-n}}`,
/// `t` uniform in `[-1/2, 1/2]`, so any two cells differ by a factor below `R^2`.
pub fn cascade(grid: DyadicGrid, ratio: f64, seed: u64) -> Result<Weight> {
    if !(ratio >= 1.0) {
        return Err(Error::InvalidParameter(format!("cascade ratio {ratio} must be at least 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let branching = 1usize << grid.dim();
    let mut level_values = vec![1.0f64];
    for n in 1..=grid.depth() {
        let spread = (2f64).powi(1 - n as i32);
        let mut next = Vec::with_capacity(level_values.len() * branching);
        for &parent in &level_values {
            for _ in 0..branching {
                let t: f64 = rng.gen_range(-0.5..=0.5);
                next.push(parent * ratio.powf(t * spread));
            }
        }
        level_values = next;
    }
    Weight::new(grid, level_values)
}

/// The weight as an identity-multiple field of dimension `m`.
pub fn as_matrix_field(w: &Weight, m: usize) -> OperatorField {
    OperatorField::from_fn(w.grid(), |c| MatrixElement::scalar(m, w.values()[c])).expect("grid sizes agree")
}
