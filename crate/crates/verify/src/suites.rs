//! The experiment suites and the runner that turns a config into a report.

use std::fmt;
use std::str::FromStr;

use nczw_core::dyadic_model::{conditional_expectation, martingale_tail_energies, DyadicGrid, OperatorField, TraceFunctional};
use nczw_core::hardy_atoms::{
    algebraic_to_crude, atom_suite, atomic_decompose, crude_to_simple, hardy_ratio, Regularizer, SignSampling,
    MAX_EXHAUSTIVE_SIGNS,
};
use nczw_core::kernels_operators::{
    annulus_index, hormander_modulus, psi_partition, reduction_residual, richardson_defect, Kernel, KernelSpec,
    Orientation, VectorKernel,
};
use nczw_core::matrix_algebra::{random_general, Interval, MatrixElement};
use nczw_core::stopping_czd::{
    cuculescu, cz_decompose, good_bad_bounds, level_set_bound, zeta_bad_part_defect, zeta_mass_ratio,
    zeta_projection, zeta_projection_defect,
};
use nczw_core::weights::{random_doubling_pairs, Weight, WeightSpec, RH_THRESHOLD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ExperimentConfig, SignConfig};
use crate::error::{Context, Result, VerifyError};
use crate::fields::FieldRecipe;
use crate::hypotheses::check_hypotheses;
use crate::lacunary::{LacunaryFamily, VectorOperator};
use crate::report::{ConstantReport, CzRecord, Labels, ReportBuilder, Sink};
use crate::theorem12::{scalar_weak_oracle, CertificateRun};
use crate::theorem14::WeakRun;
use crate::theorem16::{atomic_route, refined_atom_suite, theorem16_atom_sweep};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Suite {
    Identities,
    Cuculescu,
    Levelset,
    Lemmas,
    Kernels,
    Theorem12,
    Theorem14,
    Theorem16,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Identities,
        Suite::Cuculescu,
        Suite::Levelset,
        Suite::Lemmas,
        Suite::Kernels,
        Suite::Theorem12,
        Suite::Theorem14,
        Suite::Theorem16,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Identities => "identities",
            Suite::Cuculescu => "cuculescu",
            Suite::Levelset => "levelset",
            Suite::Lemmas => "lemmas",
            Suite::Kernels => "kernels",
            Suite::Theorem12 => "theorem12",
            Suite::Theorem14 => "theorem14",
            Suite::Theorem16 => "theorem16",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| VerifyError::Config(format!("unknown suite `{s}`")))
    }
}

/// `all` or a comma-separated list of suite names.
pub fn parse_suites(s: &str) -> Result<Vec<Suite>> {
    if s == "all" {
        return Ok(Suite::ALL.to_vec());
    }
    let mut out = s.split(',').map(|p| p.trim().parse()).collect::<Result<Vec<Suite>>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

const IDENTITIES: &str = "identities";
const CUCULESCU: &str = "cuculescu";
const LEVELSET: &str = "levelset";
const LEMMAS: &str = "lemmas";
const KERNELS: &str = "kernels";
const THEOREM12: &str = "theorem12";
const THEOREM14: &str = "theorem14";
const THEOREM16: &str = "theorem16";

/// Atoms drawn at the fine depth for the unscaled comparison; they need the
/// dense operator.
const NATIVE_ATOMS: usize = 60;

/// Ratio between consecutive slices when crude atoms are split.
const SLICE: f64 = 2.0;

fn grid(cfg: &ExperimentConfig, depth: usize) -> Result<DyadicGrid> {
    DyadicGrid::new(cfg.d, depth).context(|| format!("grid d={} J={depth}", cfg.d))
}

fn recipe(cfg: &ExperimentConfig, m: usize, seed: u64) -> FieldRecipe {
    FieldRecipe { dim: cfg.d, m, base_depth: cfg.base_depth, seed }
}

fn build_weight(spec: &WeightSpec, grid: DyadicGrid) -> Result<Weight> {
    spec.build(grid).context(|| format!("weight {spec} at J={}", grid.depth()))
}

/// The configured heights for `f`, starting no lower than `‖f‖_{L_1^w}` and
/// `‖E_0 f‖_∞`.
fn heights(cfg: &ExperimentConfig, f: &OperatorField, w: &Weight) -> nczw_core::Result<Vec<f64>> {
    let norm = TraceFunctional::weighted(w).norm(f, 1.0)?;
    let floor = conditional_expectation(f, 0)?.sup_norm()?;
    Ok(cfg.lambda_grid.heights(norm, floor, f.sup_norm()?))
}

fn labels(cfg: &ExperimentConfig, weight: &WeightSpec, kernel: &str, m: usize, depth: usize, seed: u64) -> Labels {
    Labels { weight: weight.to_string(), kernel: kernel.into(), d: cfg.d, m, depth, seed }
}

fn sampling(cfg: &ExperimentConfig, seed: u64) -> SignSampling {
    match cfg.signs {
        SignConfig::Exhaustive => SignSampling::Exhaustive,
        SignConfig::MonteCarlo { samples } => SignSampling::MonteCarlo { samples, seed },
    }
}

/// Runs `task` over `items` in parallel and merges the sinks in item order.
fn gather<T: Sync>(builder: &mut ReportBuilder, items: &[T], task: impl Fn(&T) -> Result<Sink> + Sync + Send) -> Result<()> {
    let sinks: Vec<Sink> = items.par_iter().map(task).collect::<Result<_>>()?;
    for sink in sinks {
        builder.absorb(sink);
    }
    Ok(())
}

pub fn run(cfg: &ExperimentConfig, suites: &[Suite]) -> Result<ConstantReport> {
    cfg.validate()?;
    let mut builder = ReportBuilder::default();
    let has = |s: Suite| suites.contains(&s);
    if has(Suite::Identities) || has(Suite::Cuculescu) || has(Suite::Levelset) {
        stopping_suites(cfg, suites, &mut builder)?;
    }
    if has(Suite::Identities) {
        atom_identities(cfg, &mut builder)?;
    }
    if has(Suite::Lemmas) {
        lemmas(cfg, &mut builder)?;
    }
    if has(Suite::Kernels) {
        kernels(cfg, &mut builder)?;
    }
    if has(Suite::Theorem12) {
        theorem12(cfg, &mut builder)?;
    }
    if has(Suite::Theorem14) {
        theorem14(cfg, &mut builder)?;
    }
    if has(Suite::Theorem16) {
        theorem16(cfg, &mut builder)?;
    }
    builder.finish(cfg, suites.iter().map(|s| s.name().to_string()).collect())
}

// ---------------------------------------------------------------------------
// Stopping construction.

struct StoppingTask {
    depth: usize,
    weight: usize,
    m: usize,
    seed: u64,
    /// Drawn cell by cell at the depth itself rather than refined.
    native: bool,
}

fn stopping_suites(cfg: &ExperimentConfig, suites: &[Suite], builder: &mut ReportBuilder) -> Result<()> {
    let specs = cfg.weight_specs()?;
    let mut tasks = Vec::new();
    for &depth in &cfg.depths {
        for weight in 0..specs.len() {
            for &m in &cfg.m {
                for &seed in &cfg.seeds {
                    tasks.push(StoppingTask { depth, weight, m, seed, native: false });
                }
                for &seed in cfg.heavy() {
                    tasks.push(StoppingTask { depth, weight, m, seed, native: true });
                }
            }
        }
    }
    gather(builder, &tasks, |t| {
        stopping_task(cfg, suites, &specs[t.weight], t).context(|| {
            format!("stopping pass J={} weight={} m={} seed={}", t.depth, specs[t.weight], t.m, t.seed)
        })
    })
}

/// `q_n(x) = 1` exactly when every `f_k(x)`, `1 ≤ k ≤ n`, lies in `[0, λ]`.
fn scalar_stopping_mismatches(f: &OperatorField, sf: &nczw_core::stopping_czd::StoppingFamily) -> nczw_core::Result<usize> {
    let grid = f.grid();
    let mut alive = vec![true; grid.num_cells()];
    let mut mismatches = 0;
    for n in 1..=grid.depth() {
        let fnn = conditional_expectation(f, n)?;
        let q = sf.q_field(n)?;
        for cell in 0..grid.num_cells() {
            alive[cell] &= Interval::at_most(sf.lambda()).contains(fnn.value(cell).get(0, 0).re);
            let expected = if alive[cell] { 1.0 } else { 0.0 };
            if (q.value(cell).get(0, 0).re - expected).abs() > 0.5 {
                mismatches += 1;
            }
        }
    }
    Ok(mismatches)
}

fn stopping_task(
    cfg: &ExperimentConfig,
    suites: &[Suite],
    spec: &WeightSpec,
    t: &StoppingTask,
) -> nczw_core::Result<Sink> {
    let tol = &cfg.tolerances;
    let grid = DyadicGrid::new(cfg.d, t.depth)?;
    let w = spec.build(grid)?;
    let mut r = recipe(cfg, t.m, t.seed);
    if t.native {
        r.base_depth = t.depth;
    }
    let f = r.build(grid)?;
    let at = Labels { weight: spec.to_string(), kernel: String::new(), d: cfg.d, m: t.m, depth: t.depth, seed: t.seed };
    let wide = (cfg.d as f64).sqrt() * 5.0;
    let mut sink = Sink::default();
    let mut record = CzRecord {
        weight: spec.to_string(),
        m: t.m,
        depth: t.depth,
        seed: t.seed,
        lambda: Vec::new(),
        ratios: Default::default(),
    };
    let gated = !t.native;
    for lambda in heights(cfg, &f, &w)? {
        let sf = cuculescu(&f, lambda)?;
        if suites.contains(&Suite::Cuculescu) {
            let diag = sf.diagnostics();
            sink.at_most(CUCULESCU, "commutator", tol.stopping, diag.max_commutator);
            sink.at_most(CUCULESCU, "excess", tol.stopping, diag.max_excess);
            sink.at_most(CUCULESCU, "factor_commutator", tol.stopping, diag.max_factor_commutator);
            let mut projection = 0.0f64;
            let mut monotone = 0.0f64;
            let mut measurable = 0.0f64;
            let mut previous = OperatorField::identity(grid, t.m);
            for n in 1..=t.depth {
                let q = sf.q_field(n)?;
                for v in q.values() {
                    projection = projection.max(v.projection_deviation());
                }
                monotone = monotone.max(previous.mul(&q)?.max_distance(&q));
                measurable = measurable.max(q.level_deviation(n));
                previous = q;
            }
            sink.at_most(CUCULESCU, "projection", tol.stopping, projection);
            sink.at_most(CUCULESCU, "monotone", tol.stopping, monotone);
            sink.at_most(CUCULESCU, "measurable", tol.stopping, measurable);
            if t.m == 1 {
                sink.at_most(CUCULESCU, "scalar_oracle_mismatches", 0.0, scalar_stopping_mismatches(&f, &sf)? as f64);
            }
        }
        if !(suites.contains(&Suite::Identities) || suites.contains(&Suite::Levelset)) {
            continue;
        }
        let parts = cz_decompose(&f, &sf)?;
        let dp = zeta_projection(&sf)?;
        if suites.contains(&Suite::Identities) {
            let scale = 1.0 + f.max_entry();
            sink.at_most(IDENTITIES, "cz_reconstruction", tol.exact, parts.reconstruction_error()? / scale);
            sink.at_most(IDENTITIES, "off_diagonal_forms", tol.exact, parts.off_diagonal_forms_gap(&sf)? / scale);
            sink.at_most(IDENTITIES, "cancellation", tol.exact, parts.cancellation_defect()? / scale);
            let mut total = sf.terminal()?;
            for n in 1..=t.depth {
                total = total.add(&sf.p_field(n)?)?;
            }
            sink.at_most(IDENTITIES, "partition_of_unity", tol.exact, total.max_distance(&OperatorField::identity(grid, t.m)));
            sink.at_most(IDENTITIES, "zeta_kills_bad_projections", tol.exact, zeta_projection_defect(&sf, &dp)?);
            // In the plane the cube `5Q` is used; the wider `5√d Q` is recorded.
            let factor = if cfg.d == 1 { wide } else { 5.0 };
            sink.at_most(IDENTITIES, "zeta_kills_bad_parts", tol.exact, zeta_bad_part_defect(&sf, &parts, &dp, factor)? / scale);
            if cfg.d > 1 {
                let defect = zeta_bad_part_defect(&sf, &parts, &dp, wide)? / scale;
                sink.row(IDENTITIES, "zeta_wide_dilation_defect", &at, Some(lambda), defect, false);
            }
        }
        if suites.contains(&Suite::Levelset) {
            let level = level_set_bound(&sf, &f, &w)?;
            let gb = good_bad_bounds(&parts, &w)?;
            let zeta = zeta_mass_ratio(&sf, &dp, &w)?;
            let a1 = w.a1();
            let dd = (1usize << cfg.d) as f64;
            sink.at_most(LEVELSET, "level_set", 8.0, level);
            sink.at_most(LEVELSET, "good_sup", 2.0 * dd, gb.good_sup);
            sink.at_most(LEVELSET, "diagonal_sum", 4.0 * (1.0 + a1), gb.diagonal_sum);
            sink.at_most(LEVELSET, "zeta_mass", 5f64.powi(cfg.d as i32) * 8.0, zeta);
            let values = [
                ("level_set", level),
                ("good_sup", gb.good_sup),
                ("diagonal_sum", gb.diagonal_sum),
                ("zeta_mass", zeta),
                ("good_l1", gb.good_l1),
            ];
            for (name, value) in values {
                let ratio_gated = gated && name != "good_l1";
                let quantity = if t.native { format!("{name}_native") } else { name.to_string() };
                sink.row(LEVELSET, &quantity, &at, Some(lambda), value, ratio_gated);
                if !t.native {
                    record.ratios.entry(name.to_string()).or_default().push(value);
                }
            }
            if !t.native {
                record.lambda.push(lambda);
            }
        }
    }
    if !record.lambda.is_empty() {
        sink.cz(record);
    }
    Ok(sink)
}

/// Decomposition of test fields into algebraic, crude and simple atoms.
fn atom_identities(cfg: &ExperimentConfig, builder: &mut ReportBuilder) -> Result<()> {
    let specs = cfg.weight_specs()?;
    let mut tasks = Vec::new();
    for &depth in &cfg.depths {
        for weight in 0..specs.len() {
            for &m in &cfg.m {
                for &seed in cfg.heavy() {
                    tasks.push((depth, weight, m, seed));
                }
            }
        }
    }
    let tol = &cfg.tolerances;
    gather(builder, &tasks, |&(depth, weight, m, seed)| {
        let spec = &specs[weight];
        let run = || -> nczw_core::Result<Sink> {
            let grid = DyadicGrid::new(cfg.d, depth)?;
            let w = spec.build(grid)?;
            let f = recipe(cfg, m, seed).build(grid)?;
            let dec = atomic_decompose(&f, &w, Regularizer::default())?;
            let mut sink = Sink::default();
            let scale = 1.0 + f.max_entry();
            sink.at_most(IDENTITIES, "atomic_reconstruction", tol.regularized, dec.reconstruct()?.max_distance(&f) / scale);
            sink.require(IDENTITIES, "algebraic_atom_valid", dec.atom.validate(&w).is_ok());
            let crude = algebraic_to_crude(&dec.atom, &w)?;
            sink.at_most(IDENTITIES, "crude_weight_sum", 1.0 + tol.exact, crude.iter().fold(0.0, |a, c| a + c.0));
            for (_, c) in &crude {
                sink.require(IDENTITIES, "crude_atom_valid", c.validate(&w).is_ok());
                let simple = crude_to_simple(c, SLICE, &w)?;
                sink.at_most(IDENTITIES, "simple_weight_sum", SLICE + tol.exact, simple.iter().fold(0.0, |a, s| a + s.0));
                for (_, s) in &simple {
                    sink.require(IDENTITIES, "simple_atom_valid", s.validate(&w).is_ok());
                }
            }
            Ok(sink)
        };
        run().context(|| format!("atomic decomposition J={depth} weight={spec} m={m} seed={seed}"))
    })
}

// ---------------------------------------------------------------------------
// Lemmas.

/// `2 ω tr(a - b) - ω tr(a^{-1}(a² - b²))` for `0 ≤ b ≤ a` built as
/// `b = (a² - c^*c)^{1/2}`; the trace inequality says it is nonnegative.
fn trace_inequality_slack(m: usize, rng: &mut impl Rng) -> nczw_core::Result<f64> {
    let a = &MatrixElement::random_positive(m, rng) + &MatrixElement::scalar(m, 0.05);
    let floor = a.min_eigenvalue()?;
    let c = random_general(m, rng);
    let c = c.scale(0.9 * floor * rng.gen_range(0.0..1.0) / c.op_norm()?.max(f64::MIN_POSITIVE));
    let a2 = &a * &a;
    let b2 = &a2 - &(&c.adjoint() * &c);
    let b = b2.hermitian_part().sqrt_psd()?;
    let omega = rng.gen_range(0.0..1.0);
    let lhs = 2.0 * omega * (&a - &b).real_trace();
    let rhs = omega * (&a.inverse_pd()? * &(&a2 - &(&b * &b))).real_trace();
    Ok(lhs - rhs)
}

fn lemmas(cfg: &ExperimentConfig, builder: &mut ReportBuilder) -> Result<()> {
    let tol = &cfg.tolerances.clone();
    let specs = cfg.weight_specs()?;
    let mut tasks = Vec::new();
    for &depth in &cfg.depths {
        for weight in 0..specs.len() {
            tasks.push((depth, weight));
        }
    }
    gather(builder, &tasks, |&(depth, weight)| {
        let spec = &specs[weight];
        let run = || -> nczw_core::Result<Sink> {
            let grid = DyadicGrid::new(cfg.d, depth)?;
            let w = spec.build(grid)?;
            let a1 = w.a1();
            let mut sink = Sink::default();
            let rw = w.find_rw()?;
            sink.at_most(LEMMAS, "reverse_holder", RH_THRESHOLD, w.reverse_holder(rw)?);
            let at = labels(cfg, spec, "", 0, depth, 0);
            sink.row(LEMMAS, "reverse_holder_exponent", &at, None, rw, false);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
            rng.set_stream(depth as u64);
            let pairs = random_doubling_pairs(grid, cfg.lemma_samples, &mut rng);
            sink.at_most(LEMMAS, "measure_doubling", 1.0 + tol.exact, w.measure_doubling_check(&pairs)? / a1);
            sink.at_most(LEMMAS, "martingale_a1", 1.0 + tol.exact, w.martingale_a1_check()? / a1);
            let bound = ((1usize << cfg.d) as f64).sqrt() + 1e-6;
            for &m in &cfg.m {
                for &seed in &cfg.seeds {
                    let f = recipe(cfg, m, seed).build(grid)?;
                    let at = labels(cfg, spec, "", m, depth, seed);
                    if let Some(r) = hardy_ratio(&f, Some(&w))? {
                        sink.at_most(LEMMAS, "hardy_equivalence", bound, r);
                        sink.row(LEMMAS, "hardy_ratio", &at, None, r, true);
                    }
                    for l in 1..=depth {
                        let (tail, sum) = martingale_tail_energies(&f, None, l)?;
                        sink.at_most(LEMMAS, "orthogonality", tol.orthogonality, (tail - sum).abs() / tail.max(1.0));
                        let (wtail, wsum) = martingale_tail_energies(&f, Some(&w), l)?;
                        if wsum > 0.0 && l == 1 {
                            sink.row(LEMMAS, "weighted_orthogonality_ratio", &at, None, wtail / wsum, false);
                        }
                    }
                }
            }
            Ok(sink)
        };
        run().context(|| format!("lemmas J={depth} weight={spec}"))
    })?;
    gather(builder, &cfg.m, |&m| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
        rng.set_stream(100 + m as u64);
        let mut sink = Sink::default();
        for _ in 0..cfg.lemma_samples {
            let slack = trace_inequality_slack(m, &mut rng).context(|| format!("trace inequality m={m}"))?;
            sink.at_least(LEMMAS, "trace_inequality", -tol.lemma_slack, slack);
        }
        Ok(sink)
    })
}

// ---------------------------------------------------------------------------
// Kernels.

/// Scalar kernels named by the config, vector components included.
fn scalar_kernels(cfg: &ExperimentConfig) -> Result<Vec<(String, Kernel)>> {
    let mut out = Vec::new();
    for spec in cfg.kernel_specs()?.into_iter().chain([cfg.vector_kernel_spec()?]) {
        let v = spec.build(cfg.d).context(|| format!("kernel {spec}"))?;
        for (k, kernel) in v.components().iter().enumerate() {
            let name = if v.len() == 1 { spec.to_string() } else { format!("{spec}#{}", k + 1) };
            out.push((name, kernel.clone()));
        }
    }
    Ok(out)
}

/// `max |Σ_i ψ_i(u) - 1|` over every grid offset and random radii in `(0, √d]`.
fn partition_residual(grid: DyadicGrid, rng: &mut impl Rng, samples: usize) -> f64 {
    let d = grid.dim();
    let h2 = grid.cell_side() * grid.cell_side();
    let n = 1u64 << grid.depth();
    let mut r2s: Vec<f64> = (1..n * n * d as u64).map(|k| k as f64 * h2).take(1 << 16).collect();
    r2s.extend((0..samples).map(|_| d as f64 * rng.gen_range(1e-12f64..1.0)));
    r2s.iter()
        .map(|&r2| {
            let i0 = annulus_index(r2, d);
            let total: f64 = (i0 - 3..=i0 + 3).map(|i| psi_partition(i, d).at_squared(r2)).sum();
            (total - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

fn kernels(cfg: &ExperimentConfig, builder: &mut ReportBuilder) -> Result<()> {
    let tol = &cfg.tolerances;
    let named = scalar_kernels(cfg)?;
    let mut vectors: Vec<(String, VectorKernel)> = Vec::new();
    for spec in cfg.kernel_specs()?.into_iter().chain([cfg.vector_kernel_spec()?]) {
        vectors.push((spec.to_string(), spec.build(cfg.d).context(|| format!("kernel {spec}"))?));
    }
    gather(builder, &cfg.depths, |&depth| {
        let run = || -> nczw_core::Result<Sink> {
            let grid = DyadicGrid::new(cfg.d, depth)?;
            let mut sink = Sink::default();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds[0]);
            rng.set_stream(200 + depth as u64);
            sink.at_most(KERNELS, "partition_of_unity", tol.kernel, partition_residual(grid, &mut rng, cfg.lemma_samples));
            if cfg.d == 1 && depth >= 8 {
                // Hilbert smoothness decays like `2^{-j}`; coarser grids leave
                // fewer than three annuli inside the window.
                let level = depth - 2;
                let centre = grid.cube_of(grid.cell_of_coords([(1 << depth) / 2; 2]), level);
                let hilbert = VectorKernel::scalar(Kernel::hilbert());
                let modulus = hormander_modulus(&hilbert, grid, 2.0, &[centre], level - 2, Orientation::Standard)?;
                let a = modulus.decay_exponent(centre).unwrap_or(f64::NAN);
                sink.at_least(KERNELS, "hilbert_decay_low", 0.8, a);
                sink.at_most(KERNELS, "hilbert_decay_high", 1.2, a);
            }
            for (name, v) in &vectors {
                let h = check_hypotheses(v, grid, 2.0)?;
                sink.require(KERNELS, format!("hypotheses[{name}]"), h.hold());
            }
            let f = recipe(cfg, cfg.m[0], cfg.seeds[0]).build(grid)?;
            let side = grid.cell_side();
            let radii = [3.5 * side, 0.1, 0.3 * (cfg.d as f64).sqrt()];
            for (name, kernel) in &named {
                let scale = 1.0 + f.max_entry();
                for &eps in &radii {
                    sink.at_most(KERNELS, "reduction", tol.kernel, reduction_residual(kernel, &f, eps)? / scale);
                }
                let at = Labels { weight: String::new(), kernel: name.clone(), d: cfg.d, m: cfg.m[0], depth, seed: cfg.seeds[0] };
                sink.row(KERNELS, "richardson_defect", &at, Some(0.1), richardson_defect(kernel, &f, 0.1)?, false);
            }
            Ok(sink)
        };
        run().context(|| format!("kernels J={depth}"))
    })
}

// ---------------------------------------------------------------------------
// Theorem suites.

fn scalar_kernel(spec: &KernelSpec, d: usize) -> Result<Kernel> {
    let v = spec.build(d).context(|| format!("kernel {spec}"))?;
    if v.len() != 1 {
        return Err(VerifyError::Config(format!("kernel {spec} is not scalar")));
    }
    Ok(v.components()[0].clone())
}

fn theorem12(cfg: &ExperimentConfig, builder: &mut ReportBuilder) -> Result<()> {
    let specs = cfg.weight_specs()?;
    for kspec in cfg.kernel_specs()? {
        let kernel = scalar_kernel(&kspec, cfg.d)?;
        let vector = VectorKernel::scalar(kernel.clone());
        for &depth in &cfg.depths {
            let grid = grid(cfg, depth)?;
            let family = LacunaryFamily::new(&kernel, grid).context(|| format!("lacunary family {kspec} J={depth}"))?;
            let mut sink = Sink::default();
            for spec in &specs {
                let w = build_weight(spec, grid)?;
                let exponent = 2.0 * w.rw_conjugate().context(|| format!("r_w of {spec}"))?;
                let h = check_hypotheses(&vector, grid, exponent).context(|| format!("hypotheses {kspec}"))?;
                sink.require(THEOREM12, "hypotheses", h.hold());
            }
            builder.absorb(sink);
            let mut tasks = Vec::new();
            for weight in 0..specs.len() {
                for &m in &cfg.m {
                    for &seed in cfg.heavy() {
                        tasks.push((weight, m, seed));
                    }
                }
            }
            gather(builder, &tasks, |&(weight, m, seed)| {
                let spec = &specs[weight];
                let run = || -> nczw_core::Result<Sink> {
                    let w = spec.build(grid)?;
                    let f = recipe(cfg, m, seed).build(grid)?;
                    let cert = CertificateRun::new(&family, &f, &w)?;
                    let at = labels(cfg, spec, &kspec.to_string(), m, depth, seed);
                    let mut sink = Sink::default();
                    let mut shadow = 0.0f64;
                    let mut failures = 0;
                    let hs = heights(cfg, &f, &w)?;
                    for &lambda in &hs {
                        let c = cert.certify(lambda)?;
                        sink.require(THEOREM12, "witness_verified", c.verified);
                        let ratio = c.ratio.unwrap_or(f64::NAN);
                        if !c.verified {
                            failures += 1;
                        }
                        sink.row(THEOREM12, "c1", &at, Some(lambda), c.flattening(), true);
                        sink.row(THEOREM12, "c2", &at, Some(lambda), ratio, true);
                        shadow = shadow.max(c.flattening() * ratio);
                    }
                    if failures > 0 {
                        sink.caveat(format!(
                            "theorem12: {failures} of {} witnesses unverified for {kspec}, {spec}, m={m}, J={depth}, seed={seed}",
                            hs.len()
                        ));
                    }
                    sink.row(THEOREM12, "shadow", &at, None, shadow, false);
                    if m == 1 {
                        let oracle = scalar_weak_oracle(&cert)?;
                        sink.row(THEOREM12, "scalar_oracle", &at, None, oracle, false);
                        if oracle > 0.0 {
                            let k = cfg.tolerances.oracle_factor;
                            sink.at_least(THEOREM12, "shadow_over_oracle_low", 1.0 / k, shadow / oracle);
                            sink.at_most(THEOREM12, "shadow_over_oracle_high", k, shadow / oracle);
                        }
                    }
                    Ok(sink)
                };
                run().context(|| format!("maximal certificate {kspec} J={depth} weight={spec} m={m} seed={seed}"))
            })?;
        }
    }
    Ok(())
}

/// Every fourth height plus the last one.
fn path_heights(hs: &[f64]) -> Vec<f64> {
    let step = hs.len().div_ceil(4).max(1);
    let mut out: Vec<f64> = hs.iter().copied().step_by(step).collect();
    if let Some(&last) = hs.last() {
        if out.last() != Some(&last) {
            out.push(last);
        }
    }
    out
}

fn theorem14(cfg: &ExperimentConfig, builder: &mut ReportBuilder) -> Result<()> {
    let specs = cfg.weight_specs()?;
    let vspec = cfg.vector_kernel_spec()?;
    let vector = vspec.build(cfg.d).context(|| format!("kernel {vspec}"))?;
    for &depth in &cfg.depths {
        let grid = grid(cfg, depth)?;
        let op = VectorOperator::new(&vector, grid)
            .and_then(|op| op.with_coarse_level(cfg.base_depth))
            .context(|| format!("operator {vspec} J={depth}"))?;
        let mut sink = Sink::default();
        for spec in &specs {
            let w = build_weight(spec, grid)?;
            let exponent = 2.0 * w.rw_conjugate().context(|| format!("r_w of {spec}"))?;
            let h = check_hypotheses(&vector, grid, exponent).context(|| format!("hypotheses {vspec}"))?;
            sink.require(THEOREM14, "hypotheses", h.hold());
        }
        builder.absorb(sink);
        let mut tasks = Vec::new();
        for weight in 0..specs.len() {
            for &m in &cfg.m {
                for &seed in cfg.heavy() {
                    tasks.push((weight, m, seed));
                }
            }
        }
        let exact_signs = vector.len() <= MAX_EXHAUSTIVE_SIGNS && matches!(cfg.signs, SignConfig::Exhaustive);
        gather(builder, &tasks, |&(weight, m, seed)| {
            let spec = &specs[weight];
            let run = || -> nczw_core::Result<Sink> {
                let w = spec.build(grid)?;
                let f = recipe(cfg, m, seed).build(grid)?;
                let weak = WeakRun::new(&op, &f, &w, sampling(cfg, seed))?;
                let at = labels(cfg, spec, &vspec.to_string(), m, depth, seed);
                let mut sink = Sink::default();
                sink.row(THEOREM14, "weak_ratio", &at, None, weak.weak_ratio()?, true);
                if exact_signs && m <= 4 {
                    sink.at_most(THEOREM14, "khintchine_gap", cfg.tolerances.khintchine, weak.khintchine_gap()?);
                }
                for lambda in path_heights(&heights(cfg, &f, &w)?) {
                    let p = weak.path(lambda)?;
                    sink.require(THEOREM14, "path_sound", p.sound);
                    sink.at_most(THEOREM14, "path_dominates", 1e-12, (p.direct - p.bound) / (1.0 + p.bound));
                    sink.row(THEOREM14, "path_bound", &at, Some(lambda), p.bound, false);
                }
                Ok(sink)
            };
            run().context(|| format!("weak ratio {vspec} J={depth} weight={spec} m={m} seed={seed}"))
        })?;
    }
    Ok(())
}

fn theorem16(cfg: &ExperimentConfig, builder: &mut ReportBuilder) -> Result<()> {
    let specs = cfg.weight_specs()?;
    let vspec = cfg.vector_kernel_spec()?;
    let vector = vspec.build(cfg.d).context(|| format!("kernel {vspec}"))?;
    let coarse_grid = grid(cfg, cfg.base_depth)?;
    for &depth in &cfg.depths {
        let grid = grid(cfg, depth)?;
        let op = VectorOperator::new(&vector, grid)
            .and_then(|op| op.with_coarse_level(cfg.base_depth))
            .context(|| format!("operator {vspec} J={depth}"))?;
        let mut sink = Sink::default();
        for spec in &specs {
            let w = build_weight(spec, grid)?;
            let exponent = w.rw_conjugate().context(|| format!("r_w of {spec}"))?;
            let h = check_hypotheses(&vector, grid, exponent).context(|| format!("hypotheses {vspec}"))?;
            sink.require(THEOREM16, "hypotheses", h.hold());
        }
        let h = check_hypotheses(&vector, grid, 1.0).context(|| format!("hypotheses {vspec}"))?;
        sink.require(THEOREM16, "hypotheses_unweighted", h.hold());
        builder.absorb(sink);
        let mut tasks = Vec::new();
        for weight in 0..specs.len() {
            for &m in &cfg.m {
                for &seed in cfg.heavy() {
                    tasks.push((weight, m, seed));
                }
            }
        }
        let first = cfg.heavy()[0];
        // The atom budget is shared by the heavy seeds of each group.
        let per_seed = cfg.atoms.div_ceil(cfg.heavy().len());
        sink_count(builder, cfg, per_seed);
        gather(builder, &tasks, |&(weight, m, seed)| {
            let spec = &specs[weight];
            let run = || -> nczw_core::Result<Sink> {
                let w = spec.build(grid)?;
                let coarse = spec.build(coarse_grid)?;
                let at = labels(cfg, spec, &vspec.to_string(), m, depth, seed);
                let mut sink = Sink::default();
                let atoms = refined_atom_suite(&coarse, &w, m, per_seed, seed)?;
                let sweep = theorem16_atom_sweep(&op, &atoms, &w)?;
                sink.row(THEOREM16, "atom_max", &at, None, sweep.max, true);
                for (kind, value) in &sweep.by_kind {
                    sink.row(THEOREM16, &format!("atom_max_{kind}"), &at, None, *value, false);
                }
                if seed == first {
                    // Atoms drawn cell by cell at the fine depth, recorded only.
                    let native = atom_suite(grid, m, &w, NATIVE_ATOMS.min(cfg.atoms), seed)?;
                    let sweep = theorem16_atom_sweep(&op, &native, &w)?;
                    sink.row(THEOREM16, "atom_max_native", &at, None, sweep.max, false);
                }
                let f = recipe(cfg, m, seed).build(grid)?;
                let route = atomic_route(&op, &f, &w, SLICE)?;
                sink.require(THEOREM16, "atomic_route", route.holds(cfg.tolerances.regularized));
                sink.at_most(THEOREM16, "route_crude_sum", 1.0 + cfg.tolerances.exact, route.crude_sum);
                sink.at_most(THEOREM16, "route_simple_sum", SLICE + cfg.tolerances.exact, route.simple_sum);
                let ratio = if route.bound > 0.0 { route.image / route.bound } else { 0.0 };
                sink.row(THEOREM16, "route_ratio", &at, None, ratio, false);
                Ok(sink)
            };
            run().context(|| format!("atoms {vspec} J={depth} weight={spec} m={m} seed={seed}"))
        })?;
    }
    Ok(())
}

fn sink_count(builder: &mut ReportBuilder, cfg: &ExperimentConfig, per_seed: usize) {
    let mut sink = Sink::default();
    sink.at_least(THEOREM16, "atoms_per_group", cfg.atoms as f64, (per_seed * cfg.heavy().len()) as f64);
    builder.absorb(sink);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{"d": 1, "J": [4, 5], "m": [1, 2], "weights": ["const:1", "step:1,3"], "kernels": ["hilbert"],
                "vector_kernel": "dyadic-poisson:2", "seeds": [1, 2, 3], "base_depth": 3, "atoms": 12,
                "lemma_samples": 50, "lambda_grid": {{"auto": 4}}{extra}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert_eq!(parse_suites("all").unwrap().len(), 8);
        assert_eq!(parse_suites("lemmas,cuculescu,lemmas").unwrap(), vec![Suite::Cuculescu, Suite::Lemmas]);
        assert!(parse_suites("nope").is_err());
    }

    #[test]
    fn path_heights_keep_both_ends() {
        let hs: Vec<f64> = (0..16).map(f64::from).collect();
        assert_eq!(path_heights(&hs), vec![0.0, 4.0, 8.0, 12.0, 15.0]);
        assert_eq!(path_heights(&[1.0]), vec![1.0]);
    }

    #[test]
    fn psi_partition_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in [1, 2] {
            assert!(partition_residual(DyadicGrid::new(d, 4).unwrap(), &mut rng, 200) < 1e-12);
        }
    }

    #[test]
    fn trace_inequality_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in [1, 2, 4] {
            for _ in 0..50 {
                assert!(trace_inequality_slack(m, &mut rng).unwrap() >= -1e-10);
            }
        }
    }

    #[test]
    fn scalar_stopping_matches_the_oracle() {
        let grid = DyadicGrid::new(1, 6).unwrap();
        let f = FieldRecipe { dim: 1, m: 1, base_depth: 6, seed: 4 }.build(grid).unwrap();
        for lambda in [2.0, 5.0, 20.0] {
            let sf = cuculescu(&f, lambda).unwrap();
            assert_eq!(scalar_stopping_mismatches(&f, &sf).unwrap(), 0);
        }
    }

    #[test]
    fn all_suites_pass_on_a_tiny_config() {
        let cfg = tiny("");
        let report = run(&cfg, &Suite::ALL).unwrap();
        let failed: Vec<_> = report.failed_checks().collect();
        assert!(failed.is_empty(), "{failed:#?}");
        for suite in Suite::ALL {
            assert!(report.checks.iter().any(|c| c.suite == suite.name()), "{suite} ran no checks");
        }
        assert!(!report.cz.records.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = tiny(r#", "heavy_seeds": 1"#);
        let suites = parse_suites("levelset,theorem14").unwrap();
        let a = run(&cfg, &suites).unwrap();
        let b = run(&cfg, &suites).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.ratios_csv().unwrap(), b.ratios_csv().unwrap());
    }
}
