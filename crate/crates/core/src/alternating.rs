//! Locally optimal alternating minimization over (coefficients, plan).
//!
//! Each iteration solves the inner problem exactly at the current
//! coefficients (partial transport, or min-cut for the relaxed backend) and
//! then minimizes the coefficient quadratic exactly at the fixed plan, so
//! the energy sequence never increases. A scale mode is handled by a quick
//! one-dimensional branch-and-bound jointly with the plan step while the
//! remaining coefficients stay frozen.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::energy::Problem;
use crate::error::{Error, Result};
use crate::measure::{Coupling, PlanEntry, Segmentation};
use crate::transport::LambdaBox;

/// Which inner solver drives the plan step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Transport,
    GraphCut,
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backend::Transport => write!(f, "transport"),
            Backend::GraphCut => write!(f, "graphcut"),
        }
    }
}

/// Options of the alternating scheme.
#[derive(Debug, Clone)]
pub struct AltOptions {
    pub backend: Backend,
    pub max_iters: usize,
    /// Stop when the energy decrease falls below this absolute threshold.
    pub tol: f64,
    /// Search interval for the scale coefficient.
    pub scale_range: [f64; 2],
    /// Interval width at which the scale search stops.
    pub scale_tol: f64,
}

impl Default for AltOptions {
    fn default() -> Self {
        AltOptions {
            backend: Backend::Transport,
            max_iters: 100,
            tol: 1e-7,
            scale_range: [-0.5, 1.0],
            scale_tol: 1e-3,
        }
    }
}

/// One energy-trace row.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lambda: Vec<f64>,
    pub energy: f64,
    pub backend: Backend,
}

/// Output of an alternating run.
#[derive(Debug, Clone)]
pub struct AltResult {
    pub lambda: Vec<f64>,
    pub energy: f64,
    /// Final plan (for the relaxed backend, the nearest-neighbor pseudo-plan
    /// of the selected points).
    pub plan: Coupling,
    pub segmentation: Segmentation,
    pub trace: Vec<TraceRow>,
}

/// Exact minimizer of the plan energy in the coefficients: the energy is a
/// positive-semidefinite quadratic once the plan is fixed (the scale
/// coefficient, if present, stays frozen). Singular systems resolve to the
/// minimum-norm solution.
pub fn lambda_step(problem: &Problem, plan: &Coupling, current: &[f64]) -> Result<Vec<f64>> {
    let basis = problem.basis;
    let n = basis.len();
    if current.len() != n {
        return Err(Error::InvalidInput(format!("{} coefficients for {} modes", current.len(), n)));
    }
    let scale_idx = basis.scale_index;
    let free: Vec<usize> = (0..n).filter(|k| Some(*k) != scale_idx).collect();
    if free.is_empty() {
        return Ok(current.to_vec());
    }
    let nf = free.len();
    let s = scale_idx.map(|si| current[si]).unwrap_or(0.0);
    let prefactor = 0.5 / ((1.0 + s) * (1.0 + s));

    let mut h = DMatrix::<f64>::zeros(nf, nf);
    let mut rhs = DVector::<f64>::zeros(nf);
    let tpl = problem.template;
    let img = problem.image;
    let has_corr = !problem.fcost.corrections.is_empty();

    for e in &plan.entries {
        let Some(j) = e.j else { continue };
        let i = e.i;
        // Base point: original plus the frozen scale displacement.
        let mut bx = tpl.points[i].x;
        let mut by = tpl.points[i].y;
        if let Some(si) = scale_idx {
            bx += s * basis.modes[si].displacements[i][0];
            by += s * basis.modes[si].displacements[i][1];
        }
        let y = img.points[j];
        let dx = bx - y.x;
        let dy = by - y.y;
        for (a, &ka) in free.iter().enumerate() {
            let da = basis.modes[ka].displacements[i];
            for (b, &kb) in free.iter().enumerate().skip(a) {
                let db = basis.modes[kb].displacements[i];
                let v = 2.0 * prefactor * e.mass * (da[0] * db[0] + da[1] * db[1]);
                h[(a, b)] += v;
                if a != b {
                    h[(b, a)] += v;
                }
            }
            let mut lin = 2.0 * prefactor * e.mass * (da[0] * dx + da[1] * dy);
            if has_corr {
                lin += prefactor * e.mass * problem.config.tau * problem.fcost.correction(ka, i, j);
            }
            rhs[a] -= lin;
        }
    }
    // Gaussian prior on the statistical coordinates.
    let off = basis.stat_offset();
    for (a, &ka) in free.iter().enumerate() {
        if let Some(srel) = ka.checked_sub(off) {
            let sigma = basis.sigmas[srel];
            if sigma > 0.0 {
                h[(a, a)] += problem.gamma() / (sigma * sigma);
            }
        }
    }

    let solution = h
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| {
            let svd = h.svd(true, true);
            svd.solve(&rhs, 1e-12).unwrap_or_else(|_| DVector::zeros(nf))
        });

    let mut lambda = current.to_vec();
    for (a, &ka) in free.iter().enumerate() {
        lambda[ka] = solution[a];
    }
    Ok(lambda)
}

/// Minimizes the scaled energy over the scale coefficient alone by interval
/// halving with box lower bounds, all other coefficients frozen. Returns the
/// best scale value and its exact energy and plan.
fn scale_line_search(
    problem: &Problem,
    lambda: &[f64],
    range: [f64; 2],
    tol: f64,
) -> Result<(f64, f64, Coupling)> {
    let si = problem.basis.scale_index.expect("scale search without a scale mode");
    let lo = range[0].max(-0.999);
    let hi = range[1].max(lo);

    let eval = |s: f64| -> Result<(f64, Coupling)> {
        let mut l = lambda.to_vec();
        l[si] = s;
        problem.transport_energy(&l)
    };
    let interval_bound = |a: f64, b: f64| -> Result<f64> {
        let mut blo = lambda.to_vec();
        let mut bhi = lambda.to_vec();
        blo[si] = a;
        bhi[si] = b;
        problem.box_lower_bound(&LambdaBox { lo: blo, hi: bhi, bound: None })
    };

    // Incumbent: keep the current value so the step can only improve.
    let (mut best_s, (mut best_e, mut best_plan)) = (lambda[si].clamp(lo, hi), eval(lambda[si].clamp(lo, hi))?);
    let mut intervals = vec![(lo, hi, interval_bound(lo, hi)?)];
    while let Some(idx) = intervals
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.2.total_cmp(&b.2))
        .map(|(i, _)| i)
    {
        let (a, b, bound) = intervals.swap_remove(idx);
        if bound >= best_e - 1e-12 {
            continue;
        }
        let mid = 0.5 * (a + b);
        let (e_mid, plan_mid) = eval(mid)?;
        if e_mid < best_e {
            best_e = e_mid;
            best_s = mid;
            best_plan = plan_mid;
        }
        if b - a > tol {
            intervals.push((a, mid, interval_bound(a, mid)?));
            intervals.push((mid, b, interval_bound(mid, b)?));
        }
    }
    Ok((best_s, best_e, best_plan))
}

/// Runs the alternating scheme from an initial coefficient vector.
pub fn alternating_optimize(
    problem: &Problem,
    initial_lambda: &[f64],
    opts: &AltOptions,
) -> Result<AltResult> {
    if initial_lambda.len() != problem.basis.len() {
        return Err(Error::InvalidInput(format!(
            "{} initial coefficients for {} modes",
            initial_lambda.len(),
            problem.basis.len()
        )));
    }
    if let Some(si) = problem.basis.scale_index {
        if initial_lambda[si] <= -1.0 {
            return Err(Error::InvalidScale(initial_lambda[si]));
        }
    }
    if opts.backend == Backend::Transport && problem.config.sigma_tv != 0.0 {
        return Err(Error::Config(
            "transport backend requires sigma_tv = 0; choose the graph-cut backend".into(),
        ));
    }

    let mut lambda = initial_lambda.to_vec();
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut prev_energy = f64::INFINITY;
    let mut plan = Coupling::default();
    let mut energy = f64::INFINITY;

    for iteration in 0..opts.max_iters {
        // Plan step (with the joint scale search when a scale mode exists).
        match opts.backend {
            Backend::Transport => {
                if problem.basis.scale_index.is_some() {
                    let (s, e, p) = scale_line_search(problem, &lambda, opts.scale_range, opts.scale_tol)?;
                    lambda[problem.basis.scale_index.unwrap()] = s;
                    energy = e;
                    plan = p;
                } else {
                    let (e, p) = problem.transport_energy(&lambda)?;
                    energy = e;
                    plan = p;
                }
            }
            Backend::GraphCut => {
                let (e, seg, assignment) = problem.relaxed_energy_with_assignment(&lambda)?;
                energy = e;
                plan = pseudo_plan(&seg, &assignment)?;
            }
        }
        trace.push(TraceRow { iteration, lambda: lambda.clone(), energy, backend: opts.backend });

        // Coefficient step: exact quadratic minimization at the fixed plan.
        let candidate = lambda_step(problem, &plan, &lambda)?;
        let cand_energy = match opts.backend {
            Backend::Transport => problem.plan_energy(&candidate, &plan)?,
            Backend::GraphCut => relaxed_plan_energy(problem, &candidate, &plan)?,
        };
        if cand_energy <= energy {
            lambda = candidate;
            energy = cand_energy;
        }
        trace.push(TraceRow { iteration, lambda: lambda.clone(), energy, backend: opts.backend });

        if prev_energy - energy < opts.tol {
            break;
        }
        prev_energy = energy;
    }

    let segmentation = match opts.backend {
        Backend::Transport => crate::measure::project_to_segmentation(&plan, problem.image)?,
        Backend::GraphCut => {
            let (_, seg, assignment) = problem.relaxed_energy_with_assignment(&lambda)?;
            plan = pseudo_plan(&seg, &assignment)?;
            seg
        }
    };
    Ok(AltResult { lambda, energy, plan, segmentation, trace })
}

/// Nearest-neighbor pseudo-plan of a binary segmentation: each selected
/// image point receives its capacity from the matched template point.
fn pseudo_plan(seg: &Segmentation, assignment: &[Option<usize>]) -> Result<Coupling> {
    let mut entries: Vec<PlanEntry> = Vec::new();
    for (j, a) in assignment.iter().enumerate() {
        if let Some(i) = a {
            if seg.nu[j] > 0.0 {
                entries.push(PlanEntry { i: *i, j: Some(j), mass: seg.nu[j] });
            }
        }
    }
    // Merge duplicates per (i, j): cannot occur since j is unique per entry.
    Coupling::new(entries)
}

/// Relaxed energy of an explicit pseudo-plan: transport term over the plan
/// plus prior and TV of its image marginal. Used for the monotone
/// coefficient step of the relaxed backend.
fn relaxed_plan_energy(problem: &Problem, lambda: &[f64], plan: &Coupling) -> Result<f64> {
    let s = match problem.basis.scale_index {
        Some(si) => {
            if lambda[si] <= -1.0 {
                return Err(Error::InvalidScale(lambda[si]));
            }
            lambda[si]
        }
        None => 0.0,
    };
    let prefactor = 0.5 / ((1.0 + s) * (1.0 + s));
    let lf: &[f64] = if problem.fcost.corrections.is_empty() { &[] } else { lambda };
    let g = problem.config.g_background.as_deref();
    let mut cost_sum = 0.0;
    for e in &plan.entries {
        let Some(j) = e.j else { continue };
        let tx = crate::modes::transform_point(problem.template, problem.basis, lambda, e.i);
        let mut c = tx.dist2(&problem.image.points[j])
            + problem.config.tau * problem.fcost.eval(problem.template, problem.image, e.i, j, lf)?;
        if let Some(g) = g {
            c += g[j];
        }
        cost_sum += e.mass * c;
    }
    let mut value = prefactor * cost_sum + problem.prior(lambda);
    if problem.config.sigma_tv > 0.0 {
        let adjacency = problem
            .image
            .adjacency
            .as_deref()
            .ok_or_else(|| Error::Config("sigma_tv > 0 requires image adjacency".into()))?;
        let seg = crate::measure::project_to_segmentation(plan, problem.image)?;
        let sigma = if problem.config.rescale_tv_with_scale {
            problem.config.sigma_tv / (1.0 + s)
        } else {
            problem.config.sigma_tv
        };
        value += sigma * crate::energy::tv(&seg, adjacency);
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::EnergyConfig;
    use crate::measure::{FeatureCost, ImageDomain, Point2, TemplateShape};
    use crate::modes::ModeBasis;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn template_at(points: Vec<Point2>) -> TemplateShape {
        let n = points.len();
        TemplateShape::new(points, vec![1.0; n], vec![vec![0.0]; n], None).unwrap()
    }

    fn image_at(points: Vec<Point2>) -> ImageDomain {
        let n = points.len();
        ImageDomain::new(points, vec![1.0; n], vec![vec![0.0]; n], None).unwrap()
    }

    fn no_tv(radius: f64) -> EnergyConfig {
        EnergyConfig { tau: 0.0, radius: Some(radius), ..EnergyConfig::default() }
    }

    #[test]
    fn lambda_step_single_pair_translation() {
        let tpl = template_at(vec![Point2::new(0.0, 0.0)]);
        let img = image_at(vec![Point2::new(2.0, 0.0)]);
        let (tx, _) = crate::modes::make_translation_modes(&tpl);
        let basis = ModeBasis::new(vec![tx], vec![], 0.0, &tpl).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv(10.0)).unwrap();
        let plan = Coupling::new(vec![PlanEntry { i: 0, j: Some(0), mass: 1.0 }]).unwrap();
        let l = lambda_step(&problem, &plan, &[0.0]).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-10, "lambda = {l:?}");
    }

    #[test]
    fn lambda_step_never_increases_the_plan_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..20 {
            let tpl = template_at(vec![
                Point2::new(0.0, 0.0),
                Point2::new(1.0, 0.2),
                Point2::new(-0.4, 0.9),
            ]);
            let img = image_at(
                (0..8)
                    .map(|_| Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
                    .collect(),
            );
            let basis = ModeBasis::geometric(&tpl, true, false, 0.5).unwrap();
            let fc = FeatureCost::squared_euclidean();
            let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv(40.0)).unwrap();
            let start = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)];
            let (_, plan) = problem.transport_energy(&start).unwrap();
            let before = problem.plan_energy(&start, &plan).unwrap();
            let l = lambda_step(&problem, &plan, &start).unwrap();
            let after = problem.plan_energy(&l, &plan).unwrap();
            assert!(after <= before + 1e-10, "step increased energy: {before} -> {after}");
        }
    }

    #[test]
    fn lambda_step_zeroes_the_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..10 {
            let tpl = template_at(vec![Point2::new(0.0, 0.0), Point2::new(1.0, -0.6)]);
            let img = image_at(
                (0..6)
                    .map(|_| Point2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                    .collect(),
            );
            let basis = ModeBasis::geometric(&tpl, true, false, 0.7).unwrap();
            let fc = FeatureCost::squared_euclidean();
            let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv(30.0)).unwrap();
            let start = [rng.random_range(-0.5..0.5), 0.0, 0.1];
            let (_, plan) = problem.transport_energy(&start).unwrap();
            let l = lambda_step(&problem, &plan, &start).unwrap();
            // Central-difference gradient of the plan energy.
            let eps = 1e-6;
            for k in 0..l.len() {
                let mut lp = l.clone();
                let mut lm = l.clone();
                lp[k] += eps;
                lm[k] -= eps;
                let gp = problem.plan_energy(&lp, &plan).unwrap();
                let gm = problem.plan_energy(&lm, &plan).unwrap();
                let grad = (gp - gm) / (2.0 * eps);
                assert!(grad.abs() < 1e-6, "gradient component {k} = {grad}");
            }
        }
    }

    #[test]
    fn lambda_step_matches_gradient_descent_oracle() {
        // Slow, independent minimizer of the same quadratic.
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let tpl = template_at(vec![Point2::new(0.0, 0.0), Point2::new(0.8, 0.4)]);
        let img = image_at(
            (0..5)
                .map(|_| Point2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
                .collect(),
        );
        let basis = ModeBasis::geometric(&tpl, true, false, 1.0).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv(30.0)).unwrap();
        let start = [0.2, -0.1, 0.05];
        let (_, plan) = problem.transport_energy(&start).unwrap();
        let exact = lambda_step(&problem, &plan, &start).unwrap();

        let mut l = start.to_vec();
        let step = 0.05;
        for _ in 0..20_000 {
            let eps = 1e-7;
            let mut grad = vec![0.0; l.len()];
            for k in 0..l.len() {
                let mut lp = l.clone();
                let mut lm = l.clone();
                lp[k] += eps;
                lm[k] -= eps;
                grad[k] = (problem.plan_energy(&lp, &plan).unwrap()
                    - problem.plan_energy(&lm, &plan).unwrap())
                    / (2.0 * eps);
            }
            for k in 0..l.len() {
                l[k] -= step * grad[k];
            }
        }
        for (a, b) in exact.iter().zip(&l) {
            assert!((a - b).abs() < 1e-6, "exact {exact:?} vs descent {l:?}");
        }
    }

    #[test]
    fn optimally_placed_template_is_a_fixed_point() {
        let pts = vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)];
        let tpl = template_at(pts.clone());
        let img = image_at(pts);
        let basis = ModeBasis::geometric(&tpl, true, false, 0.0).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv(20.0)).unwrap();
        let result = alternating_optimize(&problem, &[0.0, 0.0, 0.0], &AltOptions::default()).unwrap();
        assert!(result.energy.abs() < 1e-10);
        assert!(result.lambda.iter().all(|l| l.abs() < 1e-6), "lambda {:?}", result.lambda);
        assert!(result.trace.len() <= 4, "terminates within two iterations");
    }

    #[test]
    fn toy_problem_converges_to_the_nearer_basin() {
        let tpl = template_at(vec![Point2::new(0.0, 0.0)]);
        let img = image_at(vec![Point2::new(0.0, 0.0), Point2::new(5.0, 0.0)]);
        let (tx, _) = crate::modes::make_translation_modes(&tpl);
        let basis = ModeBasis::new(vec![tx], vec![], 0.0, &tpl).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv(50.0)).unwrap();
        let result = alternating_optimize(&problem, &[1.0], &AltOptions::default()).unwrap();
        assert!(result.lambda[0].abs() < 1e-9, "converged to {:?}", result.lambda);
        assert!(result.energy.abs() < 1e-12);
    }

    #[test]
    fn energy_trace_is_monotone_on_random_instances_both_backends() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for run in 0..30 {
            let n_img = rng.random_range(6..14usize);
            let tpl = template_at(vec![
                Point2::new(0.0, 0.0),
                Point2::new(1.0, 0.3),
                Point2::new(-0.6, 0.8),
            ]);
            let img_pts: Vec<Point2> = (0..n_img)
                .map(|_| Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
                .collect();
            let mut adjacency = Vec::new();
            for a in 0..n_img {
                for b in (a + 1)..n_img {
                    if rng.random_bool(0.2) {
                        adjacency.push((a, b, rng.random_range(0.01..0.3)));
                    }
                }
            }
            let img = ImageDomain::new(
                img_pts,
                vec![1.0; n_img],
                (0..n_img).map(|_| vec![rng.random_range(0.0..1.0)]).collect(),
                Some(adjacency),
            )
            .unwrap();
            let basis = ModeBasis::geometric(&tpl, true, false, 0.4).unwrap();
            let fc = FeatureCost::squared_euclidean();

            for backend in [Backend::Transport, Backend::GraphCut] {
                let g: Vec<f64> = (0..n_img).map(|_| rng.random_range(-2.0..1.0)).collect();
                let config = EnergyConfig {
                    tau: 0.3,
                    sigma_tv: if backend == Backend::GraphCut { 0.2 } else { 0.0 },
                    g_background: Some(g),
                    radius: Some(40.0),
                    ..EnergyConfig::default()
                };
                let problem = Problem::new(&tpl, &img, &basis, &fc, config).unwrap();
                let init = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)];
                let opts = AltOptions { backend, ..AltOptions::default() };
                let result = alternating_optimize(&problem, &init, &opts).unwrap();
                for w in result.trace.windows(2) {
                    assert!(
                        w[1].energy <= w[0].energy + 1e-9,
                        "run {run} {backend}: trace increased {} -> {}",
                        w[0].energy,
                        w[1].energy
                    );
                }
            }
        }
    }

    #[test]
    fn scale_mode_search_is_monotone_and_finds_the_scale() {
        // Template of four points, image scaled by 1.3: the scale search
        // should move lambda_s toward 0.3 and never increase the energy.
        let pts = vec![
            Point2::new(1.0, 0.0),
            Point2::new(-1.0, 0.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.0, -1.0),
        ];
        let tpl = template_at(pts.clone());
        let factor = 1.3;
        // Enough capacity for the grown template mass.
        let img_pts: Vec<Point2> = pts.iter().map(|p| Point2::new(p.x * factor, p.y * factor)).collect();
        let img = ImageDomain::new(
            img_pts,
            vec![2.0; 4],
            vec![vec![0.0]; 4],
            None,
        )
        .unwrap();
        let (txm, tym) = crate::modes::make_translation_modes(&tpl);
        let sc = crate::modes::make_scale_mode(&tpl);
        let basis = ModeBasis::new(vec![txm, tym, sc], vec![], 0.0, &tpl).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv(20.0)).unwrap();
        let result = alternating_optimize(&problem, &[0.0, 0.0, 0.0], &AltOptions::default()).unwrap();
        for w in result.trace.windows(2) {
            assert!(w[1].energy <= w[0].energy + 1e-9);
        }
        assert!(
            (result.lambda[2] - (factor - 1.0)).abs() < 5e-3,
            "scale coefficient {:?}",
            result.lambda
        );
    }
}
