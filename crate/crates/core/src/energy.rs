//! The energy family over segmentations and couplings.
//!
//! All energies share one normalization: the transport term is
//! `p(s) * sum (c_geo + tau * c_F + g) d(pi)` with `p(s) = 1 / (2 (1+s)^2)`
//! and `s` the scale coefficient (zero without a scale mode), plus the
//! Gaussian coefficient prior and, where applicable, the TV term. With a
//! scale mode the template supplies are scaled by `(1+s)^2`.
//!
//! [`Problem`] bundles template, image, basis, feature cost and weights and
//! fixes one shared overflow price and truncation radius for the whole
//! instance, so that pointwise energies, box lower bounds and plan energies
//! are mutually consistent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphcut;
use crate::measure::{Coupling, FeatureCost, ImageDomain, Segmentation, TemplateShape, MASS_TOL};
use crate::modes::{transform_point, ModeBasis};
use crate::transport::{
    assemble_bound_cost, assemble_cost, box_min_prior_with, solve_partial_transport, CostParams,
    LambdaBox, OverflowPolicy,
};

/// Weights and options of the energy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyConfig {
    /// Weight of the feature cost against the geometric cost.
    pub tau: f64,
    /// Weight of the TV boundary regularizer.
    pub sigma_tv: f64,
    /// Overrides the basis prior weight when set.
    pub gamma: Option<f64>,
    /// Whether a scale mode, if present, drives mass rescaling.
    pub scale_enabled: bool,
    /// Additive per-image-point background shift of the assignment costs.
    pub g_background: Option<Vec<f64>>,
    /// Truncation radius; a template- and feature-scale default when unset.
    pub radius: Option<f64>,
    /// Divide the TV weight by (1 + scale coefficient); off by default.
    pub rescale_tv_with_scale: bool,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            tau: 1.0,
            sigma_tv: 0.0,
            gamma: None,
            scale_enabled: true,
            g_background: None,
            radius: None,
            rescale_tv_with_scale: false,
        }
    }
}

/// Total variation of a segmentation over a weighted neighbor list:
/// `sum a |u(j) - u(j')|`.
pub fn tv(seg: &Segmentation, adjacency: &[(usize, usize, f64)]) -> f64 {
    adjacency
        .iter()
        .map(|&(a, b, w)| w * (seg.u(a) - seg.u(b)).abs())
        .sum()
}

/// One segmentation/matching instance with cached cost-scale data.
pub struct Problem<'a> {
    pub template: &'a TemplateShape,
    pub image: &'a ImageDomain,
    pub basis: &'a ModeBasis,
    pub fcost: &'a FeatureCost,
    pub config: EnergyConfig,
    gamma_eff: f64,
    radius_eff: f64,
    overflow_cost: f64,
    magnitudes: Vec<f64>,
}

impl<'a> Problem<'a> {
    pub fn new(
        template: &'a TemplateShape,
        image: &'a ImageDomain,
        basis: &'a ModeBasis,
        fcost: &'a FeatureCost,
        config: EnergyConfig,
    ) -> Result<Self> {
        if !(config.tau >= 0.0) || !(config.sigma_tv >= 0.0) {
            return Err(Error::Config("tau and sigma_tv must be nonnegative".into()));
        }
        if basis.scale_index.is_some() && !config.scale_enabled {
            return Err(Error::Config(
                "the basis has a scale mode but scale handling is disabled".into(),
            ));
        }
        if !fcost.corrections.is_empty() && fcost.corrections.len() != basis.len() {
            return Err(Error::Config(format!(
                "{} feature correction tables for {} modes",
                fcost.corrections.len(),
                basis.len()
            )));
        }
        if let Some(g) = &config.g_background {
            if g.len() != image.len() {
                return Err(Error::Config(format!(
                    "background term has {} entries for {} image points",
                    g.len(),
                    image.len()
                )));
            }
        }
        let gamma_eff = config.gamma.unwrap_or(basis.gamma);
        if !(gamma_eff >= 0.0) {
            return Err(Error::Config("gamma must be nonnegative".into()));
        }

        let feat_max = fcost.base_upper_bound(template, image)?;
        let corr_max: f64 = fcost.corrections.iter().map(|m| m.max_abs()).sum();
        let g_max = config
            .g_background
            .as_ref()
            .map(|g| g.iter().fold(0.0_f64, |a, &v| a.max(v.abs())))
            .unwrap_or(0.0);
        let radius_eff = config.radius.unwrap_or_else(|| {
            0.75 * template.bbox_diagonal() + (config.tau * (feat_max + corr_max) + g_max).sqrt() + 1.0
        });
        if !(radius_eff > 0.0) {
            return Err(Error::Config(format!("truncation radius {radius_eff} must be positive")));
        }
        // One overflow price for the whole instance keeps pointwise costs and
        // box-bounded costs comparable entry for entry.
        let overflow_cost =
            10.0 * (radius_eff * radius_eff + config.tau * (feat_max + corr_max) + g_max);
        let magnitudes = basis.mode_magnitudes();

        Ok(Problem { template, image, basis, fcost, config, gamma_eff, radius_eff, overflow_cost, magnitudes })
    }

    pub fn radius(&self) -> f64 {
        self.radius_eff
    }

    pub fn overflow_price(&self) -> f64 {
        self.overflow_cost
    }

    pub fn gamma(&self) -> f64 {
        self.gamma_eff
    }

    /// Largest displacement magnitude per mode.
    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    fn cost_params(&self) -> CostParams<'_> {
        CostParams {
            feature_weight: self.config.tau,
            g_background: self.config.g_background.as_deref(),
            radius: self.radius_eff,
            overflow: OverflowPolicy::Fixed(self.overflow_cost),
        }
    }

    pub fn prior(&self, lambda: &[f64]) -> f64 {
        self.basis.prior_cost_with(lambda, self.gamma_eff)
    }

    /// Scale coefficient of a configuration, validated to stay above -1.
    fn scale_of(&self, lambda: &[f64]) -> Result<f64> {
        match self.basis.scale_index {
            Some(si) => {
                let s = lambda[si];
                if s <= -1.0 {
                    Err(Error::InvalidScale(s))
                } else {
                    Ok(s)
                }
            }
            None => Ok(0.0),
        }
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.basis.len() {
            return Err(Error::InvalidInput(format!(
                "{} coefficients for {} modes",
                lambda.len(),
                self.basis.len()
            )));
        }
        Ok(())
    }

    fn supplies(&self, mass_factor: f64) -> Vec<f64> {
        self.template.masses.iter().map(|&m| m * mass_factor).collect()
    }

    /// Minimal energy over couplings at fixed coefficients, solved by exact
    /// partial transport. Requires `sigma_tv = 0`; TV-regularized inner
    /// problems go through [`Problem::relaxed_energy`].
    pub fn transport_energy(&self, lambda: &[f64]) -> Result<(f64, Coupling)> {
        self.check_lambda(lambda)?;
        if self.config.sigma_tv != 0.0 {
            return Err(Error::Config(
                "transport backend requires sigma_tv = 0; use the graph-cut backend".into(),
            ));
        }
        let s = self.scale_of(lambda)?;
        let mass_factor = (1.0 + s) * (1.0 + s);
        let cost = assemble_cost(self.template, self.image, self.basis, lambda, self.fcost, &self.cost_params())?;
        let (plan, obj) = solve_partial_transport(&cost, &self.supplies(mass_factor), &self.image.capacities)?;
        Ok((0.5 / mass_factor * obj + self.prior(lambda), plan))
    }

    /// Energy of an explicit plan at fixed coefficients. The plan must place
    /// the (scaled) template mass exactly and respect the capacities.
    pub fn plan_energy(&self, lambda: &[f64], plan: &Coupling) -> Result<f64> {
        self.check_lambda(lambda)?;
        let s = self.scale_of(lambda)?;
        let mass_factor = (1.0 + s) * (1.0 + s);
        let supplies = self.supplies(mass_factor);
        let (mu, _) = crate::measure::marginals(plan, self.template.len(), self.image.len())?;
        let tol = MASS_TOL * self.template.total_mass.max(1.0);
        for (i, (&got, &want)) in mu.iter().zip(&supplies).enumerate() {
            if (got - want).abs() > tol {
                return Err(Error::InvalidCoupling(format!(
                    "plan places {got} on template point {i}, expected {want}"
                )));
            }
        }
        let seg = crate::measure::project_to_segmentation(plan, self.image)?;

        let g = self.config.g_background.as_deref();
        let mut cost_sum = 0.0;
        for e in &plan.entries {
            match e.j {
                Some(j) => {
                    let tx = transform_point(self.template, self.basis, lambda, e.i);
                    let mut c = tx.dist2(&self.image.points[j])
                        + self.config.tau * self.fcost.eval(
                            self.template,
                            self.image,
                            e.i,
                            j,
                            if self.fcost.corrections.is_empty() { &[] } else { lambda },
                        )?;
                    if let Some(g) = g {
                        c += g[j];
                    }
                    cost_sum += e.mass * c;
                }
                None => cost_sum += e.mass * self.overflow_cost,
            }
        }
        let mut value = 0.5 / mass_factor * cost_sum + self.prior(lambda);
        if self.config.sigma_tv > 0.0 {
            let adjacency = self
                .image
                .adjacency
                .as_deref()
                .ok_or_else(|| Error::Config("sigma_tv > 0 requires image adjacency".into()))?;
            let sigma = if self.config.rescale_tv_with_scale { self.config.sigma_tv / (1.0 + s) } else { self.config.sigma_tv };
            value += sigma * tv(&seg, adjacency);
        }
        Ok(value)
    }

    /// Certified lower bound of the pointwise energy over a coefficient box:
    /// every coefficient occurrence is minimized separately over the box.
    /// With a scale mode this is the tighter one-sided variant built on the
    /// smallest admissible mass.
    pub fn box_lower_bound(&self, bx: &LambdaBox) -> Result<f64> {
        if bx.dim() != self.basis.len() {
            return Err(Error::InvalidInput(format!(
                "box dimension {} for {} modes",
                bx.dim(),
                self.basis.len()
            )));
        }
        if self.config.sigma_tv != 0.0 {
            return Err(Error::Config("box bounds are defined for sigma_tv = 0".into()));
        }
        let mass_factor = match self.basis.scale_index {
            Some(si) => {
                let sl = bx.lo[si];
                if sl <= -1.0 {
                    return Err(Error::InvalidScale(sl));
                }
                (1.0 + sl) * (1.0 + sl)
            }
            None => 1.0,
        };
        let cost =
            assemble_bound_cost(self.template, self.image, self.basis, bx, self.fcost, &self.cost_params())?;
        let (_, obj) = solve_partial_transport(&cost, &self.supplies(mass_factor), &self.image.capacities)?;
        Ok(0.5 / mass_factor * obj + box_min_prior_with(self.basis, bx, self.gamma_eff))
    }

    /// Nearest-template matching cost of one image point:
    /// `min_i (c_geo(T(lambda, x_i), y) + tau c_F(i, j)) + g(j)`.
    pub fn nearest_match_cost(&self, j: usize, lambda: &[f64]) -> Result<f64> {
        Ok(self.nearest_match(j, lambda)?.1)
    }

    fn nearest_match(&self, j: usize, lambda: &[f64]) -> Result<(usize, f64)> {
        self.check_lambda(lambda)?;
        if j >= self.image.len() {
            return Err(Error::IndexOutOfRange { index: j, len: self.image.len() });
        }
        let y = self.image.points[j];
        let lf: &[f64] = if self.fcost.corrections.is_empty() { &[] } else { lambda };
        let mut best = (0usize, f64::INFINITY);
        for i in 0..self.template.len() {
            let tx = transform_point(self.template, self.basis, lambda, i);
            let c = tx.dist2(&y) + self.config.tau * self.fcost.eval(self.template, self.image, i, j, lf)?;
            if c < best.1 {
                best = (i, c);
            }
        }
        let mut c = best.1;
        if let Some(g) = self.config.g_background.as_deref() {
            c += g[j];
        }
        Ok((best.0, c))
    }

    /// Relaxed energy: the template marginal constraint is dropped, the
    /// inner problem becomes nearest-neighbor unaries plus TV and is solved
    /// exactly by min-cut. Returns the value and the binary segmentation.
    pub fn relaxed_energy(&self, lambda: &[f64]) -> Result<(f64, Segmentation)> {
        let (value, seg, _) = self.relaxed_energy_with_assignment(lambda)?;
        Ok((value, seg))
    }

    /// As [`Problem::relaxed_energy`], additionally returning per selected
    /// image point the matched template index.
    pub fn relaxed_energy_with_assignment(
        &self,
        lambda: &[f64],
    ) -> Result<(f64, Segmentation, Vec<Option<usize>>)> {
        self.check_lambda(lambda)?;
        let s = self.scale_of(lambda)?;
        let mass_factor = (1.0 + s) * (1.0 + s);
        let prefactor = 0.5 / mass_factor;

        let n = self.image.len();
        let mut unaries = Vec::with_capacity(n);
        let mut argmins = Vec::with_capacity(n);
        for j in 0..n {
            let (i, c) = self.nearest_match(j, lambda)?;
            unaries.push(prefactor * c * self.image.capacities[j]);
            argmins.push(i);
        }
        let sigma = if self.config.rescale_tv_with_scale { self.config.sigma_tv / (1.0 + s) } else { self.config.sigma_tv };
        let pairwise: Vec<(usize, usize, f64)> = if sigma > 0.0 {
            let adjacency = self
                .image
                .adjacency
                .as_deref()
                .ok_or_else(|| Error::Config("sigma_tv > 0 requires image adjacency".into()))?;
            adjacency.iter().map(|&(a, b, w)| (a, b, sigma * w)).collect()
        } else {
            Vec::new()
        };
        let graph = graphcut::build_flow_graph(&unaries, &pairwise)?;
        let (labels, cut) = graphcut::min_cut(&graph);
        let value = graphcut::labeling_energy_min(&graph, cut) + self.prior(lambda);
        let nu: Vec<f64> = labels
            .iter()
            .zip(&self.image.capacities)
            .map(|(&l, &m)| if l { m } else { 0.0 })
            .collect();
        let seg = Segmentation::new(nu, self.image)?;
        let assignment = labels
            .iter()
            .zip(argmins)
            .map(|(&l, i)| if l { Some(i) } else { None })
            .collect();
        Ok((value, seg, assignment))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{CostMatrix, PlanEntry, Point2};
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

    fn no_tv_config(radius: f64) -> EnergyConfig {
        EnergyConfig { tau: 0.0, radius: Some(radius), ..EnergyConfig::default() }
    }

    #[test]
    fn plan_energy_examples() {
        let tpl = template_at(vec![Point2::new(0.0, 0.0)]);
        let img = image_at(vec![Point2::new(2.0, 0.0)]);
        let basis = ModeBasis::geometric(&tpl, false, false, 0.0).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv_config(50.0)).unwrap();

        let plan = Coupling::new(vec![PlanEntry { i: 0, j: Some(0), mass: 1.0 }]).unwrap();
        // Half of the squared distance 4.
        let e = problem.plan_energy(&[0.0, 0.0], &plan).unwrap();
        assert!((e - 2.0).abs() < 1e-12);
        // A translation onto the point zeroes the energy.
        let e = problem.plan_energy(&[2.0, 0.0], &plan).unwrap();
        assert!(e.abs() < 1e-12);
    }

    #[test]
    fn plan_energy_empty_plan_rejected_when_mass_is_positive() {
        let tpl = template_at(vec![Point2::new(0.0, 0.0)]);
        let img = image_at(vec![Point2::new(0.0, 0.0)]);
        let basis = ModeBasis::geometric(&tpl, false, false, 0.0).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv_config(10.0)).unwrap();
        let empty = Coupling::new(vec![]).unwrap();
        assert!(problem.plan_energy(&[0.0, 0.0], &empty).is_err());
    }

    #[test]
    fn transport_energy_perfect_match_is_zero() {
        let pts = vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)];
        let tpl = template_at(pts.clone());
        let img = image_at(pts);
        let basis = ModeBasis::geometric(&tpl, true, false, 0.0).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv_config(20.0)).unwrap();
        let (e, plan) = problem.transport_energy(&[0.0, 0.0, 0.0]).unwrap();
        assert!(e.abs() < 1e-10, "energy {e}");
        // Identity-like plan: every point keeps its mass at distance zero.
        for entry in &plan.entries {
            assert_eq!(entry.j, Some(entry.i));
        }
    }

    #[test]
    fn transport_energy_two_candidate_wells() {
        // One template point, image points at 0 and 5 on a line, one
        // translation mode: E(l) = min(l^2, (l-5)^2) / 2.
        let tpl = template_at(vec![Point2::new(0.0, 0.0)]);
        let img = image_at(vec![Point2::new(0.0, 0.0), Point2::new(5.0, 0.0)]);
        let (tx, _) = crate::modes::make_translation_modes(&tpl);
        let basis = ModeBasis::new(vec![tx], vec![], 0.0, &tpl).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv_config(50.0)).unwrap();
        for l in [-1.0, 0.0, 0.7, 2.4, 2.6, 4.0, 5.0, 6.0] {
            let want = 0.5 * (l * l).min((l - 5.0) * (l - 5.0));
            let (e, _) = problem.transport_energy(&[l]).unwrap();
            assert!((e - want).abs() < 1e-9, "E({l}) = {e}, want {want}");
        }
    }

    #[test]
    fn transport_energy_translation_equivariance() {
        // Shifting the image by an integer vector and the translation
        // coefficients by the same amount relabels an identical problem.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let tpl = template_at(vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.5),
            Point2::new(-0.5, 1.0),
        ]);
        let pts: Vec<Point2> = (0..12)
            .map(|_| Point2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect();
        let img = image_at(pts.clone());
        let shifted = image_at(pts.iter().map(|p| Point2::new(p.x + 3.0, p.y - 2.0)).collect());
        let basis = ModeBasis::geometric(&tpl, true, false, 0.1).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv_config(60.0)).unwrap();
        let problem_shifted = Problem::new(&tpl, &shifted, &basis, &fc, no_tv_config(60.0)).unwrap();
        for _ in 0..5 {
            let l = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)];
            let (e, _) = problem.transport_energy(&l).unwrap();
            let (es, _) = problem_shifted.transport_energy(&[l[0] + 3.0, l[1] - 2.0, l[2]]).unwrap();
            assert!((e - es).abs() < 1e-9, "{e} vs {es}");
        }
    }

    #[test]
    fn plan_energy_agrees_with_transport_energy_at_the_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let tpl = template_at(vec![Point2::new(0.0, 0.0), Point2::new(1.5, -0.5)]);
        let img = image_at(
            (0..10)
                .map(|_| Point2::new(rng.random_range(-2.0..4.0), rng.random_range(-3.0..3.0)))
                .collect(),
        );
        let basis = ModeBasis::geometric(&tpl, true, false, 0.3).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv_config(50.0)).unwrap();
        for _ in 0..10 {
            let l = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.4..0.4)];
            let (e, plan) = problem.transport_energy(&l).unwrap();
            let ehat = problem.plan_energy(&l, &plan).unwrap();
            assert!((e - ehat).abs() < 1e-9, "{e} vs {ehat}");
        }
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        n_tpl: usize,
        n_img: usize,
    ) -> (TemplateShape, ImageDomain) {
        let tpl_pts: Vec<Point2> = (0..n_tpl)
            .map(|_| Point2::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
            .collect();
        let masses: Vec<f64> = (0..n_tpl).map(|_| rng.random_range(0.5..1.5) / n_tpl as f64).collect();
        let feats: Vec<Vec<f64>> = (0..n_tpl).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
        let tpl = TemplateShape::new(tpl_pts, masses, feats, None).unwrap();
        let img_pts: Vec<Point2> = (0..n_img)
            .map(|_| Point2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)))
            .collect();
        let caps: Vec<f64> = (0..n_img).map(|_| rng.random_range(0.05..0.4)).collect();
        let feats: Vec<Vec<f64>> = (0..n_img).map(|_| vec![rng.random_range(0.0..1.0)]).collect();
        let img = ImageDomain::new(img_pts, caps, feats, None).unwrap();
        (tpl, img)
    }

    #[test]
    fn box_bound_is_sound_and_tight_on_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..8 {
            let (tpl, img) = random_instance(&mut rng, 6, 24);
            let basis = ModeBasis::geometric(&tpl, true, false, 0.2).unwrap();
            let fc = FeatureCost::squared_euclidean();
            let config = EnergyConfig { tau: 0.5, radius: Some(30.0), ..EnergyConfig::default() };
            let problem = Problem::new(&tpl, &img, &basis, &fc, config).unwrap();

            let lo = vec![rng.random_range(-2.0..0.0), rng.random_range(-2.0..0.0), rng.random_range(-0.4..0.0)];
            let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.2..1.5)).collect();
            let bx = LambdaBox::new(lo, hi).unwrap();
            let bound = problem.box_lower_bound(&bx).unwrap();

            // Sampled dominance.
            for _ in 0..20 {
                let l: Vec<f64> = bx
                    .lo
                    .iter()
                    .zip(&bx.hi)
                    .map(|(&a, &b)| rng.random_range(a..=b))
                    .collect();
                let (e, _) = problem.transport_energy(&l).unwrap();
                assert!(bound <= e + 1e-12, "case {case}: bound {bound} above energy {e}");
            }

            // Singleton tightness.
            let l = bx.center();
            let singleton = LambdaBox::singleton(&l);
            let b = problem.box_lower_bound(&singleton).unwrap();
            let (e, _) = problem.transport_energy(&l).unwrap();
            assert!((b - e).abs() <= 1e-8, "case {case}: singleton bound {b} vs energy {e}");

            // Nested monotonicity: shrink the box around its center.
            let mid = bx.center();
            let inner = LambdaBox::new(
                bx.lo.iter().zip(&mid).map(|(l, c)| 0.5 * (l + c)).collect(),
                bx.hi.iter().zip(&mid).map(|(u, c)| 0.5 * (u + c)).collect(),
            )
            .unwrap();
            let b_inner = problem.box_lower_bound(&inner).unwrap();
            assert!(b_inner >= bound - 1e-12, "case {case}: nested bound decreased");
        }
    }

    fn scale_basis(tpl: &TemplateShape) -> ModeBasis {
        let (tx, ty) = crate::modes::make_translation_modes(tpl);
        let sc = crate::modes::make_scale_mode(tpl);
        ModeBasis::new(vec![tx, ty, sc], vec![], 0.0, tpl).unwrap()
    }

    #[test]
    fn scaled_energy_reduces_to_plain_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (tpl, img) = random_instance(&mut rng, 5, 20);
        let basis_s = scale_basis(&tpl);
        let basis = ModeBasis::geometric(&tpl, false, false, 0.0).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let cfg = EnergyConfig { tau: 0.3, radius: Some(30.0), ..EnergyConfig::default() };
        let with_scale = Problem::new(&tpl, &img, &basis_s, &fc, cfg.clone()).unwrap();
        let without = Problem::new(&tpl, &img, &basis, &fc, cfg).unwrap();
        let (e1, _) = with_scale.transport_energy(&[0.4, -0.2, 0.0]).unwrap();
        let (e2, _) = without.transport_energy(&[0.4, -0.2]).unwrap();
        assert!((e1 - e2).abs() < 1e-9);
    }

    #[test]
    fn scaled_energy_is_invariant_under_uniform_costs() {
        // A single template point and symmetric unit-cost image points: the
        // normalized objective is constant in the scale coefficient.
        let tpl = template_at(vec![Point2::new(0.0, 0.0)]);
        let img = image_at(vec![
            Point2::new(1.0, 0.0),
            Point2::new(-1.0, 0.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.0, -1.0),
        ]);
        let sc = crate::modes::make_scale_mode(&tpl);
        let basis = ModeBasis::new(vec![sc], vec![], 0.0, &tpl).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv_config(10.0)).unwrap();
        // The scale mode vanishes at the centroid, so geometry stays fixed:
        // every image point costs exactly 1 and f(m) = m.
        let (e0, _) = problem.transport_energy(&[0.0]).unwrap();
        let (e1, _) = problem.transport_energy(&[0.5]).unwrap();
        assert!((e0 - 0.5).abs() < 1e-10);
        assert!((e0 - e1).abs() < 1e-10, "{e0} vs {e1}");
    }

    #[test]
    fn scaled_bound_below_sampled_scaled_energies() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..6 {
            let (tpl, img) = random_instance(&mut rng, 4, 24);
            let basis = scale_basis(&tpl);
            let fc = FeatureCost::squared_euclidean();
            let cfg = EnergyConfig { tau: 0.2, radius: Some(30.0), ..EnergyConfig::default() };
            let problem = Problem::new(&tpl, &img, &basis, &fc, cfg).unwrap();
            let bx = LambdaBox::new(vec![-0.5, -0.5, -0.3], vec![0.5, 0.5, 0.4]).unwrap();
            let bound = problem.box_lower_bound(&bx).unwrap();
            for _ in 0..12 {
                let l: Vec<f64> = bx
                    .lo
                    .iter()
                    .zip(&bx.hi)
                    .map(|(&a, &b)| rng.random_range(a..=b))
                    .collect();
                let (e, _) = problem.transport_energy(&l).unwrap();
                assert!(bound <= e + 1e-12, "scaled bound {bound} above energy {e}");
            }
        }
    }

    #[test]
    fn invalid_scale_coefficient_is_rejected() {
        let tpl = template_at(vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)]);
        let img = image_at(vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)]);
        let basis = scale_basis(&tpl);
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv_config(10.0)).unwrap();
        assert!(matches!(
            problem.transport_energy(&[0.0, 0.0, -1.5]),
            Err(Error::InvalidScale(_))
        ));
    }

    #[test]
    fn tv_values() {
        let img = ImageDomain::grid(2, 2, vec![0.0; 4]).unwrap();
        let adj = img.grid_adjacency().unwrap();
        let constant = Segmentation::new(vec![1.0; 4], &img).unwrap();
        assert_eq!(tv(&constant, &adj), 0.0);

        // Checkerboard on a 2x2 grid with unit weights: all 4 edges cut.
        let checker = Segmentation::new(vec![1.0, 0.0, 0.0, 1.0], &img).unwrap();
        assert!((tv(&checker, &adj) - 4.0).abs() < 1e-12);

        let two = ImageDomain::new(
            vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)],
            vec![1.0, 1.0],
            vec![vec![0.0], vec![0.0]],
            Some(vec![(0, 1, 0.1)]),
        )
        .unwrap();
        let seg = Segmentation::new(vec![1.0, 0.0], &two).unwrap();
        assert!((tv(&seg, two.adjacency.as_deref().unwrap()) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn nearest_match_cost_examples() {
        let tpl = template_at(vec![Point2::new(0.0, 0.0)]);
        let img = image_at(vec![Point2::new(1.0, 0.0)]);
        let basis = ModeBasis::geometric(&tpl, false, false, 0.0).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv_config(10.0)).unwrap();
        assert!((problem.nearest_match_cost(0, &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        // Transform lands on the point: zero cost.
        assert!(problem.nearest_match_cost(0, &[1.0, 0.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn nearest_match_cost_is_the_exhaustive_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let (tpl, img) = random_instance(&mut rng, 7, 15);
        let basis = ModeBasis::geometric(&tpl, true, false, 0.0).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let cfg = EnergyConfig { tau: 0.4, radius: Some(20.0), ..EnergyConfig::default() };
        let problem = Problem::new(&tpl, &img, &basis, &fc, cfg).unwrap();
        let l = [0.3, -0.2, 0.1];
        for j in 0..img.len() {
            let got = problem.nearest_match_cost(j, &l).unwrap();
            let mut want = f64::INFINITY;
            for i in 0..tpl.len() {
                let tx = transform_point(&tpl, &basis, &l, i);
                let c = tx.dist2(&img.points[j]) + 0.4 * fc.eval(&tpl, &img, i, j, &[]).unwrap();
                want = want.min(c);
            }
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn relaxed_energy_on_two_nodes() {
        // Unaries (after the half and capacity weighting) of -1 and +1 with
        // a 0.1 coupling: labels (1, 0), value -0.9 plus the prior.
        let tpl = template_at(vec![Point2::new(0.0, 0.0)]);
        let img = ImageDomain::new(
            vec![Point2::new(0.0, 0.0), Point2::new(0.0, 0.0)],
            vec![1.0, 1.0],
            vec![vec![0.0], vec![0.0]],
            Some(vec![(0, 1, 0.1)]),
        )
        .unwrap();
        let basis = ModeBasis::geometric(&tpl, false, false, 0.0).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let config = EnergyConfig {
            tau: 0.0,
            sigma_tv: 1.0,
            g_background: Some(vec![-2.0, 2.0]),
            radius: Some(10.0),
            ..EnergyConfig::default()
        };
        let problem = Problem::new(&tpl, &img, &basis, &fc, config).unwrap();
        let (value, seg) = problem.relaxed_energy(&[0.0, 0.0]).unwrap();
        assert!((value + 0.9).abs() < 1e-12, "value {value}");
        assert_eq!(seg.nu, vec![1.0, 0.0]);
    }

    #[test]
    fn relaxed_energy_empty_when_costs_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let (tpl, img) = random_instance(&mut rng, 4, 9);
        let basis = ModeBasis::geometric(&tpl, false, false, 0.5).unwrap();
        let fc = FeatureCost::squared_euclidean();
        let problem = Problem::new(&tpl, &img, &basis, &fc, no_tv_config(20.0)).unwrap();
        let (value, seg) = problem.relaxed_energy(&[0.3, -0.1]).unwrap();
        // All-positive nearest-match costs: the empty segmentation wins and
        // only the prior remains.
        assert!((value - problem.prior(&[0.3, -0.1])).abs() < 1e-12);
        assert!(seg.nu.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relaxed_energy_lower_bounds_transport_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for _ in 0..10 {
            let (tpl, img) = random_instance(&mut rng, 5, 18);
            let basis = ModeBasis::geometric(&tpl, true, false, 0.2).unwrap();
            let fc = FeatureCost::squared_euclidean();
            let g: Vec<f64> = (0..img.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let cfg = EnergyConfig {
                tau: 0.3,
                g_background: Some(g),
                radius: Some(30.0),
                ..EnergyConfig::default()
            };
            let problem = Problem::new(&tpl, &img, &basis, &fc, cfg).unwrap();
            let l = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2)];
            let (e1, _) = problem.transport_energy(&l).unwrap();
            let (er, _) = problem.relaxed_energy(&l).unwrap();
            assert!(er <= e1 + 1e-9, "relaxed {er} above transport {e1}");
        }
    }
}
