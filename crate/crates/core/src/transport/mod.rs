//! Cost assembly and the exact partial transport solver.
//!
//! Costs combine squared geometric distance, a weighted feature term and an
//! optional per-image-point background shift. Rows are truncated to a radius
//! around the transformed template point; a reserved overflow destination
//! keeps truncated problems feasible and certifies global optimality when it
//! carries no mass.
//!
//! For branch-and-bound, [`assemble_bound_cost`] replaces every entry by its
//! exact minimum over a coefficient box. The geometric part reduces to the
//! squared distance from a point to a planar zonotope (the image of the box
//! under the 2 x n displacement matrix), computed by direct projection onto
//! the zonotope polygon.

mod solver;

pub use solver::solve_partial_transport;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{FeatureCost, ImageDomain, Point2, TemplateShape};
use crate::modes::ModeBasis;

/// Certified slack subtracted from every box-minimized geometric entry.
pub const BOUND_TOL: f64 = 1e-9;

/// An axis-aligned box of mode coefficients, optionally carrying the lower
/// bound evaluated on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
}

impl LambdaBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::InvalidInput(format!(
                "box bounds disagree in length: {} vs {}",
                lo.len(),
                hi.len()
            )));
        }
        for (k, (&l, &u)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(Error::InvalidInput(format!("invalid box interval [{l}, {u}] on axis {k}")));
            }
        }
        Ok(LambdaBox { lo, hi, bound: None })
    }

    /// Degenerate box holding a single coefficient vector.
    pub fn singleton(lambda: &[f64]) -> Self {
        LambdaBox { lo: lambda.to_vec(), hi: lambda.to_vec(), bound: None }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, u)| u - l).collect()
    }

    pub fn contains(&self, lambda: &[f64]) -> bool {
        lambda.len() == self.dim()
            && lambda
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&x, (&l, &u))| x >= l - 1e-12 && x <= u + 1e-12)
    }

    /// Splits along one axis at its midpoint.
    pub fn split_axis(&self, k: usize) -> (LambdaBox, LambdaBox) {
        let mid = 0.5 * (self.lo[k] + self.hi[k]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.bound = None;
        right.bound = None;
        left.hi[k] = mid;
        right.lo[k] = mid;
        (left, right)
    }

    /// Total displacement range of the box: sum over axes of edge length
    /// times the given per-axis magnitude.
    pub fn displacement_measure(&self, magnitudes: &[f64]) -> f64 {
        self.widths().iter().zip(magnitudes).map(|(w, m)| w * m).sum()
    }
}

/// How overflow entries are priced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OverflowPolicy {
    /// 10x the largest in-radius cost of the row (clamped at zero).
    RowMax,
    /// A fixed cost shared by all rows; lets a family of assemblies price
    /// overflow identically.
    Fixed(f64),
    /// No usable overflow: truncated problems may become infeasible.
    Forbid,
}

/// Parameters shared by the cost assemblies.
#[derive(Debug, Clone, Copy)]
pub struct CostParams<'a> {
    /// Weight of the feature cost relative to the geometric cost.
    pub feature_weight: f64,
    /// Optional additive per-image-point background shift.
    pub g_background: Option<&'a [f64]>,
    /// Truncation radius around the transformed template point.
    pub radius: f64,
    pub overflow: OverflowPolicy,
}

impl<'a> CostParams<'a> {
    pub fn new(radius: f64) -> Self {
        CostParams { feature_weight: 1.0, g_background: None, radius, overflow: OverflowPolicy::RowMax }
    }
}

/// Sparse assignment costs: per template point, the in-radius image entries
/// plus one overflow cost (infinite when overflow is forbidden).
#[derive(Debug, Clone)]
pub struct SparseCost {
    /// Per row: (image index, cost), ordered by image index.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Overflow cost per row.
    pub overflow: Vec<f64>,
    /// The truncation radius the rows were built with.
    pub radius: f64,
    pub n_image: usize,
}

impl SparseCost {
    /// Dense costs, bypassing truncation. Mostly for tests and oracles.
    pub fn dense(matrix: &[Vec<f64>], overflow: OverflowPolicy) -> Result<Self> {
        let n_image = matrix.first().map(|r| r.len()).unwrap_or(0);
        let mut rows = Vec::with_capacity(matrix.len());
        let mut ofl = Vec::with_capacity(matrix.len());
        for r in matrix {
            if r.len() != n_image {
                return Err(Error::InvalidInput("ragged dense cost matrix".into()));
            }
            if r.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidInput("costs must be finite".into()));
            }
            ofl.push(overflow_cost(r.iter().copied(), overflow));
            rows.push(r.iter().copied().enumerate().collect());
        }
        Ok(SparseCost { rows, overflow: ofl, radius: f64::INFINITY, n_image })
    }
}

fn overflow_cost(row: impl Iterator<Item = f64>, policy: OverflowPolicy) -> f64 {
    match policy {
        OverflowPolicy::RowMax => {
            let m = row.fold(0.0_f64, |a, c| a.max(c));
            10.0 * m.max(0.0)
        }
        OverflowPolicy::Fixed(v) => v,
        OverflowPolicy::Forbid => f64::INFINITY,
    }
}

fn check_params(img: &ImageDomain, params: &CostParams) -> Result<()> {
    if !(params.radius > 0.0) {
        return Err(Error::InvalidInput(format!("truncation radius {} must be positive", params.radius)));
    }
    if !(params.feature_weight >= 0.0) {
        return Err(Error::InvalidInput("feature weight must be nonnegative".into()));
    }
    if let Some(g) = params.g_background {
        if g.len() != img.len() {
            return Err(Error::InvalidInput(format!(
                "background term has {} entries for {} image points",
                g.len(),
                img.len()
            )));
        }
    }
    Ok(())
}

/// Pointwise cost at fixed coefficients:
/// `|T(lambda, x_i) - y_j|^2 + w * c_F(i, j, lambda) + g(j)` for all `j`
/// within the truncation radius of the transformed template point.
pub fn assemble_cost(
    template: &TemplateShape,
    image: &ImageDomain,
    basis: &ModeBasis,
    lambda: &[f64],
    fcost: &FeatureCost,
    params: &CostParams,
) -> Result<SparseCost> {
    check_params(image, params)?;
    if lambda.len() != basis.len() {
        return Err(Error::InvalidInput(format!(
            "{} coefficients for {} modes",
            lambda.len(),
            basis.len()
        )));
    }
    let moved = crate::modes::apply_transform(template, basis, lambda)?;
    let r2 = params.radius * params.radius;
    let lambda_for_features: &[f64] = if fcost.corrections.is_empty() { &[] } else { lambda };

    let mut rows = Vec::with_capacity(template.len());
    let mut overflow = Vec::with_capacity(template.len());
    for (i, tx) in moved.iter().enumerate() {
        let mut row = Vec::new();
        for (j, y) in image.points.iter().enumerate() {
            let d2 = tx.dist2(y);
            if d2 > r2 {
                continue;
            }
            let mut c = d2 + params.feature_weight * fcost.eval(template, image, i, j, lambda_for_features)?;
            if let Some(g) = params.g_background {
                c += g[j];
            }
            row.push((j, c));
        }
        if row.is_empty() {
            return Err(Error::EnlargeRadius { index: i });
        }
        overflow.push(overflow_cost(row.iter().map(|&(_, c)| c), params.overflow));
        rows.push(row);
    }
    Ok(SparseCost { rows, overflow, radius: params.radius, n_image: image.len() })
}

/// Exact minimum over a coefficient box of `|x + A lambda - y|^2`, where the
/// columns of `A` are the per-mode displacements at `x`. Computed as the
/// squared distance from `y - x - A c` (c the box center) to the planar
/// zonotope spanned by the half-width-scaled columns, then reduced by
/// [`BOUND_TOL`] so the result is a certified lower bound.
pub fn box_min_quadratic(x: Point2, y: Point2, mode_disp: &[[f64; 2]], bx: &LambdaBox) -> f64 {
    debug_assert_eq!(mode_disp.len(), bx.dim());
    // Target point relative to the box-center transform.
    let mut qx = y.x - x.x;
    let mut qy = y.y - x.y;
    let mut gens: Vec<[f64; 2]> = Vec::with_capacity(bx.dim());
    for (d, (&l, &u)) in mode_disp.iter().zip(bx.lo.iter().zip(&bx.hi)) {
        let c = 0.5 * (l + u);
        qx -= c * d[0];
        qy -= c * d[1];
        let h = 0.5 * (u - l);
        let g = [h * d[0], h * d[1]];
        if g[0] != 0.0 || g[1] != 0.0 {
            gens.push(g);
        }
    }
    let d2 = dist2_point_to_zonotope(qx, qy, &mut gens);
    (d2 - BOUND_TOL).max(0.0)
}

/// Squared distance from a point to the origin-centered zonotope spanned by
/// `gens` (each generator ranges over [-1, 1]).
fn dist2_point_to_zonotope(qx: f64, qy: f64, gens: &mut Vec<[f64; 2]>) -> f64 {
    if gens.is_empty() {
        return qx * qx + qy * qy;
    }
    // Normalize directions into the upper half-plane; generators are
    // symmetric so this does not change the set.
    for g in gens.iter_mut() {
        if g[1] < 0.0 || (g[1] == 0.0 && g[0] < 0.0) {
            g[0] = -g[0];
            g[1] = -g[1];
        }
    }
    gens.sort_by(|a, b| a[1].atan2(a[0]).partial_cmp(&b[1].atan2(b[0])).unwrap());

    // Boundary walk: start at the all-minus vertex, add 2g in angular order
    // (upper chain), then subtract in the same order (lower chain).
    let n = gens.len();
    let mut verts = Vec::with_capacity(2 * n);
    let mut cur = [0.0, 0.0];
    for g in gens.iter() {
        cur[0] -= g[0];
        cur[1] -= g[1];
    }
    verts.push(cur);
    for g in gens.iter() {
        cur[0] += 2.0 * g[0];
        cur[1] += 2.0 * g[1];
        verts.push(cur);
    }
    for g in gens.iter().take(n - 1) {
        cur[0] -= 2.0 * g[0];
        cur[1] -= 2.0 * g[1];
        verts.push(cur);
    }

    // Inside test only when the polygon has genuine area.
    let m = verts.len();
    let mut area2 = 0.0;
    for i in 0..m {
        let a = verts[i];
        let b = verts[(i + 1) % m];
        area2 += a[0] * b[1] - b[0] * a[1];
    }
    let scale: f64 = verts
        .iter()
        .map(|v| v[0].abs().max(v[1].abs()))
        .fold(qx.abs().max(qy.abs()), f64::max);
    if area2 > 1e-14 * scale * scale {
        let mut inside = true;
        for i in 0..m {
            let a = verts[i];
            let b = verts[(i + 1) % m];
            let cr = (b[0] - a[0]) * (qy - a[1]) - (b[1] - a[1]) * (qx - a[0]);
            if cr < -1e-12 * scale * scale {
                inside = false;
                break;
            }
        }
        if inside {
            return 0.0;
        }
    }

    let mut best = f64::INFINITY;
    for i in 0..m {
        let a = verts[i];
        let b = verts[(i + 1) % m];
        best = best.min(dist2_point_segment(qx, qy, a, b));
    }
    best
}

fn dist2_point_segment(px: f64, py: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let abx = b[0] - a[0];
    let aby = b[1] - a[1];
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { (((px - a[0]) * abx + (py - a[1]) * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let dx = px - (a[0] + t * abx);
    let dy = py - (a[1] + t * aby);
    dx * dx + dy * dy
}

/// Closed-form minimum of the Gaussian coefficient prior over a box: clamp
/// zero into each statistical interval and evaluate.
pub fn box_min_prior(basis: &ModeBasis, bx: &LambdaBox) -> f64 {
    box_min_prior_with(basis, bx, basis.gamma)
}

/// As [`box_min_prior`] with an explicit prior weight.
pub fn box_min_prior_with(basis: &ModeBasis, bx: &LambdaBox, gamma: f64) -> f64 {
    debug_assert_eq!(bx.dim(), basis.len());
    let off = basis.stat_offset();
    let mut acc = 0.0;
    for (s, &sigma) in basis.sigmas.iter().enumerate() {
        let l = bx.lo[off + s];
        let u = bx.hi[off + s];
        let best = 0.0_f64.clamp(l, u);
        if sigma <= 0.0 {
            if best != 0.0 {
                return f64::INFINITY;
            }
            continue;
        }
        let r = best / sigma;
        acc += r * r;
    }
    0.5 * gamma * acc
}

/// Box-lower-bounded cost: every coefficient occurrence minimized separately
/// over the box. The truncation radius is enlarged per template point by the
/// box's displacement slack so no pair admissible anywhere in the box is cut.
pub fn assemble_bound_cost(
    template: &TemplateShape,
    image: &ImageDomain,
    basis: &ModeBasis,
    bx: &LambdaBox,
    fcost: &FeatureCost,
    params: &CostParams,
) -> Result<SparseCost> {
    check_params(image, params)?;
    if bx.dim() != basis.len() {
        return Err(Error::InvalidInput(format!(
            "box dimension {} for {} modes",
            bx.dim(),
            basis.len()
        )));
    }
    let center = bx.center();
    let moved = crate::modes::apply_transform(template, basis, &center)?;
    let halfw: Vec<f64> = bx.widths().iter().map(|w| 0.5 * w).collect();
    let has_corrections = !fcost.corrections.is_empty();

    let mut rows = Vec::with_capacity(template.len());
    let mut overflow = Vec::with_capacity(template.len());
    let mut disp = vec![[0.0; 2]; basis.len()];
    for (i, tc) in moved.iter().enumerate() {
        for (k, m) in basis.modes.iter().enumerate() {
            disp[k] = m.displacements[i];
        }
        // Largest deviation from the center transform over the box.
        let slack: f64 = disp
            .iter()
            .zip(&halfw)
            .map(|(d, h)| h * (d[0] * d[0] + d[1] * d[1]).sqrt())
            .sum();
        let reach = params.radius + slack;
        let reach2 = reach * reach;

        let mut row = Vec::new();
        for (j, y) in image.points.iter().enumerate() {
            if tc.dist2(y) > reach2 {
                continue;
            }
            let geo = box_min_quadratic(template.points[i], *y, &disp, bx);
            let mut feat = fcost.eval_base(template, image, i, j)?;
            if has_corrections {
                feat += fcost.correction_box_min(i, j, &bx.lo, &bx.hi);
            }
            let mut c = geo + params.feature_weight * feat;
            if let Some(g) = params.g_background {
                c += g[j];
            }
            row.push((j, c));
        }
        if row.is_empty() {
            return Err(Error::EnlargeRadius { index: i });
        }
        overflow.push(overflow_cost(row.iter().map(|&(_, c)| c), params.overflow));
        rows.push(row);
    }
    Ok(SparseCost { rows, overflow, radius: params.radius, n_image: image.len() })
}
