//! Discrete measures, segmentations, couplings and pluggable feature costs.
//!
//! Template, image and plan data are stored as explicit point lists with real
//! weights so that pixels, super-pixels and point clouds all share one
//! representation. All types are immutable after construction and validated
//! on construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for all mass and capacity constraint checks.
pub const MASS_TOL: f64 = 1e-9;

/// A point of the plane, in pixel units. Serialized as the pair `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist2(&self, other: &Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

/// The template measure: points with strictly positive masses, expected
/// features and an optional simple closed contour enclosing the points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateShape {
    pub points: Vec<Point2>,
    pub masses: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contour: Option<Vec<Point2>>,
    pub total_mass: f64,
}

impl TemplateShape {
    pub fn new(
        points: Vec<Point2>,
        masses: Vec<f64>,
        features: Vec<Vec<f64>>,
        contour: Option<Vec<Point2>>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("template has no points".into()));
        }
        if masses.len() != points.len() || features.len() != points.len() {
            return Err(Error::InvalidInput(format!(
                "template field lengths disagree: {} points, {} masses, {} features",
                points.len(),
                masses.len(),
                features.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite template point ({}, {})", p.x, p.y)));
        }
        if masses.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::InvalidInput("template masses must be strictly positive".into()));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("template features must be finite and of equal length".into()));
        }
        if let Some(c) = &contour {
            validate_contour(c, &points)?;
        }
        let total_mass = masses.iter().sum();
        Ok(TemplateShape { points, masses, features, contour, total_mass })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mass-weighted centroid of the template points.
    pub fn centroid(&self) -> Point2 {
        let mut cx = 0.0;
        let mut cy = 0.0;
        for (p, &m) in self.points.iter().zip(&self.masses) {
            cx += m * p.x;
            cy += m * p.y;
        }
        Point2::new(cx / self.total_mass, cy / self.total_mass)
    }

    /// Diagonal of the axis-aligned bounding box of the points.
    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = bbox(&self.points);
        (hi - lo).dist2(&Point2::new(0.0, 0.0)).sqrt()
    }
}

/// Axis-aligned bounding box of a point list as (min-corner, max-corner).
pub fn bbox(points: &[Point2]) -> (Point2, Point2) {
    let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (lo, hi)
}

fn validate_contour(contour: &[Point2], points: &[Point2]) -> Result<()> {
    if contour.len() < 3 {
        return Err(Error::InvalidInput("contour needs at least 3 vertices".into()));
    }
    if contour.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidInput("non-finite contour vertex".into()));
    }
    if !polygon_is_simple(contour) {
        return Err(Error::InvalidInput("contour is self-intersecting".into()));
    }
    let scale = {
        let (lo, hi) = bbox(contour);
        ((hi.x - lo.x).abs() + (hi.y - lo.y).abs()).max(1.0)
    };
    for p in points {
        if !point_in_polygon(p, contour) && dist_to_polygon(p, contour) > 1e-9 * scale {
            return Err(Error::InvalidInput(format!(
                "template point ({}, {}) lies outside the contour",
                p.x, p.y
            )));
        }
    }
    Ok(())
}

/// Even-odd point-in-polygon test (boundary points count as inside).
pub fn point_in_polygon(p: &Point2, poly: &[Point2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        if (a.y > p.y) != (b.y > p.y) {
            let t = (p.y - a.y) / (b.y - a.y);
            let xi = a.x + t * (b.x - a.x);
            if p.x < xi {
                inside = !inside;
            }
        }
    }
    inside
}

/// Distance from a point to a closed polyline.
pub fn dist_to_polygon(p: &Point2, poly: &[Point2]) -> f64 {
    let n = poly.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let d = dist_to_segment(p, &poly[i], &poly[(i + 1) % n]);
        best = best.min(d);
    }
    best
}

fn dist_to_segment(p: &Point2, a: &Point2, b: &Point2) -> f64 {
    let ab = *b - *a;
    let ap = *p - *a;
    let len2 = ab.x * ab.x + ab.y * ab.y;
    let t = if len2 > 0.0 { ((ap.x * ab.x + ap.y * ab.y) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let q = Point2::new(a.x + t * ab.x, a.y + t * ab.y);
    p.dist2(&q).sqrt()
}

/// Checks that no two non-adjacent edges of the closed polyline intersect.
pub fn polygon_is_simple(poly: &[Point2]) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a1, a2) = (poly[i], poly[(i + 1) % n]);
        for j in (i + 1)..n {
            // Skip edges sharing a vertex.
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (b1, b2) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(&a1, &a2, &b1, &b2) {
                return false;
            }
        }
    }
    true
}

fn segments_intersect(a1: &Point2, a2: &Point2, b1: &Point2, b2: &Point2) -> bool {
    let d1 = cross(b1, b2, a1);
    let d2 = cross(b1, b2, a2);
    let d3 = cross(a1, a2, b1);
    let d4 = cross(a1, a2, b2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

fn cross(o: &Point2, a: &Point2, b: &Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Raster layout of an image domain whose points are row-major pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterShape {
    pub width: usize,
    pub height: usize,
}

/// The image support: points with positive capacities (discrete Lebesgue
/// weights), observed features and an optional symmetric neighbor list for
/// the TV regularizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageDomain {
    pub points: Vec<Point2>,
    pub capacities: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    /// Undirected neighbor edges (j, j', weight), each pair listed once.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<(usize, usize, f64)>>,
    /// Present when the points form a row-major pixel raster.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raster: Option<RasterShape>,
}

impl ImageDomain {
    pub fn new(
        points: Vec<Point2>,
        capacities: Vec<f64>,
        features: Vec<Vec<f64>>,
        adjacency: Option<Vec<(usize, usize, f64)>>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("image domain has no points".into()));
        }
        if capacities.len() != points.len() || features.len() != points.len() {
            return Err(Error::InvalidInput(format!(
                "image field lengths disagree: {} points, {} capacities, {} features",
                points.len(),
                capacities.len(),
                features.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite image point ({}, {})", p.x, p.y)));
        }
        if capacities.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::InvalidInput("image capacities must be strictly positive".into()));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("image features must be finite and of equal length".into()));
        }
        if let Some(adj) = &adjacency {
            validate_adjacency(adj, points.len())?;
        }
        Ok(ImageDomain { points, capacities, features, adjacency, raster: None })
    }

    /// Builds a unit-capacity pixel raster with one scalar feature per pixel.
    pub fn grid(width: usize, height: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "expected {} features for a {}x{} grid, got {}",
                width * height,
                width,
                height,
                features.len()
            )));
        }
        let mut points = Vec::with_capacity(width * height);
        for iy in 0..height {
            for ix in 0..width {
                points.push(Point2::new(ix as f64, iy as f64));
            }
        }
        let caps = vec![1.0; width * height];
        let feats = features.into_iter().map(|f| vec![f]).collect();
        let mut dom = ImageDomain::new(points, caps, feats, None)?;
        dom.raster = Some(RasterShape { width, height });
        Ok(dom)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Default 4-neighbor adjacency for raster domains, weighted by the
    /// shared boundary length (the pixel side, 1 in pixel units).
    pub fn grid_adjacency(&self) -> Result<Vec<(usize, usize, f64)>> {
        let raster = self
            .raster
            .ok_or_else(|| Error::InvalidInput("grid_adjacency requires a raster image domain".into()))?;
        let (w, h) = (raster.width, raster.height);
        let mut adj = Vec::with_capacity(2 * w * h);
        for iy in 0..h {
            for ix in 0..w {
                let j = iy * w + ix;
                if ix + 1 < w {
                    adj.push((j, j + 1, 1.0));
                }
                if iy + 1 < h {
                    adj.push((j, j + w, 1.0));
                }
            }
        }
        Ok(adj)
    }

    /// Total capacity of the domain.
    pub fn total_capacity(&self) -> f64 {
        self.capacities.iter().sum()
    }
}

fn validate_adjacency(adj: &[(usize, usize, f64)], n: usize) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for &(a, b, w) in adj {
        if a >= n {
            return Err(Error::IndexOutOfRange { index: a, len: n });
        }
        if b >= n {
            return Err(Error::IndexOutOfRange { index: b, len: n });
        }
        if a == b {
            return Err(Error::InvalidInput(format!("self edge at node {a}")));
        }
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::InvalidInput(format!("edge weight {w} for ({a}, {b}) must be positive")));
        }
        if !seen.insert((a.min(b), a.max(b))) {
            return Err(Error::InvalidInput(format!("duplicate edge ({a}, {b})")));
        }
    }
    Ok(())
}

/// A relaxed segmentation: one mass value per image point, bounded by the
/// point's capacity. Stores a snapshot of the owning domain's capacities so
/// the relaxed indicator `u = nu / capacity` is self-contained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Segmentation {
    pub nu: Vec<f64>,
    capacities: Vec<f64>,
}

impl Segmentation {
    pub fn new(nu: Vec<f64>, domain: &ImageDomain) -> Result<Self> {
        if nu.len() != domain.len() {
            return Err(Error::InvalidInput(format!(
                "segmentation has {} entries for a domain of {} points",
                nu.len(),
                domain.len()
            )));
        }
        for (j, (&v, &m)) in nu.iter().zip(&domain.capacities).enumerate() {
            if !(v >= -MASS_TOL) || v > m + MASS_TOL || !v.is_finite() {
                return Err(Error::InvalidCoupling(format!(
                    "segmentation mass {v} at point {j} violates capacity {m}"
                )));
            }
        }
        let nu = nu
            .into_iter()
            .zip(&domain.capacities)
            .map(|(v, &m)| v.clamp(0.0, m))
            .collect();
        Ok(Segmentation { nu, capacities: domain.capacities.clone() })
    }

    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }

    /// Relaxed indicator value at point `j`.
    pub fn u(&self, j: usize) -> f64 {
        self.nu[j] / self.capacities[j]
    }

    pub fn u_values(&self) -> Vec<f64> {
        (0..self.nu.len()).map(|j| self.u(j)).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.nu.iter().sum()
    }
}

/// One entry of a sparse transport plan. `j = None` addresses the reserved
/// overflow pseudo-point on the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub i: usize,
    pub j: Option<usize>,
    pub mass: f64,
}

/// A sparse transport plan between template and image points.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Coupling {
    pub entries: Vec<PlanEntry>,
}

impl Coupling {
    pub fn new(entries: Vec<PlanEntry>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !(e.mass > 0.0) || !e.mass.is_finite() {
                return Err(Error::InvalidCoupling(format!(
                    "plan mass {} at ({}, {:?}) must be strictly positive",
                    e.mass, e.i, e.j
                )));
            }
            if !seen.insert((e.i, e.j)) {
                return Err(Error::InvalidCoupling(format!("duplicate plan entry ({}, {:?})", e.i, e.j)));
            }
        }
        Ok(Coupling { entries })
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.mass).sum()
    }

    /// Mass routed to the overflow pseudo-point.
    pub fn overflow_mass(&self) -> f64 {
        self.entries.iter().filter(|e| e.j.is_none()).map(|e| e.mass).sum()
    }
}

/// Column and row sums of a plan. Overflow mass is excluded from the image
/// marginal (it sits on no real image point) but contributes to the template
/// marginal.
pub fn marginals(pi: &Coupling, n_template: usize, n_image: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut mu = vec![0.0; n_template];
    let mut nu = vec![0.0; n_image];
    for e in &pi.entries {
        if e.i >= n_template {
            return Err(Error::IndexOutOfRange { index: e.i, len: n_template });
        }
        match e.j {
            Some(j) if j >= n_image => return Err(Error::IndexOutOfRange { index: j, len: n_image }),
            Some(j) => nu[j] += e.mass,
            None => {}
        }
        mu[e.i] += e.mass;
    }
    Ok((mu, nu))
}

/// Image-side marginal of a plan as a segmentation of the domain.
pub fn project_to_segmentation(pi: &Coupling, domain: &ImageDomain) -> Result<Segmentation> {
    let n_template = pi.entries.iter().map(|e| e.i + 1).max().unwrap_or(0);
    let (_, nu) = marginals(pi, n_template.max(1), domain.len())?;
    Segmentation::new(nu, domain)
}

/// A dense row-major cost table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "cost matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("cost matrix entries must be finite".into()));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// Base matching cost on feature space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FeatureCostKind {
    /// Squared Euclidean distance between the stored feature vectors.
    SquaredEuclidean,
    /// Fully precomputed `c(i, j)` table.
    Matrix(CostMatrix),
    /// Per-template-point lookup over a binned scalar image feature.
    TemplateLookup { table: CostMatrix, lo: f64, hi: f64 },
}

/// Pluggable feature cost: a base term plus optional per-mode tables that
/// make the cost affine in the mode coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureCost {
    pub kind: FeatureCostKind,
    /// One correction table per mode; entry `k` scales linearly with the
    /// k-th coefficient.
    pub corrections: Vec<CostMatrix>,
}

impl FeatureCost {
    pub fn squared_euclidean() -> Self {
        FeatureCost { kind: FeatureCostKind::SquaredEuclidean, corrections: Vec::new() }
    }

    pub fn matrix(m: CostMatrix) -> Self {
        FeatureCost { kind: FeatureCostKind::Matrix(m), corrections: Vec::new() }
    }

    pub fn with_corrections(mut self, corrections: Vec<CostMatrix>) -> Self {
        self.corrections = corrections;
        self
    }

    fn check_indices(&self, tpl: &TemplateShape, img: &ImageDomain, i: usize, j: usize) -> Result<()> {
        if i >= tpl.len() {
            return Err(Error::IndexOutOfRange { index: i, len: tpl.len() });
        }
        if j >= img.len() {
            return Err(Error::IndexOutOfRange { index: j, len: img.len() });
        }
        Ok(())
    }

    /// Base cost `c(i, j)`, before any coefficient-linear correction.
    pub fn eval_base(&self, tpl: &TemplateShape, img: &ImageDomain, i: usize, j: usize) -> Result<f64> {
        self.check_indices(tpl, img, i, j)?;
        Ok(match &self.kind {
            FeatureCostKind::SquaredEuclidean => {
                let fx = &tpl.features[i];
                let fy = &img.features[j];
                if fx.len() != fy.len() {
                    return Err(Error::InvalidInput(format!(
                        "feature dimensions disagree: {} vs {}",
                        fx.len(),
                        fy.len()
                    )));
                }
                fx.iter().zip(fy).map(|(a, b)| (a - b) * (a - b)).sum()
            }
            FeatureCostKind::Matrix(m) => m.at(i, j),
            FeatureCostKind::TemplateLookup { table, lo, hi } => {
                let f = img.features[j][0];
                let nbins = table.cols;
                let t = if hi > lo { (f - lo) / (hi - lo) } else { 0.0 };
                let bin = ((t * nbins as f64).floor() as isize).clamp(0, nbins as isize - 1) as usize;
                table.at(i, bin)
            }
        })
    }

    /// Correction slope of mode `k` at pair `(i, j)`; zero when no table is
    /// attached.
    pub fn correction(&self, k: usize, i: usize, j: usize) -> f64 {
        self.corrections.get(k).map(|m| m.at(i, j)).unwrap_or(0.0)
    }

    /// Cost at coefficients `lambda`: base plus the linear expansion
    /// `sum_k lambda_k * c_k(i, j)`. An empty `lambda` evaluates the base
    /// cost alone.
    pub fn eval(
        &self,
        tpl: &TemplateShape,
        img: &ImageDomain,
        i: usize,
        j: usize,
        lambda: &[f64],
    ) -> Result<f64> {
        let mut c = self.eval_base(tpl, img, i, j)?;
        if lambda.is_empty() || self.corrections.is_empty() {
            return Ok(c);
        }
        if lambda.len() != self.corrections.len() {
            return Err(Error::InvalidInput(format!(
                "{} coefficients for {} correction tables",
                lambda.len(),
                self.corrections.len()
            )));
        }
        for (k, &l) in lambda.iter().enumerate() {
            c += l * self.correction(k, i, j);
        }
        Ok(c)
    }

    /// Smallest value of the correction term over a coefficient box
    /// (closed-form per-coordinate corner evaluation).
    pub fn correction_box_min(&self, i: usize, j: usize, lo: &[f64], hi: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (k, _) in self.corrections.iter().enumerate() {
            let c = self.correction(k, i, j);
            acc += (lo[k] * c).min(hi[k] * c);
        }
        acc
    }

    /// Upper bound on the base cost over all pairs, used to price overflow.
    pub fn base_upper_bound(&self, tpl: &TemplateShape, img: &ImageDomain) -> Result<f64> {
        Ok(match &self.kind {
            FeatureCostKind::SquaredEuclidean => {
                let mut best = 0.0_f64;
                for i in 0..tpl.len() {
                    for j in 0..img.len() {
                        best = best.max(self.eval_base(tpl, img, i, j)?);
                    }
                }
                best
            }
            FeatureCostKind::Matrix(m) => m.data.iter().fold(0.0_f64, |a, &v| a.max(v)),
            FeatureCostKind::TemplateLookup { table, .. } => {
                table.data.iter().fold(0.0_f64, |a, &v| a.max(v))
            }
        })
    }

    /// Upper bound on the magnitude of the correction term for coefficients
    /// inside the given box.
    pub fn correction_upper_bound(&self, lo: &[f64], hi: &[f64]) -> f64 {
        self.corrections
            .iter()
            .enumerate()
            .map(|(k, m)| lo[k].abs().max(hi[k].abs()) * m.max_abs())
            .sum()
    }
}
