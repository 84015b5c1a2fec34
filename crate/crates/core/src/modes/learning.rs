//! Learning statistical deformation modes from contour samples.
//!
//! Samples are closed contours with the same vertex count as the mean,
//! already similarity-aligned by the caller. Per sample, the signed normal
//! displacement on the mean contour is lifted via the Neumann problem to a
//! region field; a PCA of the lifted fields under the mass-weighted L2 inner
//! product yields the modes and their standard deviations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::measure::{polygon_is_simple, Point2, TemplateShape};
use crate::modes::neumann::{lift_contour_deformation, NeumannGrid};
use crate::modes::{decompose_mode, Mode};

/// A simple closed polyline, uniformly resampled by arc length.
#[derive(Debug, Clone)]
pub struct ContourSample {
    pub vertices: Vec<Point2>,
}

impl ContourSample {
    pub fn new(vertices: Vec<Point2>) -> Result<Self> {
        if vertices.len() < 8 {
            return Err(Error::InvalidInput(format!(
                "contour sample needs at least 8 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite contour vertex".into()));
        }
        if !polygon_is_simple(&vertices) {
            return Err(Error::InvalidInput("contour sample is self-intersecting".into()));
        }
        Ok(ContourSample { vertices })
    }

    /// Resamples a closed polyline to `k` vertices uniformly in arc length,
    /// starting at the original first vertex.
    pub fn resample(polyline: &[Point2], k: usize) -> Result<Self> {
        if polyline.len() < 3 {
            return Err(Error::InvalidInput("need at least 3 vertices to resample".into()));
        }
        let n = polyline.len();
        let mut cum = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for i in 0..n {
            acc += polyline[i].dist2(&polyline[(i + 1) % n]).sqrt();
            cum.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::InvalidInput("degenerate polyline of zero length".into()));
        }
        let mut out = Vec::with_capacity(k);
        let mut seg = 0usize;
        for m in 0..k {
            let s = acc * m as f64 / k as f64;
            while cum[seg + 1] < s {
                seg += 1;
            }
            let t = (s - cum[seg]) / (cum[seg + 1] - cum[seg]).max(1e-300);
            let a = polyline[seg % n];
            let b = polyline[(seg + 1) % n];
            out.push(Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
        }
        ContourSample::new(out)
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }
}

/// Outward unit normals at the vertices of a closed contour (average of the
/// adjacent edge normals).
pub fn outward_normals(contour: &[Point2]) -> Vec<[f64; 2]> {
    let k = contour.len();
    let mut signed_area = 0.0;
    for i in 0..k {
        let a = contour[i];
        let b = contour[(i + 1) % k];
        signed_area += a.x * b.y - b.x * a.y;
    }
    let orient = if signed_area >= 0.0 { 1.0 } else { -1.0 };
    (0..k)
        .map(|i| {
            let prev = contour[(i + k - 1) % k];
            let here = contour[i];
            let next = contour[(i + 1) % k];
            let e0 = here - prev;
            let e1 = next - here;
            let n0 = [orient * e0.y, -orient * e0.x];
            let n1 = [orient * e1.y, -orient * e1.x];
            let l0 = (n0[0] * n0[0] + n0[1] * n0[1]).sqrt().max(1e-300);
            let l1 = (n1[0] * n1[0] + n1[1] * n1[1]).sqrt().max(1e-300);
            let mut n = [n0[0] / l0 + n1[0] / l1, n0[1] / l0 + n1[1] / l1];
            let l = (n[0] * n[0] + n[1] * n[1]).sqrt().max(1e-300);
            n[0] /= l;
            n[1] /= l;
            n
        })
        .collect()
}

/// One learned statistical mode.
#[derive(Debug, Clone)]
pub struct LearnedMode {
    /// Divergence-free part, ready for a [`crate::modes::ModeBasis`].
    pub mode: Mode,
    /// Observed standard deviation along this mode.
    pub sigma: f64,
    /// Coefficient of the scale generator split off by the decomposition.
    pub scale_coeff: f64,
    /// The raw eigenfield before decomposition (orthonormal under the
    /// mass-weighted L2 inner product).
    pub field: Vec<[f64; 2]>,
}

/// Mass-weighted L2 inner product of two displacement fields on the template.
pub fn inner_product_mu(a: &[[f64; 2]], b: &[[f64; 2]], template: &TemplateShape) -> f64 {
    a.iter()
        .zip(b)
        .zip(&template.masses)
        .map(|((x, y), &m)| m * (x[0] * y[0] + x[1] * y[1]))
        .sum()
}

/// Learns statistical modes from contour samples.
///
/// Per sample, the vertex-wise difference to the mean is projected onto the
/// mean's outward normals, lifted to a region field through `grid`, and the
/// lifted fields are analyzed by PCA under the L2(mu) inner product. The top
/// `n_modes` eigenfields are returned, each decomposed into a
/// divergence-free part plus a scale coefficient, with sigma the square root
/// of the eigenvalue (population normalization).
pub fn learn_statistical_modes(
    mean: &ContourSample,
    samples: &[ContourSample],
    n_modes: usize,
    grid: &NeumannGrid,
    template: &TemplateShape,
) -> Result<Vec<LearnedMode>> {
    if samples.len() < n_modes {
        return Err(Error::InsufficientData { requested: n_modes, available: samples.len() });
    }
    if grid.contour().len() != mean.len() {
        return Err(Error::InvalidGrid(format!(
            "grid contour has {} vertices but the mean has {}",
            grid.contour().len(),
            mean.len()
        )));
    }
    for (k, s) in samples.iter().enumerate() {
        if s.len() != mean.len() {
            return Err(Error::InvalidInput(format!(
                "sample {k} has {} vertices, mean has {}",
                s.len(),
                mean.len()
            )));
        }
    }

    let normals = outward_normals(&mean.vertices);
    let k = samples.len();
    let n = template.len();

    // Lift each sample's normal displacement field.
    let mut lifted: Vec<Vec<[f64; 2]>> = Vec::with_capacity(k);
    for s in samples {
        let a: Vec<f64> = s
            .vertices
            .iter()
            .zip(&mean.vertices)
            .zip(&normals)
            .map(|((sv, mv), nrm)| {
                let d = *sv - *mv;
                d.x * nrm[0] + d.y * nrm[1]
            })
            .collect();
        let boundary_values = grid.sample_boundary_values(&a)?;
        let (mode, _) = lift_contour_deformation(grid, &boundary_values, template)?;
        lifted.push(mode.displacements);
    }

    // Center the fields.
    let mut mean_field = vec![[0.0; 2]; n];
    for f in &lifted {
        for (m, v) in mean_field.iter_mut().zip(f) {
            m[0] += v[0] / k as f64;
            m[1] += v[1] / k as f64;
        }
    }
    for f in &mut lifted {
        for (v, m) in f.iter_mut().zip(&mean_field) {
            v[0] -= m[0];
            v[1] -= m[1];
        }
    }

    // PCA through the Gram matrix of the centered fields.
    let mut gram = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let g = inner_product_mu(&lifted[a], &lifted[b], template);
            gram[(a, b)] = g;
            gram[(b, a)] = g;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(gram / k as f64);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let scale = template.total_mass.max(1.0);
    let mut out = Vec::with_capacity(n_modes);
    for &col in order.iter().take(n_modes) {
        let rho = eig.eigenvalues[col].max(0.0);
        let mut field = vec![[0.0; 2]; n];
        let sigma;
        if rho > 1e-14 * scale {
            let norm = (k as f64 * rho).sqrt();
            for (s, f) in lifted.iter().enumerate() {
                let w = eig.eigenvectors[(s, col)] / norm;
                for (fv, lv) in field.iter_mut().zip(f) {
                    fv[0] += w * lv[0];
                    fv[1] += w * lv[1];
                }
            }
            sigma = rho.sqrt();
        } else {
            // Zero-variance direction: the eigenfield is not determined.
            sigma = 0.0;
        }
        let raw = Mode {
            displacements: field.clone(),
            divergence_class: crate::modes::DivergenceClass::General,
            role: crate::modes::ModeRole::Statistical,
        };
        let (mode, scale_coeff) = decompose_mode(&raw, template);
        out.push(LearnedMode { mode, sigma, scale_coeff, field });
    }
    Ok(out)
}
