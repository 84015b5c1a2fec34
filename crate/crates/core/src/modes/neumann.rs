//! Lifting boundary deformations to region vector fields.
//!
//! A scalar field `a` on the region boundary is extended into the interior
//! as `t = grad(u)` where `u` solves `laplace(u) = C` with Neumann data
//! `du/dn = a` and `C` the normalized total flow of `a` through the
//! boundary. The region is rasterized at spacing `h`; the Laplacian is the
//! 5-point stencil with ghost-cell Neumann conditions, discretized in flux
//! form so that the singular system stays consistent: the exposed faces of a
//! boundary cell carry the flux `a * |n_d| * h` per axis `d`, which sums to
//! the true boundary flux independently of the staircase orientation.

use crate::error::{Error, Result};
use crate::measure::{bbox, dist_to_polygon, point_in_polygon, polygon_is_simple, Point2, TemplateShape};
use crate::modes::{DivergenceClass, Mode, ModeRole};

/// One raster cell on the region boundary.
#[derive(Debug, Clone)]
pub struct BoundaryCell {
    /// Compact interior-cell index.
    pub cell: usize,
    /// Outward unit normal of the true boundary nearest to the cell center.
    pub normal: [f64; 2],
    /// Arc-length position of the nearest boundary point, for sampling
    /// fields given on the contour.
    pub arclen: f64,
    /// Which of the four faces (east, west, north, south) are exposed.
    pub exposed: [bool; 4],
}

/// Rasterization of the region enclosed by a contour.
#[derive(Debug, Clone)]
pub struct NeumannGrid {
    pub h: f64,
    origin: Point2,
    nx: usize,
    ny: usize,
    /// Compact index per raster cell, `usize::MAX` outside the region.
    index: Vec<usize>,
    /// Raster coordinates of each interior cell.
    cells: Vec<(usize, usize)>,
    pub boundary: Vec<BoundaryCell>,
    /// Boundary-cell index per interior cell, `usize::MAX` for pure interior.
    boundary_of: Vec<usize>,
    contour: Vec<Point2>,
    vertex_arclen: Vec<f64>,
    total_arclen: f64,
}

const NONE: usize = usize::MAX;

impl NeumannGrid {
    pub fn from_contour(contour: &[Point2], h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidGrid(format!("spacing {h} must be positive")));
        }
        if contour.len() < 3 || !polygon_is_simple(contour) {
            return Err(Error::InvalidGrid("contour must be a simple closed polygon".into()));
        }
        let (lo, hi) = bbox(contour);
        let pad = 2.0 * h;
        let origin = Point2::new(lo.x - pad, lo.y - pad);
        let nx = ((hi.x - lo.x + 2.0 * pad) / h).ceil() as usize + 1;
        let ny = ((hi.y - lo.y + 2.0 * pad) / h).ceil() as usize + 1;

        let center = |ix: usize, iy: usize| {
            Point2::new(origin.x + (ix as f64 + 0.5) * h, origin.y + (iy as f64 + 0.5) * h)
        };

        let mut inside = vec![false; nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                inside[iy * nx + ix] = point_in_polygon(&center(ix, iy), contour);
            }
        }
        let n_inside = inside.iter().filter(|&&b| b).count();
        if n_inside == 0 {
            return Err(Error::InvalidGrid("no raster cell falls inside the contour".into()));
        }

        // Connectivity of the interior mask (4-neighborhood flood fill).
        let start = inside.iter().position(|&b| b).unwrap();
        let mut seen = vec![false; nx * ny];
        let mut stack = vec![start];
        seen[start] = true;
        let mut reached = 0usize;
        while let Some(p) = stack.pop() {
            reached += 1;
            let (ix, iy) = (p % nx, p / nx);
            let mut push = |q: usize| {
                if inside[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if ix + 1 < nx {
                push(p + 1);
            }
            if ix > 0 {
                push(p - 1);
            }
            if iy + 1 < ny {
                push(p + nx);
            }
            if iy > 0 {
                push(p - nx);
            }
        }
        if reached != n_inside {
            return Err(Error::InvalidGrid(format!(
                "interior is disconnected: {reached} of {n_inside} cells reachable"
            )));
        }

        let mut index = vec![NONE; nx * ny];
        let mut cells = Vec::with_capacity(n_inside);
        for iy in 0..ny {
            for ix in 0..nx {
                if inside[iy * nx + ix] {
                    index[iy * nx + ix] = cells.len();
                    cells.push((ix, iy));
                }
            }
        }

        // Arc-length table of the contour for boundary-value sampling.
        let mut vertex_arclen = Vec::with_capacity(contour.len() + 1);
        let mut acc = 0.0;
        for k in 0..contour.len() {
            vertex_arclen.push(acc);
            let a = contour[k];
            let b = contour[(k + 1) % contour.len()];
            acc += a.dist2(&b).sqrt();
        }
        let total_arclen = acc;

        let is_in = |ix: isize, iy: isize| {
            ix >= 0 && iy >= 0 && (ix as usize) < nx && (iy as usize) < ny && inside[iy as usize * nx + ix as usize]
        };
        let mut boundary = Vec::new();
        let mut boundary_of = vec![NONE; n_inside];
        for (ci, &(ix, iy)) in cells.iter().enumerate() {
            let (jx, jy) = (ix as isize, iy as isize);
            let exposed = [
                !is_in(jx + 1, jy),
                !is_in(jx - 1, jy),
                !is_in(jx, jy + 1),
                !is_in(jx, jy - 1),
            ];
            if exposed.iter().any(|&e| e) {
                let p = center(ix, iy);
                let (normal, arclen) = nearest_boundary_normal(&p, contour, &vertex_arclen);
                boundary_of[ci] = boundary.len();
                boundary.push(BoundaryCell { cell: ci, normal, arclen, exposed });
            }
        }

        Ok(NeumannGrid {
            h,
            origin,
            nx,
            ny,
            index,
            cells,
            boundary,
            boundary_of,
            contour: contour.to_vec(),
            vertex_arclen,
            total_arclen,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_center(&self, ci: usize) -> Point2 {
        let (ix, iy) = self.cells[ci];
        Point2::new(self.origin.x + (ix as f64 + 0.5) * self.h, self.origin.y + (iy as f64 + 0.5) * self.h)
    }

    pub fn contour(&self) -> &[Point2] {
        &self.contour
    }

    fn compact_at(&self, ix: isize, iy: isize) -> usize {
        if ix < 0 || iy < 0 || ix as usize >= self.nx || iy as usize >= self.ny {
            return NONE;
        }
        self.index[iy as usize * self.nx + ix as usize]
    }

    /// Compact index of the interior cell containing `p`, if any.
    pub fn cell_of_point(&self, p: &Point2) -> Option<usize> {
        let ix = ((p.x - self.origin.x) / self.h).floor() as isize;
        let iy = ((p.y - self.origin.y) / self.h).floor() as isize;
        let ci = self.compact_at(ix, iy);
        (ci != NONE).then_some(ci)
    }

    /// Samples a field given at the contour vertices onto the boundary cells
    /// by linear interpolation in arc length.
    pub fn sample_boundary_values(&self, vertex_values: &[f64]) -> Result<Vec<f64>> {
        if vertex_values.len() != self.contour.len() {
            return Err(Error::InvalidInput(format!(
                "{} boundary values for a contour of {} vertices",
                vertex_values.len(),
                self.contour.len()
            )));
        }
        let k = self.contour.len();
        let out = self
            .boundary
            .iter()
            .map(|bc| {
                let s = bc.arclen.rem_euclid(self.total_arclen);
                // Find the segment containing arc-length position s.
                let seg = match self.vertex_arclen.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
                    Ok(i) => i,
                    Err(i) => i.saturating_sub(1),
                };
                let s0 = self.vertex_arclen[seg];
                let s1 = if seg + 1 < k { self.vertex_arclen[seg + 1] } else { self.total_arclen };
                let t = if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.0 };
                (1.0 - t) * vertex_values[seg] + t * vertex_values[(seg + 1) % k]
            })
            .collect();
        Ok(out)
    }

    /// Solves the Neumann problem for boundary data `a` (one value per
    /// boundary cell). The potential is gauge-fixed to zero mean.
    pub fn solve(&self, a: &[f64]) -> Result<NeumannSolution> {
        if a.len() != self.boundary.len() {
            return Err(Error::InvalidInput(format!(
                "{} boundary values for {} boundary cells",
                a.len(),
                self.boundary.len()
            )));
        }
        let n = self.n_cells();
        let h = self.h;

        // Prescribed flux through the exposed faces of each cell.
        let mut flux = vec![0.0; n];
        for (b, &av) in self.boundary.iter().zip(a) {
            let fx = av * b.normal[0].abs() * h;
            let fy = av * b.normal[1].abs() * h;
            let mut f = 0.0;
            if b.exposed[0] {
                f += fx;
            }
            if b.exposed[1] {
                f += fx;
            }
            if b.exposed[2] {
                f += fy;
            }
            if b.exposed[3] {
                f += fy;
            }
            flux[b.cell] = f;
        }
        let total_flux: f64 = flux.iter().sum();
        let c = total_flux / (n as f64 * h * h);

        // A u = rhs with A the (positive semidefinite) graph Laplacian of the
        // interior mask and rhs = flux - C h^2. Consistent by construction.
        let rhs: Vec<f64> = flux.iter().map(|&f| f - c * h * h).collect();
        let u = self.solve_laplacian_cg(&rhs)?;

        let grad = self.gradient(&u, a);
        Ok(NeumannSolution { grid_h: h, u, grad, compatibility: c })
    }

    /// Conjugate gradient for the singular, consistent Laplacian system.
    fn solve_laplacian_cg(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_cells();
        let neighbors: Vec<[usize; 4]> = self
            .cells
            .iter()
            .map(|&(ix, iy)| {
                let (jx, jy) = (ix as isize, iy as isize);
                [
                    self.compact_at(jx + 1, jy),
                    self.compact_at(jx - 1, jy),
                    self.compact_at(jx, jy + 1),
                    self.compact_at(jx, jy - 1),
                ]
            })
            .collect();
        let apply = |x: &[f64], out: &mut [f64]| {
            for (p, nb) in neighbors.iter().enumerate() {
                let mut acc = 0.0;
                let mut deg = 0.0;
                for &q in nb {
                    if q != NONE {
                        acc += x[q];
                        deg += 1.0;
                    }
                }
                out[p] = deg * x[p] - acc;
            }
        };

        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mut b = rhs.to_vec();
        let b_mean = mean(&b);
        for v in &mut b {
            *v -= b_mean;
        }
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);

        let mut x = vec![0.0; n];
        let mut r = b.clone();
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rr = r.iter().map(|v| v * v).sum::<f64>();
        let tol = 1e-10 * bnorm.max(1.0);
        let max_iters = 100 * n + 1000;
        let mut iters = 0;
        while rr.sqrt() > tol {
            if iters >= max_iters {
                return Err(Error::NumericalFailure(format!(
                    "Neumann solve did not converge: residual {} after {} iterations",
                    rr.sqrt(),
                    iters
                )));
            }
            apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                return Err(Error::NumericalFailure("Neumann system lost positive-definiteness".into()));
            }
            let alpha = rr / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            // Keep iterates in the mean-zero subspace against drift.
            if iters % 50 == 49 {
                let m = mean(&r);
                for v in &mut r {
                    *v -= m;
                }
            }
            let rr_new = r.iter().map(|v| v * v).sum::<f64>();
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
            iters += 1;
        }
        let xm = mean(&x);
        for v in &mut x {
            *v -= xm;
        }
        Ok(x)
    }

    /// Central-difference gradient with ghost values from the Neumann data
    /// on exposed faces.
    fn gradient(&self, u: &[f64], a: &[f64]) -> Vec<[f64; 2]> {
        let h = self.h;
        let mut grad = vec![[0.0; 2]; u.len()];
        for (ci, &(ix, iy)) in self.cells.iter().enumerate() {
            let (jx, jy) = (ix as isize, iy as isize);
            let bc = self.boundary_of[ci];
            let ghost = |axis: usize| -> f64 {
                // Outward derivative magnitude across an exposed face.
                let b = &self.boundary[bc];
                u[ci] + h * a[bc] * b.normal[axis].abs()
            };
            let e = self.compact_at(jx + 1, jy);
            let w = self.compact_at(jx - 1, jy);
            let ue = if e != NONE { u[e] } else { ghost(0) };
            let uw = if w != NONE { u[w] } else { ghost(0) };
            grad[ci][0] = (ue - uw) / (2.0 * h);
            let nn = self.compact_at(jx, jy + 1);
            let s = self.compact_at(jx, jy - 1);
            let un = if nn != NONE { u[nn] } else { ghost(1) };
            let us = if s != NONE { u[s] } else { ghost(1) };
            grad[ci][1] = (un - us) / (2.0 * h);
        }
        grad
    }
}

fn nearest_boundary_normal(p: &Point2, contour: &[Point2], vertex_arclen: &[f64]) -> ([f64; 2], f64) {
    // Outward normals assume counter-clockwise orientation; flip if needed.
    let mut signed_area = 0.0;
    let k = contour.len();
    for i in 0..k {
        let a = contour[i];
        let b = contour[(i + 1) % k];
        signed_area += a.x * b.y - b.x * a.y;
    }
    let orient = if signed_area >= 0.0 { 1.0 } else { -1.0 };

    let mut best = f64::INFINITY;
    let mut normal = [0.0, 0.0];
    let mut arclen = 0.0;
    for i in 0..k {
        let a = contour[i];
        let b = contour[(i + 1) % k];
        let ab = b - a;
        let len2 = ab.x * ab.x + ab.y * ab.y;
        let t = if len2 > 0.0 {
            (((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = Point2::new(a.x + t * ab.x, a.y + t * ab.y);
        let d = p.dist2(&q);
        if d < best {
            best = d;
            let len = len2.sqrt().max(1e-300);
            normal = [orient * ab.y / len, -orient * ab.x / len];
            arclen = vertex_arclen[i] + t * len;
        }
    }
    (normal, arclen)
}

/// Result of a Neumann solve on the raster.
#[derive(Debug, Clone)]
pub struct NeumannSolution {
    pub grid_h: f64,
    /// Potential per interior cell, zero mean.
    pub u: Vec<f64>,
    /// Gradient of the potential per interior cell.
    pub grad: Vec<[f64; 2]>,
    /// The constant interior divergence (normalized total flow).
    pub compatibility: f64,
}

impl NeumannSolution {
    /// Gradient at an arbitrary interior point, bilinearly interpolated from
    /// the cell-center values with nearest-cell fallback near the boundary.
    pub fn grad_at(&self, grid: &NeumannGrid, p: &Point2) -> Option<[f64; 2]> {
        let ci = grid.cell_of_point(p)?;
        let h = grid.h;
        let c = grid.cell_center(ci);
        // Identify the 4-cell patch around p.
        let fx = (p.x - c.x) / h;
        let fy = (p.y - c.y) / h;
        let (ix, iy) = grid.cells[ci];
        let (jx, jy) = (ix as isize, iy as isize);
        let sx: isize = if fx >= 0.0 { 1 } else { -1 };
        let sy: isize = if fy >= 0.0 { 1 } else { -1 };
        let corners = [
            grid.compact_at(jx, jy),
            grid.compact_at(jx + sx, jy),
            grid.compact_at(jx, jy + sy),
            grid.compact_at(jx + sx, jy + sy),
        ];
        if corners.iter().any(|&q| q == NONE) {
            return Some(self.grad[ci]);
        }
        let (tx, ty) = (fx.abs(), fy.abs());
        let w = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
        let mut g = [0.0, 0.0];
        for (q, wq) in corners.iter().zip(w) {
            g[0] += wq * self.grad[*q][0];
            g[1] += wq * self.grad[*q][1];
        }
        Some(g)
    }
}

/// Lifts boundary data into a mode by solving the Neumann problem and
/// sampling the resulting gradient field at the template points. Points
/// outside the raster take the field of the nearest interior cell.
pub fn lift_contour_deformation(
    grid: &NeumannGrid,
    boundary_values: &[f64],
    template: &TemplateShape,
) -> Result<(Mode, NeumannSolution)> {
    let sol = grid.solve(boundary_values)?;
    let displacements = sample_solution(grid, &sol, template);
    let class = if sol.compatibility.abs() > 1e-6 { DivergenceClass::Scale } else { DivergenceClass::ZeroDiv };
    Ok((
        Mode { displacements, divergence_class: class, role: ModeRole::Statistical },
        sol,
    ))
}

fn sample_solution(grid: &NeumannGrid, sol: &NeumannSolution, template: &TemplateShape) -> Vec<[f64; 2]> {
    template
        .points
        .iter()
        .map(|p| {
            if let Some(g) = sol.grad_at(grid, p) {
                g
            } else {
                // Nearest interior cell; template points should rarely leave
                // the raster, but stay total.
                let mut best = f64::INFINITY;
                let mut g = [0.0, 0.0];
                for ci in 0..grid.n_cells() {
                    let d = grid.cell_center(ci).dist2(p);
                    if d < best {
                        best = d;
                        g = sol.grad[ci];
                    }
                }
                g
            }
        })
        .collect()
}
