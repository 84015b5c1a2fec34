//! Deformation modes: displacement fields on the template that parametrize
//! the transformation `T(lambda, x) = x + sum_i lambda_i * t_i(x)`.
//!
//! Geometric modes (translation, rotation, scale) are closed-form generators
//! of the corresponding transformation groups about the template centroid.
//! Statistical modes are learned from contour samples in [`learning`] by
//! lifting boundary deformations to region gradient fields via the Neumann
//! problem in [`neumann`].

pub mod learning;
pub mod neumann;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{Point2, TemplateShape};

/// Classification of a mode by its divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceClass {
    ZeroDiv,
    Scale,
    General,
}

/// What a mode parametrizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeRole {
    TranslationX,
    TranslationY,
    Rotation,
    Scale,
    Statistical,
}

impl ModeRole {
    pub fn is_statistical(self) -> bool {
        matches!(self, ModeRole::Statistical)
    }
}

/// A displacement field sampled at the template points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mode {
    pub displacements: Vec<[f64; 2]>,
    pub divergence_class: DivergenceClass,
    pub role: ModeRole,
}

impl Mode {
    /// Largest displacement magnitude over the template points.
    pub fn max_magnitude(&self) -> f64 {
        self.displacements
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1]).sqrt())
            .fold(0.0, f64::max)
    }
}

/// An ordered list of modes with the Gaussian prior data for the statistical
/// ones. Translation/rotation/scale modes precede statistical modes; at most
/// one scale mode is allowed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeBasis {
    pub modes: Vec<Mode>,
    /// Standard deviation per statistical mode, aligned with the trailing
    /// statistical block of `modes`.
    pub sigmas: Vec<f64>,
    /// Weight of the Gaussian coefficient prior.
    pub gamma: f64,
    pub scale_index: Option<usize>,
}

impl ModeBasis {
    pub fn new(modes: Vec<Mode>, sigmas: Vec<f64>, gamma: f64, template: &TemplateShape) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidInput(format!("prior weight gamma {gamma} must be nonnegative")));
        }
        let n_stat = modes.iter().filter(|m| m.role.is_statistical()).count();
        if sigmas.len() != n_stat {
            return Err(Error::InvalidInput(format!(
                "{} sigmas for {} statistical modes",
                sigmas.len(),
                n_stat
            )));
        }
        if sigmas.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidInput("sigma entries must be strictly positive".into()));
        }
        // Statistical modes must form a trailing block.
        let first_stat = modes.iter().position(|m| m.role.is_statistical());
        if let Some(k) = first_stat {
            if modes[k..].iter().any(|m| !m.role.is_statistical()) {
                return Err(Error::InvalidInput(
                    "translation/rotation/scale modes must precede statistical modes".into(),
                ));
            }
        }
        let scale_positions: Vec<usize> = modes
            .iter()
            .enumerate()
            .filter(|(_, m)| m.role == ModeRole::Scale)
            .map(|(i, _)| i)
            .collect();
        if scale_positions.len() > 1 {
            return Err(Error::InvalidInput("at most one scale mode is allowed".into()));
        }
        let scale_index = scale_positions.first().copied();
        let c = template.centroid();
        for (k, m) in modes.iter().enumerate() {
            if m.displacements.len() != template.len() {
                return Err(Error::InvalidInput(format!(
                    "mode {k} has {} displacements for {} template points",
                    m.displacements.len(),
                    template.len()
                )));
            }
            if m.displacements.iter().any(|d| !d[0].is_finite() || !d[1].is_finite()) {
                return Err(Error::InvalidInput(format!("mode {k} has non-finite displacements")));
            }
            if m.role == ModeRole::Scale {
                let scale = template.bbox_diagonal().max(1.0);
                for (d, p) in m.displacements.iter().zip(&template.points) {
                    if (d[0] - (p.x - c.x)).abs() > 1e-9 * scale || (d[1] - (p.y - c.y)).abs() > 1e-9 * scale {
                        return Err(Error::InvalidInput(
                            "scale mode displacements must equal the centered point coordinates".into(),
                        ));
                    }
                }
            }
        }
        Ok(ModeBasis { modes, sigmas, gamma, scale_index })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// Index of the first statistical mode.
    pub fn stat_offset(&self) -> usize {
        self.modes.len() - self.sigmas.len()
    }

    /// Standard deviation attached to mode `k`, if it is statistical.
    pub fn sigma_of(&self, k: usize) -> Option<f64> {
        k.checked_sub(self.stat_offset()).map(|s| self.sigmas[s])
    }

    /// Largest displacement magnitude per mode, the conversion factor from
    /// coefficient ranges to displacement ranges.
    pub fn mode_magnitudes(&self) -> Vec<f64> {
        self.modes.iter().map(Mode::max_magnitude).collect()
    }

    /// Gaussian prior on the statistical coefficients. Translation, rotation
    /// and scale coefficients contribute nothing.
    pub fn prior_cost(&self, lambda: &[f64]) -> f64 {
        self.prior_cost_with(lambda, self.gamma)
    }

    /// Prior with an explicit weight, for configurations that override the
    /// basis weight.
    pub fn prior_cost_with(&self, lambda: &[f64], gamma: f64) -> f64 {
        debug_assert_eq!(lambda.len(), self.modes.len());
        let off = self.stat_offset();
        let mut acc = 0.0;
        for (s, &sigma) in self.sigmas.iter().enumerate() {
            let l = lambda[off + s];
            if sigma <= 0.0 {
                if l != 0.0 {
                    return f64::INFINITY;
                }
                continue;
            }
            let r = l / sigma;
            acc += r * r;
        }
        0.5 * gamma * acc
    }

    /// Convenience constructor for the geometric block.
    pub fn geometric(template: &TemplateShape, rotation: bool, scale: bool, gamma: f64) -> Result<Self> {
        let (tx, ty) = make_translation_modes(template);
        let mut modes = vec![tx, ty];
        if rotation {
            modes.push(make_rotation_mode(template));
        }
        if scale {
            modes.push(make_scale_mode(template));
        }
        ModeBasis::new(modes, Vec::new(), gamma, template)
    }

    /// Extends this basis with learned statistical modes.
    pub fn with_statistical(mut self, modes: Vec<Mode>, sigmas: Vec<f64>, template: &TemplateShape) -> Result<Self> {
        for m in &modes {
            if !m.role.is_statistical() {
                return Err(Error::InvalidInput("with_statistical expects statistical modes".into()));
            }
        }
        self.modes.extend(modes);
        let mut all_sigmas = self.sigmas;
        all_sigmas.extend(sigmas);
        ModeBasis::new(self.modes, all_sigmas, self.gamma, template)
    }
}

/// The two unit translation generators.
pub fn make_translation_modes(template: &TemplateShape) -> (Mode, Mode) {
    let n = template.len();
    (
        Mode {
            displacements: vec![[1.0, 0.0]; n],
            divergence_class: DivergenceClass::ZeroDiv,
            role: ModeRole::TranslationX,
        },
        Mode {
            displacements: vec![[0.0, 1.0]; n],
            divergence_class: DivergenceClass::ZeroDiv,
            role: ModeRole::TranslationY,
        },
    )
}

/// First-order rotation generator about the template centroid,
/// `t(x) = (-(x - c)_2, (x - c)_1)`.
pub fn make_rotation_mode(template: &TemplateShape) -> Mode {
    let c = template.centroid();
    let displacements = template
        .points
        .iter()
        .map(|p| [-(p.y - c.y), p.x - c.x])
        .collect();
    Mode { displacements, divergence_class: DivergenceClass::ZeroDiv, role: ModeRole::Rotation }
}

/// Scale generator about the template centroid, `t(x) = x - c`.
pub fn make_scale_mode(template: &TemplateShape) -> Mode {
    let c = template.centroid();
    let displacements = template.points.iter().map(|p| [p.x - c.x, p.y - c.y]).collect();
    Mode { displacements, divergence_class: DivergenceClass::Scale, role: ModeRole::Scale }
}

/// Applies `T(lambda, x) = x + sum_i lambda_i t_i(x)` to every template point.
pub fn apply_transform(template: &TemplateShape, basis: &ModeBasis, lambda: &[f64]) -> Result<Vec<Point2>> {
    if lambda.len() != basis.len() {
        return Err(Error::InvalidInput(format!(
            "{} coefficients for {} modes",
            lambda.len(),
            basis.len()
        )));
    }
    let mut out = template.points.clone();
    for (mode, &l) in basis.modes.iter().zip(lambda) {
        if l == 0.0 {
            continue;
        }
        for (p, d) in out.iter_mut().zip(&mode.displacements) {
            p.x += l * d[0];
            p.y += l * d[1];
        }
    }
    Ok(out)
}

/// Transformed position of a single template point.
pub fn transform_point(template: &TemplateShape, basis: &ModeBasis, lambda: &[f64], i: usize) -> Point2 {
    let mut p = template.points[i];
    for (mode, &l) in basis.modes.iter().zip(lambda) {
        p.x += l * mode.displacements[i][0];
        p.y += l * mode.displacements[i][1];
    }
    p
}

/// Mean discrete divergence of a displacement field given at the template
/// points, estimated by mass-weighted local affine least-squares fits over
/// nearest-neighbor stencils. Exact for affine fields.
pub fn mean_divergence(displacements: &[[f64; 2]], template: &TemplateShape) -> f64 {
    let n = template.len();
    let k = 12.min(n);
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut wsum = 0.0;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..n {
        let p = template.points[i];
        idx.sort_by(|&a, &b| {
            template.points[a]
                .dist2(&p)
                .partial_cmp(&template.points[b].dist2(&p))
                .unwrap()
        });
        if let Some(div) = local_divergence(&idx[..k], displacements, template, p) {
            let w = template.masses[i];
            acc += w * div;
            wsum += w;
        }
    }
    if wsum > 0.0 {
        acc / wsum
    } else {
        0.0
    }
}

/// Fits `t(q) ~ a + B (q - p)` over the stencil and returns `trace(B)`.
/// `None` when the stencil is geometrically degenerate.
fn local_divergence(
    stencil: &[usize],
    displacements: &[[f64; 2]],
    template: &TemplateShape,
    p: Point2,
) -> Option<f64> {
    // Normal equations for the 3-parameter fit (offset, x-slope, y-slope),
    // shared by both displacement components.
    let mut m = [[0.0_f64; 3]; 3];
    let mut rhs_x = [0.0_f64; 3];
    let mut rhs_y = [0.0_f64; 3];
    for &q in stencil {
        let dx = template.points[q].x - p.x;
        let dy = template.points[q].y - p.y;
        let row = [1.0, dx, dy];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] += row[a] * row[b];
            }
            rhs_x[a] += row[a] * displacements[q][0];
            rhs_y[a] += row[a] * displacements[q][1];
        }
    }
    let sx = solve3(&m, &rhs_x)?;
    let sy = solve3(&m, &rhs_y)?;
    Some(sx[1] + sy[2])
}

fn solve3(m: &[[f64; 3]; 3], rhs: &[f64; 3]) -> Option<[f64; 3]> {
    let mut a = *m;
    let mut b = *rhs;
    for col in 0..3 {
        let mut piv = col;
        for r in col + 1..3 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        if a[piv][col].abs() < 1e-12 * (1.0 + a.iter().flatten().fold(0.0_f64, |x, y| x.max(y.abs()))) {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..3 {
            if r == col {
                continue;
            }
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
}

/// Splits a mode into a divergence-free part and a multiple of the scale
/// generator: `t = t_0 + alpha * t_s` with `alpha = mean_div(t) / 2`.
pub fn decompose_mode(mode: &Mode, template: &TemplateShape) -> (Mode, f64) {
    let alpha = mean_divergence(&mode.displacements, template) / 2.0;
    let c = template.centroid();
    let displacements = mode
        .displacements
        .iter()
        .zip(&template.points)
        .map(|(d, p)| [d[0] - alpha * (p.x - c.x), d[1] - alpha * (p.y - c.y)])
        .collect();
    (
        Mode { displacements, divergence_class: DivergenceClass::ZeroDiv, role: mode.role },
        alpha,
    )
}
