//! Procedural cartoon faces with known generative factors.
//!
//! Identity factors (head aspect ratio, eye spacing, skin tone) and expression
//! factors (mouth curvature, brow angle, eye openness) are disjoint, so every
//! label is recoverable from the factors alone. Illumination and a sub-pixel
//! shift act as nuisance. Coordinates are in the unit square, `x` to the
//! right and `y` down.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, LabeledImage};
use crate::error::{invalid, Result};

const MOUTH_Y: f64 = 0.68;
const MOUTH_HALF_WIDTH: f64 = 0.13;
const MOUTH_DEPTH: f64 = 0.06;
const EYE_Y: f64 = 0.42;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityParams {
    /// Head height over width.
    pub aspect: f64,
    /// Distance between eye centers.
    pub eye_spacing: f64,
    /// Skin brightness in `[0, 1]`.
    pub skin_tone: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpressionParams {
    /// `+1` full smile, `-1` full frown.
    pub mouth_curvature: f64,
    /// Degrees; positive raises the inner brow ends.
    pub brow_angle: f64,
    /// Eye height relative to fully open.
    pub eye_openness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NuisanceParams {
    /// Global gain on all colors.
    pub illumination: f64,
    /// Shift in pixels.
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Default for NuisanceParams {
    fn default() -> Self {
        Self { illumination: 1.0, shift_x: 0.0, shift_y: 0.0 }
    }
}

/// Full factor description of one rendered face.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticFaceSpec {
    pub identity: IdentityParams,
    pub expression: ExpressionParams,
    pub nuisance: NuisanceParams,
}

/// Per-class prototype factors. Depends only on the class counts, never on
/// a seed, so a dataset and its oracle always agree.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDesign {
    pub identities: Vec<IdentityParams>,
    pub expressions: Vec<ExpressionParams>,
}

fn spread(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5
    } else {
        i as f64 / (n - 1) as f64
    }
}

impl SyntheticDesign {
    pub fn new(n_identities: usize, n_expressions: usize) -> Result<Self> {
        if n_identities < 2 || n_expressions < 2 {
            return Err(invalid("synthetic design needs at least 2 identities and 2 expressions"));
        }
        let n = n_identities;
        let identities = (0..n)
            .map(|i| IdentityParams {
                aspect: 1.0 + 0.45 * spread(i, n),
                eye_spacing: 0.24 + 0.14 * spread((2 * i + 1) % n, n),
                skin_tone: 0.45 + 0.5 * spread((3 * i + 2) % n, n),
            })
            .collect();
        let m = n_expressions;
        let expressions = (0..m)
            .map(|k| ExpressionParams {
                mouth_curvature: -1.0 + 2.0 * spread(k, m),
                brow_angle: -18.0 + 36.0 * spread((3 * k + 1) % m, m),
                eye_openness: 0.4 + 0.6 * spread((k + 2) % m, m),
            })
            .collect();
        Ok(Self { identities, expressions })
    }

    pub fn n_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn n_expressions(&self) -> usize {
        self.expressions.len()
    }

    /// Nearest expression prototype in normalized factor space.
    pub fn expression_of(&self, p: &ExpressionParams) -> usize {
        argmin(self.expressions.iter().map(|q| {
            ((p.mouth_curvature - q.mouth_curvature) / 2.0).powi(2)
                + ((p.brow_angle - q.brow_angle) / 36.0).powi(2)
                + ((p.eye_openness - q.eye_openness) / 0.6).powi(2)
        }))
    }

    /// Nearest identity prototype in normalized factor space.
    pub fn identity_of(&self, p: &IdentityParams) -> usize {
        argmin(self.identities.iter().map(|q| {
            ((p.aspect - q.aspect) / 0.45).powi(2)
                + ((p.eye_spacing - q.eye_spacing) / 0.14).powi(2)
                + ((p.skin_tone - q.skin_tone) / 0.5).powi(2)
        }))
    }

    /// Draws a jittered face of the given classes.
    pub fn sample_spec(&self, identity: usize, expression: usize, rng: &mut impl Rng) -> SyntheticFaceSpec {
        let id = self.identities[identity];
        let ex = self.expressions[expression];
        SyntheticFaceSpec {
            identity: IdentityParams {
                aspect: id.aspect + rng.random_range(-0.02..0.02),
                eye_spacing: id.eye_spacing + rng.random_range(-0.006..0.006),
                skin_tone: id.skin_tone + rng.random_range(-0.02..0.02),
            },
            expression: ExpressionParams {
                mouth_curvature: ex.mouth_curvature + rng.random_range(-0.1..0.1),
                brow_angle: ex.brow_angle + rng.random_range(-2.0..2.0),
                eye_openness: ex.eye_openness + rng.random_range(-0.05..0.05),
            },
            nuisance: NuisanceParams {
                illumination: rng.random_range(0.85..1.15),
                shift_x: rng.random_range(-1.5..1.5),
                shift_y: rng.random_range(-1.5..1.5),
            },
        }
    }

    /// The clean prototype face of a class pair.
    pub fn prototype(&self, identity: usize, expression: usize) -> SyntheticFaceSpec {
        SyntheticFaceSpec {
            identity: self.identities[identity],
            expression: self.expressions[expression],
            nuisance: NuisanceParams::default(),
        }
    }
}

fn argmin(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in it.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Approximate signed distance to an axis-aligned ellipse.
fn ellipse_sd(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (dx, dy) = (px - cx, py - cy);
    let q = ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt();
    if q < 1e-9 {
        return -rx.min(ry);
    }
    let gx = dx / (rx * rx * q);
    let gy = dy / (ry * ry * q);
    (q - 1.0) / (gx * gx + gy * gy).sqrt()
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (vx, vy) = (bx - ax, by - ay);
    let t = (((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    ((px - ax - t * vx).powi(2) + (py - ay - t * vy).powi(2)).sqrt()
}

/// Vertical position of the mouth centerline at normalized offset `t` in [-1, 1].
fn mouth_curve(curvature: f64, t: f64) -> f64 {
    MOUTH_Y - curvature * MOUTH_DEPTH * (t * t - 1.0 / 3.0)
}

fn mouth_distance(px: f64, py: f64, cx: f64, cy: f64, curvature: f64) -> f64 {
    let t = (px - cx) / MOUTH_HALF_WIDTH;
    let dy = cy - 0.5;
    if t.abs() <= 1.0 {
        let y = mouth_curve(curvature, t) + dy;
        let slope = -curvature * MOUTH_DEPTH * 2.0 * t / MOUTH_HALF_WIDTH;
        (py - y).abs() / (1.0 + slope * slope).sqrt()
    } else {
        let te = t.signum();
        let ex = cx + te * MOUTH_HALF_WIDTH;
        let ey = mouth_curve(curvature, te) + dy;
        ((px - ex).powi(2) + (py - ey).powi(2)).sqrt()
    }
}

fn blend(dst: &mut [f64; 3], color: [f64; 3], coverage: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - coverage) + color[c] * coverage;
    }
}

/// Renders a face as an `size x size x 3` image with values in `[-1, 1]`.
pub fn render_face(spec: &SyntheticFaceSpec, size: usize) -> Array3<f32> {
    let px = 1.0 / size as f64;
    let cov = |sd: f64| (0.5 - sd / px).clamp(0.0, 1.0);
    let id = spec.identity;
    let ex = spec.expression;
    let cx = 0.5 + spec.nuisance.shift_x * px;
    let cy = 0.5 + spec.nuisance.shift_y * px;
    let head_rx = 0.30;
    let head_ry = (0.30 * id.aspect).min(0.46);
    let skin = [id.skin_tone, id.skin_tone * 0.82, id.skin_tone * 0.68];
    let eye_y = cy + EYE_Y - 0.5;
    let eye_rx = 0.065;
    let eye_ry = 0.06 * ex.eye_openness.max(0.05);
    let brow_y = eye_y - 0.095;
    let brow_half = 0.07;
    let brow_thick = 0.0125;
    let mouth_thick = 0.015;
    let (sin_b, cos_b) = ex.brow_angle.to_radians().sin_cos();

    let mut out = Array3::<f32>::zeros((size, size, 3));
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = ((xi as f64 + 0.5) * px, (yi as f64 + 0.5) * px);
            let mut rgb = [0.15, 0.18, 0.22];
            blend(&mut rgb, skin, cov(ellipse_sd(x, y, cx, cy, head_rx, head_ry)));
            for side in [-1.0, 1.0] {
                let ecx = cx + side * id.eye_spacing / 2.0;
                blend(&mut rgb, [0.05, 0.05, 0.08], cov(ellipse_sd(x, y, ecx, eye_y, eye_rx, eye_ry)));
                // the inner end (toward the nose) rises for positive angles
                let (dx, dy) = (brow_half * cos_b, brow_half * sin_b);
                let (ax, ay) = (ecx - side * dx, brow_y - dy);
                let (bx, by) = (ecx + side * dx, brow_y + dy);
                let d = segment_distance(x, y, ax, ay, bx, by) - brow_thick;
                blend(&mut rgb, [0.2, 0.12, 0.06], cov(d));
            }
            let d = mouth_distance(x, y, cx, cy, ex.mouth_curvature) - mouth_thick;
            blend(&mut rgb, [0.55, 0.08, 0.1], cov(d));
            for c in 0..3 {
                let v = (rgb[c] * spec.nuisance.illumination).clamp(0.0, 1.0);
                out[[yi, xi, c]] = (2.0 * v - 1.0) as f32;
            }
        }
    }
    out
}

/// Estimates the mouth curvature of a rendered face from its pixels: finds
/// the mouth centerline per column as the centroid of the mouth's red-minus-
/// green signature, then fits `y = a + b t^2`.
pub fn read_mouth_curvature(pixels: &Array3<f32>) -> f64 {
    let (h, w, _) = pixels.dim();
    let size = h.min(w) as f64;
    let y_lo = ((MOUTH_Y - 0.12) * size).floor().max(0.0) as usize;
    let y_hi = (((MOUTH_Y + 0.12) * size).ceil() as usize).min(h);
    let mut pts = Vec::new();
    for xi in 0..w {
        let x = (xi as f64 + 0.5) / size;
        let t = (x - 0.5) / MOUTH_HALF_WIDTH;
        if t.abs() > 0.8 {
            continue;
        }
        let (mut m0, mut m1) = (0.0, 0.0);
        for y in y_lo..y_hi {
            // values are in [-1, 1]; skin has R - G <= 0.34 there, the mouth ~0.94
            let redness = (pixels[[y, xi, 0]] - pixels[[y, xi, 1]]) as f64;
            let wgt = (redness - 0.45).max(0.0);
            m0 += wgt;
            m1 += wgt * (y as f64 + 0.5) / size;
        }
        if m0 > 0.0 {
            pts.push((t * t, m1 / m0));
        }
    }
    // least squares y = a + b s with s = t^2
    let n = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let (mx, my) = (sx / n, sy / n);
    let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -(cov / var) / MOUTH_DEPTH
}

/// Analysis-by-synthesis classifier over the prototype faces. Matches a
/// query against every `(identity, expression)` prototype under small
/// integer shifts and a fitted gain; involves no learned weights.
#[derive(Clone, Debug)]
pub struct FactorOracle {
    design: SyntheticDesign,
    size: usize,
    templates: Vec<(usize, usize, Array3<f32>)>,
    max_shift: isize,
}

impl FactorOracle {
    pub fn new(design: SyntheticDesign, size: usize) -> Self {
        let mut templates = Vec::new();
        for i in 0..design.n_identities() {
            for e in 0..design.n_expressions() {
                templates.push((i, e, render_face(&design.prototype(i, e), size).mapv(|v| (v + 1.0) / 2.0)));
            }
        }
        Self { design, size, templates, max_shift: 2 }
    }

    pub fn design(&self) -> &SyntheticDesign {
        &self.design
    }

    /// Returns `(expression, identity)` of the closest prototype.
    pub fn classify(&self, pixels: &Array3<f32>) -> (usize, usize) {
        assert_eq!(pixels.dim(), (self.size, self.size, 3), "oracle resolution");
        let q = pixels.mapv(|v| ((v + 1.0) / 2.0) as f64);
        let n = self.size as isize;
        let mut best = (0, 0, f64::INFINITY);
        for (i, e, t) in &self.templates {
            for sy in -self.max_shift..=self.max_shift {
                for sx in -self.max_shift..=self.max_shift {
                    let (mut qt, mut tt, mut qq) = (0.0, 0.0, 0.0);
                    for y in 0..n {
                        let ty = (y - sy).clamp(0, n - 1) as usize;
                        for x in 0..n {
                            let tx = (x - sx).clamp(0, n - 1) as usize;
                            for c in 0..3 {
                                let a = q[[y as usize, x as usize, c]];
                                let b = t[[ty, tx, c]] as f64;
                                qt += a * b;
                                tt += b * b;
                                qq += a * a;
                            }
                        }
                    }
                    // residual after the least-squares gain
                    let resid = qq - qt * qt / tt.max(1e-12);
                    if resid < best.2 {
                        best = (*e, *i, resid);
                    }
                }
            }
        }
        (best.0, best.1)
    }
}

/// A synthetic dataset together with the factors of every image.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub specs: Vec<SyntheticFaceSpec>,
    pub design: SyntheticDesign,
}

/// Renders `n_identities * n_expressions * per_pair` faces at `size`,
/// ordered by identity, then expression, then draw.
pub fn generate_synthetic(
    n_identities: usize,
    n_expressions: usize,
    per_pair: usize,
    size: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if per_pair < 1 {
        return Err(invalid("per_pair must be at least 1"));
    }
    if size < 16 {
        return Err(invalid("synthetic resolution must be at least 16"));
    }
    let design = SyntheticDesign::new(n_identities, n_expressions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_identities * n_expressions * per_pair);
    let mut specs = Vec::with_capacity(images.capacity());
    for id in 0..n_identities {
        for e in 0..n_expressions {
            for _ in 0..per_pair {
                let spec = design.sample_spec(id, e, &mut rng);
                images.push(LabeledImage {
                    pixels: render_face(&spec, size),
                    expr_label: e,
                    identity_label: id,
                    subject_id: format!("id{id:03}"),
                });
                specs.push(spec);
            }
        }
    }
    let dataset = Dataset::new(images, n_expressions, n_identities)?;
    Ok(SyntheticDataset { dataset, specs, design })
}

/// Default-resolution (48x48) synthetic faces.
pub fn generate_synthetic_dataset(
    n_identities: usize,
    n_expressions: usize,
    per_pair: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    Ok(generate_synthetic(n_identities, n_expressions, per_pair, 48, seed)?.dataset.images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_label_balance() {
        let images = generate_synthetic_dataset(5, 4, 10, 1).unwrap();
        assert_eq!(images.len(), 200);
        for e in 0..4 {
            assert_eq!(images.iter().filter(|i| i.expr_label == e).count(), 50);
        }
        for id in 0..5 {
            assert_eq!(images.iter().filter(|i| i.identity_label == id).count(), 40);
        }
        assert!(images.iter().all(|i| i.pixels.iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_synthetic_dataset(2, 2, 3, 1).unwrap();
        let b = generate_synthetic_dataset(2, 2, 3, 1).unwrap();
        let c = generate_synthetic_dataset(2, 2, 3, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_counts_rejected() {
        assert!(generate_synthetic_dataset(1, 4, 10, 1).is_err());
        assert!(generate_synthetic_dataset(5, 1, 10, 1).is_err());
        assert!(generate_synthetic_dataset(5, 4, 0, 1).is_err());
    }

    #[test]
    fn labels_recoverable_from_factors() {
        let ds = generate_synthetic(5, 4, 20, 48, 9).unwrap();
        for (img, spec) in ds.dataset.images.iter().zip(&ds.specs) {
            assert_eq!(ds.design.expression_of(&spec.expression), img.expr_label);
            assert_eq!(ds.design.identity_of(&spec.identity), img.identity_label);
        }
    }

    #[test]
    fn expression_swap_moves_the_mouth_with_the_donor() {
        let ds = generate_synthetic(2, 2, 1, 48, 7).unwrap();
        assert_eq!(ds.specs.len(), 4);
        // identity 0 / expression 0 and identity 1 / expression 1
        let a = ds.specs[0];
        let b = ds.specs[3];
        let a_with_b = SyntheticFaceSpec { expression: b.expression, ..a };
        let b_with_a = SyntheticFaceSpec { expression: a.expression, ..b };
        for (spec, donor, other) in [(a_with_b, b, a), (b_with_a, a, b)] {
            let read = read_mouth_curvature(&render_face(&spec, 48));
            let to_donor = (read - donor.expression.mouth_curvature).abs();
            let to_other = (read - other.expression.mouth_curvature).abs();
            assert!(to_donor < 0.3, "read {read}, donor {}", donor.expression.mouth_curvature);
            assert!(to_donor < to_other);
        }
    }

    #[test]
    fn oracle_recovers_labels_of_clean_renders() {
        let ds = generate_synthetic(5, 4, 5, 48, 11).unwrap();
        let oracle = FactorOracle::new(ds.design.clone(), 48);
        for img in &ds.dataset.images {
            assert_eq!(oracle.classify(&img.pixels), (img.expr_label, img.identity_label));
        }
    }
}
