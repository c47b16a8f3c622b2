//! The fixed 110-fold augmentation: five crops, eleven rotations (unrotated
//! plus ten angles), each with and without a horizontal flip. Deterministic.

use ndarray::{s, Array3, ArrayView3};

use super::LabeledImage;
use crate::error::{invalid, Result};

/// Rotation variants in output order; 0 is the unrotated crop.
pub const ROTATION_ANGLES: [i32; 11] = [0, -15, -12, -9, -6, -3, 3, 6, 9, 12, 15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CropOrigin {
    Center,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl CropOrigin {
    pub const ALL: [CropOrigin; 5] =
        [CropOrigin::Center, CropOrigin::TopLeft, CropOrigin::TopRight, CropOrigin::BottomLeft, CropOrigin::BottomRight];

    /// Top-left corner of a `crop x crop` window in an `h x w` image.
    pub fn offset(self, h: usize, w: usize, crop: usize) -> (usize, usize) {
        match self {
            CropOrigin::Center => ((h - crop) / 2, (w - crop) / 2),
            CropOrigin::TopLeft => (0, 0),
            CropOrigin::TopRight => (0, w - crop),
            CropOrigin::BottomLeft => (h - crop, 0),
            CropOrigin::BottomRight => (h - crop, w - crop),
        }
    }

    /// The crop a horizontal mirror of the image maps this one to.
    pub fn mirrored(self) -> Self {
        match self {
            CropOrigin::TopLeft => CropOrigin::TopRight,
            CropOrigin::TopRight => CropOrigin::TopLeft,
            CropOrigin::BottomLeft => CropOrigin::BottomRight,
            CropOrigin::BottomRight => CropOrigin::BottomLeft,
            CropOrigin::Center => CropOrigin::Center,
        }
    }
}

/// An augmented image and how it was produced.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedImage {
    pub image: LabeledImage,
    pub crop: CropOrigin,
    pub angle_deg: i32,
    pub flipped: bool,
}

fn crop(pixels: ArrayView3<f32>, origin: CropOrigin, size: usize) -> Array3<f32> {
    let (h, w, _) = pixels.dim();
    let (y0, x0) = origin.offset(h, w, size);
    pixels.slice(s![y0..y0 + size, x0..x0 + size, ..]).to_owned()
}

pub fn hflip(pixels: ArrayView3<f32>) -> Array3<f32> {
    pixels.slice(s![.., ..;-1, ..]).to_owned()
}

/// Rotates about the image center by `angle_deg` (counter-clockwise on
/// screen), bilinear sampling, out-of-range samples clamped to the border.
pub fn rotate(pixels: ArrayView3<f32>, angle_deg: f64) -> Array3<f32> {
    if angle_deg == 0.0 {
        return pixels.to_owned();
    }
    let (h, w, c) = pixels.dim();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // inverse map: rotate the output offset back by -angle (y points down)
            let sx = cos * dx - sin * dy + cx - 0.5;
            let sy = sin * dx + cos * dy + cy - 0.5;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let clampx = |v: f64| (v.max(0.0) as usize).min(w - 1);
            let clampy = |v: f64| (v.max(0.0) as usize).min(h - 1);
            let (xa, xb) = (clampx(x0), clampx(x0 + 1.0));
            let (ya, yb) = (clampy(y0), clampy(y0 + 1.0));
            for ch in 0..c {
                let top = pixels[[ya, xa, ch]] * (1.0 - fx) + pixels[[ya, xb, ch]] * fx;
                let bot = pixels[[yb, xa, ch]] * (1.0 - fx) + pixels[[yb, xb, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// All 110 variants with provenance, ordered crop-major, then angle, then
/// `[unflipped, flipped]`.
pub fn augment_with_provenance(image: &LabeledImage, crop_size: usize) -> Result<Vec<AugmentedImage>> {
    let (h, w, _) = image.pixels.dim();
    if crop_size == 0 || h < crop_size || w < crop_size {
        return Err(invalid(format!("image {h}x{w} smaller than crop window {crop_size}")));
    }
    let mut out = Vec::with_capacity(CropOrigin::ALL.len() * ROTATION_ANGLES.len() * 2);
    for origin in CropOrigin::ALL {
        let patch = crop(image.pixels.view(), origin, crop_size);
        for angle in ROTATION_ANGLES {
            let rotated = rotate(patch.view(), angle as f64);
            let flipped = hflip(rotated.view());
            for (pixels, is_flipped) in [(rotated, false), (flipped, true)] {
                out.push(AugmentedImage {
                    image: LabeledImage { pixels, ..image.clone() },
                    crop: origin,
                    angle_deg: angle,
                    flipped: is_flipped,
                });
            }
        }
    }
    Ok(out)
}

/// The 110 augmented copies of `image`, labels unchanged.
pub fn augment(image: &LabeledImage, crop_size: usize) -> Result<Vec<LabeledImage>> {
    Ok(augment_with_provenance(image, crop_size)?.into_iter().map(|a| a.image).collect())
}

/// The unaugmented evaluation view: a single center crop.
pub fn center_crop(image: &LabeledImage, crop_size: usize) -> Result<LabeledImage> {
    let (h, w, _) = image.pixels.dim();
    if crop_size == 0 || h < crop_size || w < crop_size {
        return Err(invalid(format!("image {h}x{w} smaller than crop window {crop_size}")));
    }
    Ok(LabeledImage { pixels: crop(image.pixels.view(), CropOrigin::Center, crop_size), ..image.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labeled(pixels: Array3<f32>) -> LabeledImage {
        LabeledImage { pixels, expr_label: 2, identity_label: 1, subject_id: "s".into() }
    }

    fn gradient(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| ((y * 7 + x * 3 + c * 5) % 17) as f32 / 8.5 - 1.0)
    }

    #[test]
    fn exactly_110_outputs_with_labels_kept() {
        let out = augment(&labeled(gradient(20, 22)), 16).unwrap();
        assert_eq!(out.len(), 110);
        assert!(out.iter().all(|o| o.pixels.dim() == (16, 16, 3) && o.expr_label == 2 && o.identity_label == 1));
    }

    #[test]
    fn angle_set() {
        let mut angles: Vec<i32> = ROTATION_ANGLES.to_vec();
        angles.sort_unstable();
        assert_eq!(angles, vec![-15, -12, -9, -6, -3, 0, 3, 6, 9, 12, 15]);
    }

    #[test]
    fn too_small_is_an_error() {
        assert!(augment(&labeled(gradient(10, 20)), 12).is_err());
        assert!(center_crop(&labeled(gradient(10, 20)), 12).is_err());
    }

    #[test]
    fn symmetric_input_flip_matches_mirrored_variant() {
        // A left-right symmetric image: flip(crop c at angle a) equals the
        // unflipped crop mirror(c) at angle -a.
        let base = gradient(20, 10);
        let mut sym = Array3::zeros((20, 20, 3));
        sym.slice_mut(s![.., ..10, ..]).assign(&base);
        sym.slice_mut(s![.., 10.., ..]).assign(&base.slice(s![.., ..;-1, ..]));
        let out = augment_with_provenance(&labeled(sym), 16).unwrap();
        for f in out.iter().filter(|a| a.flipped) {
            let partner = out
                .iter()
                .find(|a| !a.flipped && a.crop == f.crop.mirrored() && a.angle_deg == -f.angle_deg)
                .unwrap();
            let diff = (&f.image.pixels - &partner.image.pixels).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
            assert!(diff < 1e-5, "crop {:?} angle {} diff {diff}", f.crop, f.angle_deg);
        }
    }

    #[test]
    fn rotation_of_constant_image_is_constant() {
        let img = Array3::from_elem((9, 9, 1), 0.3f32);
        let r = rotate(img.view(), 12.0);
        assert!(r.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn quarter_turn_moves_right_edge_to_top() {
        // counter-clockwise on screen: what was on the right ends at the top
        let mut img = Array3::zeros((8, 8, 1));
        img.slice_mut(s![.., 7, ..]).fill(1.0f32);
        let r = rotate(img.view(), 90.0);
        assert!(r.slice(s![0, 1..7, 0]).iter().all(|&v| (v - 1.0).abs() < 1e-5));
        assert!(r.slice(s![7, .., 0]).iter().all(|&v| v.abs() < 1e-5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn pure_and_order_stable(h in 8usize..20, w in 8usize..20, seed in 0u32..1000) {
            let crop = 8;
            let px = Array3::from_shape_fn((h, w, 2), |(y, x, c)| {
                (((y * 31 + x * 17 + c * 7) as u32 ^ seed) % 200) as f32 / 100.0 - 1.0
            });
            let img = labeled(px);
            let a = augment_with_provenance(&img, crop).unwrap();
            let b = augment_with_provenance(&img, crop).unwrap();
            prop_assert_eq!(a.len(), 110);
            prop_assert_eq!(&a, &b);
            for pair in a.chunks(2) {
                prop_assert!(!pair[0].flipped && pair[1].flipped);
                prop_assert_eq!(&hflip(pair[0].image.pixels.view()), &pair[1].image.pixels);
            }
        }
    }
}
