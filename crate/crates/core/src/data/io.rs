//! PNG conversion, dataset directories and image grids.
//!
//! Two directory forms are read:
//! * an index file `labels.csv` (`file,subject_id,identity_label,expr_label`)
//!   listing every image, as written by [`write_dataset_dir`];
//! * the raw layout `<root>/<subject_id>/<expr_label>/<frame>.png`, where each
//!   expression directory is one sequence and only its last
//!   `frames_per_sequence` frames (by file name) are kept.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, Rgb, RgbImage};
use ndarray::Array3;

use super::{Dataset, LabeledImage};
use crate::error::{invalid, Error, Result};

pub const INDEX_FILE: &str = "labels.csv";

fn to_unit(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn pixels_to_rgb(pixels: &Array3<f32>) -> RgbImage {
    let (h, w, c) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| to_unit(pixels[[y as usize, x as usize, ch.min(c - 1)]]);
        Rgb([at(0), at(1), at(2)])
    })
}

pub fn rgb_to_pixels(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
    })
}

/// Reads an 8-bit image as RGB in `[-1, 1]`, optionally resized to a square.
pub fn load_png(path: &Path, resize: Option<usize>) -> Result<Array3<f32>> {
    let mut img = image::open(path)?.to_rgb8();
    if let Some(s) = resize {
        if img.dimensions() != (s as u32, s as u32) {
            img = image::imageops::resize(&img, s as u32, s as u32, FilterType::Triangle);
        }
    }
    Ok(rgb_to_pixels(&img))
}

pub fn save_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    pixels_to_rgb(pixels).save(path)?;
    Ok(())
}

/// Tiles equally sized images row by row with a one-pixel gutter.
pub fn save_grid(path: &Path, rows: &[Vec<Array3<f32>>]) -> Result<()> {
    let first = rows.iter().flatten().next().ok_or_else(|| invalid("empty image grid"))?;
    let (h, w, _) = first.dim();
    let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gw = (ncols * (w + 1) + 1) as u32;
    let gh = (rows.len() * (h + 1) + 1) as u32;
    let mut canvas = RgbImage::from_pixel(gw, gh, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let img = pixels_to_rgb(tile);
            image::imageops::replace(&mut canvas, &img, (c * (w + 1) + 1) as i64, (r * (h + 1) + 1) as i64);
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    canvas.save(path)?;
    Ok(())
}

/// Options for reading a dataset directory.
#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Frames kept from the end of each sequence; 0 keeps all.
    pub frames_per_sequence: usize,
    /// Square side images are resized to.
    pub resize: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { frames_per_sequence: 3, resize: None }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn load_directory(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    if root.join(INDEX_FILE).is_file() {
        return load_indexed(root, opts);
    }
    let subjects: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if subjects.is_empty() {
        return Err(invalid(format!("no subject directories under {}", root.display())));
    }
    let mut images = Vec::new();
    let mut n_expr = 0;
    for (identity, subject_dir) in subjects.iter().enumerate() {
        let subject_id = subject_dir.file_name().unwrap().to_string_lossy().into_owned();
        for expr_dir in sorted_entries(subject_dir)?.into_iter().filter(|p| p.is_dir()) {
            let name = expr_dir.file_name().unwrap().to_string_lossy().into_owned();
            let expr: usize = name
                .parse()
                .map_err(|_| invalid(format!("expression directory `{name}` is not an integer label")))?;
            n_expr = n_expr.max(expr + 1);
            let frames: Vec<PathBuf> = sorted_entries(&expr_dir)?.into_iter().filter(|p| is_png(p)).collect();
            let keep = if opts.frames_per_sequence == 0 {
                frames.len()
            } else {
                opts.frames_per_sequence.min(frames.len())
            };
            for frame in &frames[frames.len() - keep..] {
                images.push(LabeledImage {
                    pixels: load_png(frame, opts.resize)?,
                    expr_label: expr,
                    identity_label: identity,
                    subject_id: subject_id.clone(),
                });
            }
        }
    }
    Dataset::new(images, n_expr, subjects.len())
}

fn load_indexed(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let text = fs::read_to_string(root.join(INDEX_FILE))?;
    let mut images = Vec::new();
    let (mut n_expr, mut n_id) = (0, 0);
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("{INDEX_FILE}:{}: malformed row", lineno + 1));
        if fields.len() != 4 {
            return Err(bad());
        }
        let identity: usize = fields[2].parse().map_err(|_| bad())?;
        let expr: usize = fields[3].parse().map_err(|_| bad())?;
        n_expr = n_expr.max(expr + 1);
        n_id = n_id.max(identity + 1);
        images.push(LabeledImage {
            pixels: load_png(&root.join(fields[0]), opts.resize)?,
            expr_label: expr,
            identity_label: identity,
            subject_id: fields[1].to_string(),
        });
    }
    Dataset::new(images, n_expr, n_id)
}

/// Writes every image as `<subject>/<expr>/<index>.png` plus the index file.
/// Returns the image paths written.
pub fn write_dataset_dir(root: &Path, images: &[LabeledImage]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(root)?;
    let mut index = String::from("file,subject_id,identity_label,expr_label\n");
    let mut written = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let rel = format!("{}/{}/{i:05}.png", img.subject_id, img.expr_label);
        let path = root.join(&rel);
        save_png(&path, &img.pixels)?;
        index.push_str(&format!("{rel},{},{},{}\n", img.subject_id, img.identity_label, img.expr_label));
        written.push(path);
    }
    fs::write(root.join(INDEX_FILE), index)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_synthetic_dataset;

    #[test]
    fn indexed_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let images = generate_synthetic_dataset(2, 2, 2, 5).unwrap();
        let paths = write_dataset_dir(dir.path(), &images).unwrap();
        assert_eq!(paths.len(), 8);
        let ds = load_directory(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!((ds.n_expressions, ds.n_identities), (2, 2));
        for (a, b) in images.iter().zip(&ds.images) {
            assert_eq!((a.expr_label, a.identity_label, &a.subject_id), (b.expr_label, b.identity_label, &b.subject_id));
            // 8-bit quantization
            let err = (&a.pixels - &b.pixels).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
            assert!(err <= 1.0 / 127.5 + 1e-6);
        }
    }

    #[test]
    fn raw_layout_keeps_last_frames() {
        let dir = tempfile::tempdir().unwrap();
        let px = Array3::from_elem((6, 6, 3), 0.0f32);
        for subject in ["alice", "bob"] {
            for expr in [0, 2] {
                for frame in 0..5 {
                    let mut p = px.clone();
                    p[[0, 0, 0]] = frame as f32 / 5.0;
                    save_png(&dir.path().join(format!("{subject}/{expr}/f{frame:02}.png")), &p).unwrap();
                }
            }
        }
        let ds = load_directory(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 2 * 2 * 3);
        assert_eq!(ds.n_expressions, 3);
        assert_eq!(ds.images[0].subject_id, "alice");
        assert_eq!(ds.images[3].identity_label, 0);
        assert_eq!(ds.images[6].identity_label, 1);
        // frames 2, 3, 4 survive
        let first = (ds.images[0].pixels[[0, 0, 0]] + 1.0) * 127.5;
        assert!((first - (0.4 + 1.0) * 127.5).abs() <= 1.0);
    }

    #[test]
    fn grid_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let tile = Array3::from_elem((4, 5, 3), 0.5f32);
        let path = dir.path().join("g.png");
        save_grid(&path, &[vec![tile.clone(), tile.clone()], vec![tile]]).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (2 * 6 + 1, 2 * 5 + 1));
    }
}
