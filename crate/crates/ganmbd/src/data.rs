//! Dataset loading, pixel normalization, the nearest-neighbor resize
//! pipeline for refiner pairs, and centroid/count matching of translated
//! images against ground-truth annotations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::one_hot;
use crate::tensor::Tensor;

/// 8-bit value -> [-1, 1]: 0 maps to -1.0, 255 maps to 1.0.
pub fn normalize_pixel(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// [-1, 1] -> 8-bit with clamping; exact inverse of [`normalize_pixel`].
pub fn denormalize_pixel(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Labeled image collection; images are [3, side, side] tensors in [-1, 1].
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub image_side: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Stack the images at `indices` into one [N, 3, H, W] batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        if indices.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let side = self.image_side;
        let per = 3 * side * side;
        let mut out = Tensor::zeros(vec![indices.len(), 3, side, side]);
        for (slot, &i) in indices.iter().enumerate() {
            out.data_mut()[slot * per..(slot + 1) * per].copy_from_slice(self.images[i].data());
        }
        Ok(out)
    }

    /// One-hot labels for the images at `indices`.
    pub fn label_batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        one_hot(&labels, self.num_classes())
    }
}

/// Where and how to load a directory-per-class dataset.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub root: PathBuf,
    /// Ordered class names; order defines label indices. Empty = discover
    /// subdirectories sorted by name.
    pub class_names: Vec<String>,
    pub image_side: usize,
    pub train_fraction: f64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::config("train_fraction must lie in [0, 1]"));
        }
        if self.image_side == 0 {
            return Err(Error::config("image_side must be positive"));
        }
        let mut names = self.class_names.clone();
        names.sort();
        names.dedup();
        if names.len() != self.class_names.len() {
            return Err(Error::config("class names must be unique"));
        }
        Ok(())
    }
}

fn decode_png(path: &Path, side: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(vec![1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                t.data_mut()[c * h * w + y * w + x] = normalize_pixel(p.0[c]);
            }
        }
    }
    let resized = if h == side && w == side {
        t
    } else {
        if h != w {
            return Err(Error::usage(format!("{}: only square images are supported", path.display())));
        }
        kernels::nearest_resize_forward(&t, side)
    };
    resized.reshaped(vec![3, side, side])
}

/// Load a single PNG as a normalized [3, side, side] tensor.
pub fn load_image_png(path: &Path, side: usize) -> Result<Tensor<f32>> {
    decode_png(path, side)
}

/// Write a [3, H, W] tensor in [-1, 1] as an RGB PNG.
pub fn save_image_png(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::usage(format!("save_image_png expects [3,H,W], got {:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                denormalize_pixel(img.data()[y * w + x]),
                denormalize_pixel(img.data()[h * w + y * w + x]),
                denormalize_pixel(img.data()[2 * h * w + y * w + x]),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path)?;
    Ok(())
}

/// Arrange [N, 3, H, W] images into a row-major grid and save as one PNG.
pub fn save_image_grid(images: &Tensor<f32>, cols: usize, path: &Path) -> Result<()> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 || cols == 0 {
        return Err(Error::usage("save_image_grid expects [N,3,H,W] and cols > 0"));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let rows = n.div_ceil(cols);
    let mut grid = Tensor::full(vec![3, rows * h, cols * w], -1.0f32);
    let gw = cols * w;
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        for ch in 0..3 {
            for y in 0..h {
                let src = i * 3 * h * w + ch * h * w + y * w;
                let dst = ch * rows * h * gw + (r * h + y) * gw + c * w;
                let (s, d) = (src..src + w, dst..dst + w);
                let data = images.data()[s].to_vec();
                grid.data_mut()[d].copy_from_slice(&data);
            }
        }
    }
    save_image_png(&grid, path)
}

/// Load root/class/*.png into normalized tensors with a deterministic
/// per-class train/test split. Unreadable images are skipped with a warning.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let class_names: Vec<String> = if spec.class_names.is_empty() {
        let mut names: Vec<String> = fs::read_dir(&spec.root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        names
    } else {
        spec.class_names.clone()
    };
    if class_names.len() < 2 {
        return Err(Error::config("dataset needs at least 2 class directories"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Dataset {
        images: vec![], labels: vec![], class_names: class_names.clone(), image_side: spec.image_side,
    };
    let mut test = Dataset {
        images: vec![], labels: vec![], class_names: class_names.clone(), image_side: spec.image_side,
    };
    for (label, name) in class_names.iter().enumerate() {
        let dir = spec.root.join(name);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|_| Error::config(format!("class directory {} is missing", dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::config(format!("class directory {} is empty", dir.display())));
        }
        let mut images = Vec::new();
        for f in files {
            match decode_png(&f, spec.image_side) {
                Ok(t) => images.push(t),
                Err(e) => eprintln!("warning: skipping {}: {e}", f.display()),
            }
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let n_train = (images.len() as f64 * spec.train_fraction).round() as usize;
        for (pos, &i) in order.iter().enumerate() {
            let target = if pos < n_train { &mut train } else { &mut test };
            target.images.push(images[i].clone());
            target.labels.push(label);
        }
    }
    Ok((train, test))
}

/// Nearest-neighbor resize of a [3,H,W] or [N,3,H,W] tensor to a square
/// `to_side`; src index = floor(dst * src_side / dst_side).
pub fn nearest_resize(img: &Tensor<f32>, to_side: usize) -> Result<Tensor<f32>> {
    match img.shape().len() {
        4 => Ok(kernels::nearest_resize_forward(img, to_side)),
        3 => {
            let shape = img.shape().to_vec();
            let t = img.clone().reshaped(vec![1, shape[0], shape[1], shape[2]])?;
            kernels::nearest_resize_forward(&t, to_side).reshaped(vec![shape[0], to_side, to_side])
        }
        _ => Err(Error::usage("nearest_resize expects a 3-d or 4-d tensor")),
    }
}

/// Degrade an image through the down/up nearest-neighbor pipeline.
pub fn block_degrade(img: &Tensor<f32>, low_side: usize) -> Result<Tensor<f32>> {
    let full = *img.shape().last().unwrap();
    let down = nearest_resize(img, low_side)?;
    nearest_resize(&down, full)
}

/// (degraded, original) pairs for refiner training.
pub fn make_refiner_pairs(dataset: &Dataset, low_side: usize) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    dataset
        .images
        .iter()
        .map(|img| Ok((block_degrade(img, low_side)?, img.clone())))
        .collect()
}

/// Foreground extraction rule for centroid matching.
#[derive(Clone, Copy, Debug)]
pub struct MaskRule {
    /// Background color in normalized units.
    pub background: [f32; 3],
    /// A pixel is foreground when any channel deviates more than this.
    pub threshold: f32,
    /// Connected components smaller than this are treated as speckle.
    pub min_area: usize,
}

impl Default for MaskRule {
    fn default() -> Self {
        MaskRule {
            background: [
                normalize_pixel(crate::synth::BACKGROUND_RGB[0]),
                normalize_pixel(crate::synth::BACKGROUND_RGB[1]),
                normalize_pixel(crate::synth::BACKGROUND_RGB[2]),
            ],
            threshold: 0.2,
            min_area: 6,
        }
    }
}

/// Result of matching a translated image against its input's annotation.
#[derive(Clone, Debug)]
pub struct CentroidReport {
    /// Distance from each annotated center to the nearest detected centroid.
    pub displacements: Vec<f64>,
    pub detected_count: usize,
    pub count_match: bool,
    pub foreground_empty: bool,
}

impl CentroidReport {
    pub fn median_displacement(&self) -> Option<f64> {
        if self.displacements.is_empty() {
            return None;
        }
        let mut d = self.displacements.clone();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(d[d.len() / 2])
    }
}

/// Connected components (4-connectivity) of the foreground mask; returns
/// (area, centroid) per component of at least `min_area` pixels.
fn components(mask: &[bool], side: usize, min_area: usize) -> Vec<(usize, (f64, f64))> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        stack.push(start);
        seen[start] = true;
        let (mut area, mut sx, mut sy) = (0usize, 0.0f64, 0.0f64);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / side, p % side);
            area += 1;
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            let mut push = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < side {
                push(p + 1);
            }
            if y > 0 {
                push(p - side);
            }
            if y + 1 < side {
                push(p + side);
            }
        }
        if area >= min_area {
            out.push((area, (sx / area as f64, sy / area as f64)));
        }
    }
    out
}

/// Foreground object centroids of a [3,S,S] image under `rule`, for images
/// without stored annotations.
pub fn detect_centroids(img: &Tensor<f32>, rule: &MaskRule) -> Result<Vec<(f64, f64)>> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::usage(format!("detect_centroids expects [3,S,S], got {:?}", shape)));
    }
    let side = shape[1];
    let hw = side * side;
    let mask: Vec<bool> = (0..hw)
        .map(|i| (0..3).any(|c| (img.data()[c * hw + i] - rule.background[c]).abs() > rule.threshold))
        .collect();
    Ok(components(&mask, side, rule.min_area).into_iter().map(|(_, c)| c).collect())
}

/// Compare a translated [3,H,W] image against the input's object annotation:
/// per-object centroid displacement and connected-component count match.
pub fn centroid_match(
    centers: &[(f64, f64)],
    translated: &Tensor<f32>,
    rule: &MaskRule,
) -> Result<CentroidReport> {
    let shape = translated.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::usage(format!("centroid_match expects [3,S,S], got {:?}", shape)));
    }
    let side = shape[1];
    let hw = side * side;
    let mask: Vec<bool> = (0..hw)
        .map(|i| {
            (0..3).any(|c| (translated.data()[c * hw + i] - rule.background[c]).abs() > rule.threshold)
        })
        .collect();
    let comps = components(&mask, side, rule.min_area);
    if comps.is_empty() {
        return Ok(CentroidReport {
            displacements: vec![],
            detected_count: 0,
            count_match: centers.is_empty(),
            foreground_empty: true,
        });
    }
    let displacements = centers
        .iter()
        .map(|&(cx, cy)| {
            comps
                .iter()
                .map(|&(_, (x, y))| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(CentroidReport {
        displacements,
        detected_count: comps.len(),
        count_match: comps.len() == centers.len(),
        foreground_empty: false,
    })
}
