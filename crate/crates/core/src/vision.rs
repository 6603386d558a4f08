//! Images, patch grids, masked-patch corruption and the two training-time
//! augmentations (description-aware flip, random resize-crop).

use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::SegLabelMap;
use crate::synth::SampleRecord;
use crate::tensor::Tensor;

pub const PATCH_MASK_RATIO: f64 = 0.15;
pub const MASK_FILL: f64 = 0.0;
pub const FLIP_PROBABILITY: f64 = 0.5;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);

/// RGB image, channel-interleaved rows, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape("image", &[height, width, 3], &[data.len()]));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.set_pixel(r, c, self.pixel(r, self.width - 1 - c));
            }
        }
        out
    }
}

/// Image cut into non-overlapping P×P patches in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    /// [rows·cols, P·P·3], each patch flattened row by row, RGB interleaved.
    pub patches: Tensor,
    pub mask: Vec<bool>,
    /// [rows·cols, 3] per-channel mean of each patch before masking.
    pub mean_colors: Tensor,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn position(&self, k: usize) -> (usize, usize) {
        (k / self.cols, k % self.cols)
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Inverse of [`patchify`] (masked patches come back as the fill value).
    pub fn reassemble(&self) -> Image {
        let p = self.patch;
        let (h, w) = (self.rows * p, self.cols * p);
        let mut img = Image::filled(h, w, [0.0; 3]);
        for k in 0..self.len() {
            let (gr, gc) = self.position(k);
            let v = self.patches.row(k);
            for y in 0..p {
                for x in 0..p {
                    let o = (y * p + x) * 3;
                    img.set_pixel(gr * p + y, gc * p + x, [v[o], v[o + 1], v[o + 2]]);
                }
            }
        }
        img
    }
}

pub fn patchify(img: &Image, patch: usize) -> Result<PatchGrid> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(Error::Geometry {
            height: img.height,
            width: img.width,
            divisor: patch,
        });
    }
    let (rows, cols) = (img.height / patch, img.width / patch);
    let n = rows * cols;
    let dim = patch * patch * 3;
    let mut patches = Vec::with_capacity(n * dim);
    let mut means = Vec::with_capacity(n * 3);
    let inv = 1.0 / (patch * patch) as f64;
    for gr in 0..rows {
        for gc in 0..cols {
            let mut sum = [0.0; 3];
            for y in 0..patch {
                let start = ((gr * patch + y) * img.width + gc * patch) * 3;
                let line = &img.data[start..start + patch * 3];
                patches.extend_from_slice(line);
                for px in line.chunks(3) {
                    sum[0] += px[0];
                    sum[1] += px[1];
                    sum[2] += px[2];
                }
            }
            means.extend(sum.iter().map(|s| s * inv));
        }
    }
    Ok(PatchGrid {
        rows,
        cols,
        patch,
        patches: Tensor::new(vec![n, dim], patches)?,
        mask: vec![false; n],
        mean_colors: Tensor::new(vec![n, 3], means)?,
    })
}

/// Independently mask each patch with probability `ratio`, zero-filling its
/// vector. Mean-colour targets are left untouched.
pub fn mask_patches<R: Rng + ?Sized>(grid: &PatchGrid, ratio: f64, rng: &mut R) -> Result<PatchGrid> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("patch mask ratio {ratio} outside [0, 1]")));
    }
    let mut out = grid.clone();
    let dim = grid.patches.last_dim();
    for k in 0..grid.len() {
        if rng.gen::<f64>() < ratio {
            out.mask[k] = true;
            out.patches.data_mut()[k * dim..(k + 1) * dim].fill(MASK_FILL);
        }
    }
    Ok(out)
}

/// Words whose meaning a horizontal mirror would invert.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordSet(HashSet<String>);

impl Default for KeywordSet {
    fn default() -> Self {
        Self::new(["left", "right", "above", "below", "top", "bottom"])
    }
}

impl KeywordSet {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(words.into_iter().map(|w| w.as_ref().to_lowercase()).collect())
    }

    pub fn matches(&self, caption: &str) -> bool {
        caption
            .split_whitespace()
            .any(|w| self.0.contains(&w.to_lowercase()))
    }
}

/// Flip decision: never for captions with a compositional keyword, otherwise
/// a fair coin.
pub fn should_flip<R: Rng + ?Sized>(caption: &str, keywords: &KeywordSet, rng: &mut R) -> bool {
    !keywords.matches(caption) && rng.gen::<f64>() < FLIP_PROBABILITY
}

pub fn flip_record(sample: &SampleRecord) -> SampleRecord {
    let mut out = sample.clone();
    out.image = sample.image.flip_horizontal();
    out.seg = sample.seg.as_ref().map(SegLabelMap::flip_horizontal);
    out
}

/// Mirror image and segmentation map together with probability 0.5 unless
/// the caption contains a keyword. Class-only pseudo-labels are unchanged.
pub fn flip_if_safe<R: Rng + ?Sized>(sample: &SampleRecord, keywords: &KeywordSet, rng: &mut R) -> SampleRecord {
    if should_flip(&sample.caption, keywords, rng) {
        flip_record(sample)
    } else {
        sample.clone()
    }
}

/// Geometry of one resize-crop: the source is resized to
/// `resized_h × resized_w`, then an `out_h × out_w` window at the offset is
/// kept.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    pub resized_h: usize,
    pub resized_w: usize,
    pub offset_y: usize,
    pub offset_x: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl CropGeometry {
    /// Scale is clamped up to the smallest value whose resize still covers
    /// the output window.
    pub fn new(
        src_h: usize,
        src_w: usize,
        out_h: usize,
        out_w: usize,
        scale: f64,
        offset_frac: (f64, f64),
    ) -> Self {
        let min_scale = (out_h as f64 / src_h as f64).max(out_w as f64 / src_w as f64);
        let s = scale.max(min_scale);
        let resized_h = ((src_h as f64 * s).round() as usize).max(out_h);
        let resized_w = ((src_w as f64 * s).round() as usize).max(out_w);
        let span = |extra: usize, f: f64| ((extra + 1) as f64 * f).floor().min(extra as f64) as usize;
        Self {
            resized_h,
            resized_w,
            offset_y: span(resized_h - out_h, offset_frac.0),
            offset_x: span(resized_w - out_w, offset_frac.1),
            out_h,
            out_w,
        }
    }

    /// Nearest-neighbour source coordinate of output pixel (r, c).
    #[inline]
    pub fn source(&self, r: usize, c: usize, src_h: usize, src_w: usize) -> (usize, usize) {
        let y = r + self.offset_y;
        let x = c + self.offset_x;
        let sy = ((2 * y + 1) * src_h) / (2 * self.resized_h);
        let sx = ((2 * x + 1) * src_w) / (2 * self.resized_w);
        (sy.min(src_h - 1), sx.min(src_w - 1))
    }
}

pub fn resize_crop_with(
    img: &Image,
    seg: Option<&SegLabelMap>,
    geom: &CropGeometry,
) -> (Image, Option<SegLabelMap>) {
    let mut out = Image::filled(geom.out_h, geom.out_w, [0.0; 3]);
    let mut labels = seg.map(|_| SegLabelMap::filled(geom.out_h, geom.out_w, 0));
    for r in 0..geom.out_h {
        for c in 0..geom.out_w {
            let (sy, sx) = geom.source(r, c, img.height, img.width);
            out.set_pixel(r, c, img.pixel(sy, sx));
            if let (Some(dst), Some(src)) = (labels.as_mut(), seg) {
                dst.set(r, c, src.get(sy, sx));
            }
        }
    }
    (out, labels)
}

/// Random scale in [0.8, 1.2] and a uniform crop offset; image and label map
/// share the same geometry.
pub fn resize_crop<R: Rng + ?Sized>(
    img: &Image,
    seg: Option<&SegLabelMap>,
    out_h: usize,
    out_w: usize,
    rng: &mut R,
) -> (Image, Option<SegLabelMap>) {
    let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    let frac = (rng.gen::<f64>(), rng.gen::<f64>());
    let geom = CropGeometry::new(img.height, img.width, out_h, out_w, scale, frac);
    resize_crop_with(img, seg, &geom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                data.extend([r as f64 / h as f64, c as f64 / w as f64, ((r * 7 + c * 3) % 11) as f64 / 10.0]);
            }
        }
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn patch_geometry() {
        let g = patchify(&gradient_image(8, 8), 4).unwrap();
        assert_eq!((g.rows, g.cols), (2, 2));
        assert_eq!(g.patches.shape(), &[4, 48]);
        let g = patchify(&gradient_image(96, 96), 8).unwrap();
        assert_eq!((g.rows, g.cols), (12, 12));
        assert!(!g.mask.iter().any(|&m| m));
    }

    #[test]
    fn indivisible_geometry_is_an_error() {
        let err = patchify(&gradient_image(10, 8), 4).unwrap_err();
        assert!(matches!(err, Error::Geometry { height: 10, width: 8, divisor: 4 }));
    }

    #[test]
    fn constant_image_means() {
        let g = patchify(&Image::filled(16, 16, [0.5; 3]), 8).unwrap();
        assert!(g.mean_colors.data().iter().all(|&m| m == 0.5));
    }

    #[test]
    fn reassembly_is_exact() {
        let img = gradient_image(24, 16);
        assert_eq!(patchify(&img, 8).unwrap().reassemble(), img);
    }

    #[test]
    fn mask_boundaries() {
        let g = patchify(&gradient_image(16, 16), 4).unwrap();
        let none = mask_patches(&g, 0.0, &mut seed::rng(0, &[])).unwrap();
        assert_eq!(none, g);
        let all = mask_patches(&g, 1.0, &mut seed::rng(0, &[])).unwrap();
        assert!(all.mask.iter().all(|&m| m));
        assert!(all.patches.data().iter().all(|&v| v == MASK_FILL));
        assert_eq!(all.mean_colors, g.mean_colors);
        assert!(mask_patches(&g, 1.5, &mut seed::rng(0, &[])).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let img = gradient_image(6, 10);
        assert_ne!(img.flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn keyword_matching_is_case_insensitive() {
        let k = KeywordSet::default();
        assert!(k.matches("a red ball LEFT of a cube"));
        assert!(!k.matches("a red ball and a leftover cube"));
    }

    #[test]
    fn identity_crop() {
        let img = gradient_image(16, 16);
        let geom = CropGeometry::new(16, 16, 16, 16, 1.0, (0.0, 0.0));
        assert_eq!(resize_crop_with(&img, None, &geom).0, img);
    }

    #[test]
    fn shrinking_scale_is_clamped() {
        let geom = CropGeometry::new(96, 96, 96, 96, 0.8, (0.99, 0.99));
        assert_eq!((geom.resized_h, geom.resized_w), (96, 96));
        assert_eq!((geom.offset_y, geom.offset_x), (0, 0));
    }
}
