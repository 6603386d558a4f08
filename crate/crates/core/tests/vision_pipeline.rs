mod common;

use common::{flip_stats, patch_mask_rate, records};
use vlpix::losses::SegLabelMap;
use vlpix::seed;
use vlpix::vision::{
    flip_if_safe, flip_record, mask_patches, patchify, resize_crop, resize_crop_with, CropGeometry, Image, KeywordSet,
    MASK_FILL,
};

/// Pixel values encode their own coordinates so resampling can be traced.
fn coordinate_image(h: usize, w: usize) -> Image {
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            data.extend([r as f64 / h as f64, c as f64 / w as f64, 0.5]);
        }
    }
    Image::new(h, w, data).unwrap()
}

fn coordinate_labels(h: usize, w: usize) -> SegLabelMap {
    let data = (0..h * w).map(|k| ((k / w) * 7 + k % w) as u8 % 251).collect();
    SegLabelMap::new(h, w, data).unwrap()
}

#[test]
fn paper_geometry() {
    let grid = patchify(&Image::filled(96, 96, [0.2; 3]), 8).unwrap();
    assert_eq!((grid.rows, grid.cols), (12, 12));
    assert_eq!(grid.patches.shape(), &[144, 192]);
    let err = patchify(&Image::filled(96, 90, [0.2; 3]), 8).unwrap_err().to_string();
    assert!(err.contains("96") && err.contains("90") && err.contains('8'), "{err}");
}

#[test]
fn mask_boundaries_keep_targets() {
    let img = records(1, 1, 96).remove(0).image;
    let grid = patchify(&img, 8).unwrap();
    let mut rng = seed::rng(1, &[]);
    let none = mask_patches(&grid, 0.0, &mut rng).unwrap();
    assert_eq!(none, grid);
    let all = mask_patches(&grid, 1.0, &mut rng).unwrap();
    assert_eq!(all.masked_count(), 144);
    assert!(all.patches.data().iter().all(|&v| v == MASK_FILL));
    assert_eq!(all.mean_colors, grid.mean_colors);
    assert!(mask_patches(&grid, 1.5, &mut rng).is_err());
}

#[test]
fn patch_mask_rate_is_fifteen_percent() {
    let rate = patch_mask_rate(10_000, 2);
    assert!((0.14..=0.16).contains(&rate), "{rate}");
}

#[test]
fn flips_respect_keywords() {
    let s = flip_stats(10_000, 3);
    assert_eq!(s.keyword_flips, 0);
    let rate = s.plain_flips as f64 / s.plain_draws as f64;
    assert!((0.47..=0.53).contains(&rate), "{rate}");

    let mut r = records(4, 1, 16).remove(0);
    r.caption = "a red ball left of a blue cube".into();
    for i in 0..1000 {
        let out = flip_if_safe(&r, &KeywordSet::default(), &mut seed::rng(4, &[i]));
        assert_eq!(out, r);
    }
    assert_eq!(flip_record(&flip_record(&r)), r);
}

#[test]
fn crop_shares_geometry_between_image_and_labels() {
    let (img, seg) = (coordinate_image(40, 40), coordinate_labels(40, 40));
    for i in 0..200 {
        let mut rng = seed::rng(5, &[i]);
        let (out, labels) = resize_crop(&img, Some(&seg), 32, 32, &mut rng);
        let labels = labels.unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let [y, x, _] = out.pixel(r, c);
                let (sy, sx) = ((y * 40.0).round() as usize, (x * 40.0).round() as usize);
                assert_eq!(labels.get(r, c), seg.get(sy, sx));
            }
        }
    }
}

#[test]
fn identity_crop_and_clamped_bounds() {
    let img = coordinate_image(96, 96);
    let geom = CropGeometry::new(96, 96, 96, 96, 1.0, (0.0, 0.0));
    assert_eq!(resize_crop_with(&img, None, &geom).0, img);

    let geom = CropGeometry::new(96, 96, 96, 96, 0.8, (0.5, 0.5));
    assert_eq!((geom.resized_h, geom.resized_w), (96, 96));
    for i in 0..1000 {
        let mut rng = seed::rng(6, &[i]);
        let (out, _) = resize_crop(&img, None, 96, 96, &mut rng);
        assert_eq!((out.height(), out.width()), (96, 96));
    }
    for k in 0..1000u64 {
        let f = k as f64 / 1000.0;
        let geom = CropGeometry::new(96, 96, 96, 96, 0.8 + 0.4 * f, (f, 1.0 - f));
        assert!(geom.offset_y + 96 <= geom.resized_h && geom.offset_x + 96 <= geom.resized_w);
        let (sy, sx) = geom.source(95, 95, 96, 96);
        assert!(sy < 96 && sx < 96);
    }
}

#[test]
fn targets_follow_augmentation() {
    let r = records(7, 1, 96).remove(0);
    let (img, _) = resize_crop(&r.image, None, 96, 96, &mut seed::rng(7, &[]));
    let grid = patchify(&img, 8).unwrap();
    let again = patchify(&grid.reassemble(), 8).unwrap();
    assert_eq!(again.mean_colors, grid.mean_colors);
    assert_eq!(grid.reassemble(), img);
}
