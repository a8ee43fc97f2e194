//! Score-map geometry and label-map I/O: patch grids to pixel grids, score
//! stacks to label maps, label maps to PNG files and overlays.

use std::path::Path;

use image::RgbImage;
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Dimension};

use crate::error::{Error, Result};
use crate::real::Real;

/// Pixels with this value in a ground-truth mask are excluded from scoring.
pub const IGNORE_INDEX: u8 = 255;

/// A dense label image plus the names behind the indices. Index 0 is always
/// background; foreground classes are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub labels: Array2<u8>,
    pub class_names: Vec<String>,
}

/// Lay a flat patch vector back onto its `(rows, cols)` grid.
pub fn reshape_to_grid<T: Real>(
    map: &ArrayView1<'_, T>,
    grid: (usize, usize),
) -> Result<Array2<T>> {
    if grid.0 * grid.1 != map.len() {
        return Err(Error::ShapeMismatch(format!(
            "cannot reshape {} patches to a {}x{} grid",
            map.len(),
            grid.0,
            grid.1
        )));
    }
    Ok(Array2::from_shape_vec(grid, map.to_vec()).expect("length checked above"))
}

/// Inverse of [`reshape_to_grid`].
pub fn flatten_grid<T: Real>(grid: &ArrayView2<'_, T>) -> Array1<T> {
    Array1::from_iter(grid.iter().copied())
}

/// Bilinear upsampling with pixel-center alignment: output pixel centers map
/// to `(i + 0.5) * src/dst - 0.5` in source coordinates, clamped at the
/// border. Sampling back at the same size reproduces the input exactly.
pub fn upsample_bilinear<T: Real>(
    grid: &ArrayView2<'_, T>,
    out_h: usize,
    out_w: usize,
) -> Result<Array2<T>> {
    let (src_h, src_w) = grid.dim();
    if src_h == 0 || src_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "bilinear resize between empty sizes {src_h}x{src_w} and {out_h}x{out_w}"
        )));
    }

    // Precompute per-axis source positions and weights in f64, then narrow.
    let axis_coords = |src: usize, dst: usize| -> Vec<(usize, usize, T)> {
        (0..dst)
            .map(|i| {
                let pos = (i as f64 + 0.5) * (src as f64 / dst as f64) - 0.5;
                let pos = pos.clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, T::of(pos - lo as f64))
            })
            .collect()
    };
    let ys = axis_coords(src_h, out_h);
    let xs = axis_coords(src_w, out_w);

    let mut out = Array2::zeros((out_h, out_w));
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = grid[[y0, x0]] * (T::one() - fx) + grid[[y0, x1]] * fx;
            let bottom = grid[[y1, x0]] * (T::one() - fx) + grid[[y1, x1]] * fx;
            out[[y, x]] = top * (T::one() - fy) + bottom * fy;
        }
    }
    Ok(out)
}

/// Rescale values to `[0, 1]` by min-max. A constant map has no contrast to
/// stretch and comes back as all 0.5, keeping it neutral against the
/// labeling threshold.
pub fn normalize_minmax<T: Real, D: Dimension>(
    map: &ndarray::ArrayView<'_, T, D>,
) -> ndarray::Array<T, D> {
    let mut min = T::infinity();
    let mut max = T::neg_infinity();
    for &v in map.iter() {
        if v < min {
            min = v;
        }
        if v > max {
            max = v;
        }
    }
    if max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater) {
        return map.mapv(|_| T::of(0.5));
    }
    let range = max - min;
    map.mapv(|v| (v - min) / range)
}

/// Collapse a `[classes × H × W]` stack of per-class scores into labels:
/// argmax + 1 where the winning score clears `threshold`, else background.
/// Ties go to the lowest class index. `class_names` includes background at
/// index 0, so it is one longer than the stack.
pub fn assemble_labelmap<T: Real>(
    scores: &Array3<T>,
    threshold: T,
    class_names: &[String],
) -> Result<LabelMap> {
    let (l, h, w) = scores.dim();
    if l == 0 || h == 0 || w == 0 {
        return Err(Error::ShapeMismatch("empty score stack".into()));
    }
    if class_names.len() != l + 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} class names for {l} score channels (background must be included)",
            class_names.len()
        )));
    }
    if l + 1 > usize::from(IGNORE_INDEX) {
        return Err(Error::InvalidParam(format!(
            "{l} foreground classes exceed the 254 expressible in a u8 label map"
        )));
    }
    let mut labels = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = T::neg_infinity();
            let mut best_class = 0usize;
            for c in 0..l {
                let v = scores[[c, y, x]];
                if v > best {
                    best = v;
                    best_class = c;
                }
            }
            labels[[y, x]] = if best >= threshold {
                (best_class + 1) as u8
            } else {
                0
            };
        }
    }
    Ok(LabelMap {
        labels,
        class_names: class_names.to_vec(),
    })
}

/// Nearest-neighbor resize for label maps — labels are categories and must
/// never be interpolated. Source index per output pixel:
/// `floor((i + 0.5) * src/dst)`, computed in integers so results are
/// identical everywhere.
pub fn resize_labels_nearest(map: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let (src_h, src_w) = map.labels.dim();
    if src_h == 0 || src_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "nearest resize between empty sizes {src_h}x{src_w} and {out_h}x{out_w}"
        )));
    }
    let index = |i: usize, src: usize, dst: usize| -> usize {
        (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
    };
    let mut labels = Array2::zeros((out_h, out_w));
    for y in 0..out_h {
        let sy = index(y, src_h, out_h);
        for x in 0..out_w {
            labels[[y, x]] = map.labels[[sy, index(x, src_w, out_w)]];
        }
    }
    Ok(LabelMap {
        labels,
        class_names: map.class_names.clone(),
    })
}

/// Write a label map as an 8-bit grayscale PNG of raw indices.
pub fn write_label_png(path: &Path, labels: &Array2<u8>) -> Result<()> {
    let (h, w) = labels.dim();
    if h == 0 || w == 0 {
        return Err(Error::Image("refusing to write an empty label map".into()));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let data = labels
        .as_slice()
        .expect("freshly built arrays are contiguous");
    writer
        .write_image_data(data)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Read a label/mask PNG as raw indices.
///
/// Accepts 8-bit grayscale and 8-bit palette images. Palette images are NOT
/// expanded to RGB — annotation masks store class indices in the palette
/// entries, and expanding would destroy them.
pub fn read_label_png(path: &Path) -> Result<Array2<u8>> {
    let file = std::fs::File::open(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    let color = info.color_type;
    let depth = info.bit_depth;
    if !matches!(color, png::ColorType::Grayscale | png::ColorType::Indexed) {
        return Err(Error::Image(format!(
            "{}: expected a grayscale or palette label image, found {color:?}",
            path.display()
        )));
    }
    if depth != png::BitDepth::Eight {
        return Err(Error::Image(format!(
            "{}: expected 8-bit labels, found {depth:?}",
            path.display()
        )));
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    buf.truncate(frame.buffer_size());
    Array2::from_shape_vec((h, w), buf)
        .map_err(|_| Error::Image(format!("{}: pixel count mismatch", path.display())))
}

/// The 256-entry palette conventionally used for segmentation masks, built
/// by bit-interleaving the label index into RGB.
pub fn label_palette() -> [[u8; 3]; 256] {
    let mut palette = [[0u8; 3]; 256];
    for (i, rgb) in palette.iter_mut().enumerate() {
        let mut c = i;
        for bit in 0..8u8 {
            rgb[0] |= ((c & 1) as u8) << (7 - bit);
            rgb[1] |= (((c >> 1) & 1) as u8) << (7 - bit);
            rgb[2] |= (((c >> 2) & 1) as u8) << (7 - bit);
            c >>= 3;
        }
    }
    palette
}

/// Blend the palette color of each foreground label over the photo at 50%
/// opacity; background pixels pass through untouched.
pub fn write_overlay_png(path: &Path, photo: &RgbImage, labels: &Array2<u8>) -> Result<()> {
    let (h, w) = labels.dim();
    if (photo.width() as usize, photo.height() as usize) != (w, h) {
        return Err(Error::ShapeMismatch(format!(
            "overlay size mismatch: photo {}x{}, labels {w}x{h}",
            photo.width(),
            photo.height()
        )));
    }
    let palette = label_palette();
    let mut out = photo.clone();
    for (y, row) in labels.rows().into_iter().enumerate() {
        for (x, &label) in row.iter().enumerate() {
            if label == 0 {
                continue;
            }
            let tint = palette[label as usize];
            let px = out.get_pixel_mut(x as u32, y as u32);
            for (channel, &t) in px.0.iter_mut().zip(&tint) {
                *channel = ((u16::from(*channel) + u16::from(t)) / 2) as u8;
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    out.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Load a photo and resize it to the working resolution. Returns the resized
/// image and the original `(width, height)`.
pub fn load_rgb_resized(path: &Path, width: u32, height: u32) -> Result<(RgbImage, (u32, u32))> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let original = (img.width(), img.height());
    let resized = if original == (width, height) {
        img
    } else {
        image::imageops::resize(&img, width, height, image::imageops::FilterType::Triangle)
    };
    Ok((resized, original))
}

/// Repack an RGB image as an `[H × W × 3]` array for the refinement stage.
pub fn rgb_to_array(photo: &RgbImage) -> Array3<u8> {
    let (w, h) = (photo.width() as usize, photo.height() as usize);
    Array3::from_shape_vec((h, w, 3), photo.as_raw().clone()).expect("RgbImage stores h*w*3 bytes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, arr3};
    use proptest::prelude::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("mask-tests-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn reshape_and_flatten_round_trip() {
        let flat = arr1(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let grid = reshape_to_grid(&flat.view(), (2, 3)).unwrap();
        assert_eq!(grid, arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]));
        assert_eq!(flatten_grid(&grid.view()), flat);
        assert!(reshape_to_grid(&flat.view(), (2, 2)).is_err());
    }

    #[test]
    fn upsample_same_size_is_identity() {
        let grid = arr2(&[[0.1, 0.9], [0.4, 0.6]]);
        let out = upsample_bilinear(&grid.view(), 2, 2).unwrap();
        assert_eq!(out, grid);
    }

    #[test]
    fn upsample_2x2_to_4x4_by_hand() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let grid = arr2(&[[a, b], [c, d]]);
        let out = upsample_bilinear(&grid.view(), 4, 4).unwrap();
        // Corners clamp to the corner samples.
        assert_eq!(out[[0, 0]], a);
        assert_eq!(out[[0, 3]], b);
        assert_eq!(out[[3, 0]], c);
        assert_eq!(out[[3, 3]], d);
        // Interior pixel (1,1) sits at source (0.25, 0.25).
        assert_abs_diff_eq!(
            out[[1, 1]],
            0.5625 * a + 0.1875 * b + 0.1875 * c + 0.0625 * d,
            epsilon = 1e-12
        );
        // (1,2) sits at source (0.25, 0.75): weights swap horizontally.
        assert_abs_diff_eq!(
            out[[1, 2]],
            0.1875 * a + 0.5625 * b + 0.0625 * c + 0.1875 * d,
            epsilon = 1e-12
        );
    }

    #[test]
    fn normalize_stretches_and_centers_constants() {
        let m = arr1(&[1.0, 3.0]);
        assert_eq!(normalize_minmax(&m.view()), arr1(&[0.0, 1.0]));
        let c = arr2(&[[2.5, 2.5], [2.5, 2.5]]);
        assert_eq!(normalize_minmax(&c.view()), arr2(&[[0.5, 0.5], [0.5, 0.5]]));
    }

    #[test]
    fn labelmap_assembly_threshold_and_ties() {
        // Two classes on a 1x3 image: strong class 1, strong class 2, both weak.
        let scores = arr3(&[[[0.9, 0.2, 0.3]], [[0.1, 0.8, 0.3]]]);
        let names = vec!["background".into(), "cat".into(), "dog".into()];
        let map = assemble_labelmap(&scores, 0.5, &names).unwrap();
        assert_eq!(map.labels, arr2(&[[1, 2, 0]]));

        // Exact tie at the threshold goes to the lower class index.
        let tied = arr3(&[[[0.5]], [[0.5]]]);
        let map = assemble_labelmap(&tied, 0.5, &names).unwrap();
        assert_eq!(map.labels, arr2(&[[1]]));

        // Name list must cover background.
        assert!(assemble_labelmap(&tied, 0.5, &names[..2]).is_err());
    }

    #[test]
    fn nearest_resize_is_center_aligned_in_both_directions() {
        let map = LabelMap {
            labels: arr2(&[[1, 2], [3, 4]]),
            class_names: vec!["bg".into(), "a".into(), "b".into(), "c".into(), "d".into()],
        };
        let up = resize_labels_nearest(&map, 4, 4).unwrap();
        assert_eq!(
            up.labels,
            arr2(&[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
        );
        let down = resize_labels_nearest(&up, 2, 2).unwrap();
        assert_eq!(down.labels, map.labels);

        let wide = LabelMap {
            labels: arr2(&[[0, 1, 2, 3]]),
            class_names: map.class_names.clone(),
        };
        let halved = resize_labels_nearest(&wide, 1, 2).unwrap();
        // Output centers 0.5 and 1.5 map to source columns 1 and 3.
        assert_eq!(halved.labels, arr2(&[[1, 3]]));
    }

    #[test]
    fn label_png_round_trips_including_ignore_index() {
        let path = tmp("labels.png");
        let labels = arr2(&[[0u8, 1, 2], [IGNORE_INDEX, 4, 0]]);
        write_label_png(&path, &labels).unwrap();
        assert_eq!(read_label_png(&path).unwrap(), labels);
    }

    #[test]
    fn palette_pngs_read_as_raw_indices() {
        // Encode an indexed image whose palette colors differ wildly from
        // the indices; reading must return the indices, not the colors.
        let path = tmp("indexed.png");
        let file = std::fs::File::create(&path).unwrap();
        let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), 3, 1);
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_palette(vec![0, 0, 0, 128, 0, 0, 0, 128, 0]);
        let mut writer = encoder.write_header().unwrap();
        writer.write_image_data(&[0, 2, 1]).unwrap();
        drop(writer);

        assert_eq!(read_label_png(&path).unwrap(), arr2(&[[0u8, 2, 1]]));
    }

    #[test]
    fn rgb_pngs_are_rejected_as_labels() {
        let path = tmp("rgb.png");
        let img = RgbImage::from_pixel(2, 2, image::Rgb([10, 20, 30]));
        img.save(&path).unwrap();
        assert!(matches!(read_label_png(&path), Err(Error::Image(_))));
    }

    #[test]
    fn palette_matches_the_conventional_first_entries() {
        let p = label_palette();
        assert_eq!(p[0], [0, 0, 0]);
        assert_eq!(p[1], [128, 0, 0]);
        assert_eq!(p[2], [0, 128, 0]);
        assert_eq!(p[3], [128, 128, 0]);
        assert_eq!(p[4], [0, 0, 128]);
        assert_eq!(p[255], [224, 224, 192]);
    }

    #[test]
    fn overlay_tints_foreground_only() {
        let path = tmp("overlay.png");
        let photo = RgbImage::from_pixel(2, 1, image::Rgb([100, 100, 100]));
        let labels = arr2(&[[0u8, 1]]);
        write_overlay_png(&path, &photo, &labels).unwrap();
        let out = image::open(&path).unwrap().to_rgb8();
        assert_eq!(out.get_pixel(0, 0).0, [100, 100, 100]);
        assert_eq!(out.get_pixel(1, 0).0, [114, 50, 50]); // blended with [128,0,0]

        let mismatched = arr2(&[[0u8], [1]]);
        assert!(write_overlay_png(&path, &photo, &mismatched).is_err());
    }

    proptest! {
        #[test]
        fn upsampled_values_stay_within_input_bounds(
            seed in any::<u64>(),
            src_h in 1usize..6, src_w in 1usize..6,
            out_h in 1usize..12, out_w in 1usize..12,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let grid = Array2::from_shape_fn((src_h, src_w), |_| rng.gen_range(-5.0f64..5.0));
            let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = upsample_bilinear(&grid.view(), out_h, out_w).unwrap();
            for &v in out.iter() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn normalize_lands_in_unit_interval(seed in any::<u64>(), len in 1usize..40) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v = Array1::from_shape_fn(len, |_| rng.gen_range(-100.0f64..100.0));
            let n = normalize_minmax(&v.view());
            for &x in n.iter() {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            if len > 1 && v.iter().any(|&a| a != v[0]) {
                let min = n.iter().copied().fold(f64::INFINITY, f64::min);
                let max = n.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(min, 0.0);
                prop_assert_eq!(max, 1.0);
            }
        }
    }
}
