//! PNG raster I/O with ESRI world-file georeferencing sidecars.
//!
//! Imagery is 8-bit RGB PNG; masks are 8-bit grayscale PNG whose pixel
//! values are the class codes directly. Georeferencing travels in a `.pgw`
//! world file next to the PNG: six decimal lines
//!
//! ```text
//! x_pixel_size
//! y_rot
//! x_rot
//! y_pixel_size
//! x of the CENTER of the top-left pixel
//! y of the CENTER of the top-left pixel
//! ```
//!
//! Note the pixel-center convention in the last two lines; [`GeoTransform`]
//! anchors at the pixel *corner*, and the conversion happens on read/write.

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};

use super::{GeoError, GeoTransform, ImageRaster, MaskRaster};

/// The world-file path for a raster: same stem, `.pgw` extension.
pub fn world_file_path(image_path: &Path) -> PathBuf {
    image_path.with_extension("pgw")
}

/// Writes a transform as a six-line world file.
pub fn write_world_file(path: &Path, gt: &GeoTransform) -> Result<(), GeoError> {
    let cx = gt.x_origin + 0.5 * gt.x_pixel_size + 0.5 * gt.x_rot;
    let cy = gt.y_origin + 0.5 * gt.y_rot + 0.5 * gt.y_pixel_size;
    let text = format!(
        "{}\n{}\n{}\n{}\n{}\n{}\n",
        gt.x_pixel_size, gt.y_rot, gt.x_rot, gt.y_pixel_size, cx, cy
    );
    std::fs::write(path, text).map_err(|source| GeoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a six-line world file into a corner-anchored transform.
pub fn read_world_file(path: &Path) -> Result<GeoTransform, GeoError> {
    let text = std::fs::read_to_string(path).map_err(|source| GeoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |message: String| GeoError::BadWorldFile {
        path: path.display().to_string(),
        message,
    };
    let mut values = [0.0f64; 6];
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    for (i, slot) in values.iter_mut().enumerate() {
        let line = lines
            .next()
            .ok_or_else(|| bad(format!("expected 6 numeric lines, found {i}")))?;
        *slot = line
            .trim()
            .parse()
            .map_err(|e| bad(format!("line {}: {e}", i + 1)))?;
    }
    if lines.next().is_some() {
        return Err(bad("trailing content after 6 numeric lines".to_string()));
    }
    let [x_pixel_size, y_rot, x_rot, y_pixel_size, cx, cy] = values;
    Ok(GeoTransform {
        x_origin: cx - 0.5 * x_pixel_size - 0.5 * x_rot,
        y_origin: cy - 0.5 * y_rot - 0.5 * y_pixel_size,
        x_pixel_size,
        y_pixel_size,
        x_rot,
        y_rot,
    })
}

/// Writes an RGB raster as PNG plus its `.pgw` sidecar.
pub fn write_image_png(path: &Path, img: &ImageRaster, gt: &GeoTransform) -> Result<(), GeoError> {
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
        .expect("raster data length matches dimensions");
    buf.save(path).map_err(|source| GeoError::Image {
        path: path.display().to_string(),
        source,
    })?;
    write_world_file(&world_file_path(path), gt)
}

/// Reads an RGB PNG and its `.pgw` sidecar.
pub fn read_image_png(path: &Path) -> Result<(ImageRaster, GeoTransform), GeoError> {
    let img = open_image(path)?.into_rgb8();
    let (width, height) = img.dimensions();
    let raster = ImageRaster::from_raw(height as usize, width as usize, img.into_raw());
    let gt = read_world_file(&world_file_path(path))?;
    Ok((raster, gt))
}

/// Writes a class mask as grayscale PNG plus its `.pgw` sidecar.
pub fn write_mask_png(path: &Path, mask: &MaskRaster, gt: &GeoTransform) -> Result<(), GeoError> {
    let buf = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .expect("mask data length matches dimensions");
    buf.save(path).map_err(|source| GeoError::Image {
        path: path.display().to_string(),
        source,
    })?;
    write_world_file(&world_file_path(path), gt)
}

/// Reads a grayscale PNG mask and its `.pgw` sidecar, rejecting pixel values
/// outside `{0, 1, 2}`.
pub fn read_mask_png(path: &Path) -> Result<(MaskRaster, GeoTransform), GeoError> {
    let img = open_image(path)?.into_luma8();
    let (width, height) = img.dimensions();
    let mask = MaskRaster::from_raw(height as usize, width as usize, img.into_raw())?;
    let gt = read_world_file(&world_file_path(path))?;
    Ok((mask, gt))
}

fn open_image(path: &Path) -> Result<DynamicImage, GeoError> {
    image::open(path).map_err(|source| GeoError::Image {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_gt() -> GeoTransform {
        GeoTransform::axis_aligned(-119.2278, 34.3065, 1.2e-5, -1.2e-5)
    }

    #[test]
    fn world_file_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.pgw");
        let gt = GeoTransform {
            x_origin: -119.2278,
            y_origin: 34.3065,
            x_pixel_size: 1.2e-5,
            y_pixel_size: -1.2e-5,
            x_rot: 3.5e-8,
            y_rot: -1.25e-8,
        };
        write_world_file(&path, &gt).unwrap();
        let back = read_world_file(&path).unwrap();
        // Pixel sizes and rotations round-trip bit-exactly; the origin goes
        // through the center/corner conversion, so allow an ulp-scale slack.
        assert_eq!(back.x_pixel_size, gt.x_pixel_size);
        assert_eq!(back.y_pixel_size, gt.y_pixel_size);
        assert_eq!(back.x_rot, gt.x_rot);
        assert_eq!(back.y_rot, gt.y_rot);
        assert!((back.x_origin - gt.x_origin).abs() < 1e-12);
        assert!((back.y_origin - gt.y_origin).abs() < 1e-12);
    }

    #[test]
    fn world_file_uses_pixel_center_convention() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.pgw");
        write_world_file(&path, &GeoTransform::axis_aligned(100.0, 50.0, 2.0, -2.0)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec!["2", "0", "0", "-2", "101", "49"]);
    }

    #[test]
    fn truncated_world_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.pgw");
        std::fs::write(&path, "1.0\n0.0\n0.0\n").unwrap();
        let err = read_world_file(&path).unwrap_err();
        assert!(matches!(err, GeoError::BadWorldFile { .. }), "{err}");
    }

    #[test]
    fn non_numeric_world_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.pgw");
        std::fs::write(&path, "1.0\n0.0\nnope\n-1.0\n10.0\n20.0\n").unwrap();
        let err = read_world_file(&path).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn image_png_round_trips_pixels_and_georeferencing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.png");
        let mut img = ImageRaster::filled(5, 7, [10, 20, 30]);
        img.set(3, 2, [200, 100, 50]);
        write_image_png(&path, &img, &scene_gt()).unwrap();
        assert!(world_file_path(&path).exists());
        let (back, gt) = read_image_png(&path).unwrap();
        assert_eq!(back, img);
        assert!((gt.x_origin - scene_gt().x_origin).abs() < 1e-12);
        assert_eq!(gt.x_pixel_size, scene_gt().x_pixel_size);
    }

    #[test]
    fn mask_png_round_trips_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mut mask = MaskRaster::zeros(4, 4);
        mask.set(1, 1, 1);
        mask.set(2, 2, 2);
        write_mask_png(&path, &mask, &scene_gt()).unwrap();
        let (back, _) = read_mask_png(&path).unwrap();
        assert_eq!(back, mask);

        // A grayscale PNG with out-of-range values must be rejected.
        let bad = dir.path().join("bad.png");
        GrayImage::from_raw(2, 2, vec![0, 1, 2, 9])
            .unwrap()
            .save(&bad)
            .unwrap();
        write_world_file(&world_file_path(&bad), &scene_gt()).unwrap();
        let err = read_mask_png(&bad).unwrap_err();
        assert!(matches!(err, GeoError::BadMaskValue { value: 9, .. }), "{err}");
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = read_image_png(Path::new("/nonexistent/nowhere.png")).unwrap_err();
        assert!(err.to_string().contains("nowhere.png"), "{err}");
    }

    #[test]
    fn world_file_path_swaps_extension() {
        assert_eq!(
            world_file_path(Path::new("/data/scene/pre.png")),
            PathBuf::from("/data/scene/pre.pgw")
        );
    }
}
