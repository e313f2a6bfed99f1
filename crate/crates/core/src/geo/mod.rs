//! Georeferenced rasters, vector features, and the conversions between them.
//!
//! Pixel/world mapping follows the usual six-coefficient affine model: pixel
//! `(col, row)` maps to world
//!
//! ```text
//! x = x_origin + col * x_pixel_size + row * x_rot
//! y = y_origin + col * y_rot      + row * y_pixel_size
//! ```
//!
//! where the origin is the *outer corner* of the top-left pixel. Rasters are
//! stored row-major with row 0 at the top, so north-up imagery has a
//! negative `y_pixel_size`. Pixel centers sit at half-integer pixel
//! coordinates, e.g. the center of pixel `(col, row)` is `(col + 0.5,
//! row + 0.5)`.

mod geojson;
mod io;
mod polygonize;
mod rasterize;
mod shift;

pub use geojson::{parse_geojson, write_geojson, ParseOutcome};
pub use io::{
    read_image_png, read_mask_png, read_world_file, world_file_path, write_image_png,
    write_mask_png, write_world_file,
};
pub use polygonize::polygonize_mask;
pub(crate) use polygonize::{trace_components, TracedComponent};
pub use rasterize::{damage_class_rule, rasterize_features, RasterizeOutcome};
pub use shift::estimate_shift;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from georeferencing, vector I/O, and raster handling.
#[derive(Debug, Error)]
pub enum GeoError {
    /// The input was not valid JSON. `offset` is the byte position of the
    /// first error.
    #[error("geojson syntax error at byte {offset}: {message}")]
    JsonSyntax { message: String, offset: usize },
    /// The input was valid JSON but not a GeoJSON document of the expected
    /// shape.
    #[error("geojson structure error: {0}")]
    JsonStructure(String),
    /// The affine transform is singular and cannot be inverted.
    #[error("degenerate geotransform: pixel axes are collinear (determinant {det:e})")]
    DegenerateTransform { det: f64 },
    /// Correlation is undefined because one input has (near-)zero variance
    /// in every candidate overlap.
    #[error("flat image: no pixel variance in any candidate overlap, shift is undefined")]
    FlatImage,
    /// Two rasters that must be the same size are not.
    #[error("raster size mismatch: {a_height}x{a_width} vs {b_height}x{b_width}")]
    SizeMismatch {
        a_height: usize,
        a_width: usize,
        b_height: usize,
        b_width: usize,
    },
    /// A search or window parameter is out of its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A mask pixel holds something other than 0, 1, or 2.
    #[error("mask value {value} at (col {col}, row {row}) is outside {{0, 1, 2}}")]
    BadMaskValue { value: u8, col: usize, row: usize },
    /// A world file did not contain six numeric lines.
    #[error("world file {path}: {message}")]
    BadWorldFile { path: String, message: String },
    /// PNG decode/encode failure.
    #[error("image error for {path}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("i/o error for {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Affine pixel-to-world mapping with the origin at the outer corner of the
/// top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub x_origin: f64,
    pub y_origin: f64,
    pub x_pixel_size: f64,
    pub y_pixel_size: f64,
    pub x_rot: f64,
    pub y_rot: f64,
}

impl GeoTransform {
    /// Axis-aligned transform (no rotation terms).
    pub fn axis_aligned(x_origin: f64, y_origin: f64, x_pixel_size: f64, y_pixel_size: f64) -> Self {
        GeoTransform {
            x_origin,
            y_origin,
            x_pixel_size,
            y_pixel_size,
            x_rot: 0.0,
            y_rot: 0.0,
        }
    }

    /// Maps pixel coordinates to world coordinates. `col` and `row` may be
    /// fractional; integers address pixel corners and half-integers pixel
    /// centers.
    pub fn apply(&self, col: f64, row: f64) -> (f64, f64) {
        let x = self.x_origin + col * self.x_pixel_size + row * self.x_rot;
        let y = self.y_origin + col * self.y_rot + row * self.y_pixel_size;
        (x, y)
    }

    /// Maps world coordinates back to (fractional) pixel coordinates.
    ///
    /// Fails when the transform is singular, i.e. the two pixel axes are
    /// collinear in world space.
    pub fn invert(&self, x: f64, y: f64) -> Result<(f64, f64), GeoError> {
        let det = self.x_pixel_size * self.y_pixel_size - self.x_rot * self.y_rot;
        let scale = self.x_pixel_size.abs() * self.y_pixel_size.abs()
            + self.x_rot.abs() * self.y_rot.abs();
        if !(det.abs() > scale * 1e-15) {
            return Err(GeoError::DegenerateTransform { det });
        }
        let dx = x - self.x_origin;
        let dy = y - self.y_origin;
        let col = (self.y_pixel_size * dx - self.x_rot * dy) / det;
        let row = (self.x_pixel_size * dy - self.y_rot * dx) / det;
        Ok((col, row))
    }
}

/// A polygon with one exterior ring and zero or more holes, in world
/// coordinates. Rings are stored closed (first vertex == last vertex).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Vec<(f64, f64)>,
    pub holes: Vec<Vec<(f64, f64)>>,
}

impl Polygon {
    /// Builds a polygon, closing any ring whose last vertex does not repeat
    /// the first.
    pub fn new(exterior: Vec<(f64, f64)>, holes: Vec<Vec<(f64, f64)>>) -> Self {
        let mut poly = Polygon { exterior, holes };
        close_ring(&mut poly.exterior);
        for hole in &mut poly.holes {
            close_ring(hole);
        }
        poly
    }

    /// All rings: the exterior followed by the holes.
    pub fn rings(&self) -> impl Iterator<Item = &Vec<(f64, f64)>> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }

    /// A ring with fewer than three distinct vertices encloses no area.
    pub fn is_degenerate(&self) -> bool {
        distinct_vertices(&self.exterior) < 3
    }
}

fn close_ring(ring: &mut Vec<(f64, f64)>) {
    if let (Some(&first), Some(&last)) = (ring.first(), ring.last()) {
        if first != last {
            ring.push(first);
        }
    }
}

fn distinct_vertices(ring: &[(f64, f64)]) -> usize {
    let open = if ring.len() >= 2 && ring.first() == ring.last() {
        &ring[..ring.len() - 1]
    } else {
        ring
    };
    let mut seen: Vec<(f64, f64)> = Vec::with_capacity(open.len());
    for &v in open {
        if !seen.contains(&v) {
            seen.push(v);
        }
    }
    seen.len()
}

/// A polygon with its attribute table. Property values are kept as strings;
/// non-string JSON values are preserved as their JSON serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub polygon: Polygon,
    pub properties: BTreeMap<String, String>,
}

/// An ordered list of features.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCollection {
    pub features: Vec<Feature>,
}

impl FeatureCollection {
    pub fn new(features: Vec<Feature>) -> Self {
        FeatureCollection { features }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// An 8-bit RGB raster, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ImageRaster {
    /// Builds a raster from interleaved RGB bytes; `data.len()` must be
    /// `height * width * 3`.
    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(
            data.len(),
            height * width * 3,
            "rgb raster data must be height*width*3 bytes"
        );
        ImageRaster { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        ImageRaster { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, col: usize, row: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rec. 601 luminance as a single float band, handy for correlation.
    pub fn luminance(&self) -> BandRaster {
        let mut data = Vec::with_capacity(self.height * self.width);
        for px in self.data.chunks_exact(3) {
            data.push(0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32);
        }
        BandRaster {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// A class-label raster; every pixel is 0 (background), 1 (intact building),
/// or 2 (damaged building).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRaster {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskRaster {
    pub fn zeros(height: usize, width: usize) -> Self {
        MaskRaster {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Builds a mask from raw bytes, rejecting any value outside `{0, 1, 2}`.
    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self, GeoError> {
        assert_eq!(data.len(), height * width, "mask data must be height*width bytes");
        for (i, &v) in data.iter().enumerate() {
            if v > 2 {
                return Err(GeoError::BadMaskValue {
                    value: v,
                    col: i % width,
                    row: i / width,
                });
            }
        }
        Ok(MaskRaster { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, value: u8) {
        debug_assert!(value <= 2, "mask values are 0, 1, or 2");
        self.data[row * self.width + col] = value;
    }

    /// Per-class pixel counts `[background, intact, damaged]`.
    pub fn class_counts(&self) -> [u64; 3] {
        let mut counts = [0u64; 3];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// A single-band float raster used for correlation and other per-pixel math.
#[derive(Debug, Clone, PartialEq)]
pub struct BandRaster {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl BandRaster {
    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "band data must be height*width values");
        BandRaster { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }
}
