//! Whole-scene prediction, instance extraction, and reporting.
//!
//! [`tiled_inference`] slides overlapping windows over a scene, averages
//! the per-pixel logits from every covering window, and takes the class
//! argmax — deterministic and bit-identical across thread counts because
//! window outputs are accumulated in row-major window order on one thread.
//! [`extract_instances`] separates the predicted mask into 8-connected
//! building instances with world-space measurements, [`export_geojson`]
//! writes them as tagged features, and [`effort_report`] compares the
//! pipeline's wall clock against a manual-digitization estimate.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{enumerate_windows, extract_chip, Scene};
use crate::geo::{
    trace_components, write_geojson, Feature, FeatureCollection, GeoTransform, MaskRaster,
    Polygon, TracedComponent,
};
use crate::net::{self, Model, NetError, Tensor};
use crate::parallel;

/// Errors from tiled inference and export.
#[derive(Debug, Error)]
pub enum InferError {
    #[error(
        "scene smaller than chip: scene {name} is {height}x{width} but chip_size is \
         {chip_size}; pad the scene to at least chip size"
    )]
    SceneSmallerThanChip {
        name: String,
        height: usize,
        width: usize,
        chip_size: usize,
    },
    #[error("stride must satisfy 1 <= stride <= chip_size, got {stride} (chip_size {chip_size})")]
    BadStride { stride: usize, chip_size: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("i/o error for {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Tiled prediction over a full scene: the argmax class mask plus the
/// averaged logits it was derived from (shape `[classes, height, width]`).
#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub mask: MaskRaster,
    pub logits: Tensor,
}

/// Runs the model over every window of the scene (stride grid plus
/// edge-flush extras), averages logits over all windows covering each
/// pixel, and classifies by argmax.
///
/// Window forwards may run in parallel; accumulation happens on one thread
/// in window row-major order, so results are bit-identical for any thread
/// count. A pixel covered by exactly one window keeps that window's logits
/// exactly.
pub fn tiled_inference(
    model: &Model,
    scene: &Scene,
    chip_size: usize,
    stride: usize,
) -> Result<InferenceOutput, InferError> {
    let (height, width) = (scene.height(), scene.width());
    if chip_size > height || chip_size > width {
        return Err(InferError::SceneSmallerThanChip {
            name: scene.name.clone(),
            height,
            width,
            chip_size,
        });
    }
    if stride < 1 || stride > chip_size {
        return Err(InferError::BadStride { stride, chip_size });
    }

    let windows = enumerate_windows(height, width, chip_size, stride);
    let classes = model.config().num_classes;

    let window_logits: Vec<Result<Tensor, NetError>> =
        parallel::map_indexed(windows.len(), |i| {
            let chip = extract_chip(scene, windows[i]);
            let pre = Tensor::from_vec(
                &[1, 3, chip_size, chip_size],
                chip.pre_patch.data().to_vec(),
            );
            let post = Tensor::from_vec(
                &[1, 3, chip_size, chip_size],
                chip.post_patch.data().to_vec(),
            );
            model.predict(&pre, &post)
        });

    let mut sums = vec![0.0f32; classes * height * width];
    let mut counts = vec![0u32; height * width];
    for (window, logits) in windows.iter().zip(window_logits) {
        let logits = logits?;
        for c in 0..classes {
            for y in 0..chip_size {
                let src = &logits.data()
                    [(c * chip_size + y) * chip_size..(c * chip_size + y + 1) * chip_size];
                let row = window.row0 + y;
                let dst_base = (c * height + row) * width + window.col0;
                for (x, &v) in src.iter().enumerate() {
                    sums[dst_base + x] += v;
                }
            }
        }
        for y in 0..chip_size {
            let row = window.row0 + y;
            for x in 0..chip_size {
                counts[row * width + x + window.col0] += 1;
            }
        }
    }

    for c in 0..classes {
        for p in 0..height * width {
            sums[c * height * width + p] /= counts[p] as f32;
        }
    }
    let logits = Tensor::from_vec(&[1, classes, height, width], sums);
    let class_codes = net::argmax_classes(&logits);
    let mask = MaskRaster::from_raw(height, width, class_codes)
        .expect("argmax over 3 classes yields valid codes");
    let logits = Tensor::from_vec(
        &[classes, height, width],
        logits.into_data(),
    );
    Ok(InferenceOutput { mask, logits })
}

/// One building instance: connected component of a single class.
#[derive(Debug, Clone)]
pub struct Instance {
    pub class: u8,
    pub pixel_area: usize,
    pub world_area: f64,
    /// Mean of member pixel centers, mapped to world coordinates.
    pub centroid: (f64, f64),
    /// Footprint outline in world coordinates (exterior ring plus holes).
    pub polygon: Polygon,
}

/// Instances grouped out of a class mask, intact (class 1) first, then
/// damaged (class 2), each in row-major discovery order.
#[derive(Debug, Clone, Default)]
pub struct InstanceReport {
    pub damaged_count: usize,
    pub intact_count: usize,
    pub instances: Vec<Instance>,
}

/// Separates the mask into 8-connected per-class components, dropping those
/// smaller than `min_area` pixels. World area is
/// `pixel_area * |x_pixel_size * y_pixel_size|`.
pub fn extract_instances(mask: &MaskRaster, gt: &GeoTransform, min_area: usize) -> InstanceReport {
    let pixel_world_area = (gt.x_pixel_size * gt.y_pixel_size).abs();
    let mut report = InstanceReport::default();
    for class in [1u8, 2u8] {
        let comps = trace_components(mask.height(), mask.width(), |row, col| {
            mask.get(col, row) == class
        });
        for comp in comps {
            if comp.pixels.len() < min_area {
                continue;
            }
            report.instances.push(instance_from_component(class, &comp, gt, pixel_world_area));
            match class {
                1 => report.intact_count += 1,
                _ => report.damaged_count += 1,
            }
        }
    }
    report
}

fn instance_from_component(
    class: u8,
    comp: &TracedComponent,
    gt: &GeoTransform,
    pixel_world_area: f64,
) -> Instance {
    let n = comp.pixels.len() as f64;
    let (mut col_sum, mut row_sum) = (0.0f64, 0.0f64);
    for &(row, col) in &comp.pixels {
        row_sum += row as f64 + 0.5;
        col_sum += col as f64 + 0.5;
    }
    let centroid = gt.apply(col_sum / n, row_sum / n);
    let ring_to_world = |ring: &[(i64, i64)]| -> Vec<(f64, f64)> {
        ring.iter().map(|&(x, y)| gt.apply(x as f64, y as f64)).collect()
    };
    Instance {
        class,
        pixel_area: comp.pixels.len(),
        world_area: comp.pixels.len() as f64 * pixel_world_area,
        centroid,
        polygon: Polygon::new(
            ring_to_world(&comp.exterior),
            comp.holes.iter().map(|h| ring_to_world(h)).collect(),
        ),
    }
}

/// Builds the tagged feature collection for an instance report: every
/// feature carries `"building": "yes"`, damaged instances additionally
/// `"disaster": "damaged_area"`, plus `area_px`, `area_world`, and
/// `centroid` measurements.
pub fn report_to_features(report: &InstanceReport) -> FeatureCollection {
    let features = report
        .instances
        .iter()
        .map(|inst| {
            let mut properties = BTreeMap::new();
            properties.insert("building".to_string(), "yes".to_string());
            if inst.class == 2 {
                properties.insert("disaster".to_string(), "damaged_area".to_string());
            }
            properties.insert("area_px".to_string(), inst.pixel_area.to_string());
            properties.insert("area_world".to_string(), inst.world_area.to_string());
            properties.insert(
                "centroid".to_string(),
                format!("{} {}", inst.centroid.0, inst.centroid.1),
            );
            Feature {
                polygon: inst.polygon.clone(),
                properties,
            }
        })
        .collect();
    FeatureCollection::new(features)
}

/// Writes an instance report as a GeoJSON FeatureCollection file.
pub fn export_geojson(report: &InstanceReport, path: &Path) -> Result<(), InferError> {
    let text = write_geojson(&report_to_features(report));
    std::fs::write(path, text).map_err(|source| InferError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Manual-versus-pipeline effort comparison. Serializes with the short
/// field names used in the report JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffortReport {
    pub features: u64,
    pub manual_s: f64,
    pub pipeline_s: f64,
    pub speedup: f64,
}

/// Estimates manual digitization effort (`features * rate` seconds) against
/// the measured pipeline seconds. All inputs must be non-negative; the
/// speedup divisor is floored at one second so tiny pipelines don't report
/// infinite gains.
pub fn effort_report(
    feature_count: u64,
    rate_seconds_per_feature: f64,
    pipeline_seconds: f64,
) -> EffortReport {
    debug_assert!(rate_seconds_per_feature >= 0.0 && pipeline_seconds >= 0.0);
    let manual_s = feature_count as f64 * rate_seconds_per_feature;
    EffortReport {
        features: feature_count,
        manual_s,
        pipeline_s: pipeline_seconds,
        speedup: manual_s / pipeline_seconds.max(1.0),
    }
}
