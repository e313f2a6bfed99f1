//! Deterministic synthetic pre/post scene generation with exact labels.
//!
//! Scenes are rendered from randomly placed rectangular buildings
//! (axis-aligned or rotated) over a textured background, with
//! sun-angle-dependent shadows. The post-event image repeats the pre-event
//! rendering, applies a global illumination shift plus bounded sensor
//! noise, and redraws damaged buildings with a burn appearance. The mask is
//! produced by rasterizing the returned footprint features, so labels and
//! annotations agree exactly by construction.
//!
//! [`domain_preset`] provides two fixed parameter templates that emulate a
//! domain shift: a sparse baseline area and a denser area with different
//! illumination and rooftop stock.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Scene;
use crate::geo::{
    damage_class_rule, rasterize_features, write_geojson, write_image_png, write_mask_png,
    Feature, FeatureCollection, GeoError, GeoTransform, ImageRaster, MaskRaster,
};

/// Errors from scene generation and artifact writing.
#[derive(Debug, Error)]
pub enum SynthError {
    #[error(
        "density infeasible: placed {achieved} of {requested} buildings after {attempts} \
         attempts; reduce counts, min_gap, or building size"
    )]
    DensityInfeasible {
        requested: usize,
        achieved: usize,
        attempts: usize,
    },
    #[error("unknown domain preset {name:?}; available presets: ventura_like, santa_rosa_like")]
    UnknownPreset { name: String },
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("i/o error for {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Global lighting for a scene and how it changes between acquisitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Illumination {
    /// Brightness multiplier applied to every rendered surface.
    pub brightness: f32,
    /// Sun azimuth in degrees; shadows are cast along this direction.
    pub sun_azimuth_deg: f32,
    /// Shadow length in pixels.
    pub shadow_length: f32,
    /// Multiplier applied to ground pixels inside a shadow.
    pub shadow_strength: f32,
    /// Added to every post-event channel outside damaged footprints.
    pub post_brightness_shift: i32,
    /// Bound on the per-pixel luminance noise between the two acquisitions.
    pub noise_amplitude: u8,
}

impl Default for Illumination {
    fn default() -> Self {
        Illumination {
            brightness: 1.0,
            sun_azimuth_deg: 135.0,
            shadow_length: 5.0,
            shadow_strength: 0.55,
            post_brightness_shift: 4,
            noise_amplitude: 2,
        }
    }
}

/// How destroyed buildings are repainted in the post-event image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BurnAppearance {
    /// Range of per-building brightness multipliers.
    pub darkening: (f32, f32),
    /// Bound on the per-pixel high-frequency noise inside the footprint.
    pub noise_amplitude: u8,
    /// Chance of a debris speckle on each footprint-edge pixel.
    pub debris_probability: f64,
}

impl Default for BurnAppearance {
    fn default() -> Self {
        BurnAppearance {
            darkening: (0.25, 0.45),
            noise_amplitude: 18,
            debris_probability: 0.35,
        }
    }
}

/// Full description of one synthetic scene; a pure function of these
/// values (see [`generate_scene`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub n_intact: usize,
    pub n_damaged: usize,
    /// Inclusive range of building side lengths, in pixels.
    pub building_size_range: (usize, usize),
    /// Minimum spacing between any two building footprints, in pixels.
    pub min_gap: usize,
    pub illumination: Illumination,
    pub background_palette: Vec<[u8; 3]>,
    pub rooftop_palette: Vec<[u8; 3]>,
    pub burn_appearance: BurnAppearance,
    pub seed: u64,
    /// World coordinates of the top-left raster corner.
    pub origin: (f64, f64),
    /// Ground size of one pixel (square pixels, north-up).
    pub pixel_size: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synthetic".to_string(),
            width: 512,
            height: 512,
            n_intact: 60,
            n_damaged: 25,
            building_size_range: (10, 22),
            min_gap: 6,
            illumination: Illumination::default(),
            background_palette: vec![[96, 108, 82], [120, 116, 96], [134, 126, 104]],
            rooftop_palette: vec![
                [168, 74, 66],
                [150, 150, 152],
                [180, 172, 150],
                [104, 110, 118],
            ],
            burn_appearance: BurnAppearance::default(),
            seed: 0,
            origin: (320_000.0, 3_790_000.0),
            pixel_size: 0.5,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::InvalidConfig(m));
        if self.width < 8 || self.height < 8 {
            return err(format!("scene must be at least 8x8, got {}x{}", self.height, self.width));
        }
        let (lo, hi) = self.building_size_range;
        if lo < 3 || lo > hi {
            return err(format!("building_size_range must satisfy 3 <= lo <= hi, got ({lo}, {hi})"));
        }
        if self.background_palette.is_empty() || self.rooftop_palette.is_empty() {
            return err("palettes must not be empty".to_string());
        }
        let (dl, dh) = self.burn_appearance.darkening;
        if !(dl > 0.0 && dl <= dh && dh < 1.0) {
            return err(format!("burn darkening must satisfy 0 < lo <= hi < 1, got ({dl}, {dh})"));
        }
        let p = self.burn_appearance.debris_probability;
        if !(0.0..=1.0).contains(&p) {
            return err(format!("debris_probability must be in [0, 1], got {p}"));
        }
        if !(self.pixel_size.is_finite() && self.pixel_size > 0.0) {
            return err(format!("pixel_size must be positive, got {}", self.pixel_size));
        }
        if !(self.illumination.brightness.is_finite() && self.illumination.brightness > 0.0) {
            return err(format!(
                "illumination brightness must be positive, got {}",
                self.illumination.brightness
            ));
        }
        Ok(())
    }

    fn geo_transform(&self) -> GeoTransform {
        GeoTransform::axis_aligned(self.origin.0, self.origin.1, self.pixel_size, -self.pixel_size)
    }
}

/// Fixed parameter templates for the two emulated survey areas.
///
/// `ventura_like` is the sparse baseline: well-separated buildings and
/// neutral illumination. `santa_rosa_like` packs buildings closer together
/// and changes sun angle, global brightness, and both palettes, so a model
/// trained on the first preset faces a genuine domain shift on the second.
pub fn domain_preset(name: &str) -> Result<SynthConfig, SynthError> {
    match name {
        "ventura_like" => Ok(SynthConfig::default_named("ventura_like")),
        "santa_rosa_like" => Ok(SynthConfig {
            name: "santa_rosa_like".to_string(),
            n_intact: 80,
            n_damaged: 40,
            building_size_range: (9, 18),
            min_gap: 3,
            illumination: Illumination {
                brightness: 0.86,
                sun_azimuth_deg: 310.0,
                shadow_length: 3.0,
                shadow_strength: 0.62,
                post_brightness_shift: -10,
                noise_amplitude: 3,
            },
            background_palette: vec![[88, 96, 88], [104, 104, 92], [76, 88, 76]],
            rooftop_palette: vec![
                [152, 120, 96],
                [128, 128, 134],
                [174, 160, 136],
                [92, 100, 108],
                [140, 88, 72],
            ],
            origin: (520_000.0, 4_250_000.0),
            ..SynthConfig::default()
        }),
        other => Err(SynthError::UnknownPreset {
            name: other.to_string(),
        }),
    }
}

impl SynthConfig {
    fn default_named(name: &str) -> SynthConfig {
        SynthConfig {
            name: name.to_string(),
            ..SynthConfig::default()
        }
    }
}

/// One placed building: a possibly rotated rectangle in pixel space.
struct Placed {
    cx: f64,
    cy: f64,
    hw: f64,
    hh: f64,
    cos: f64,
    sin: f64,
    /// Pixel-space bounding box (x0, y0, x1, y1).
    bbox: (f64, f64, f64, f64),
    damaged: bool,
    color: [u8; 3],
}

impl Placed {
    /// Rectangle-local coordinates of a pixel-space point.
    fn local(&self, px: f64, py: f64) -> (f64, f64) {
        let (dx, dy) = (px - self.cx, py - self.cy);
        (dx * self.cos + dy * self.sin, -dx * self.sin + dy * self.cos)
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let (lx, ly) = self.local(px, py);
        lx.abs() <= self.hw && ly.abs() <= self.hh
    }

    fn corners(&self) -> [(f64, f64); 4] {
        let mut out = [(0.0, 0.0); 4];
        for (i, (sx, sy)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
            .into_iter()
            .enumerate()
        {
            let (lx, ly) = (sx * self.hw, sy * self.hh);
            out[i] = (
                self.cx + lx * self.cos - ly * self.sin,
                self.cy + lx * self.sin + ly * self.cos,
            );
        }
        out
    }

    /// Integer pixel range covered by the bounding box, clipped to the
    /// scene, as `(x0..=x1, y0..=y1)` bounds.
    fn pixel_bounds(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let x0 = self.bbox.0.floor().max(0.0) as usize;
        let y0 = self.bbox.1.floor().max(0.0) as usize;
        let x1 = (self.bbox.2.ceil() as usize).min(width.saturating_sub(1));
        let y1 = (self.bbox.3.ceil() as usize).min(height.saturating_sub(1));
        (x0, y0, x1, y1)
    }
}

fn bbox_of(corners: &[(f64, f64); 4]) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in corners {
        b.0 = b.0.min(x);
        b.1 = b.1.min(y);
        b.2 = b.2.max(x);
        b.3 = b.3.max(y);
    }
    b
}

/// True when the two boxes, each inflated by `gap / 2`, overlap — i.e. the
/// buildings would sit closer than `gap`.
fn boxes_too_close(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64), gap: f64) -> bool {
    let g = gap / 2.0;
    a.0 - g < b.2 + g && b.0 - g < a.2 + g && a.1 - g < b.3 + g && b.1 - g < a.3 + g
}

fn clamp_u8(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

fn scale_channel(c: u8, brightness: f32) -> u8 {
    clamp_u8((c as f32 * brightness).round() as i32)
}

fn jitter_rgb(rgb: [u8; 3], j: i32) -> [u8; 3] {
    [
        clamp_u8(rgb[0] as i32 + j),
        clamp_u8(rgb[1] as i32 + j),
        clamp_u8(rgb[2] as i32 + j),
    ]
}

/// Renders one synthetic scene and its exact ground-truth annotations.
///
/// Deterministic per config: the same `cfg` always yields bit-identical
/// rasters and features. The returned mask equals
/// `rasterize_features(features)` exactly, footprints are pairwise at
/// least `min_gap` apart, and outside damaged footprints the post image
/// differs from the pre image only by the configured global brightness
/// shift plus noise bounded by `noise_amplitude` (where channel values
/// stay inside 0–255).
pub fn generate_scene(cfg: &SynthConfig) -> Result<(Scene, FeatureCollection), SynthError> {
    cfg.validate()?;
    let (width, height) = (cfg.width, cfg.height);
    let gt = cfg.geo_transform();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let placed = place_buildings(cfg, &mut rng)?;

    // Annotations first: the mask is their rasterization, never a second
    // geometry code path.
    let features =
        FeatureCollection::new(placed.iter().map(|b| feature_of(b, &gt)).collect());
    let outcome = rasterize_features(&features, &gt, height, width, damage_class_rule)?;
    debug_assert_eq!(outcome.skipped, 0);
    let mask = outcome.mask;

    let pre = render_pre(cfg, &placed, &mut rng);
    let post = render_post(cfg, &placed, &mask, &pre, &mut rng);

    let scene = Scene::new(cfg.name.clone(), pre, post, mask, gt)
        .expect("rendered rasters share the configured size");
    Ok((scene, features))
}

fn place_buildings(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Placed>, SynthError> {
    let total = cfg.n_intact + cfg.n_damaged;
    let (lo, hi) = cfg.building_size_range;
    let (width, height) = (cfg.width as f64, cfg.height as f64);
    let mut placed: Vec<Placed> = Vec::with_capacity(total);
    let cap = 100 * total;
    let mut attempts = 0usize;
    while placed.len() < total && attempts < cap {
        attempts += 1;
        let hw = rng.random_range(lo..=hi) as f64 / 2.0;
        let hh = rng.random_range(lo..=hi) as f64 / 2.0;
        let angle = if rng.random_bool(0.5) {
            0.0
        } else {
            rng.random_range(0.0..std::f64::consts::PI)
        };
        let r = (hw * hw + hh * hh).sqrt();
        if 2.0 * r + 2.0 >= width.min(height) {
            continue;
        }
        let cx = rng.random_range(r + 1.0..width - r - 1.0);
        let cy = rng.random_range(r + 1.0..height - r - 1.0);
        let family = cfg.rooftop_palette[rng.random_range(0..cfg.rooftop_palette.len())];
        let color = jitter_rgb(family, rng.random_range(-10..=10));
        let mut b = Placed {
            cx,
            cy,
            hw,
            hh,
            cos: angle.cos(),
            sin: angle.sin(),
            bbox: (0.0, 0.0, 0.0, 0.0),
            damaged: placed.len() < cfg.n_damaged,
            color,
        };
        b.bbox = bbox_of(&b.corners());
        if placed
            .iter()
            .any(|p| boxes_too_close(p.bbox, b.bbox, cfg.min_gap as f64))
        {
            continue;
        }
        placed.push(b);
    }
    if placed.len() < total {
        return Err(SynthError::DensityInfeasible {
            requested: total,
            achieved: placed.len(),
            attempts,
        });
    }
    Ok(placed)
}

fn feature_of(b: &Placed, gt: &GeoTransform) -> Feature {
    let mut properties = std::collections::BTreeMap::new();
    properties.insert("building".to_string(), "yes".to_string());
    if b.damaged {
        properties.insert("disaster".to_string(), "damaged_area".to_string());
    }
    let ring = b.corners().iter().map(|&(px, py)| gt.apply(px, py)).collect();
    Feature {
        polygon: crate::geo::Polygon::new(ring, Vec::new()),
        properties,
    }
}

fn render_pre(cfg: &SynthConfig, placed: &[Placed], rng: &mut ChaCha8Rng) -> ImageRaster {
    let (width, height) = (cfg.width, cfg.height);
    let ill = &cfg.illumination;
    let mut img = ImageRaster::filled(height, width, [0, 0, 0]);

    // Background: a coarse grid of palette families with per-pixel grain.
    const BLOCK: usize = 32;
    let (bw, bh) = (width.div_ceil(BLOCK), height.div_ceil(BLOCK));
    let blocks: Vec<[u8; 3]> = (0..bw * bh)
        .map(|_| cfg.background_palette[rng.random_range(0..cfg.background_palette.len())])
        .collect();
    for y in 0..height {
        for x in 0..width {
            let base = blocks[(y / BLOCK) * bw + x / BLOCK];
            let j = rng.random_range(-5..=5);
            let v = jitter_rgb(base, j).map(|c| scale_channel(c, ill.brightness));
            img.set(x, y, v);
        }
    }

    // Shadows: every footprint translated along the sun azimuth darkens the
    // ground once, regardless of how many shadows overlap.
    let az = (ill.sun_azimuth_deg as f64).to_radians();
    let (sdx, sdy) = (az.cos() * ill.shadow_length as f64, az.sin() * ill.shadow_length as f64);
    let mut shadow = vec![false; width * height];
    for b in placed {
        let (x0, y0, x1, y1) = (
            (b.bbox.0 + sdx).floor().max(0.0) as usize,
            (b.bbox.1 + sdy).floor().max(0.0) as usize,
            ((b.bbox.2 + sdx).ceil() as usize).min(width.saturating_sub(1)),
            ((b.bbox.3 + sdy).ceil() as usize).min(height.saturating_sub(1)),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                if b.contains(x as f64 + 0.5 - sdx, y as f64 + 0.5 - sdy) {
                    shadow[y * width + x] = true;
                }
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            if shadow[y * width + x] {
                let v = img.get(x, y).map(|c| scale_channel(c, ill.shadow_strength));
                img.set(x, y, v);
            }
        }
    }

    // Rooftops on top of ground and shadows.
    for b in placed {
        let roof = b.color.map(|c| scale_channel(c, ill.brightness));
        let (x0, y0, x1, y1) = b.pixel_bounds(width, height);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if b.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    let j = rng.random_range(-4..=4);
                    img.set(x, y, jitter_rgb(roof, j));
                }
            }
        }
    }
    img
}

fn render_post(
    cfg: &SynthConfig,
    placed: &[Placed],
    mask: &MaskRaster,
    pre: &ImageRaster,
    rng: &mut ChaCha8Rng,
) -> ImageRaster {
    let (width, height) = (cfg.width, cfg.height);
    let ill = &cfg.illumination;
    let burn = &cfg.burn_appearance;
    let mut img = ImageRaster::filled(height, width, [0, 0, 0]);

    // Global illumination shift plus bounded acquisition noise, everywhere.
    let amp = ill.noise_amplitude as i32;
    for y in 0..height {
        for x in 0..width {
            let n = rng.random_range(-amp..=amp);
            let v = pre.get(x, y).map(|c| clamp_u8(c as i32 + ill.post_brightness_shift + n));
            img.set(x, y, v);
        }
    }

    // Burn damaged footprints: strong darkening, high-frequency noise, and
    // debris speckle along the footprint edge. Painted only where the mask
    // says damaged, so the outside-footprint consistency guarantee holds
    // exactly.
    let bn = burn.noise_amplitude as i32;
    for b in placed.iter().filter(|b| b.damaged) {
        let m = rng.random_range(burn.darkening.0..=burn.darkening.1);
        let (x0, y0, x1, y1) = b.pixel_bounds(width, height);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if mask.get(x, y) != 2 {
                    continue;
                }
                let n = rng.random_range(-bn..=bn);
                let v = pre
                    .get(x, y)
                    .map(|c| clamp_u8((c as f32 * m).round() as i32 + n));
                img.set(x, y, v);
                let (lx, ly) = b.local(x as f64 + 0.5, y as f64 + 0.5);
                let edge_depth = (b.hw - lx.abs()).min(b.hh - ly.abs());
                if edge_depth <= 1.5 && rng.random_bool(burn.debris_probability) {
                    let g = rng.random_range(90..=150u8);
                    img.set(x, y, [g, g, g]);
                }
            }
        }
    }
    img
}

/// The files one generated scene is written out as.
#[derive(Debug, Clone)]
pub struct SceneArtifacts {
    pub pre: PathBuf,
    pub post: PathBuf,
    pub mask: PathBuf,
    pub labels: PathBuf,
}

impl SceneArtifacts {
    /// Conventional file names inside a scene directory.
    pub fn in_dir(dir: &Path) -> SceneArtifacts {
        SceneArtifacts {
            pre: dir.join("pre.png"),
            post: dir.join("post.png"),
            mask: dir.join("mask.png"),
            labels: dir.join("labels.geojson"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.pre, &self.post, &self.mask, &self.labels]
    }
}

/// Writes `pre.png`, `post.png`, `mask.png` (each with a world file) and
/// `labels.geojson` into `dir`, creating it if needed.
pub fn write_scene_artifacts(
    scene: &Scene,
    features: &FeatureCollection,
    dir: &Path,
) -> Result<SceneArtifacts, SynthError> {
    std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let paths = SceneArtifacts::in_dir(dir);
    write_image_png(&paths.pre, &scene.pre, &scene.gt)?;
    write_image_png(&paths.post, &scene.post, &scene.gt)?;
    write_mask_png(&paths.mask, &scene.mask, &scene.gt)?;
    std::fs::write(&paths.labels, write_geojson(features)).map_err(|source| SynthError::Io {
        path: paths.labels.clone(),
        source,
    })?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{parse_geojson, read_image_png, read_mask_png};
    use tempfile::tempdir;

    fn small_cfg(n_intact: usize, n_damaged: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            width: 192,
            height: 192,
            n_intact,
            n_damaged,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn empty_scene_is_background_only() {
        let (scene, features) = generate_scene(&small_cfg(0, 0, 1)).unwrap();
        assert!(features.features.is_empty());
        assert!(scene.mask.data().iter().all(|&c| c == 0));
        // The background still has texture for the model to look at.
        let first = scene.pre.get(0, 0);
        assert!((0..192).any(|x| scene.pre.get(x, 100) != first));
    }

    #[test]
    fn identical_configs_generate_identical_scenes() {
        let cfg = small_cfg(12, 6, 7);
        let (a, fa) = generate_scene(&cfg).unwrap();
        let (b, fb) = generate_scene(&cfg).unwrap();
        assert_eq!(a.pre.data(), b.pre.data());
        assert_eq!(a.post.data(), b.post.data());
        assert_eq!(a.mask.data(), b.mask.data());
        assert_eq!(write_geojson(&fa), write_geojson(&fb));
        let (c, _) = generate_scene(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.pre.data(), c.pre.data());
    }

    #[test]
    fn mask_is_exactly_the_rasterized_features() {
        let cfg = small_cfg(14, 7, 3);
        let (scene, features) = generate_scene(&cfg).unwrap();
        let outcome =
            rasterize_features(&features, &scene.gt, 192, 192, damage_class_rule).unwrap();
        assert_eq!(outcome.skipped, 0);
        assert_eq!(scene.mask.data(), outcome.mask.data());
        assert!(scene.mask.data().iter().any(|&c| c == 1));
        assert!(scene.mask.data().iter().any(|&c| c == 2));
    }

    /// Per-pixel even-odd point-in-polygon classification, the independent
    /// oracle for the rendered mask (half-open rule on edge crossings).
    fn brute_force_class(features: &FeatureCollection, gt: &GeoTransform, x: usize, y: usize) -> u8 {
        let (wx, wy) = gt.apply(x as f64 + 0.5, y as f64 + 0.5);
        let mut class = 0u8;
        for f in &features.features {
            let inside = {
                let ring = &f.polygon.exterior;
                let mut crossings = 0usize;
                for i in 0..ring.len() {
                    let (x1, y1) = ring[i];
                    let (x2, y2) = ring[(i + 1) % ring.len()];
                    if (y1 <= wy) != (y2 <= wy) {
                        let cx = x1 + (wy - y1) / (y2 - y1) * (x2 - x1);
                        if wx < cx {
                            crossings += 1;
                        }
                    }
                }
                crossings % 2 == 1
            };
            if inside {
                class = class.max(damage_class_rule(&f.properties));
            }
        }
        class
    }

    #[test]
    fn mask_matches_a_brute_force_point_in_polygon_oracle() {
        let cfg = SynthConfig {
            width: 96,
            height: 96,
            n_intact: 5,
            n_damaged: 3,
            seed: 11,
            ..SynthConfig::default()
        };
        let (scene, features) = generate_scene(&cfg).unwrap();
        for y in 0..96 {
            for x in 0..96 {
                assert_eq!(
                    scene.mask.get(x, y),
                    brute_force_class(&features, &scene.gt, x, y),
                    "pixel ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn feature_counts_and_tags_match_the_request() {
        let (_, features) = generate_scene(&small_cfg(9, 4, 5)).unwrap();
        assert_eq!(features.features.len(), 13);
        let damaged = features
            .features
            .iter()
            .filter(|f| damage_class_rule(&f.properties) == 2)
            .count();
        assert_eq!(damaged, 4);
        assert!(features
            .features
            .iter()
            .all(|f| f.properties["building"] == "yes"));
    }

    #[test]
    fn footprints_are_disjoint_with_min_gap_spacing() {
        let cfg = small_cfg(16, 8, 9);
        let (scene, features) = generate_scene(&cfg).unwrap();
        // Pixel-space bounding boxes from the polygon rings.
        let px_boxes: Vec<(f64, f64, f64, f64)> = features
            .features
            .iter()
            .map(|f| {
                let mut b =
                    (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
                for &(wx, wy) in &f.polygon.exterior {
                    let px = (wx - cfg.origin.0) / cfg.pixel_size;
                    let py = (cfg.origin.1 - wy) / cfg.pixel_size;
                    b.0 = b.0.min(px);
                    b.1 = b.1.min(py);
                    b.2 = b.2.max(px);
                    b.3 = b.3.max(py);
                }
                b
            })
            .collect();
        for i in 0..px_boxes.len() {
            for j in i + 1..px_boxes.len() {
                let (a, b) = (px_boxes[i], px_boxes[j]);
                let dx = (a.0 - b.2).max(b.0 - a.2).max(0.0);
                let dy = (a.1 - b.3).max(b.1 - a.3).max(0.0);
                assert!(
                    dx.max(dy) >= cfg.min_gap as f64 - 1e-9,
                    "buildings {i} and {j} closer than min_gap: dx {dx}, dy {dy}"
                );
            }
        }
        // And each rasterized footprint is 8-connected-separate: counting
        // per-feature coverage never paints a pixel twice.
        let mut coverage = vec![0u8; 192 * 192];
        for f in &features.features {
            let single = FeatureCollection::new(vec![f.clone()]);
            let m = rasterize_features(&single, &scene.gt, 192, 192, |_| 1)
                .unwrap()
                .mask;
            for (i, &v) in m.data().iter().enumerate() {
                coverage[i] += v;
            }
        }
        assert!(coverage.iter().all(|&c| c <= 1));
    }

    #[test]
    fn outside_damage_post_differs_by_shift_plus_bounded_noise() {
        let cfg = small_cfg(10, 6, 21);
        let (scene, _) = generate_scene(&cfg).unwrap();
        let shift = cfg.illumination.post_brightness_shift;
        let amp = cfg.illumination.noise_amplitude as i32;
        for y in 0..192 {
            for x in 0..192 {
                if scene.mask.get(x, y) == 2 {
                    continue;
                }
                let pre = scene.pre.get(x, y);
                let post = scene.post.get(x, y);
                for c in 0..3 {
                    let d = post[c] as i32 - pre[c] as i32 - shift;
                    assert!(
                        d.abs() <= amp,
                        "pixel ({y},{x}) channel {c}: pre {} post {}",
                        pre[c],
                        post[c]
                    );
                }
            }
        }
    }

    #[test]
    fn damaged_footprints_darken_in_the_post_image() {
        let (scene, _) = generate_scene(&small_cfg(10, 6, 31)).unwrap();
        let (mut pre_sum, mut post_sum, mut n) = (0.0f64, 0.0f64, 0u64);
        for y in 0..192 {
            for x in 0..192 {
                if scene.mask.get(x, y) == 2 {
                    pre_sum += scene.pre.get(x, y)[1] as f64;
                    post_sum += scene.post.get(x, y)[1] as f64;
                    n += 1;
                }
            }
        }
        assert!(n > 200, "expected a substantial damaged area, got {n} px");
        let ratio = post_sum / pre_sum;
        assert!(ratio < 0.65, "damaged pixels barely changed: ratio {ratio:.3}");
    }

    #[test]
    fn impossible_density_reports_the_achieved_count() {
        let cfg = SynthConfig {
            width: 64,
            height: 64,
            n_intact: 60,
            n_damaged: 40,
            min_gap: 12,
            ..SynthConfig::default()
        };
        let err = generate_scene(&cfg).unwrap_err();
        match err {
            SynthError::DensityInfeasible {
                requested,
                achieved,
                attempts,
            } => {
                assert_eq!(requested, 100);
                assert!(achieved < requested);
                assert_eq!(attempts, 100 * 100);
            }
            other => panic!("wrong error: {other}"),
        }
        assert!(err.to_string().contains("density infeasible"));
    }

    #[test]
    fn presets_encode_the_documented_domain_shift() {
        let ventura = domain_preset("ventura_like").unwrap();
        let santa_rosa = domain_preset("santa_rosa_like").unwrap();
        assert!(santa_rosa.min_gap < ventura.min_gap);
        assert_ne!(ventura.illumination, santa_rosa.illumination);
        assert_ne!(ventura.rooftop_palette, santa_rosa.rooftop_palette);

        let err = domain_preset("oakland").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ventura_like") && msg.contains("santa_rosa_like"), "{msg}");
    }

    #[test]
    fn some_buildings_are_rotated_and_some_axis_aligned() {
        let (_, features) = generate_scene(&small_cfg(20, 0, 2)).unwrap();
        let is_axis_aligned = |f: &Feature| {
            f.polygon.exterior.windows(2).all(|e| {
                (e[0].0 - e[1].0).abs() < 1e-9 || (e[0].1 - e[1].1).abs() < 1e-9
            })
        };
        let aligned = features.features.iter().filter(|f| is_axis_aligned(f)).count();
        assert!(aligned > 0, "no axis-aligned buildings in 20");
        assert!(aligned < 20, "no rotated buildings in 20");
    }

    #[test]
    fn invalid_configs_are_rejected_with_reasons() {
        let bad_size = SynthConfig {
            building_size_range: (2, 10),
            ..SynthConfig::default()
        };
        assert!(generate_scene(&bad_size).unwrap_err().to_string().contains("size_range"));
        let bad_burn = SynthConfig {
            burn_appearance: BurnAppearance {
                darkening: (0.5, 1.2),
                ..BurnAppearance::default()
            },
            ..SynthConfig::default()
        };
        assert!(generate_scene(&bad_burn).unwrap_err().to_string().contains("darkening"));
        let bad_palette = SynthConfig {
            rooftop_palette: vec![],
            ..SynthConfig::default()
        };
        assert!(generate_scene(&bad_palette).unwrap_err().to_string().contains("palette"));
    }

    #[test]
    fn written_artifacts_round_trip() {
        let cfg = small_cfg(6, 3, 13);
        let (scene, features) = generate_scene(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let paths = write_scene_artifacts(&scene, &features, &dir.path().join("scene")).unwrap();
        for p in paths.all() {
            assert!(p.exists(), "{} missing", p.display());
        }
        let (pre, gt) = read_image_png(&paths.pre).unwrap();
        assert_eq!(pre.data(), scene.pre.data());
        assert_eq!(gt, scene.gt);
        let (post, _) = read_image_png(&paths.post).unwrap();
        assert_eq!(post.data(), scene.post.data());
        let (mask, _) = read_mask_png(&paths.mask).unwrap();
        assert_eq!(mask.data(), scene.mask.data());
        let text = std::fs::read_to_string(&paths.labels).unwrap();
        let parsed = parse_geojson(&text).unwrap().collection;
        assert_eq!(parsed.features.len(), 9);
        assert_eq!(write_geojson(&parsed), write_geojson(&features));
    }

    #[test]
    fn config_serde_round_trips_and_fills_defaults() {
        let cfg = domain_preset("santa_rosa_like").unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: SynthConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);

        let partial: SynthConfig =
            serde_json::from_str(r#"{"n_intact": 3, "seed": 9}"#).unwrap();
        assert_eq!(partial.n_intact, 3);
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.width, 512);
    }
}
