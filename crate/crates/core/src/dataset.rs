//! Training-chip assembly: window enumeration, augmentation, leakage-free
//! spatial splits, class statistics, and the chip manifest format.
//!
//! A [`Scene`] bundles a co-registered pre image, post image, and class
//! mask. [`make_chips`] cuts it into fixed-size square [`Chip`]s along a
//! stride grid (plus edge-flush extras so every pixel is covered), and
//! [`split_chipset`] partitions chips into train and validation sides by
//! disjoint spatial blocks so overlapping chips can never leak across the
//! split. Chip sets serialize to a JSON-lines manifest holding window
//! coordinates only; chips are re-extracted from their scenes on load.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoTransform, ImageRaster, MaskRaster};
use crate::net::Tensor;
use crate::parallel;

/// Errors from chip extraction, splitting, and manifest handling.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(
        "scene {name}: pre is {pre_h}x{pre_w}, post is {post_h}x{post_w}, \
         mask is {mask_h}x{mask_w}; all three must share one size"
    )]
    DimensionMismatch {
        name: String,
        pre_h: usize,
        pre_w: usize,
        post_h: usize,
        post_w: usize,
        mask_h: usize,
        mask_w: usize,
    },
    #[error(
        "scene smaller than chip: scene {name} is {height}x{width} but chip_size is {chip_size}"
    )]
    SceneSmallerThanChip {
        name: String,
        height: usize,
        width: usize,
        chip_size: usize,
    },
    #[error("stride must satisfy 1 <= stride <= chip_size, got {stride} (chip_size {chip_size})")]
    BadStride { stride: usize, chip_size: usize },
    #[error("val_fraction must lie strictly between 0 and 1, got {0}")]
    BadValFraction(f64),
    #[error("{0} must not be empty")]
    EmptyChipSet(&'static str),
    #[error("split produced an empty {side} side at val_fraction {val_fraction}")]
    EmptySplitSide {
        side: &'static str,
        val_fraction: f64,
    },
    #[error("manifest {path}: line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("manifest references unknown scene {name}")]
    UnknownScene { name: String },
    #[error(
        "window ({row0}, {col0}) size {size} falls outside scene {name} ({height}x{width})"
    )]
    WindowOutOfBounds {
        name: String,
        row0: usize,
        col0: usize,
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("i/o error for {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which leg of the workflow a chip set feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Finetune,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Finetune => "finetune",
            Role::Test => "test",
        };
        f.write_str(s)
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Role::Train),
            "val" => Ok(Role::Val),
            "finetune" => Ok(Role::Finetune),
            "test" => Ok(Role::Test),
            other => Err(format!(
                "unknown role {other:?}; expected train, val, finetune, or test"
            )),
        }
    }
}

/// A rectangular pixel window `[row0, row0+height) x [col0, col0+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn square(row0: usize, col0: usize, size: usize) -> Window {
        Window {
            row0,
            col0,
            height: size,
            width: size,
        }
    }

    /// True when the two half-open pixel rectangles share at least one pixel.
    pub fn intersects(&self, other: &Window) -> bool {
        self.row0 < other.row0 + other.height
            && other.row0 < self.row0 + self.height
            && self.col0 < other.col0 + other.width
            && other.col0 < self.col0 + self.width
    }
}

/// A co-registered pre image, post image, and class mask with one
/// geotransform.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub pre: ImageRaster,
    pub post: ImageRaster,
    pub mask: MaskRaster,
    pub gt: GeoTransform,
}

impl Scene {
    /// Bundles the rasters, verifying that all three share one size.
    pub fn new(
        name: impl Into<String>,
        pre: ImageRaster,
        post: ImageRaster,
        mask: MaskRaster,
        gt: GeoTransform,
    ) -> Result<Scene, DatasetError> {
        let name = name.into();
        if pre.height() != post.height()
            || pre.width() != post.width()
            || pre.height() != mask.height()
            || pre.width() != mask.width()
        {
            return Err(DatasetError::DimensionMismatch {
                name,
                pre_h: pre.height(),
                pre_w: pre.width(),
                post_h: post.height(),
                post_w: post.width(),
                mask_h: mask.height(),
                mask_w: mask.width(),
            });
        }
        Ok(Scene {
            name,
            pre,
            post,
            mask,
            gt,
        })
    }

    pub fn height(&self) -> usize {
        self.pre.height()
    }

    pub fn width(&self) -> usize {
        self.pre.width()
    }
}

/// One square training sample cut from a scene.
///
/// `pre_patch` and `post_patch` are `[3, size, size]` tensors with values
/// scaled to `[0, 1]` (byte value / 255). `mask_patch` is the row-major
/// class code block under the same window.
#[derive(Debug, Clone, PartialEq)]
pub struct Chip {
    pub scene_name: String,
    pub window: Window,
    pub pre_patch: Tensor,
    pub post_patch: Tensor,
    pub mask_patch: Vec<u8>,
}

impl Chip {
    pub fn size(&self) -> usize {
        self.window.height
    }
}

/// An ordered list of chips plus the workflow role they serve.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipSet {
    pub chips: Vec<Chip>,
    pub role: Role,
}

impl ChipSet {
    pub fn new(chips: Vec<Chip>, role: Role) -> ChipSet {
        ChipSet { chips, role }
    }

    pub fn len(&self) -> usize {
        self.chips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chips.is_empty()
    }
}

/// Window start offsets along one axis: the stride grid while a full chip
/// fits, plus a final edge-flush start so the last pixels are covered.
pub(crate) fn axis_starts(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    debug_assert!(size <= dim && stride >= 1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + size <= dim {
        starts.push(s);
        s += stride;
    }
    let flush = dim - size;
    if starts.last() != Some(&flush) {
        starts.push(flush);
    }
    starts
}

/// All square windows covering a `height` x `width` scene, row-major.
pub(crate) fn enumerate_windows(
    height: usize,
    width: usize,
    size: usize,
    stride: usize,
) -> Vec<Window> {
    let rows = axis_starts(height, size, stride);
    let cols = axis_starts(width, size, stride);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            out.push(Window::square(r, c, size));
        }
    }
    out
}

/// Cuts one chip out of a scene. The window must lie inside the scene.
pub fn extract_chip(scene: &Scene, window: Window) -> Chip {
    let (h, w) = (window.height, window.width);
    let patch = |img: &ImageRaster| -> Tensor {
        let mut data = Vec::with_capacity(3 * h * w);
        for band in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let px = img.get(window.col0 + x, window.row0 + y);
                    data.push(px[band] as f32 / 255.0);
                }
            }
        }
        Tensor::from_vec(&[3, h, w], data)
    };
    let pre_patch = patch(&scene.pre);
    let post_patch = patch(&scene.post);
    let mut mask_patch = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            mask_patch.push(scene.mask.get(window.col0 + x, window.row0 + y));
        }
    }
    Chip {
        scene_name: scene.name.clone(),
        window,
        pre_patch,
        post_patch,
        mask_patch,
    }
}

/// Cuts a scene into square chips of `chip_size` pixels on a `stride` grid
/// (plus edge-flush extras so all pixels are covered), dropping chips whose
/// mask foreground fraction (classes 1 and 2 together) falls below
/// `min_foreground`. Chip order is window row-major regardless of the
/// configured thread count.
pub fn make_chips(
    scene: &Scene,
    chip_size: usize,
    stride: usize,
    min_foreground: f64,
) -> Result<ChipSet, DatasetError> {
    if chip_size > scene.height() || chip_size > scene.width() {
        return Err(DatasetError::SceneSmallerThanChip {
            name: scene.name.clone(),
            height: scene.height(),
            width: scene.width(),
            chip_size,
        });
    }
    if stride < 1 || stride > chip_size {
        return Err(DatasetError::BadStride { stride, chip_size });
    }
    let windows = enumerate_windows(scene.height(), scene.width(), chip_size, stride);
    let chips = parallel::map_indexed(windows.len(), |i| extract_chip(scene, windows[i]));
    let area = (chip_size * chip_size) as f64;
    let chips = chips
        .into_iter()
        .filter(|chip| {
            let fg = chip.mask_patch.iter().filter(|&&v| v != 0).count();
            fg as f64 / area >= min_foreground
        })
        .collect();
    Ok(ChipSet::new(chips, Role::Train))
}

/// A spatial transform applied identically to both image patches and the
/// mask of a chip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 6] = [
        AugmentOp::Identity,
        AugmentOp::HFlip,
        AugmentOp::VFlip,
        AugmentOp::Rot90,
        AugmentOp::Rot180,
        AugmentOp::Rot270,
    ];

    /// Source pixel (row, col) that lands at output (y, x) in an n x n
    /// patch. Rotations are clockwise.
    fn source(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        match self {
            AugmentOp::Identity => (y, x),
            AugmentOp::HFlip => (y, n - 1 - x),
            AugmentOp::VFlip => (n - 1 - y, x),
            AugmentOp::Rot90 => (n - 1 - x, y),
            AugmentOp::Rot180 => (n - 1 - y, n - 1 - x),
            AugmentOp::Rot270 => (x, n - 1 - y),
        }
    }
}

/// Applies the same spatial transform to pre, post, and mask of a chip.
pub fn augment_chip(chip: &Chip, op: AugmentOp) -> Chip {
    if op == AugmentOp::Identity {
        return chip.clone();
    }
    let n = chip.size();
    let transform_tensor = |t: &Tensor| -> Tensor {
        let mut data = Vec::with_capacity(t.len());
        for band in 0..3 {
            let plane = &t.data()[band * n * n..(band + 1) * n * n];
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = op.source(y, x, n);
                    data.push(plane[sy * n + sx]);
                }
            }
        }
        Tensor::from_vec(&[3, n, n], data)
    };
    let mut mask_patch = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (sy, sx) = op.source(y, x, n);
            mask_patch.push(chip.mask_patch[sy * n + sx]);
        }
    }
    Chip {
        scene_name: chip.scene_name.clone(),
        window: chip.window,
        pre_patch: transform_tensor(&chip.pre_patch),
        post_patch: transform_tensor(&chip.post_patch),
        mask_patch,
    }
}

/// Splits a chip set into train and validation sides along disjoint spatial
/// blocks (an 8x8 grid over each scene's chip extent), so that validation
/// chips never overlap training chips even when chips themselves overlap.
///
/// Whole blocks are assigned to validation in a seed-shuffled order until
/// the validation side reaches `val_fraction` of the chips; chips outside
/// the validation blocks whose windows still intersect a validation window
/// are dropped rather than leaked into train.
pub fn split_chipset(
    cs: &ChipSet,
    val_fraction: f64,
    seed: u64,
) -> Result<(ChipSet, ChipSet), DatasetError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::BadValFraction(val_fraction));
    }
    if cs.is_empty() {
        return Err(DatasetError::EmptyChipSet("chip set to split"));
    }

    // Per-scene chip extent (max window end per axis).
    let mut extents: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for chip in &cs.chips {
        let e = extents.entry(chip.scene_name.as_str()).or_insert((0, 0));
        e.0 = e.0.max(chip.window.row0 + chip.window.height);
        e.1 = e.1.max(chip.window.col0 + chip.window.width);
    }

    // Block coordinates from the window center, in doubled integer units to
    // stay exact: center*2 = 2*start + size.
    let block_of = |chip: &Chip| -> (String, usize, usize) {
        let (eh, ew) = extents[chip.scene_name.as_str()];
        let br = ((2 * chip.window.row0 + chip.window.height) * 8 / (2 * eh)).min(7);
        let bc = ((2 * chip.window.col0 + chip.window.width) * 8 / (2 * ew)).min(7);
        (chip.scene_name.clone(), br, bc)
    };

    let blocks: Vec<(String, usize, usize)> = cs
        .chips
        .iter()
        .map(block_of)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut shuffled = blocks;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut block_sizes: BTreeMap<(String, usize, usize), usize> = BTreeMap::new();
    for chip in &cs.chips {
        *block_sizes.entry(block_of(chip)).or_insert(0) += 1;
    }

    let target = val_fraction * cs.len() as f64;
    let mut val_blocks: BTreeSet<(String, usize, usize)> = BTreeSet::new();
    let mut val_count = 0usize;
    for block in shuffled {
        if val_count as f64 >= target {
            break;
        }
        val_count += block_sizes[&block];
        val_blocks.insert(block);
    }

    let mut val_chips = Vec::new();
    let mut train_candidates = Vec::new();
    for chip in &cs.chips {
        if val_blocks.contains(&block_of(chip)) {
            val_chips.push(chip.clone());
        } else {
            train_candidates.push(chip);
        }
    }
    let train_chips: Vec<Chip> = train_candidates
        .into_iter()
        .filter(|chip| {
            !val_chips.iter().any(|v| {
                v.scene_name == chip.scene_name && v.window.intersects(&chip.window)
            })
        })
        .cloned()
        .collect();

    for (side, chips) in [("train", &train_chips), ("val", &val_chips)] {
        if chips.is_empty() {
            return Err(DatasetError::EmptySplitSide { side, val_fraction });
        }
    }
    Ok((
        ChipSet::new(train_chips, Role::Train),
        ChipSet::new(val_chips, Role::Val),
    ))
}

/// Inverse-frequency class weights over all mask pixels in the set:
/// `weight_c = total / (3 * count_c)` with `count_c` floored at 1.
pub fn class_weights(cs: &ChipSet) -> Result<[f32; 3], DatasetError> {
    if cs.is_empty() {
        return Err(DatasetError::EmptyChipSet("chip set for class weights"));
    }
    let mut counts = [0u64; 3];
    for chip in &cs.chips {
        for &v in &chip.mask_patch {
            counts[v as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let mut weights = [0.0f32; 3];
    for c in 0..3 {
        weights[c] = (total as f64 / (3.0 * counts[c].max(1) as f64)) as f32;
    }
    Ok(weights)
}

/// One manifest line: where a chip came from and which role it serves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipRecord {
    pub scene: String,
    pub row0: usize,
    pub col0: usize,
    pub size: usize,
    pub role: Role,
}

/// Writes chip sets as a JSON-lines manifest, one record per chip.
pub fn write_manifest(sets: &[&ChipSet], path: &Path) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for set in sets {
        for chip in &set.chips {
            let record = ChipRecord {
                scene: chip.scene_name.clone(),
                row0: chip.window.row0,
                col0: chip.window.col0,
                size: chip.window.height,
                role: set.role,
            };
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(out, "{line}").map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

/// Reads a JSON-lines chip manifest. Blank lines are ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<ChipRecord>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| DatasetError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Re-extracts manifest records from their scenes, grouped by role in
/// `Role` order. Records keep their manifest order within each role.
pub fn chips_from_records(
    records: &[ChipRecord],
    scenes: &[Scene],
) -> Result<Vec<ChipSet>, DatasetError> {
    let by_name: BTreeMap<&str, &Scene> =
        scenes.iter().map(|s| (s.name.as_str(), s)).collect();
    let mut by_role: BTreeMap<Role, Vec<Chip>> = BTreeMap::new();
    for record in records {
        let scene =
            *by_name
                .get(record.scene.as_str())
                .ok_or_else(|| DatasetError::UnknownScene {
                    name: record.scene.clone(),
                })?;
        if record.row0 + record.size > scene.height() || record.col0 + record.size > scene.width()
        {
            return Err(DatasetError::WindowOutOfBounds {
                name: record.scene.clone(),
                row0: record.row0,
                col0: record.col0,
                size: record.size,
                height: scene.height(),
                width: scene.width(),
            });
        }
        let window = Window::square(record.row0, record.col0, record.size);
        by_role
            .entry(record.role)
            .or_default()
            .push(extract_chip(scene, window));
    }
    Ok(by_role
        .into_iter()
        .map(|(role, chips)| ChipSet::new(chips, role))
        .collect())
}
