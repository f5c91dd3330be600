//! Localizable rotation transforms.
//!
//! Two patch-selection strategies share one exact rotation primitive:
//!
//! * **LoRot-I** rotates a random square patch whose side is drawn uniformly
//!   from `[2, ⌊min(H, W)/2⌋]` (both ends inclusive) and whose top-left
//!   corner is uniform over all positions that keep the patch inside the
//!   image. The pretext label is the rotation alone (4 classes).
//! * **LoRot-E** splits a square image into a `K x K` grid and rotates one
//!   cell. The label packs cell and rotation as `4 * cell + rotation`, cells
//!   numbered row-major from the top-left (16 classes for `K = 2`). The four
//!   `rotation = 0` labels are kept, so a quarter of draws leave the image
//!   untouched.
//!
//! Rotations are counter-clockwise multiples of 90 degrees applied as pixel
//! permutations; pixels outside the patch are never touched.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, MIN_SIDE};
use crate::rng;

pub const NUM_ROTATIONS: usize = 4;
pub const DEFAULT_GRID: usize = 2;
pub const MIN_PATCH_SIDE: usize = 2;

/// Counter-clockwise rotation by `90 * index` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RotationDegree {
    R0,
    R90,
    R180,
    R270,
}

impl RotationDegree {
    pub const ALL: [RotationDegree; 4] = [Self::R0, Self::R90, Self::R180, Self::R270];

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn degrees(self) -> u32 {
        90 * self as u32
    }

    /// `self` followed by `other`.
    pub fn compose(self, other: Self) -> Self {
        Self::ALL[(self.index() + other.index()) % NUM_ROTATIONS]
    }
}

/// A square region selected for rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub top_x: usize,
    pub top_y: usize,
    pub side: usize,
    /// Row-major grid cell when the patch came from a grid layout.
    pub cell_index: Option<usize>,
}

impl PatchSpec {
    pub fn new(top_x: usize, top_y: usize, side: usize) -> Self {
        Self {
            top_x,
            top_y,
            side,
            cell_index: None,
        }
    }

    /// The whole (square) image as one patch.
    pub fn full(side: usize) -> Self {
        Self {
            top_x: 0,
            top_y: 0,
            side,
            cell_index: Some(0),
        }
    }

    pub fn check_fits(&self, height: usize, width: usize) -> Result<()> {
        if self.side < MIN_PATCH_SIDE {
            return Err(Error::InvalidPatch(format!(
                "side {} is below the minimum of {MIN_PATCH_SIDE}",
                self.side
            )));
        }
        if self.top_x + self.side > width || self.top_y + self.side > height {
            return Err(Error::PatchOutOfBounds {
                top_x: self.top_x,
                top_y: self.top_y,
                side: self.side,
                height,
                width,
            });
        }
        Ok(())
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top_y..self.top_y + self.side).contains(&y)
            && (self.top_x..self.top_x + self.side).contains(&x)
    }
}

/// A bound on the LoRot-I patch side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideBound {
    /// An absolute side length in pixels.
    Pixels(usize),
    /// `⌊min(H, W) / d⌋` for the given divisor `d`.
    Fraction(usize),
}

impl SideBound {
    fn resolve(self, height: usize, width: usize) -> usize {
        match self {
            SideBound::Pixels(p) => p,
            SideBound::Fraction(d) => height.min(width) / d.max(1),
        }
    }
}

/// Inclusive range of LoRot-I patch sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSizeRange {
    pub min: SideBound,
    pub max: SideBound,
}

impl Default for PatchSizeRange {
    fn default() -> Self {
        Self {
            min: SideBound::Pixels(MIN_PATCH_SIDE),
            max: SideBound::Fraction(2),
        }
    }
}

impl PatchSizeRange {
    pub fn fixed(bound: SideBound) -> Self {
        Self {
            min: bound,
            max: bound,
        }
    }

    pub fn resolve(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let lo = self.min.resolve(height, width).max(MIN_PATCH_SIDE);
        let hi = self.max.resolve(height, width);
        if hi < lo || hi > height.min(width) {
            return Err(Error::InvalidPatch(format!(
                "side range [{lo}, {hi}] is empty or exceeds a {height}x{width} image"
            )));
        }
        Ok((lo, hi))
    }
}

/// Which pretext transform to draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Random patch, rotation-only label.
    #[serde(rename = "lorot_i")]
    LoRotI,
    /// Grid cell, (cell, rotation) label.
    #[serde(rename = "lorot_e")]
    LoRotE,
    /// Whole-image rotation, rotation-only label.
    GlobalRotation,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::LoRotI => "lorot_i",
            Variant::LoRotE => "lorot_e",
            Variant::GlobalRotation => "global_rotation",
        }
    }
}

/// A pretext transform together with its geometry parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretextTask {
    pub variant: Variant,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default)]
    pub patch_range: PatchSizeRange,
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

impl PretextTask {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            grid: DEFAULT_GRID,
            patch_range: PatchSizeRange::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.variant {
            Variant::LoRotI | Variant::GlobalRotation => NUM_ROTATIONS,
            Variant::LoRotE => self.grid * self.grid * NUM_ROTATIONS,
        }
    }

    /// Check that images of this shape can be transformed.
    pub fn check_image(&self, height: usize, width: usize) -> Result<()> {
        match self.variant {
            Variant::LoRotI => self.patch_range.resolve(height, width).map(|_| ()),
            Variant::LoRotE => grid_side(height, width, self.grid).map(|_| ()),
            Variant::GlobalRotation => check_square(height, width),
        }
    }
}

/// The pretext class of a transformed sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoRotLabel {
    /// LoRot-I and global rotation.
    Rotation(RotationDegree),
    /// LoRot-E.
    CellRotation { cell: usize, rotation: RotationDegree },
}

impl LoRotLabel {
    pub fn rotation(&self) -> RotationDegree {
        match *self {
            LoRotLabel::Rotation(r) | LoRotLabel::CellRotation { rotation: r, .. } => r,
        }
    }

    /// Class index; `4 * cell + rotation` for cell labels.
    pub fn index(&self) -> usize {
        match *self {
            LoRotLabel::Rotation(r) => r.index(),
            LoRotLabel::CellRotation { cell, rotation } => NUM_ROTATIONS * cell + rotation.index(),
        }
    }

    pub fn decode(task: &PretextTask, index: usize) -> Result<Self> {
        let classes = task.num_classes();
        if index >= classes {
            return Err(Error::LabelOutOfRange {
                label: index,
                classes,
            });
        }
        let rotation = RotationDegree::ALL[index % NUM_ROTATIONS];
        Ok(match task.variant {
            Variant::LoRotI | Variant::GlobalRotation => LoRotLabel::Rotation(rotation),
            Variant::LoRotE => LoRotLabel::CellRotation {
                cell: index / NUM_ROTATIONS,
                rotation,
            },
        })
    }
}

fn check_square(height: usize, width: usize) -> Result<()> {
    if height != width {
        return Err(Error::NonSquareImage { height, width });
    }
    Ok(())
}

fn grid_side(height: usize, width: usize, grid: usize) -> Result<usize> {
    check_square(height, width)?;
    if grid == 0 || height % grid != 0 {
        return Err(Error::NonDivisibleGrid { side: height, grid });
    }
    let side = height / grid;
    if side < MIN_PATCH_SIDE {
        return Err(Error::InvalidPatch(format!(
            "grid {grid} on a {height}px image gives {side}px cells"
        )));
    }
    Ok(side)
}

/// Draw a LoRot-I patch with the default side range `[2, ⌊min(H, W)/2⌋]`.
pub fn sample_patch_i<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Result<PatchSpec> {
    sample_patch_in_range(rng, height, width, &PatchSizeRange::default())
}

pub fn sample_patch_in_range<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    range: &PatchSizeRange,
) -> Result<PatchSpec> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::DimensionTooSmall {
            height,
            width,
            min: MIN_SIDE,
        });
    }
    let (lo, hi) = range.resolve(height, width)?;
    let side = rng.gen_range(lo..=hi);
    let top_x = rng.gen_range(0..=width - side);
    let top_y = rng.gen_range(0..=height - side);
    Ok(PatchSpec::new(top_x, top_y, side))
}

/// The `cell`-th (row-major) cell of a `grid x grid` layout.
pub fn grid_cell(height: usize, width: usize, grid: usize, cell: usize) -> Result<PatchSpec> {
    let side = grid_side(height, width, grid)?;
    if cell >= grid * grid {
        return Err(Error::LabelOutOfRange {
            label: cell,
            classes: grid * grid,
        });
    }
    Ok(PatchSpec {
        top_x: (cell % grid) * side,
        top_y: (cell / grid) * side,
        side,
        cell_index: Some(cell),
    })
}

/// Pick one of the `grid²` cells uniformly.
pub fn sample_cell_e<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    grid: usize,
) -> Result<PatchSpec> {
    grid_side(height, width, grid)?;
    let cell = rng.gen_range(0..grid * grid);
    grid_cell(height, width, grid, cell)
}

/// Uniform over the task's full label space, identity labels included.
pub fn sample_label<R: Rng + ?Sized>(rng: &mut R, task: &PretextTask) -> LoRotLabel {
    let index = rng.gen_range(0..task.num_classes());
    LoRotLabel::decode(task, index).expect("index drawn inside label space")
}

/// Rotate the square `patch` of `image` counter-clockwise.
pub fn apply_lorot<T: Copy>(
    image: &Image<T>,
    patch: &PatchSpec,
    rotation: RotationDegree,
) -> Result<Image<T>> {
    patch.check_fits(image.height(), image.width())?;
    let mut out = image.clone();
    rotate_patch_in_place(&mut out, image, patch, rotation);
    Ok(out)
}

fn rotate_patch_in_place<T: Copy>(
    out: &mut Image<T>,
    src: &Image<T>,
    patch: &PatchSpec,
    rotation: RotationDegree,
) {
    if rotation == RotationDegree::R0 {
        return;
    }
    let s = patch.side;
    let last = s - 1;
    let channels = src.channels();
    for i in 0..s {
        for j in 0..s {
            // destination (i, j) pulls from source (si, sj), both patch-local
            let (si, sj) = match rotation {
                RotationDegree::R0 => (i, j),
                RotationDegree::R90 => (j, last - i),
                RotationDegree::R180 => (last - i, last - j),
                RotationDegree::R270 => (last - j, i),
            };
            let from = src.index(patch.top_y + si, patch.top_x + sj, 0);
            let to = out.index(patch.top_y + i, patch.top_x + j, 0);
            out.data_mut()[to..to + channels].copy_from_slice(&src.data()[from..from + channels]);
        }
    }
}

/// Rotate a whole square image.
pub fn apply_global_rotation<T: Copy>(image: &Image<T>, rotation: RotationDegree) -> Result<Image<T>> {
    if rotation == RotationDegree::R0 {
        return Ok(image.clone());
    }
    check_square(image.height(), image.width())?;
    apply_lorot(image, &PatchSpec::full(image.height()), rotation)
}

/// An image after one pretext draw.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedSample<T = f32> {
    pub image: Image<T>,
    pub primary_label: usize,
    pub pretext_label: LoRotLabel,
    pub patch: PatchSpec,
}

/// Draw a label (and patch) for one image and apply it.
///
/// LoRot-I samples a patch even for the identity rotation so that the
/// number of random draws per sample is constant.
pub fn transform_sample<T: Copy, R: Rng + ?Sized>(
    image: &Image<T>,
    primary_label: usize,
    task: &PretextTask,
    rng: &mut R,
) -> Result<TransformedSample<T>> {
    let label = sample_label(rng, task);
    transform_with_label(image, primary_label, task, label, rng)
}

/// Apply a given pretext label; LoRot-I still draws its patch from `rng`.
pub fn transform_with_label<T: Copy, R: Rng + ?Sized>(
    image: &Image<T>,
    primary_label: usize,
    task: &PretextTask,
    label: LoRotLabel,
    rng: &mut R,
) -> Result<TransformedSample<T>> {
    let (h, w) = (image.height(), image.width());
    if label.index() >= task.num_classes() || matches!((task.variant, label), (Variant::LoRotE, LoRotLabel::Rotation(_)) | (Variant::LoRotI | Variant::GlobalRotation, LoRotLabel::CellRotation { .. })) {
        return Err(Error::LabelOutOfRange {
            label: label.index(),
            classes: task.num_classes(),
        });
    }
    let patch = match (task.variant, label) {
        (Variant::LoRotI, _) => sample_patch_in_range(rng, h, w, &task.patch_range)?,
        (Variant::LoRotE, LoRotLabel::CellRotation { cell, .. }) => grid_cell(h, w, task.grid, cell)?,
        (Variant::GlobalRotation, _) => {
            check_square(h, w)?;
            PatchSpec::full(h)
        }
        (Variant::LoRotE, LoRotLabel::Rotation(_)) => unreachable!("checked above"),
    };
    let transformed = apply_lorot(image, &patch, label.rotation())?;
    Ok(TransformedSample {
        image: transformed,
        primary_label,
        pretext_label: label,
        patch,
    })
}

/// Transform a batch with one independent draw per sample.
///
/// A single batch key is drawn from `rng`; sample `i` then uses its own
/// stream derived from `(key, i)`, so the output does not depend on the
/// rayon thread count.
pub fn transform_batch<T, R>(
    samples: &[(Image<T>, usize)],
    task: &PretextTask,
    rng: &mut R,
) -> Result<Vec<TransformedSample<T>>>
where
    T: Copy + Send + Sync,
    R: Rng + ?Sized,
{
    if samples.is_empty() {
        return Err(Error::Empty { what: "batch" });
    }
    let key: u64 = rng.gen();
    samples
        .par_iter()
        .enumerate()
        .map(|(i, (img, y))| {
            let mut sample_rng = rng::stream(key, &[rng::tag::TRANSFORM, i as u64]);
            transform_sample(img, *y, task, &mut sample_rng)
        })
        .collect()
}
