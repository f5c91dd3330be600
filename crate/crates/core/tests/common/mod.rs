//! Checks shared by the property tests and the acceptance runner. The
//! oracles here are written against pixel coordinates and plain loops,
//! not against the library's own helpers.

#![allow(dead_code)]

use lorot::image::Image;
use lorot::model::{DualHeadModel, InputSpec, ModelSpec, PoolingMode};
use lorot::nn::BackboneSpec;
use lorot::train::multitask_loss;
use lorot::transforms::{
    apply_lorot, grid_cell, transform_with_label, LoRotLabel, PatchSpec, PretextTask, RotationDegree, Variant,
};
use lorot::ImageTensor;
use rand::Rng;

/// Source coordinate, patch-local, of destination `(i, j)` after a
/// counter-clockwise quarter turn applied `quarters` times.
pub fn ccw_source(i: usize, j: usize, side: usize, quarters: usize) -> (usize, usize) {
    let (mut y, mut x) = (i, j);
    for _ in 0..quarters % 4 {
        // one CCW turn moves source (y, x) to destination (side-1-x, y)
        (y, x) = (x, side - 1 - y);
    }
    (y, x)
}

pub fn random_image<R: Rng>(rng: &mut R, side: usize, channels: usize) -> Image<u8> {
    let data = (0..side * side * channels).map(|_| rng.gen()).collect();
    Image::new(side, side, channels, data).unwrap()
}

fn pixels(img: &Image<u8>) -> Vec<Vec<u8>> {
    let mut v: Vec<Vec<u8>> = (0..img.height())
        .flat_map(|y| (0..img.width()).map(move |x| (y, x)))
        .map(|(y, x)| img.pixel(y, x).to_vec())
        .collect();
    v.sort();
    v
}

/// Pixel-multiset conservation, outside-patch bit-equality, the exact
/// pixel mapping inside the patch, and four quarter turns being the
/// identity.
pub fn check_rotation_case(img: &Image<u8>, patch: &PatchSpec, rot: RotationDegree) -> Result<(), String> {
    let out = apply_lorot(img, patch, rot).map_err(|e| e.to_string())?;
    if pixels(&out) != pixels(img) {
        return Err(format!("pixel multiset changed for {patch:?} {rot:?}"));
    }
    for y in 0..img.height() {
        for x in 0..img.width() {
            let inside = y >= patch.top_y && y < patch.top_y + patch.side && x >= patch.top_x && x < patch.top_x + patch.side;
            let expected = if inside {
                let (sy, sx) = ccw_source(y - patch.top_y, x - patch.top_x, patch.side, rot.index());
                img.pixel(patch.top_y + sy, patch.top_x + sx)
            } else {
                img.pixel(y, x)
            };
            if out.pixel(y, x) != expected {
                return Err(format!("pixel ({y}, {x}) wrong for {patch:?} {rot:?}"));
            }
        }
    }
    let mut back = img.clone();
    for _ in 0..4 {
        back = apply_lorot(&back, patch, rot).map_err(|e| e.to_string())?;
    }
    if back != *img {
        return Err(format!("four applications of {rot:?} are not the identity"));
    }
    Ok(())
}

/// Every LoRot-E index decodes to a distinct (cell, rotation) pair that
/// re-encodes to itself, and the applied transform touches exactly that
/// grid cell.
pub fn check_lorot_e_labels<R: Rng>(img: &Image<u8>, rng: &mut R) -> Result<(), String> {
    let task = PretextTask::new(Variant::LoRotE);
    let side = img.height() / task.grid;
    let mut seen = std::collections::HashSet::new();
    for index in 0..task.num_classes() {
        let label = LoRotLabel::decode(&task, index).map_err(|e| e.to_string())?;
        let LoRotLabel::CellRotation { cell, rotation } = label else {
            return Err(format!("index {index} decoded to {label:?}"));
        };
        if label.index() != index || !seen.insert((cell, rotation)) {
            return Err(format!("index {index} is not a bijection point"));
        }
        let (cy, cx) = (cell / task.grid, cell % task.grid);
        let expect = PatchSpec::new(cx * side, cy * side, side);
        let s = transform_with_label(img, 0, &task, label, rng).map_err(|e| e.to_string())?;
        if (s.patch.top_x, s.patch.top_y, s.patch.side) != (expect.top_x, expect.top_y, expect.side) {
            return Err(format!("index {index} rotated {:?}, expected cell {cell}", s.patch));
        }
        let cellspec = grid_cell(img.height(), img.width(), task.grid, cell).map_err(|e| e.to_string())?;
        check_rotation_case(img, &cellspec, rotation)?;
    }
    if seen.len() != task.grid * task.grid * 4 || LoRotLabel::decode(&task, task.num_classes()).is_ok() {
        return Err("label space is not 16 (cell, rotation) pairs".into());
    }
    Ok(())
}

/// One randomized case: a random image, a random in-bounds patch and a
/// random rotation, plus the LoRot-E label check on even-sided images.
pub fn transform_case<R: Rng>(rng: &mut R) -> Result<(), String> {
    let side = 2 * rng.gen_range(2..=16);
    let channels = rng.gen_range(1..=3);
    let img = random_image(rng, side, channels);
    let ps = rng.gen_range(2..=side);
    let patch = PatchSpec::new(rng.gen_range(0..=side - ps), rng.gen_range(0..=side - ps), ps);
    let rot = RotationDegree::ALL[rng.gen_range(0..4)];
    check_rotation_case(&img, &patch, rot)
}

/// Tiny double-precision dual-head model (a few hundred parameters).
pub fn tiny_f64_model(seed: u64) -> DualHeadModel<f64> {
    let spec = ModelSpec {
        backbone: BackboneSpec::Reference { channels: vec![4] },
        input: InputSpec {
            mean: vec![0.5; 2],
            std: vec![0.25; 2],
            ..InputSpec::unnormalized(6, 6, 2)
        },
        num_classes: 3,
        pretext_classes: 4,
        primary_pooling: PoolingMode::Gap,
        pretext_pooling: PoolingMode::ReducedDense,
    };
    DualHeadModel::new(spec, seed).unwrap()
}

pub fn random_batch<R: Rng>(rng: &mut R, n: usize, side: usize, channels: usize) -> Vec<ImageTensor> {
    (0..n)
        .map(|_| ImageTensor::from_fn(side, side, channels, |_, _, _| rng.gen::<f32>()).unwrap())
        .collect()
}

/// Loss recomputed from the probability outputs alone.
pub fn reference_loss(
    model: &DualHeadModel<f64>,
    images: &[&ImageTensor],
    labels: &[usize],
    pretext: &[usize],
    lambda: f64,
) -> f64 {
    let out = model.forward(images).unwrap();
    multitask_loss(&out.primary, &out.pretext, labels, pretext, lambda).unwrap()
}

const STEPS: [f64; 5] = [1e-4, 3e-5, 1e-5, 3e-6, 1e-6];

/// Worst relative error between analytic and central-difference gradients
/// over `coords` randomly chosen parameters.
///
/// A coordinate within about 1e-6 of a ReLU or max-pool switch has no step
/// at which two difference estimates agree; it is redrawn, at most `coords`
/// times in total.
pub fn gradient_check<R: Rng>(rng: &mut R, coords: usize) -> (f64, usize) {
    let mut model = tiny_f64_model(rng.gen());
    let images = random_batch(rng, 5, 6, 2);
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
    let pretext: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
    let lambda = 0.7;
    let (_, grads) =
        lorot::train::objective_gradients(&model, &refs, &labels, Some(&pretext), lambda, false).unwrap();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst = 0.0f64;
    let (mut checked, mut redrawn) = (0, 0);
    while checked < coords {
        let mut flat = rng.gen_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let analytic = grads.params[t].as_ref().map_or(0.0, |g| g[flat]);
        let orig = model.params()[t][flat];
        let mut at = |offset: f64| {
            model.params_mut()[t][flat] = orig + offset;
            reference_loss(&model, &refs, &labels, &pretext, lambda)
        };
        // Fourth-order central stencils at shrinking steps. Large steps keep
        // rounding noise low but may straddle a switch, so take the largest
        // step whose estimate the next smaller one confirms.
        let estimates: Vec<f64> = STEPS
            .iter()
            .map(|&h| (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h))
            .collect();
        model.params_mut()[t][flat] = orig;
        let confirmed = estimates
            .windows(2)
            .find(|w| (w[0] - w[1]).abs() <= 1e-5 * w[0].abs().max(1e-4))
            .map(|w| w[0]);
        let Some(numeric) = confirmed else {
            redrawn += 1;
            assert!(redrawn <= coords, "too many non-differentiable coordinates");
            continue;
        };
        let denom = analytic.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max((analytic - numeric).abs() / denom);
        checked += 1;
    }
    (worst, total)
}

/// AUROC by counting every (in, out) pair.
pub fn pair_count_auroc(inside: &[f64], outside: &[f64]) -> f64 {
    let mut twice = 0u64;
    for a in inside {
        for b in outside {
            twice += match a.partial_cmp(b).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2 * inside.len() * outside.len()) as f64
}

/// Scores drawn from a small grid so that ties are common.
pub fn tied_scores<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(rng.gen_range(0..12u8)) * 0.25 - 1.0).collect()
}
