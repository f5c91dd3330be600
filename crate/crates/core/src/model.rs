//! Dual-head classifier: one shared extractor, a primary softmax head over
//! the supervised classes and a pretext softmax head over rotation labels.

use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{Act, BackboneSpec, FeatureExtractor, Real, Sequential, SequentialTrace, Shape};
use crate::nn::{gemm, MatRef};
use crate::rng;

/// Row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::ZERO; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[F]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn to_f64(&self) -> Matrix<f64> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<F: Real>(logits: &Matrix<F>) -> Matrix<F> {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(row[0], F::max);
        let mut sum = F::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Spatial reduction applied before a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Global average pooling to `1 x 1`.
    #[default]
    Gap,
    /// Adaptive average pooling to `2 x 2`.
    ReducedDense,
    /// No reduction; the full map is flattened.
    Dense,
}

impl PoolingMode {
    pub fn output_len(self, c: usize, h: usize, w: usize) -> Result<usize> {
        match self {
            PoolingMode::Gap => Ok(c),
            PoolingMode::ReducedDense => {
                if h < 2 || w < 2 {
                    return Err(Error::Shape(format!(
                        "reduced-dense pooling needs at least a 2x2 map, got {h}x{w}"
                    )));
                }
                Ok(4 * c)
            }
            PoolingMode::Dense => Ok(c * h * w),
        }
    }
}

/// Bin boundaries of adaptive pooling to two cells along one axis.
fn half_bins(len: usize) -> [(usize, usize); 2] {
    [(0, len.div_ceil(2)), (len / 2, len)]
}

/// A single `C x H x W` feature map (channel-major).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<F>,
}

/// Pool one feature map to a flat vector.
///
/// Layouts: GAP gives `[c]`, reduced-dense `[c][qy][qx]`, dense `[c][y][x]`.
pub fn pool_features<F: Real>(map: &FeatureMap<F>, mode: PoolingMode) -> Result<Vec<F>> {
    if map.data.len() != map.channels * map.height * map.width {
        return Err(Error::Shape("feature map data does not match its dims".into()));
    }
    let act = Act {
        data: map.data.clone(),
        shape: Shape {
            c: map.channels,
            n: 1,
            h: map.height,
            w: map.width,
        },
    };
    Ok(pool_batch(&act, mode)?.data)
}

fn pool_batch<F: Real>(feat: &Act<F>, mode: PoolingMode) -> Result<Matrix<F>> {
    let Shape { c, n, h, w } = feat.shape;
    let d = mode.output_len(c, h, w)?;
    let mut out = Matrix::zeros(n, d);
    for ch in 0..c {
        for i in 0..n {
            let plane = &feat.data[feat.plane_offset(ch, i)..][..h * w];
            let row = out.row_mut(i);
            match mode {
                PoolingMode::Gap => {
                    row[ch] = plane.iter().copied().sum::<F>() / F::from_f64((h * w) as f64);
                }
                PoolingMode::ReducedDense => {
                    for (qy, &(y0, y1)) in half_bins(h).iter().enumerate() {
                        for (qx, &(x0, x1)) in half_bins(w).iter().enumerate() {
                            let mut s = F::ZERO;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    s += plane[y * w + x];
                                }
                            }
                            row[ch * 4 + qy * 2 + qx] = s / F::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                        }
                    }
                }
                PoolingMode::Dense => row[ch * h * w..(ch + 1) * h * w].copy_from_slice(plane),
            }
        }
    }
    Ok(out)
}

fn pool_batch_backward<F: Real>(dpooled: &Matrix<F>, shape: Shape, mode: PoolingMode, dfeat: &mut Act<F>) {
    let Shape { c, n, h, w } = shape;
    for ch in 0..c {
        for i in 0..n {
            let off = dfeat.plane_offset(ch, i);
            let plane = &mut dfeat.data[off..off + h * w];
            let row = dpooled.row(i);
            match mode {
                PoolingMode::Gap => {
                    let g = row[ch] / F::from_f64((h * w) as f64);
                    plane.iter_mut().for_each(|v| *v += g);
                }
                PoolingMode::ReducedDense => {
                    for (qy, &(y0, y1)) in half_bins(h).iter().enumerate() {
                        for (qx, &(x0, x1)) in half_bins(w).iter().enumerate() {
                            let g = row[ch * 4 + qy * 2 + qx] / F::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    plane[y * w + x] += g;
                                }
                            }
                        }
                    }
                }
                PoolingMode::Dense => {
                    for (v, g) in plane.iter_mut().zip(&row[ch * h * w..(ch + 1) * h * w]) {
                        *v += *g;
                    }
                }
            }
        }
    }
}

/// Fully connected layer, `logits = x · Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
                .collect(),
            bias: vec![F::ZERO; outputs],
        }
    }

    fn forward(&self, x: &Matrix<F>) -> Matrix<F> {
        let mut out = Matrix::zeros(x.rows, self.outputs);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(
            F::ONE,
            MatRef::row_major(&x.data, x.rows, x.cols),
            MatRef::row_major(&self.weight, self.outputs, self.inputs).t(),
            F::ONE,
            &mut out.data,
        );
        out
    }

    /// Returns `(d_weight, d_bias, d_input)`.
    fn backward(&self, x: &Matrix<F>, dlogits: &Matrix<F>) -> (Vec<F>, Vec<F>, Matrix<F>) {
        let mut dw = vec![F::ZERO; self.weight.len()];
        gemm(
            F::ONE,
            MatRef::row_major(&dlogits.data, dlogits.rows, dlogits.cols).t(),
            MatRef::row_major(&x.data, x.rows, x.cols),
            F::ZERO,
            &mut dw,
        );
        let mut db = vec![F::ZERO; self.outputs];
        for row in dlogits.iter_rows() {
            for (b, g) in db.iter_mut().zip(row) {
                *b += *g;
            }
        }
        let mut dx = Matrix::zeros(x.rows, self.inputs);
        gemm(
            F::ONE,
            MatRef::row_major(&dlogits.data, dlogits.rows, dlogits.cols),
            MatRef::row_major(&self.weight, self.outputs, self.inputs),
            F::ZERO,
            &mut dx.data,
        );
        (dw, db, dx)
    }
}

/// Expected input geometry and the fixed per-channel normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InputSpec {
    pub fn unnormalized(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub input: InputSpec,
    pub num_classes: usize,
    pub pretext_classes: usize,
    #[serde(default)]
    pub primary_pooling: PoolingMode,
    #[serde(default)]
    pub pretext_pooling: PoolingMode,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let i = &self.input;
        if i.mean.len() != i.channels || i.std.len() != i.channels {
            return Err(Error::config("model.input", "mean/std length must equal channels"));
        }
        if i.std.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::config("model.input.std", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "need at least two classes"));
        }
        if self.pretext_classes < 1 {
            return Err(Error::config("model.pretext_classes", "must be positive"));
        }
        Ok(())
    }
}

/// Which part of the model a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Extractor,
    PrimaryHead,
    PretextHead,
}

/// Which heads a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub primary: bool,
    pub pretext: bool,
}

impl Heads {
    pub const BOTH: Heads = Heads {
        primary: true,
        pretext: true,
    };
    pub const PRIMARY: Heads = Heads {
        primary: true,
        pretext: false,
    };
    pub const PRETEXT: Heads = Heads {
        primary: false,
        pretext: true,
    };
}

/// Forward activations kept for the backward pass.
pub struct ForwardPass<F: Real> {
    pub primary_logits: Option<Matrix<F>>,
    pub pretext_logits: Option<Matrix<F>>,
    trace: SequentialTrace<F>,
    feat_shape: Shape,
    primary_in: Option<Matrix<F>>,
    pretext_in: Option<Matrix<F>>,
}

/// Gradients aligned with [`DualHeadModel::params`]; `None` marks tensors
/// that did not take part in the loss.
pub struct Gradients<F> {
    pub params: Vec<Option<Vec<F>>>,
    /// Gradient w.r.t. the raw `[0, 1]` pixels, images concatenated in
    /// `H x W x C` order.
    pub input: Option<Vec<F>>,
}

/// Probabilities from both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct DualOutput {
    pub primary: Matrix<f64>,
    pub pretext: Matrix<f64>,
}

#[derive(Debug, Default)]
struct Counters {
    extractor_calls: AtomicU64,
    samples: AtomicU64,
}

pub struct DualHeadModel<F: Real = f32> {
    spec: ModelSpec,
    extractor: Sequential<F>,
    feature: (usize, usize, usize),
    primary: Linear<F>,
    pretext: Linear<F>,
    counters: Counters,
}

impl<F: Real> Clone for DualHeadModel<F> {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            extractor: self.extractor.clone(),
            feature: self.feature,
            primary: self.primary.clone(),
            pretext: self.pretext.clone(),
            counters: Counters {
                extractor_calls: AtomicU64::new(self.extractor_calls()),
                samples: AtomicU64::new(self.forwarded_samples()),
            },
        }
    }
}

impl<F: Real> std::fmt::Debug for DualHeadModel<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualHeadModel")
            .field("spec", &self.spec)
            .field("params", &self.num_params())
            .finish()
    }
}

impl<F: Real> DualHeadModel<F> {
    /// Build with weights drawn from the init stream of `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let extractor = spec.backbone.build::<F, _>(spec.input.channels, &mut rng)?;
        let feature = extractor.feature_shape(spec.input.channels, spec.input.height, spec.input.width)?;
        let (c, h, w) = feature;
        let primary = Linear::new(spec.primary_pooling.output_len(c, h, w)?, spec.num_classes, &mut rng);
        let pretext = Linear::new(spec.pretext_pooling.output_len(c, h, w)?, spec.pretext_classes, &mut rng);
        Ok(Self {
            spec,
            extractor,
            feature,
            primary,
            pretext,
            counters: Counters::default(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// `(C_f, h_f, w_f)`.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.feature
    }

    pub fn pretext_input_len(&self) -> usize {
        self.pretext.inputs
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn params(&self) -> Vec<&[F]> {
        let mut out = self.extractor.params();
        out.extend([
            &self.primary.weight[..],
            &self.primary.bias,
            &self.pretext.weight,
            &self.pretext.bias,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = self.extractor.params_mut();
        out.extend([
            &mut self.primary.weight[..],
            &mut self.primary.bias,
            &mut self.pretext.weight,
            &mut self.pretext.bias,
        ]);
        out
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Extractor; self.extractor.params().len()];
        g.extend([
            ParamGroup::PrimaryHead,
            ParamGroup::PrimaryHead,
            ParamGroup::PretextHead,
            ParamGroup::PretextHead,
        ]);
        g
    }

    /// Number of extractor forward passes so far.
    pub fn extractor_calls(&self) -> u64 {
        self.counters.extractor_calls.load(Ordering::Relaxed)
    }

    /// Number of samples pushed through the extractor so far.
    pub fn forwarded_samples(&self) -> u64 {
        self.counters.samples.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.counters.extractor_calls.store(0, Ordering::Relaxed);
        self.counters.samples.store(0, Ordering::Relaxed);
    }

    fn check_images(&self, images: &[&ImageTensor]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Empty { what: "batch" });
        }
        let i = &self.spec.input;
        for img in images {
            if img.shape() != (i.height, i.width, i.channels) {
                return Err(Error::Shape(format!(
                    "model expects {}x{}x{} images, got {:?}",
                    i.height,
                    i.width,
                    i.channels,
                    img.shape()
                )));
            }
        }
        Ok(())
    }

    fn encode(&self, images: &[&ImageTensor]) -> Act<F> {
        let i = &self.spec.input;
        let shape = Shape {
            c: i.channels,
            n: images.len(),
            h: i.height,
            w: i.width,
        };
        let mut act = Act::zeros(shape);
        for (n, img) in images.iter().enumerate() {
            for c in 0..i.channels {
                let (m, s) = (i.mean[c], i.std[c]);
                let off = act.plane_offset(c, n);
                let plane = &mut act.data[off..off + shape.plane()];
                for (p, px) in plane.iter_mut().zip(img.data().chunks_exact(i.channels)) {
                    *p = F::from_f64(f64::from((px[c] - m) / s));
                }
            }
        }
        act
    }

    /// One extractor pass feeding the requested heads; returns logits.
    pub fn forward_pass(&self, images: &[&ImageTensor], heads: Heads) -> Result<ForwardPass<F>> {
        self.check_images(images)?;
        let input = self.encode(images);
        self.counters.extractor_calls.fetch_add(1, Ordering::Relaxed);
        self.counters.samples.fetch_add(images.len() as u64, Ordering::Relaxed);
        let (feat, trace) = self.extractor.extract(input);
        let primary_in = heads
            .primary
            .then(|| pool_batch(&feat, self.spec.primary_pooling))
            .transpose()?;
        let pretext_in = if heads.pretext {
            if heads.primary && self.spec.pretext_pooling == self.spec.primary_pooling {
                primary_in.clone()
            } else {
                Some(pool_batch(&feat, self.spec.pretext_pooling)?)
            }
        } else {
            None
        };
        Ok(ForwardPass {
            primary_logits: primary_in.as_ref().map(|x| self.primary.forward(x)),
            pretext_logits: pretext_in.as_ref().map(|x| self.pretext.forward(x)),
            trace,
            feat_shape: feat.shape,
            primary_in,
            pretext_in,
        })
    }

    /// Back-propagate logit gradients of one forward pass.
    pub fn backward(
        &self,
        pass: ForwardPass<F>,
        d_primary: Option<&Matrix<F>>,
        d_pretext: Option<&Matrix<F>>,
        input_grad: bool,
    ) -> Gradients<F> {
        let mut dfeat = Act::zeros(pass.feat_shape);
        let mut head_grads: [Option<Vec<F>>; 4] = Default::default();
        if let (Some(d), Some(x)) = (d_primary, pass.primary_in.as_ref()) {
            let (dw, db, dx) = self.primary.backward(x, d);
            pool_batch_backward(&dx, pass.feat_shape, self.spec.primary_pooling, &mut dfeat);
            head_grads[0] = Some(dw);
            head_grads[1] = Some(db);
        }
        if let (Some(d), Some(x)) = (d_pretext, pass.pretext_in.as_ref()) {
            let (dw, db, dx) = self.pretext.backward(x, d);
            pool_batch_backward(&dx, pass.feat_shape, self.spec.pretext_pooling, &mut dfeat);
            head_grads[2] = Some(dw);
            head_grads[3] = Some(db);
        }
        let (ext_grads, dinput) = self.extractor.backward(pass.trace, dfeat, input_grad);
        let mut params: Vec<Option<Vec<F>>> = ext_grads.into_iter().map(Some).collect();
        params.extend(head_grads);
        let input = dinput.map(|d| self.decode_input_grad(&d));
        Gradients { params, input }
    }

    /// Map a normalized `C x N x H x W` gradient back to pixel space.
    fn decode_input_grad(&self, d: &Act<F>) -> Vec<F> {
        let i = &self.spec.input;
        let Shape { c, n, h, w } = d.shape;
        let mut out = vec![F::ZERO; d.data.len()];
        for img in 0..n {
            for ch in 0..c {
                let inv = F::from_f64(1.0 / f64::from(i.std[ch]));
                let plane = &d.data[d.plane_offset(ch, img)..][..h * w];
                for (p, g) in plane.iter().enumerate() {
                    out[(img * h * w + p) * c + ch] = *g * inv;
                }
            }
        }
        out
    }

    /// Probabilities of both heads (single extractor pass).
    pub fn forward(&self, images: &[&ImageTensor]) -> Result<DualOutput> {
        let pass = self.forward_pass(images, Heads::BOTH)?;
        Ok(DualOutput {
            primary: softmax_rows(pass.primary_logits.as_ref().expect("primary requested")).to_f64(),
            pretext: softmax_rows(pass.pretext_logits.as_ref().expect("pretext requested")).to_f64(),
        })
    }

    /// Primary-head probabilities only.
    pub fn predict_primary(&self, images: &[&ImageTensor]) -> Result<Matrix<f64>> {
        let pass = self.forward_pass(images, Heads::PRIMARY)?;
        Ok(softmax_rows(pass.primary_logits.as_ref().expect("primary requested")).to_f64())
    }

    /// Bitwise digest of all parameters.
    pub fn param_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p {
                h.update(v.to_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LOROTCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    /// Name of the pretext variant the pretext head was trained for.
    pub pretext_variant: Option<String>,
    pub epochs_trained: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    dtype: String,
    spec: ModelSpec,
    meta: CheckpointMeta,
    tensor_lens: Vec<usize>,
}

/// Checkpoint container:
///
/// ```text
/// "LOROTCKP"  8 bytes
/// version     u32 LE (1)
/// header_len  u64 LE
/// header      JSON {dtype, spec, meta, tensor_lens}
/// tensors     values in params() order, little-endian, dtype-sized
/// ```
pub fn save_checkpoint<F: Real>(model: &DualHeadModel<F>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        dtype: F::DTYPE.to_string(),
        spec: model.spec.clone(),
        meta: meta.clone(),
        tensor_lens: model.params().iter().map(|p| p.len()).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(32 + header.len() + model.num_params() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in model.params() {
        for v in p {
            match F::DTYPE {
                "f32" => buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&v.to_f64().to_le_bytes()),
            }
        }
    }
    crate::io_util::write_atomic(path, &buf)
}

/// Load a checkpoint, optionally requiring a particular model spec.
pub fn load_checkpoint<F: Real>(
    path: &Path,
    expected: Option<&ModelSpec>,
) -> Result<(DualHeadModel<F>, CheckpointMeta)> {
    let corrupt = |reason: &str| Error::CorruptSource {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingSource(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| corrupt(&e.to_string()))?;
    if header.dtype != F::DTYPE {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint holds {} weights, requested {}",
            header.dtype,
            F::DTYPE
        )));
    }
    if let Some(exp) = expected {
        if exp != &header.spec {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint model (classes {}, pretext {}) does not match config (classes {}, pretext {})",
                header.spec.num_classes, header.spec.pretext_classes, exp.num_classes, exp.pretext_classes
            )));
        }
    }
    let mut model = DualHeadModel::<F>::new(header.spec, 0)?;
    let lens: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    if lens != header.tensor_lens {
        return Err(corrupt("tensor sizes do not match the model spec"));
    }
    let width = std::mem::size_of::<F>();
    let mut cursor = &bytes[20 + hlen..];
    if cursor.len() != lens.iter().sum::<usize>() * width {
        return Err(corrupt("weight section has the wrong length"));
    }
    for p in model.params_mut() {
        for v in p.iter_mut() {
            let (head, rest) = cursor.split_at(width);
            *v = match width {
                4 => F::from_f64(f64::from(f32::from_le_bytes(head.try_into().expect("4 bytes")))),
                _ => F::from_f64(f64::from_le_bytes(head.try_into().expect("8 bytes"))),
            };
            cursor = rest;
        }
    }
    Ok((model, header.meta))
}
