use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticSpec;
use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io_util::write_atomic;

/// Packed file layout (all integers little-endian):
///
/// ```text
/// magic "LOROTPK1" | H u32 | W u32 | C u32 | count u64 | classes u32
/// then `count` records of: label u32 | H*W*C bytes (HWC, u8)
/// ```
pub const PACKED_MAGIC: &[u8; 8] = b"LOROTPK1";
const PACKED_HEADER: usize = 8 + 4 * 3 + 8 + 4;

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", deny_unknown_fields)]
pub enum DatasetSource {
    /// `<root>/<split>/<class_name>/<image files>`; classes and files are
    /// taken in lexicographic order.
    Directory { root: PathBuf },
    Packed { path: PathBuf },
    Synthetic { spec: SyntheticSpec },
}

pub fn load_dataset(source: &DatasetSource, split: Split) -> Result<LabeledDataset> {
    match source {
        DatasetSource::Directory { root } => load_directory(root, split),
        DatasetSource::Packed { path } => read_packed(path, split),
        DatasetSource::Synthetic { spec } => spec.generate(split),
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptSource {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn load_directory(root: &Path, split: Split) -> Result<LabeledDataset> {
    let dir = root.join(split.name());
    if !dir.is_dir() {
        return Err(Error::MissingSource(dir));
    }
    let classes: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(corrupt(&dir, "no class directories"));
    }
    let mut names = Vec::new();
    let mut samples = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        names.push(class_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        for file in sorted_entries(class_dir)?.into_iter().filter(|p| p.is_file()) {
            let img = image::open(&file).map_err(|e| corrupt(&file, e.to_string()))?.to_rgb8();
            let (w, h) = img.dimensions();
            let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
            let tensor = ImageTensor::new(h as usize, w as usize, 3, data).map_err(|e| corrupt(&file, e.to_string()))?;
            if let Some((first, _)) = samples.first() {
                let first: &ImageTensor = first;
                if first.shape() != tensor.shape() {
                    return Err(corrupt(&file, format!("shape {:?} differs from {:?}", tensor.shape(), first.shape())));
                }
            }
            samples.push((tensor, label));
        }
    }
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    LabeledDataset::new(name, split, names, samples)
}

/// Write a dataset in the packed format (pixels quantized to u8).
pub fn write_packed(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let (h, w, c) = dataset.image_shape().unwrap_or((0, 0, 0));
    let mut bytes = Vec::with_capacity(PACKED_HEADER + dataset.len() * (4 + h * w * c));
    bytes.extend_from_slice(PACKED_MAGIC);
    for d in [h, w, c] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&(dataset.num_classes() as u32).to_le_bytes());
    for (img, y) in dataset.samples() {
        bytes.extend_from_slice(&(*y as u32).to_le_bytes());
        bytes.extend_from_slice(img.to_u8().data());
    }
    write_atomic(path, &bytes)
}

pub fn read_packed(path: &Path, split: Split) -> Result<LabeledDataset> {
    if !path.exists() {
        return Err(Error::MissingSource(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < PACKED_HEADER || &bytes[..8] != PACKED_MAGIC {
        return Err(corrupt(path, "bad magic or truncated header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (u32_at(8), u32_at(12), u32_at(16));
    let count = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) as usize;
    let classes = u32_at(28);
    let record = 4 + h * w * c;
    if bytes.len() != PACKED_HEADER + count * record {
        return Err(corrupt(
            path,
            format!("expected {} bytes for {count} records, found {}", PACKED_HEADER + count * record, bytes.len()),
        ));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let off = PACKED_HEADER + i * record;
        let label = u32_at(off);
        let data = bytes[off + 4..off + record].iter().map(|&v| f32::from(v) / 255.0).collect();
        let img = ImageTensor::new(h, w, c, data).map_err(|e| corrupt(path, e.to_string()))?;
        samples.push((img, label));
    }
    let names = (0..classes).map(|i| format!("class_{i}")).collect();
    let name = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    LabeledDataset::new(name, split, names, samples).map_err(|e| corrupt(path, e.to_string()))
}

/// Named dataset sources, usually read from a TOML file:
///
/// ```toml
/// [datasets.glyphs]
/// source = "synthetic"
/// spec = { kind = "glyphs", count = 2000 }
///
/// [datasets.svhn-like]
/// source = "directory"
/// root = "data/svhn"
/// ```
///
/// Relative paths resolve against the registry file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registry {
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetSource>,
}

impl Registry {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reg: Registry = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for src in reg.datasets.values_mut() {
            match src {
                DatasetSource::Directory { root: p } | DatasetSource::Packed { path: p } if p.is_relative() => {
                    *p = base.join(&*p);
                }
                _ => {}
            }
        }
        Ok(reg)
    }

    pub fn insert(&mut self, name: impl Into<String>, source: DatasetSource) {
        self.datasets.insert(name.into(), source);
    }

    pub fn get(&self, name: &str) -> Result<&DatasetSource> {
        self.datasets.get(name).ok_or_else(|| Error::UnknownDataset(name.to_string()))
    }

    pub fn load(&self, name: &str, split: Split) -> Result<LabeledDataset> {
        let mut d = load_dataset(self.get(name)?, split)?;
        d.name = name.to_string();
        Ok(d)
    }
}

/// How to reconcile out-of-distribution images with the in-distribution
/// shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeRule {
    /// Shapes must already match.
    #[default]
    Reject,
    /// Bilinear resize to the in-distribution height and width.
    Bilinear,
}

/// In-distribution test set and an out-of-distribution set scored against
/// it. Out-of-distribution labels are kept for grouping only.
#[derive(Debug, Clone, PartialEq)]
pub struct OodEvalPair {
    pub in_dist: LabeledDataset,
    pub out_dist: LabeledDataset,
}

impl OodEvalPair {
    pub fn new(in_dist: LabeledDataset, out_dist: LabeledDataset, resize: ResizeRule) -> Result<Self> {
        let (Some(want), Some(have)) = (in_dist.image_shape(), out_dist.image_shape()) else {
            return Err(Error::Empty { what: "OOD pair dataset" });
        };
        if want.2 != have.2 {
            return Err(Error::Shape(format!("channel mismatch: {} vs {}", want.2, have.2)));
        }
        let out_dist = if want == have {
            out_dist
        } else if resize == ResizeRule::Bilinear && want.2 == 3 {
            let samples = out_dist
                .samples()
                .iter()
                .map(|(img, y)| (resize_rgb(img, want.0, want.1), *y))
                .collect();
            LabeledDataset::new(out_dist.name.clone(), out_dist.split, out_dist.class_names.clone(), samples)?
        } else {
            return Err(Error::Shape(format!(
                "out-of-distribution images are {}x{}, model input is {}x{}; set a resize rule",
                have.0, have.1, want.0, want.1
            )));
        };
        Ok(Self { in_dist, out_dist })
    }
}

fn resize_rgb(img: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec()).expect("HWC RGB buffer");
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    let data = out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ImageTensor::new(height, width, 3, data).expect("resized shape")
}

/// Pair the test split of `in_name` with the test split of `out_name`.
pub fn pair_ood(in_name: &str, out_name: &str, registry: &Registry, resize: ResizeRule) -> Result<OodEvalPair> {
    let in_dist = registry.load(in_name, Split::Test)?;
    let out_dist = registry.load(out_name, Split::Test)?;
    OodEvalPair::new(in_dist, out_dist, resize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::GlyphStyle;

    fn glyphs(size: usize) -> DatasetSource {
        DatasetSource::Synthetic {
            spec: SyntheticSpec::Glyphs {
                count: 12,
                size,
                seed: 0,
                style: GlyphStyle::default(),
            },
        }
    }

    #[test]
    fn packed_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let d = load_dataset(&glyphs(8), Split::Train).unwrap();
        write_packed(&d, &path).unwrap();
        let back = read_packed(&path, Split::Train).unwrap();
        assert_eq!(back.labels(), d.labels());
        assert_eq!(back.checksum(), read_packed(&path, Split::Train).unwrap().checksum());
        let max_err = back
            .samples()
            .iter()
            .zip(d.samples())
            .map(|((a, _), (b, _))| a.linf_distance(b))
            .fold(0.0f32, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        let err = read_packed(&path, Split::Train).unwrap_err();
        assert!(err.to_string().contains("d.bin"), "{err}");
        assert!(matches!(read_packed(&dir.path().join("nope"), Split::Train), Err(Error::MissingSource(_))));
    }

    #[test]
    fn directory_layout_loads_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let d = load_dataset(&glyphs(8), Split::Train).unwrap();
        for (i, (img, y)) in d.samples().iter().enumerate().take(6) {
            let class = dir.path().join("train").join(&d.class_names[*y]);
            fs::create_dir_all(&class).unwrap();
            img.to_u8().save_png(&class.join(format!("{i:03}.png"))).unwrap();
        }
        let src = DatasetSource::Directory {
            root: dir.path().to_path_buf(),
        };
        let a = load_dataset(&src, Split::Train).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a.checksum(), load_dataset(&src, Split::Train).unwrap().checksum());
        let bad = dir.path().join("train").join(&d.class_names[0]).join("zzz.png");
        fs::write(&bad, b"not a png").unwrap();
        let err = load_dataset(&src, Split::Train).unwrap_err().to_string();
        assert!(err.contains("zzz.png"), "{err}");
    }

    #[test]
    fn ood_pairs_and_resize_rule() {
        let mut reg = Registry::default();
        reg.insert("a", glyphs(8));
        reg.insert("big", glyphs(16));
        reg.insert(
            "tex",
            DatasetSource::Synthetic {
                spec: SyntheticSpec::Textures {
                    count: 5,
                    size: 8,
                    seed: 1,
                },
            },
        );
        let p = pair_ood("a", "tex", &reg, ResizeRule::Reject).unwrap();
        assert_eq!(p.in_dist.image_shape(), p.out_dist.image_shape());
        assert!(pair_ood("a", "a", &reg, ResizeRule::Reject).is_ok());
        assert!(pair_ood("a", "big", &reg, ResizeRule::Reject).is_err());
        let r = pair_ood("a", "big", &reg, ResizeRule::Bilinear).unwrap();
        assert_eq!(r.out_dist.image_shape(), Some((8, 8, 3)));
        assert!(matches!(pair_ood("a", "zz", &reg, ResizeRule::Reject), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn registry_from_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.toml");
        fs::write(
            &path,
            "[datasets.g]\nsource = \"synthetic\"\nspec = { kind = \"glyphs\", count = 4, size = 8 }\n\n[datasets.p]\nsource = \"packed\"\npath = \"p.bin\"\n",
        )
        .unwrap();
        let reg = Registry::from_file(&path).unwrap();
        assert_eq!(reg.load("g", Split::Train).unwrap().len(), 4);
        assert_eq!(
            reg.get("p").unwrap(),
            &DatasetSource::Packed {
                path: dir.path().join("p.bin")
            }
        );
    }
}
