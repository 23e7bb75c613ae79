//! Image ingestion, zero-pad/crop geometry, splits and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::SIZE_MULTIPLE;
use crate::tensor::Tensor;

/// DRIVE fundus images are 565 wide by 584 high and padded to 592 x 592.
pub const DRIVE_ORIGINAL: (usize, usize) = (584, 565);
pub const DRIVE_PAD: (usize, usize) = (592, 592);
/// CHASE DB1 images are 999 wide by 960 high and padded to 1008 x 1008.
pub const CHASE_ORIGINAL: (usize, usize) = (960, 999);
pub const CHASE_PAD: (usize, usize) = (1008, 1008);

/// Binarization threshold for 8-bit ground-truth masks.
pub const MASK_THRESHOLD: f64 = 127.5;

const IMAGE_EXTENSIONS: &[&str] = &["png", "ppm"];
const MASK_EXTENSIONS: &[&str] = &["png", "pgm"];

/// Image/ground-truth pair stored at padded resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `H x W x 3`, values in [0, 1].
    pub image: Tensor,
    /// `H x W x 1`, values in {0, 1}.
    pub mask: Tensor,
    /// (height, width) before padding.
    pub original_size: (usize, usize),
    pub padded_size: (usize, usize),
}

impl Sample {
    /// Pads an unpadded pair to `target`, or to the next multiple of 8.
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor, target: Option<(usize, usize)>) -> Result<Self> {
        let (h, w) = spatial(&image, "sample image")?;
        let (mh, mw) = spatial(&mask, "sample mask")?;
        if (h, w) != (mh, mw) {
            return Err(Error::shape("sample", image.shape(), mask.shape()));
        }
        if mask.shape()[2] != 1 || mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidValue(
                "mask must be H x W x 1 with values in {0, 1}".into(),
            ));
        }
        let target = target.unwrap_or((h.next_multiple_of(SIZE_MULTIPLE), w.next_multiple_of(SIZE_MULTIPLE)));
        if !target.0.is_multiple_of(SIZE_MULTIPLE) || !target.1.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::PaddingRequired {
                height: target.0,
                width: target.1,
                multiple: SIZE_MULTIPLE,
            });
        }
        Ok(Sample {
            id: id.into(),
            image: pad_to(&image, target)?,
            mask: pad_to(&mask, target)?,
            original_size: (h, w),
            padded_size: target,
        })
    }

    /// Ground truth at original resolution.
    pub fn original_mask(&self) -> Result<Tensor> {
        crop_to(&self.mask, self.original_size)
    }
}

fn spatial(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w, _] => Ok((h, w)),
        s => Err(Error::invalid_shape(op, s, "expected H x W x C")),
    }
}

/// Top/left zero margins placing `original` inside `target`; odd remainders go bottom/right.
pub fn pad_offsets(original: (usize, usize), target: (usize, usize)) -> Result<(usize, usize)> {
    if target.0 < original.0 || target.1 < original.1 {
        return Err(Error::Config(format!(
            "pad target {}x{} is smaller than image {}x{}",
            target.0, target.1, original.0, original.1
        )));
    }
    Ok(((target.0 - original.0) / 2, (target.1 - original.1) / 2))
}

/// Zero-pads an `H x W x C` tensor on all four margins up to `target`.
pub fn pad_to(img: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w) = spatial(img, "pad_to")?;
    let c = img.shape()[2];
    let (top, left) = pad_offsets((h, w), target)?;
    let mut out = vec![0.0f32; target.0 * target.1 * c];
    for (r, row) in img.data().chunks_exact(w * c).enumerate() {
        let start = ((r + top) * target.1 + left) * c;
        out[start..start + w * c].copy_from_slice(row);
    }
    Tensor::from_vec(&[target.0, target.1, c], out)
}

/// Removes the margins `pad_to` added when padding `original` to this size.
pub fn crop_to(img: &Tensor, original: (usize, usize)) -> Result<Tensor> {
    let (h, w) = spatial(img, "crop_to")?;
    let c = img.shape()[2];
    let (top, left) = pad_offsets(original, (h, w))?;
    let mut out = Vec::with_capacity(original.0 * original.1 * c);
    for r in top..top + original.0 {
        let start = (r * w + left) * c;
        out.extend_from_slice(&img.data()[start..start + original.1 * c]);
    }
    Tensor::from_vec(&[original.0, original.1, c], out)
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase()
}

fn open(path: &Path, allowed: &[&str]) -> Result<image::DynamicImage> {
    if !allowed.contains(&extension(path).as_str()) {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    }
    let reader = image::ImageReader::open(path)?
        .with_guessed_format()
        .map_err(Error::Io)?;
    reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an 8-bit PNG or PPM as `H x W x 3` in [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = open(path.as_ref(), IMAGE_EXTENSIONS)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::from_vec(&[h as usize, w as usize, 3], data)
}

/// Loads an 8-bit PNG or PGM mask, binarized at 127.5.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = open(path.as_ref(), MASK_EXTENSIONS)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| if v as f64 > MASK_THRESHOLD { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(&[h as usize, w as usize, 1], data)
}

/// Loads an 8-bit PNG or PGM probability map as `H x W x 1` in [0, 1].
pub fn load_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = open(path.as_ref(), MASK_EXTENSIONS)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::from_vec(&[h as usize, w as usize, 1], data)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let (h, w) = spatial(img, "save_rgb")?;
    if img.shape()[2] != 3 {
        return Err(Error::invalid_shape("save_rgb", img.shape(), "expected 3 channels"));
    }
    let raw = img.data().iter().map(|&v| to_u8(v)).collect();
    let buf = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dims");
    buf.save(path.as_ref()).map_err(|source| Error::Image {
        path: path.as_ref().to_path_buf(),
        source,
    })
}

/// Writes an `H x W x 1` map in [0, 1] as 8-bit grayscale (`round(v * 255)`).
pub fn save_gray(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let (h, w) = spatial(img, "save_gray")?;
    if img.shape()[2] != 1 {
        return Err(Error::invalid_shape("save_gray", img.shape(), "expected 1 channel"));
    }
    let raw = img.data().iter().map(|&v| to_u8(v)).collect();
    let buf = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dims");
    buf.save(path.as_ref()).map_err(|source| Error::Image {
        path: path.as_ref().to_path_buf(),
        source,
    })
}

/// Seeded uniform choice of `validation_count` indices, without replacement.
/// Returns (train, validation), each in ascending order.
pub fn split(indices: &[usize], seed: u64, validation_count: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if validation_count >= indices.len() {
        return Err(Error::Config(format!(
            "validation count {validation_count} must be smaller than the {} training samples",
            indices.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = index::sample(&mut rng, indices.len(), validation_count).into_vec();
    chosen.sort_unstable();
    let val: Vec<usize> = chosen.iter().map(|&i| indices[i]).collect();
    let train = indices
        .iter()
        .enumerate()
        .filter(|(i, _)| chosen.binary_search(i).is_err())
        .map(|(_, &v)| v)
        .collect();
    Ok((train, val))
}

/// First `train_count` ids train, the rest test (the CHASE DB1 convention).
pub fn ordered_split(ids: &[String], train_count: usize) -> Result<(Vec<String>, Vec<String>)> {
    if train_count > ids.len() {
        return Err(Error::Config(format!(
            "cannot take {train_count} training ids from {}",
            ids.len()
        )));
    }
    Ok((ids[..train_count].to_vec(), ids[train_count..].to_vec()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub pad_h: usize,
    pub pad_w: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Samples plus disjoint train/validation/test index lists.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub name: String,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub pad: (usize, usize),
}

impl DatasetSpec {
    pub fn select(&self, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }

    /// Moves `validation_count` seeded picks from train into validation.
    pub fn with_validation(mut self, seed: u64, validation_count: usize) -> Result<Self> {
        let all_train: Vec<usize> = self.train.iter().chain(&self.val).copied().collect();
        let (train, val) = split(&all_train, seed, validation_count)?;
        self.train = train;
        self.val = val;
        Ok(self)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = vec![false; self.samples.len()];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= seen.len() || seen[i] {
                return Err(Error::Config(format!("sample {i} appears in more than one split")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Loads `images/<id>.{png,ppm}` and `masks/<id>.{png,pgm}` next to the manifest.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let pad = (manifest.pad_h, manifest.pad_w);
        let mut samples = Vec::new();
        for id in manifest.train_ids.iter().chain(&manifest.test_ids) {
            let image = load_image(find_file(&root.join("images"), id, IMAGE_EXTENSIONS)?)?;
            let mask = load_mask(find_file(&root.join("masks"), id, MASK_EXTENSIONS)?)?;
            if image.shape()[..2] != mask.shape()[..2] {
                return Err(Error::shape("image/mask pair", image.shape(), mask.shape()));
            }
            samples.push(Sample::new(id.clone(), image, mask, Some(pad))?);
        }
        let n_train = manifest.train_ids.len();
        let spec = DatasetSpec {
            name: manifest.name,
            train: (0..n_train).collect(),
            val: Vec::new(),
            test: (n_train..samples.len()).collect(),
            samples,
            pad,
        };
        spec.check_disjoint()?;
        Ok(spec)
    }

    /// Writes the dataset as a directory of PNGs plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        for s in &self.samples {
            save_rgb(
                dir.join("images").join(format!("{}.png", s.id)),
                &crop_to(&s.image, s.original_size)?,
            )?;
            save_gray(dir.join("masks").join(format!("{}.png", s.id)), &s.original_mask()?)?;
        }
        let ids = |idx: &[usize]| idx.iter().map(|&i| self.samples[i].id.clone()).collect::<Vec<_>>();
        let mut train_ids = ids(&self.train);
        train_ids.extend(ids(&self.val));
        let manifest = Manifest {
            name: self.name.clone(),
            pad_h: self.pad.0,
            pad_w: self.pad.1,
            train_ids,
            test_ids: ids(&self.test),
        };
        let path = dir.join("manifest.json");
        manifest.write(&path)?;
        Ok(path)
    }
}

fn find_file(dir: &Path, stem: &str, extensions: &[&str]) -> Result<PathBuf> {
    extensions
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no {extensions:?} file for {stem} in {}", dir.display()),
            ))
        })
}

/// Stacks sample images into `N x H x W x 3`.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    Tensor::stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())
}

/// Stacks sample masks into `N x H x W x 1`.
pub fn stack_masks(samples: &[&Sample]) -> Result<Tensor> {
    Tensor::stack(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_vec(&[h, w, c], (0..h * w * c).map(|i| i as f32 + 1.0).collect()).unwrap()
    }

    #[test]
    fn published_geometries() {
        let drive = pad_to(&ramp(DRIVE_ORIGINAL.0, DRIVE_ORIGINAL.1, 1), DRIVE_PAD).unwrap();
        assert_eq!(drive.shape(), &[592, 592, 1]);
        let chase = pad_to(&ramp(CHASE_ORIGINAL.0, CHASE_ORIGINAL.1, 1), CHASE_PAD).unwrap();
        assert_eq!(chase.shape(), &[1008, 1008, 1]);
        // 584 -> 592 rows: 4 above, 4 below; 565 -> 592 cols: 13 left, 14 right
        assert_eq!(pad_offsets(DRIVE_ORIGINAL, DRIVE_PAD).unwrap(), (4, 13));
        assert_eq!(pad_offsets(CHASE_ORIGINAL, CHASE_PAD).unwrap(), (24, 4));
    }

    #[test]
    fn odd_margin_goes_bottom_right() {
        let p = pad_to(&ramp(1, 1, 1), (2, 4)).unwrap();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pad_rejects_smaller_target() {
        assert!(pad_to(&ramp(5, 5, 1), (4, 8)).is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let idx: Vec<usize> = (0..20).collect();
        let (t, v) = split(&idx, 7, 2).unwrap();
        assert_eq!((t.len(), v.len()), (18, 2));
        assert!(v.iter().all(|x| !t.contains(x)));
        assert_eq!(split(&idx, 7, 2).unwrap(), (t, v));
        assert!(split(&idx, 7, 20).is_err());
    }

    #[test]
    fn chase_convention() {
        let ids: Vec<String> = (1..=28).map(|i| format!("{i:02}")).collect();
        let (train, test) = ordered_split(&ids, 20).unwrap();
        assert_eq!((train.len(), test.len()), (20, 8));
        assert_eq!(test[0], "21");
    }

    #[test]
    fn sample_rejects_non_binary_mask() {
        let img = ramp(8, 8, 3);
        let mask = Tensor::full(&[8, 8, 1], 0.5).unwrap();
        assert!(Sample::new("x", img, mask, None).is_err());
    }
}
