//! Synthetic organ + tumor segmentation samples.
//!
//! Each sample is a 3-channel image in [0, 1] and a label map with
//! 0 = background, 1 = organ, 2 = tumor. The organ is a perturbed ellipse
//! covering 10–40% of the image; one to three small tumors lie inside it
//! and cover 0.5–5%. Everything is a pure function of the seed.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format;
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const ORGAN: u8 = 1;
pub const TUMOR: u8 = 2;
pub const NUM_CLASSES: usize = 3;

/// Base intensity per class.
pub const INTENSITY: [f64; NUM_CLASSES] = [0.2, 0.6, 0.45];
pub const NOISE_SIGMA: f64 = 0.05;

pub const ORGAN_FRACTION: (f64, f64) = (0.10, 0.40);
pub const TUMOR_FRACTION: (f64, f64) = (0.005, 0.05);

/// Row-major label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&v| v == class).count()
    }

    pub fn fraction(&self, class: u8) -> f64 {
        self.count(class) as f64 / self.labels.len() as f64
    }

    /// Per-class pixel histogram.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &v in &self.labels {
            h[v as usize] += 1;
        }
        h
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn(&[self.height, self.width], |i| f32::from(self.labels[i]))
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [h, w] = match *t.shape() {
            [h, w] => [h, w],
            _ => return Err(Error::Contract(format!("mask tensor must be H×W, got {:?}", t.shape()))),
        };
        let labels = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v.fract() == 0.0 && (0.0..NUM_CLASSES as f32).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Contract(format!("mask value {v} at {i} is not a class id")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Mask {
            height: h,
            width: w,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub sample_id: String,
    pub seed: u64,
    /// `3 × H × W`, values in [0, 1].
    pub image: Tensor<f32>,
    pub mask: Mask,
}

impl SamplePair {
    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    /// Bit-level equality of image and mask.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.image.bitwise_eq(&other.image) && self.mask == other.mask
    }
}

pub fn check_size(h: usize, w: usize) -> Result<()> {
    if h < 32 || w < 32 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config(format!(
            "sample size {h}×{w} must be at least 32×32 and a multiple of 16"
        )));
    }
    Ok(())
}

/// Ellipse with a low-frequency radial perturbation.
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    theta: f64,
    wobble: [(f64, f64); 3],
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        let rho = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        let limit = 1.0
            + self
                .wobble
                .iter()
                .enumerate()
                .map(|(k, &(amp, phase))| amp * ((k as f64 + 2.0) * phi + phase).sin())
                .sum::<f64>();
        rho <= limit
    }

    fn random<R: Rng>(rng: &mut R, cx: f64, cy: f64, area: f64, wobble_max: f64) -> Self {
        let aspect: f64 = rng.random_range(0.6..1.6);
        let rx = (area / (PI * aspect)).sqrt();
        let theta = rng.random_range(0.0..PI);
        let mut wobble = [(0.0, 0.0); 3];
        for w in &mut wobble {
            *w = (rng.random_range(0.0..wobble_max), rng.random_range(0.0..2.0 * PI));
        }
        Blob {
            cx,
            cy,
            rx,
            ry: aspect * rx,
            theta,
            wobble,
        }
    }
}

fn organ_mask<R: Rng>(rng: &mut R, h: usize, w: usize) -> Vec<u8> {
    loop {
        let area = rng.random_range(0.15..0.32) * (h * w) as f64;
        let cx = rng.random_range(0.35..0.65) * w as f64;
        let cy = rng.random_range(0.35..0.65) * h as f64;
        let blob = Blob::random(rng, cx, cy, area, 0.08);
        let labels: Vec<u8> = (0..h * w)
            .map(|i| u8::from(blob.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5)))
            .collect();
        let frac = labels.iter().filter(|&&v| v == ORGAN).count() as f64 / (h * w) as f64;
        if (ORGAN_FRACTION.0..=ORGAN_FRACTION.1).contains(&frac) {
            return labels;
        }
    }
}

fn add_tumors<R: Rng>(rng: &mut R, labels: &mut [u8], h: usize, w: usize) -> bool {
    let organ: Vec<usize> = (0..h * w).filter(|&i| labels[i] == ORGAN).collect();
    for _ in 0..32 {
        let n = rng.random_range(1..=3);
        let mut tumor = vec![false; h * w];
        for _ in 0..n {
            let centre = organ[rng.random_range(0..organ.len())];
            let radius = rng.random_range(0.03..0.07) * h.min(w) as f64;
            let blob = Blob::random(
                rng,
                (centre % w) as f64 + 0.5,
                (centre / w) as f64 + 0.5,
                PI * radius * radius,
                0.15,
            );
            for &i in &organ {
                if blob.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5) {
                    tumor[i] = true;
                }
            }
        }
        let frac = tumor.iter().filter(|&&t| t).count() as f64 / (h * w) as f64;
        if (TUMOR_FRACTION.0..=TUMOR_FRACTION.1).contains(&frac) {
            for (l, t) in labels.iter_mut().zip(tumor) {
                if t {
                    *l = TUMOR;
                }
            }
            return true;
        }
    }
    false
}

/// Deterministic sample for `seed` at `h × w`.
pub fn generate_sample(seed: u64, h: usize, w: usize) -> Result<SamplePair> {
    check_size(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = loop {
        let mut labels = organ_mask(&mut rng, h, w);
        if add_tumors(&mut rng, &mut labels, h, w) {
            break labels;
        }
    };
    let amp = rng.random_range(0.0..0.1);
    let psi = rng.random_range(0.0..2.0 * PI);
    let (ps, pc) = psi.sin_cos();
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut data = vec![0.0f32; 3 * h * w];
    for ch in 0..3 {
        for i in 0..h * w {
            let (x, y) = ((i % w) as f64 / w as f64 - 0.5, (i / w) as f64 / h as f64 - 0.5);
            let illumination = amp * (x * pc + y * ps);
            let v = INTENSITY[labels[i] as usize] + illumination + noise.sample(&mut rng);
            data[ch * h * w + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(SamplePair {
        sample_id: format!("{seed}"),
        seed,
        image: Tensor::new(&[3, h, w], data)?,
        mask: Mask {
            height: h,
            width: w,
            labels,
        },
    })
}

fn remap<T: Copy>(src: &[T], h: usize, w: usize, map: impl Fn(usize, usize) -> usize) -> Vec<T> {
    (0..h * w).map(|i| src[map(i / w, i % w)]).collect()
}

/// Mirror left-right.
pub fn hflip(s: &SamplePair) -> SamplePair {
    let (h, w) = (s.height(), s.width());
    let flip = |y: usize, x: usize| y * w + (w - 1 - x);
    let mut data = Vec::with_capacity(s.image.numel());
    for ch in s.image.data().chunks_exact(h * w) {
        data.extend(remap(ch, h, w, flip));
    }
    SamplePair {
        sample_id: s.sample_id.clone(),
        seed: s.seed,
        image: Tensor::from_parts(vec![3, h, w], data),
        mask: Mask {
            height: h,
            width: w,
            labels: remap(&s.mask.labels, h, w, flip),
        },
    }
}

/// Rotate counter-clockwise by `k · 90°`.
pub fn rotate90(s: &SamplePair, k: usize) -> SamplePair {
    let mut out = s.clone();
    for _ in 0..k % 4 {
        out = rotate_once(&out);
    }
    out
}

fn rotate_once(s: &SamplePair) -> SamplePair {
    let (h, w) = (s.height(), s.width());
    // output is w×h; out(i, j) = in(j, w − 1 − i)
    let rot = |i: usize, j: usize| j * w + (w - 1 - i);
    let mut data = Vec::with_capacity(s.image.numel());
    for ch in s.image.data().chunks_exact(h * w) {
        data.extend(remap(ch, w, h, rot));
    }
    SamplePair {
        sample_id: s.sample_id.clone(),
        seed: s.seed,
        image: Tensor::from_parts(vec![3, w, h], data),
        mask: Mask {
            height: w,
            width: h,
            labels: remap(&s.mask.labels, w, h, rot),
        },
    }
}

/// Random flip and 90° rotation (rotation only for square samples).
pub fn random_augment<R: Rng>(s: &SamplePair, rng: &mut R) -> SamplePair {
    let flip = rng.random_bool(0.5);
    let k = rng.random_range(0..4usize);
    let mut out = if flip { hflip(s) } else { s.clone() };
    if s.height() == s.width() {
        out = rotate90(&out, k);
    }
    out
}

/// Seed of sample `index` in a dataset generated from `global_seed`.
pub fn sample_seed(global_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer over (seed, index)
    let mut z = global_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub seed: u64,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
    /// Train / validation / test fractions.
    pub split_ratios: [f64; 3],
    pub splits: Splits,
    pub samples: Vec<SampleEntry>,
}

/// Sample counts for each split: train and validation are floored and the
/// test split takes the remainder.
pub fn split_counts(count: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let train = (count as f64 * ratios[0] + 1e-9).floor() as usize;
    let val = ((count as f64 * ratios[1] + 1e-9).floor() as usize).min(count - train);
    Ok([train, val, count - train - val])
}

/// A manifest with its samples in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    pub fn generate(count: usize, h: usize, w: usize, seed: u64, split_ratios: [f64; 3]) -> Result<Self> {
        check_size(h, w)?;
        if count == 0 {
            return Err(Error::Config("dataset needs at least one sample".into()));
        }
        let [n_train, n_val, _] = split_counts(count, split_ratios)?;
        let mut samples = Vec::with_capacity(count);
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let mut s = generate_sample(sample_seed(seed, i), h, w)?;
            s.sample_id = format!("{i:06}");
            entries.push(SampleEntry {
                id: s.sample_id.clone(),
                seed: s.seed,
                image: format!("images/{}.smt", s.sample_id),
                mask: format!("masks/{}.smt", s.sample_id),
            });
            samples.push(s);
        }
        let ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
        let splits = Splits {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..].to_vec(),
        };
        Ok(Dataset {
            manifest: DatasetManifest {
                count,
                height: h,
                width: w,
                classes: NUM_CLASSES,
                seed,
                split_ratios,
                splits,
                samples: entries,
            },
            samples,
        })
    }

    pub fn sample(&self, id: &str) -> Option<&SamplePair> {
        self.samples.iter().find(|s| s.sample_id == id)
    }

    /// Samples of a named split (`train`, `val` or `test`).
    pub fn split(&self, name: &str) -> Result<Vec<&SamplePair>> {
        let ids = match name {
            "train" => &self.manifest.splits.train,
            "val" => &self.manifest.splits.val,
            "test" => &self.manifest.splits.test,
            other => return Err(Error::Config(format!("unknown split {other:?}"))),
        };
        ids.iter()
            .map(|id| {
                self.sample(id)
                    .ok_or_else(|| Error::Contract(format!("split references missing sample {id}")))
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (entry, s) in self.manifest.samples.iter().zip(&self.samples) {
            format::write(&dir.join(&entry.image), &s.image)?;
            format::write(&dir.join(&entry.mask), &s.mask.to_tensor())?;
        }
        crate::json::write_canonical(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = crate::json::read(&dir.join("manifest.json"))?;
        validate_splits(&manifest, &dir.join("manifest.json"))?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let image: Tensor<f32> = format::read(&dir.join(&entry.image))?;
            let mask_path = dir.join(&entry.mask);
            let mask = Mask::from_tensor(&format::read(&mask_path)?).map_err(|e| Error::Format {
                path: mask_path.clone(),
                offset: 0,
                msg: e.to_string(),
            })?;
            if image.shape() != [3, manifest.height, manifest.width]
                || (mask.height, mask.width) != (manifest.height, manifest.width)
            {
                return Err(Error::Format {
                    path: PathBuf::from(&entry.image),
                    offset: 6,
                    msg: format!("sample {} does not match the manifest size", entry.id),
                });
            }
            samples.push(SamplePair {
                sample_id: entry.id.clone(),
                seed: entry.seed,
                image,
                mask,
            });
        }
        Ok(Dataset { manifest, samples })
    }
}

fn validate_splits(m: &DatasetManifest, path: &Path) -> Result<()> {
    let mut seen: Vec<&String> = m
        .splits
        .train
        .iter()
        .chain(&m.splits.val)
        .chain(&m.splits.test)
        .collect();
    let listed = seen.len();
    seen.sort();
    seen.dedup();
    let mut ids: Vec<&String> = m.samples.iter().map(|s| &s.id).collect();
    ids.sort();
    if seen.len() != listed || seen != ids || m.count != ids.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "splits are not a disjoint, exhaustive partition of the samples".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_rules() {
        assert!(check_size(64, 64).is_ok());
        assert!(check_size(16, 64).is_err());
        assert!(check_size(40, 64).is_err());
    }

    #[test]
    fn split_counts_follow_ratios() {
        assert_eq!(split_counts(100, [0.8, 0.15, 0.05]).unwrap(), [80, 15, 5]);
        assert_eq!(split_counts(16, [0.5, 0.5, 0.0]).unwrap(), [8, 8, 0]);
        assert!(split_counts(10, [0.5, 0.6, 0.0]).is_err());
    }

    #[test]
    fn rotation_changes_shape_of_rectangles() {
        let s = generate_sample(1, 32, 48).unwrap();
        let r = rotate90(&s, 1);
        assert_eq!((r.height(), r.width()), (48, 32));
        assert!(rotate90(&s, 4).bitwise_eq(&s));
    }

    #[test]
    fn mask_tensor_rejects_fractional_ids() {
        let t = Tensor::<f32>::new(&[1, 2], vec![0.0, 1.5]).unwrap();
        assert!(Mask::from_tensor(&t).is_err());
    }
}
