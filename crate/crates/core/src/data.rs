//! Synthetic dataset generation and the dataset directory format.
//!
//! Layout: `<dir>/manifest.json`, `images/<stem>.ntf` (f32 [C,H,W] in
//! [0,1]) and `masks/<stem>.ntf` (u8 [H,W], labels < K). Scenes are
//! procedural: soft-edged ellipses and a sine ribbon per foreground class
//! over a textured background, with additive noise; masks are exact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ntf;
use crate::rng::Stream;
use crate::tensor::{Storage, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub channels: usize,
    pub count: usize,
    pub size: (usize, usize),
    pub seed: u64,
    pub splits: Splits,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Image + exact label mask, the unit of training/evaluation data.
pub struct SegSample {
    pub image: Tensor, // f32 [C,H,W]
    pub mask: Tensor,  // u8 [H,W]
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dir: PathBuf,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::Data(format!("cannot read manifest in {}: {e}", dir.display())))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("bad manifest: {e}")))?;
        manifest.validate()?;
        Ok(Dataset { manifest, dir: dir.to_path_buf() })
    }

    pub fn stems(&self, split: &str) -> Result<&[String]> {
        match split {
            "train" => Ok(&self.manifest.splits.train),
            "test" => Ok(&self.manifest.splits.test),
            other => Err(Error::Config(format!("unknown split '{other}' (train|test)"))),
        }
    }

    pub fn load(&self, stem: &str) -> Result<SegSample> {
        let img_path = self.dir.join("images").join(format!("{stem}.ntf"));
        let mask_path = self.dir.join("masks").join(format!("{stem}.ntf"));
        let image = ntf::load(&img_path).map_err(|e| Error::Data(format!("{stem}: {e}")))?;
        let mask = ntf::load(&mask_path).map_err(|e| Error::Data(format!("{stem}: {e}")))?;
        let (is_, ms) = (image.shape().to_vec(), mask.shape().to_vec());
        if is_.len() != 3 || ms.len() != 2 || is_[1] != ms[0] || is_[2] != ms[1] {
            return Err(Error::Data(format!("{stem}: image {is_:?} and mask {ms:?} extents disagree")));
        }
        if let Storage::U8(labels) = &*mask.data() {
            if let Some(&bad) = labels.iter().find(|&&l| (l as usize) >= self.manifest.num_classes) {
                return Err(Error::Data(format!("{stem}: label {bad} >= K={}", self.manifest.num_classes)));
            }
        } else {
            return Err(Error::Data(format!("{stem}: mask must be u8")));
        }
        Ok(SegSample { image, mask })
    }

    /// Load a batch as stacked tensors ([B,C,H,W] f32, [B,H,W] u8).
    pub fn load_batch(&self, stems: &[&str]) -> Result<(Tensor, Tensor)> {
        let (h, w) = self.manifest.size;
        let c = self.manifest.channels;
        let b = stems.len();
        let mut images = Vec::with_capacity(b * c * h * w);
        let mut masks = Vec::with_capacity(b * h * w);
        for stem in stems {
            let s = self.load(stem)?;
            let img = s.image.data();
            match &*img {
                Storage::F32(v) => images.extend_from_slice(v),
                _ => return Err(Error::Data(format!("{stem}: image must be f32"))),
            }
            drop(img);
            let msk = s.mask.data();
            match &*msk {
                Storage::U8(v) => masks.extend_from_slice(v),
                _ => unreachable!(),
            }
            drop(msk);
        }
        Ok((Tensor::from_f32(&[b, c, h, w], images)?, Tensor::from_u8(&[b, h, w], masks)?))
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Data(format!("num_classes {} out of range", self.num_classes)));
        }
        for t in &self.splits.train {
            if self.splits.test.contains(t) {
                return Err(Error::Data(format!("splits overlap at stem {t}")));
            }
        }
        if self.splits.train.len() + self.splits.test.len() != self.count {
            return Err(Error::Data("split sizes do not sum to count".into()));
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    rot: f64,
}

impl Ellipse {
    /// Signed "radius" of a point: < 1 inside, with a soft shell near 1.
    fn level(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.rot.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx) * (u / self.rx) + (v / self.ry) * (v / self.ry)).sqrt()
    }
}

/// Generate a deterministic procedural dataset. `n_train` samples go to
/// the train split, `n_test` to the disjoint test split.
pub fn gen_data(
    num_classes: usize,
    channels: usize,
    n_train: usize,
    n_test: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if size % 32 != 0 {
        return Err(Error::Config(format!("size {size} must be divisible by 32")));
    }
    if num_classes < 2 {
        return Err(Error::Config("need at least one foreground class (K >= 2)".into()));
    }
    if n_train == 0 {
        return Err(Error::Config("need at least one training sample".into()));
    }
    std::fs::create_dir_all(out_dir.join("images"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;

    let count = n_train + n_test;
    let mut stems = Vec::with_capacity(count);
    for idx in 0..count {
        let stem = format!("img{idx:04}");
        let mut rng = Stream::child(seed, &format!("sample-{idx}"));
        let (image, mask) = gen_sample(num_classes, channels, size, &mut rng)?;
        ntf::save(&out_dir.join("images").join(format!("{stem}.ntf")), &image)?;
        ntf::save(&out_dir.join("masks").join(format!("{stem}.ntf")), &mask)?;
        stems.push(stem);
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-k{num_classes}-c{channels}-s{size}"),
        num_classes,
        channels,
        count,
        size: (size, size),
        seed,
        splits: Splits { train: stems[..n_train].to_vec(), test: stems[n_train..].to_vec() },
    };
    manifest.validate()?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(manifest)
}

fn gen_sample(num_classes: usize, channels: usize, size: usize, rng: &mut Stream) -> Result<(Tensor, Tensor)> {
    let hw = size * size;
    let mut mask = vec![0u8; hw];
    // per-pixel foreground intensity; class k paints a distinct band
    let mut paint = vec![0.0f64; hw];
    let fs = size as f64;

    for k in 1..num_classes {
        let intensity = 0.35 + 0.6 * (k as f64) / (num_classes as f64 - 1.0).max(1.0);
        // one or two ellipses per class
        for _ in 0..(1 + rng.index(2)) {
            let e = Ellipse {
                cy: rng.uniform_in(0.2 * fs, 0.8 * fs),
                cx: rng.uniform_in(0.2 * fs, 0.8 * fs),
                ry: rng.uniform_in(fs / 9.0, fs / 4.0),
                rx: rng.uniform_in(fs / 9.0, fs / 4.0),
                rot: rng.uniform_in(0.0, std::f64::consts::PI),
            };
            for i in 0..size {
                for j in 0..size {
                    let lvl = e.level(i as f64 + 0.5, j as f64 + 0.5);
                    if lvl < 1.0 {
                        mask[i * size + j] = k as u8;
                        // soft edge in the image only; the mask stays exact
                        let edge = ((1.0 - lvl) * 6.0).min(1.0);
                        paint[i * size + j] = intensity * (0.7 + 0.3 * edge);
                    }
                }
            }
        }
        // a ribbon (thick sine stripe) for odd classes
        if k % 2 == 1 {
            let y0 = rng.uniform_in(0.15 * fs, 0.85 * fs);
            let amp = rng.uniform_in(0.03 * fs, 0.12 * fs);
            let period = rng.uniform_in(0.4 * fs, 1.2 * fs);
            // ribbons stay thick enough to survive 4x down-sampling
            let thick = rng.uniform_in(fs / 24.0, fs / 10.0).max(2.0);
            let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
            for i in 0..size {
                for j in 0..size {
                    let center = y0 + amp * ((j as f64) / period * std::f64::consts::TAU + phase).sin();
                    let d = (i as f64 + 0.5 - center).abs();
                    if d < thick {
                        mask[i * size + j] = k as u8;
                        paint[i * size + j] = intensity * (0.7 + 0.3 * (1.0 - d / thick));
                    }
                }
            }
        }
    }

    // image: background texture + paint + noise, clamped to [0,1]
    let fy = rng.uniform_in(1.0, 3.0);
    let fx = rng.uniform_in(1.0, 3.0);
    let mut image = vec![0.0f32; channels * hw];
    for ch in 0..channels {
        let chan_gain = 1.0 - 0.15 * (ch as f64) / channels.max(1) as f64;
        for i in 0..size {
            for j in 0..size {
                let tex = 0.12
                    + 0.04 * ((i as f64 / fs) * fy * std::f64::consts::TAU).sin()
                    + 0.04 * ((j as f64 / fs) * fx * std::f64::consts::TAU).cos();
                let v = tex + chan_gain * paint[i * size + j] + 0.02 * rng.normal();
                image[ch * hw + i * size + j] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok((
        Tensor::from_f32(&[channels, size, size], image)?,
        Tensor::from_u8(&[size, size], mask)?,
    ))
}
