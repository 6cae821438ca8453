//! Synthetic datasets and image containers.
//!
//! The generator renders smooth gradient backgrounds with 1–3 Gaussian
//! blobs, then adds pixel noise whose strength depends on the sub-pixel
//! phase (position within each 2×2 block). The `structure` level blends
//! between uniform per-phase noise (0, degenerating to i.i.d. uniform
//! images) and a strong phase contrast (1), which controls how much signal
//! a per-block importance ranking can exploit. Datasets round-trip through
//! an FFT1 tensor file plus a key=value sidecar; image grids render to
//! binary PGM/PPM.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::flow::Layout;
use crate::tensor::Tensor;

/// Noise weight per sub-pixel phase (top-left, top-right, bottom-left,
/// bottom-right): at full structure the per-phase noise std is
/// `4 + 96·weight`, so top-left is nearly clean and top-right is close to
/// saturating noise.
pub const PHASE_NOISE_WEIGHTS: [f64; 4] = [0.0, 1.0, 0.15, 0.85];

const BASE_NOISE_STD: f64 = 80.0;
const TRAIN_FRACTION_NUM: usize = 4;
const TRAIN_FRACTION_DEN: usize = 5;

/// Integer-valued images in `[0, 256)` stored as `[n, s, s, c]`, with the
/// first `train_count` examples forming the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub train_count: usize,
    pub name: String,
    pub seed: u64,
    pub structure: f64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.images.shape()[1], self.images.shape()[3])
    }

    fn matrix(&self, start: usize, end: usize) -> Result<Tensor> {
        let d = self.layout().dims();
        self.images.slice(0, start, end)?.reshape(&[end - start, d])
    }

    /// Training examples flattened to `[train_count, s·s·c]`.
    pub fn train_matrix(&self) -> Result<Tensor> {
        self.matrix(0, self.train_count)
    }

    /// Held-out examples flattened to `[n − train_count, s·s·c]`.
    pub fn valid_matrix(&self) -> Result<Tensor> {
        if self.train_count >= self.n() {
            return Err(Error::Data("dataset has no validation split".into()));
        }
        self.matrix(self.train_count, self.n())
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.images.shape();
        if self.images.rank() != 4 || shape[1] != shape[2] {
            return Err(Error::Data(format!("images must be [n, s, s, c], got {shape:?}")));
        }
        if self.train_count == 0 || self.train_count > shape[0] {
            return Err(Error::Data(format!(
                "train count {} out of range for {} examples",
                self.train_count, shape[0]
            )));
        }
        for &v in self.images.data() {
            if v.fract() != 0.0 || !(0.0..256.0).contains(&v) {
                return Err(Error::Data(format!("pixel value {v} is not an integer in [0, 256)")));
            }
        }
        Ok(())
    }

    /// Writes the images as FFT1 at `path` and the metadata sidecar at
    /// `path + ".meta"`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let path = path.as_ref();
        self.images.save_fft1(path)?;
        let meta = format!(
            "name={}\nseed={}\nn={}\ns={}\nc={}\nstructure-level={}\ntrain-count={}\n",
            self.name,
            self.seed,
            self.n(),
            self.images.shape()[1],
            self.images.shape()[3],
            self.structure,
            self.train_count,
        );
        let meta_file = meta_path(path);
        std::fs::write(&meta_file, meta).map_err(|e| Error::file(&meta_file, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let images = Tensor::load_fft1(path)?;
        let meta_file = meta_path(path);
        let display = meta_file.display().to_string();
        let corrupt = |detail: String| Error::format(&display, detail);
        let text = std::fs::read_to_string(&meta_file).map_err(|e| Error::file(&meta_file, e))?;
        let mut name = None;
        let mut seed = None;
        let mut n = None;
        let mut s = None;
        let mut c = None;
        let mut structure = None;
        let mut train_count = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("bad sidecar line: {line}")))?;
            match key {
                "name" => name = Some(value.to_string()),
                "seed" => seed = value.parse::<u64>().ok(),
                "n" => n = value.parse::<usize>().ok(),
                "s" => s = value.parse::<usize>().ok(),
                "c" => c = value.parse::<usize>().ok(),
                "structure-level" => structure = value.parse::<f64>().ok(),
                "train-count" => train_count = value.parse::<usize>().ok(),
                other => return Err(corrupt(format!("unknown sidecar key '{other}'"))),
            }
        }
        let missing = |key: &str| corrupt(format!("missing or invalid sidecar key '{key}'"));
        let ds = Dataset {
            images,
            train_count: train_count.ok_or_else(|| missing("train-count"))?,
            name: name.ok_or_else(|| missing("name"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            structure: structure.ok_or_else(|| missing("structure-level"))?,
        };
        let expect = [
            n.ok_or_else(|| missing("n"))?,
            s.ok_or_else(|| missing("s"))?,
            s.ok_or_else(|| missing("s"))?,
            c.ok_or_else(|| missing("c"))?,
        ];
        if ds.images.shape() != expect {
            return Err(corrupt(format!(
                "sidecar shape {expect:?} does not match tensor {:?}",
                ds.images.shape()
            )));
        }
        ds.validate()?;
        Ok(ds)
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta");
    std::path::PathBuf::from(os)
}

#[derive(Debug, Clone)]
pub(crate) struct Blob {
    pub ci: usize,
    pub cj: usize,
    pub radius: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct ImageSpec {
    pub base: f64,
    pub slope_i: f64,
    pub slope_j: f64,
    pub blobs: Vec<Blob>,
}

pub(crate) fn sample_image_spec<R: Rng + ?Sized>(rng: &mut R, s: usize) -> ImageSpec {
    let base = rng.random_range(60.0..110.0);
    let slope_i = rng.random_range(-5.0..5.0);
    let slope_j = rng.random_range(-5.0..5.0);
    let count = rng.random_range(1..=3usize);
    let blobs = (0..count)
        .map(|_| Blob {
            ci: rng.random_range(0..s),
            cj: rng.random_range(0..s),
            radius: rng.random_range(s as f64 / 8.0..s as f64 / 4.0).max(0.8),
            amplitude: rng.random_range(50.0..120.0),
        })
        .collect();
    ImageSpec { base, slope_i, slope_j, blobs }
}

pub(crate) fn render_base(spec: &ImageSpec, s: usize, i: usize, j: usize) -> f64 {
    let mid = (s as f64 - 1.0) / 2.0;
    let mut v = spec.base + spec.slope_i * (i as f64 - mid) + spec.slope_j * (j as f64 - mid);
    for b in &spec.blobs {
        let di = i as f64 - b.ci as f64;
        let dj = j as f64 - b.cj as f64;
        v += b.amplitude * (-(di * di + dj * dj) / (2.0 * b.radius * b.radius)).exp();
    }
    v
}

pub(crate) fn phase_noise_std(structure: f64, i: usize, j: usize) -> f64 {
    let w = PHASE_NOISE_WEIGHTS[(i % 2) * 2 + (j % 2)];
    (1.0 - structure) * BASE_NOISE_STD + structure * (4.0 + 96.0 * w)
}

/// Generates `n` single-channel `s×s` images. `structure` in `[0, 1]` sets
/// the phase contrast of the pixel noise; exactly 0 degenerates to i.i.d.
/// uniform noise images with no blobs at all.
pub fn generate_blobs(n: usize, s: usize, seed: u64, structure: f64) -> Result<Dataset> {
    if n == 0 || s == 0 {
        return Err(Error::Data("need at least one image and a positive size".into()));
    }
    if !(0.0..=1.0).contains(&structure) {
        return Err(Error::Data(format!("structure level {structure} outside [0, 1]")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * s * s);
    for _ in 0..n {
        if structure == 0.0 {
            for _ in 0..s * s {
                data.push(rng.random_range(0..256u32) as f64);
            }
            continue;
        }
        let spec = sample_image_spec(&mut rng, s);
        for i in 0..s {
            for j in 0..s {
                let noise: f64 = rng.sample(StandardNormal);
                let v = render_base(&spec, s, i, j) + phase_noise_std(structure, i, j) * noise;
                data.push(v.round().clamp(0.0, 255.0));
            }
        }
    }
    let ds = Dataset {
        images: Tensor::new(vec![n, s, s, 1], data)?,
        train_count: (n * TRAIN_FRACTION_NUM / TRAIN_FRACTION_DEN).max(1),
        name: "blobs".into(),
        seed,
        structure,
    };
    ds.validate()?;
    Ok(ds)
}

// ── PGM / PPM image grids ────────────────────────────────────────────

/// Tiles a batch `[k, s, s, c]` row-major into a ⌈√k⌉-column grid and
/// writes binary PGM (c = 1) or PPM (c = 3); unused tiles stay black.
/// Values are rounded and clamped to `[0, 255]`.
pub fn write_image_grid(images: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let shape = images.shape();
    if images.rank() != 4 || shape[1] != shape[2] {
        return Err(Error::Data(format!("image grid needs [k, s, s, c], got {shape:?}")));
    }
    let (k, s, c) = (shape[0], shape[1], shape[3]);
    if c != 1 && c != 3 {
        return Err(Error::Data(format!("can render 1 or 3 channels, got {c}")));
    }
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let (w, h) = (cols * s, rows * s);
    let mut pixels = vec![0u8; w * h * c];
    let data = images.data();
    for t in 0..k {
        let (ti, tj) = (t / cols, t % cols);
        for i in 0..s {
            for j in 0..s {
                for ch in 0..c {
                    let v = data[((t * s + i) * s + j) * c + ch];
                    pixels[(((ti * s + i) * w) + tj * s + j) * c + ch] =
                        v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    let f = std::fs::File::create(path.as_ref()).map_err(|e| Error::file(&path, e))?;
    let mut f = std::io::BufWriter::new(f);
    let magic = if c == 1 { "P5" } else { "P6" };
    write!(f, "{magic}\n{w} {h}\n255\n")?;
    f.write_all(&pixels)?;
    f.flush()?;
    Ok(())
}

/// Reads a binary PGM/PPM written by [`write_image_grid`] back into an
/// `[h, w, c]` tensor.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let display = path.as_ref().display().to_string();
    let corrupt = |detail: &str| Error::format(&display, detail);
    let mut bytes = Vec::new();
    let mut f = std::fs::File::open(path.as_ref()).map_err(|e| Error::file(&path, e))?;
    f.read_to_end(&mut bytes)?;
    let c = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(corrupt("not a binary PGM/PPM")),
    };
    // header: three whitespace-separated integers, one whitespace, payload
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            pos += 1;
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| corrupt("bad header field"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(corrupt("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace before payload
    let payload = bytes.get(pos..).ok_or_else(|| corrupt("missing payload"))?;
    if payload.len() != w * h * c {
        return Err(corrupt("payload size does not match header"));
    }
    Tensor::new(vec![h, w, c], payload.iter().map(|&b| b as f64).collect())
}
