//! Procedural annotated scenes, the degradation chain, and the on-disk dataset format.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImagePlane};
use crate::vocab::{Tag, NOUNS};

const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.7, 0.2]),
    ("blue", [0.15, 0.3, 0.9]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("purple", [0.6, 0.2, 0.75]),
    ("orange", [0.95, 0.55, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.08, 0.08, 0.08]),
];

/// Width of the textured band; also the RGPA patch size, so the band fills whole patches.
pub const BAND_WIDTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_shapes: 1,
            max_shapes: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < BAND_WIDTH || self.size % BAND_WIDTH != 0 {
            return Err(Error::Config(format!("scene size must be a multiple of {BAND_WIDTH}")));
        }
        if self.min_shapes > self.max_shapes || self.max_shapes > 3 {
            return Err(Error::Config("shape count must satisfy min <= max <= 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DegradationParams {
    pub blur_sigma: f64,
    pub downscale: usize,
    pub noise_sigma: f64,
    pub quant_block: usize,
}

impl Default for DegradationParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            downscale: 4,
            noise_sigma: 0.03,
            quant_block: 4,
        }
    }
}

impl DegradationParams {
    pub fn identity(downscale: usize) -> Self {
        Self {
            blur_sigma: 0.0,
            downscale,
            noise_sigma: 0.0,
            quant_block: 1,
        }
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if self.downscale == 0 || size % self.downscale != 0 {
            return Err(Error::Config(format!("downscale {} does not divide {size}", self.downscale)));
        }
        let lq = size / self.downscale;
        if self.quant_block == 0 || lq % self.quant_block != 0 {
            return Err(Error::Config(format!("quant_block {} does not divide {lq}", self.quant_block)));
        }
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("blur and noise sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// An HQ scene with its annotations, before degradation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub hq: ImagePlane,
    pub nouns: Vec<String>,
    pub prompt: Vec<(String, Tag)>,
    /// One row-major `H·W` mask per noun.
    pub masks: Vec<Vec<bool>>,
    /// `true` marks textured pixels.
    pub texture: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub seed: u64,
    pub hq: ImagePlane,
    pub lq: ImagePlane,
    pub nouns: Vec<String>,
    pub prompt: Vec<(String, Tag)>,
    pub masks: Vec<Vec<bool>>,
    pub texture: Vec<bool>,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of sample `index` in a dataset generated from `base`.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index)
}

#[derive(Debug, Clone, Copy)]
struct ShapeSpec {
    noun: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    vertical: bool,
}

impl ShapeSpec {
    /// Half-extent of the bounding box.
    fn radius(&self) -> f64 {
        match NOUNS[self.noun] {
            "stripe" | "cross" => self.a.max(self.b),
            _ => self.a,
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        match NOUNS[self.noun] {
            "circle" | "dot" => dx * dx + dy * dy <= self.a * self.a,
            "square" | "grid" => dx.abs() <= self.a && dy.abs() <= self.a,
            "triangle" => {
                // apex at (0, -a), base at y = +a with half-width a
                let t = (dy + self.a) / (2.0 * self.a);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * self.a
            }
            "stripe" => {
                let (along, across) = if self.vertical { (dy, dx) } else { (dx, dy) };
                along.abs() <= self.a && across.abs() <= self.b
            }
            "ring" => {
                let d2 = dx * dx + dy * dy;
                d2 <= self.a * self.a && d2 >= self.b * self.b
            }
            "cross" => (dx.abs() <= self.b && dy.abs() <= self.a) || (dy.abs() <= self.b && dx.abs() <= self.a),
            _ => unreachable!(),
        }
    }

    fn rasterize(&self, size: usize) -> Vec<bool> {
        let mut m = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                m.push(self.contains(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        m
    }
}

fn random_shape(noun: usize, size: usize, rng: &mut impl Rng) -> ShapeSpec {
    let (a, b) = match NOUNS[noun] {
        "circle" => (rng.random_range(6.0..11.0), 0.0),
        "square" | "grid" => (rng.random_range(5.0..10.0), 0.0),
        "triangle" => (rng.random_range(6.0..11.0), 0.0),
        "stripe" => (rng.random_range(10.0..16.0), rng.random_range(2.0..3.0)),
        "dot" => (rng.random_range(2.5..4.0), 0.0),
        "ring" => {
            let outer = rng.random_range(7.0..11.0);
            (outer, outer - rng.random_range(2.5..3.5))
        }
        "cross" => (rng.random_range(6.0..10.0), 2.0),
        _ => unreachable!(),
    };
    let mut s = ShapeSpec {
        noun,
        cx: 0.0,
        cy: 0.0,
        a,
        b,
        vertical: rng.random_bool(0.5),
    };
    let r = s.radius() + 1.0;
    let hi = size as f64 - r;
    s.cx = rng.random_range(r..hi.max(r + 1e-3));
    s.cy = rng.random_range(r..hi.max(r + 1e-3));
    s
}

fn luma3(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Composes a flat background, one textured band aligned to the 16-pixel grid, and up to
/// three distinct non-overlapping shapes.
pub fn synth_hq(rng: &mut impl Rng, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let n = cfg.size;
    let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));

    // textured band: horizontal or vertical, occupying one row/column of patches
    let horizontal = rng.random_bool(0.5);
    let slot = rng.random_range(0..n / BAND_WIDTH) * BAND_WIDTH;
    let in_band = |y: usize, x: usize| {
        let u = if horizontal { y } else { x };
        (slot..slot + BAND_WIDTH).contains(&u)
    };
    let amp = rng.random_range(0.2..0.3f32);
    let texture_fn: Box<dyn Fn(usize, usize) -> f32> = if rng.random_bool(0.5) {
        let period = rng.random_range(4.0..8.0f32);
        let theta = rng.random_range(0..4) as f32 * std::f32::consts::FRAC_PI_4;
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let (c, s) = (theta.cos(), theta.sin());
        Box::new(move |y, x| {
            amp * (std::f32::consts::TAU * (x as f32 * c + y as f32 * s) / period + phase).sin()
        })
    } else {
        // value noise on a 2-pixel lattice with bilinear interpolation
        let cells = n / 2 + 1;
        let lattice: Vec<f32> = (0..cells * cells).map(|_| rng.random_range(-1.0..1.0)).collect();
        Box::new(move |y, x| {
            let (fy, fx) = (y as f32 / 2.0, x as f32 / 2.0);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            let v = |yy: usize, xx: usize| lattice[yy.min(cells - 1) * cells + xx.min(cells - 1)];
            let top = v(y0, x0) * (1.0 - tx) + v(y0, x0 + 1) * tx;
            let bot = v(y0 + 1, x0) * (1.0 - tx) + v(y0 + 1, x0 + 1) * tx;
            amp * (top * (1.0 - ty) + bot * ty)
        })
    };

    let mut hq = ImagePlane::from_fn(n, n, ColorSpace::Rgb, |c, y, x| {
        if in_band(y, x) {
            (bg[c] + texture_fn(y, x)).clamp(0.0, 1.0)
        } else {
            bg[c]
        }
    });

    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let chosen = sample_indices(rng, NOUNS.len(), count).into_vec();
    let mut shapes: Vec<(ShapeSpec, Vec<bool>, usize)> = Vec::new();
    let mut occupied = vec![false; n * n];
    for noun in chosen {
        let mut placed = None;
        for _ in 0..64 {
            let s = random_shape(noun, n, rng);
            let mask = s.rasterize(n);
            // keep a one-pixel gap so masks neither overlap nor touch
            let clash = mask.iter().enumerate().any(|(i, &m)| {
                m && {
                    let (y, x) = ((i / n) as isize, (i % n) as isize);
                    (-1..=1).any(|dy| {
                        (-1..=1).any(|dx| {
                            let (yy, xx) = (y + dy, x + dx);
                            yy >= 0 && xx >= 0 && yy < n as isize && xx < n as isize && occupied[yy as usize * n + xx as usize]
                        })
                    })
                }
            });
            if !clash && mask.iter().any(|&m| m) {
                placed = Some((s, mask));
                break;
            }
        }
        let Some((s, mask)) = placed else { continue };
        for (o, &m) in occupied.iter_mut().zip(&mask) {
            *o |= m;
        }
        let colour = loop {
            let k = rng.random_range(0..PALETTE.len());
            if (luma3(PALETTE[k].1) - luma3(bg)).abs() >= 0.2 {
                break k;
            }
        };
        shapes.push((s, mask, colour));
    }

    let mut texture: Vec<bool> = (0..n * n).map(|i| in_band(i / n, i % n)).collect();
    let mut nouns = Vec::new();
    let mut prompt = Vec::new();
    let mut masks = Vec::new();
    let plane = n * n;
    for (k, (s, mask, colour)) in shapes.into_iter().enumerate() {
        let is_grid = NOUNS[s.noun] == "grid";
        let (x0, y0) = ((s.cx - s.a).floor() as isize, (s.cy - s.a).floor() as isize);
        let rgb = PALETTE[colour].1;
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            let (y, x) = ((i / n) as isize, (i % n) as isize);
            let paint = !is_grid || (x - x0).rem_euclid(4) == 0 || (y - y0).rem_euclid(4) == 0;
            if paint {
                for (c, &v) in rgb.iter().enumerate() {
                    hq.data_mut()[c * plane + i] = v;
                }
            }
            texture[i] = is_grid;
        }
        if k > 0 {
            prompt.push(("and".to_string(), Tag::Other));
        }
        prompt.push(("a".to_string(), Tag::Other));
        prompt.push((PALETTE[colour].0.to_string(), Tag::Adjective));
        prompt.push((NOUNS[s.noun].to_string(), Tag::Noun));
        nouns.push(NOUNS[s.noun].to_string());
        masks.push(mask);
    }
    Ok(Scene {
        hq,
        nouns,
        prompt,
        masks,
        texture,
    })
}

fn gaussian_blur(img: &ImagePlane, sigma: f64) -> ImagePlane {
    if sigma == 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / s).collect();
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut tmp = vec![0f64; img.data().len()];
    for c in 0..img.channels() {
        let p = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = (x + j as isize - r).clamp(0, w - 1);
                    acc += kv * p[(y * w + xx) as usize] as f64;
                }
                tmp[(c as isize * h * w + y * w + x) as usize] = acc;
            }
        }
    }
    ImagePlane::from_fn(img.height(), img.width(), img.space(), |c, y, x| {
        let (y, x) = (y as isize, x as isize);
        let mut acc = 0.0;
        for (j, kv) in k.iter().enumerate() {
            let yy = (y + j as isize - r).clamp(0, h - 1);
            acc += kv * tmp[(c as isize * h * w + yy * w + x) as usize];
        }
        acc as f32
    })
}

/// Keeps each block's mean and rounds the deviations from it to multiples of 1/32.
fn block_quantize(img: &mut ImagePlane, block: usize) {
    if block <= 1 {
        return;
    }
    let (h, w) = (img.height(), img.width());
    let channels = img.channels();
    let data = img.data_mut();
    for c in 0..channels {
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let idx = |dy: usize, dx: usize| c * h * w + (by + dy) * w + bx + dx;
                let mut mean = 0f64;
                for dy in 0..block {
                    for dx in 0..block {
                        mean += data[idx(dy, dx)] as f64;
                    }
                }
                mean /= (block * block) as f64;
                for dy in 0..block {
                    for dx in 0..block {
                        let v = data[idx(dy, dx)] as f64;
                        let q = mean + ((v - mean) * 32.0).round() / 32.0;
                        data[idx(dy, dx)] = q.clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
}

/// Gaussian blur → box downsample → additive Gaussian noise (clipped) → block quantization.
pub fn degrade(hq: &ImagePlane, params: &DegradationParams, rng: &mut impl Rng) -> Result<ImagePlane> {
    params.validate(hq.height().min(hq.width()))?;
    params.validate(hq.height().max(hq.width()))?;
    let blurred = gaussian_blur(hq, params.blur_sigma);
    let mut lq = blurred.box_downsample(params.downscale)?;
    if params.noise_sigma > 0.0 {
        for v in lq.data_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + params.noise_sigma * e).clamp(0.0, 1.0) as f32;
        }
    }
    block_quantize(&mut lq, params.quant_block);
    Ok(lq)
}

pub fn generate_sample(
    base_seed: u64,
    index: u64,
    scene: &SceneConfig,
    degradation: &DegradationParams,
) -> Result<AnnotatedSample> {
    let seed = sample_seed(base_seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = synth_hq(&mut rng, scene)?;
    let lq = degrade(&s.hq, degradation, &mut rng)?;
    Ok(AnnotatedSample {
        seed,
        hq: s.hq,
        lq,
        nouns: s.nouns,
        prompt: s.prompt,
        masks: s.masks,
        texture: s.texture,
    })
}

pub fn generate(
    count: usize,
    base_seed: u64,
    scene: &SceneConfig,
    degradation: &DegradationParams,
) -> Result<Vec<AnnotatedSample>> {
    scene.validate()?;
    degradation.validate(scene.size)?;
    (0..count as u64).map(|i| generate_sample(base_seed, i, scene, degradation)).collect()
}

// ------------------------------------------------------------------------------ disk format

const MAGIC: &[u8; 4] = b"OSRA";

/// Writes `magic, u32 rank, u32 dims…, f32 data` (all little-endian).
pub fn write_array(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "array dims/data mismatch");
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = word(4)? as usize;
    if rank > 8 {
        return Err(bad("implausible rank"));
    }
    let dims: Vec<usize> = (0..rank).map(|k| word(8 + 4 * k).map(|d| d as usize)).collect::<Result<_>>()?;
    let start = 8 + 4 * rank;
    let count: usize = dims.iter().product();
    if bytes.len() != start + 4 * count {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
struct ManifestRow {
    index: usize,
    seed: u64,
    nouns: Vec<String>,
    prompt: Vec<(String, Tag)>,
    hq: String,
    lq: String,
    masks: Vec<String>,
    texture: String,
}

fn image_dims(img: &ImagePlane) -> [usize; 3] {
    [img.channels(), img.height(), img.width()]
}

fn mask_to_f32(m: &[bool]) -> Vec<f32> {
    m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

pub fn write_dataset(samples: &[AnnotatedSample], dir: &Path) -> Result<()> {
    for sub in ["hq", "lq", "masks", "texture"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(p, e))?;
    }
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let row = ManifestRow {
            index: i,
            seed: s.seed,
            nouns: s.nouns.clone(),
            prompt: s.prompt.clone(),
            hq: format!("hq/{i:04}.bin"),
            lq: format!("lq/{i:04}.bin"),
            masks: (0..s.masks.len()).map(|k| format!("masks/{i:04}_{k}.bin")).collect(),
            texture: format!("texture/{i:04}.bin"),
        };
        write_array(&dir.join(&row.hq), &image_dims(&s.hq), s.hq.data())?;
        write_array(&dir.join(&row.lq), &image_dims(&s.lq), s.lq.data())?;
        let (h, w) = (s.hq.height(), s.hq.width());
        for (m, path) in s.masks.iter().zip(&row.masks) {
            write_array(&dir.join(path), &[h, w], &mask_to_f32(m))?;
        }
        write_array(&dir.join(&row.texture), &[h, w], &mask_to_f32(&s.texture))?;
        serde_json::to_writer(&mut manifest, &row).expect("serializable row");
        manifest.push(b'\n');
    }
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&manifest_path, e))
}

fn load_image(dir: &Path, rel: &str, index: usize) -> Result<ImagePlane> {
    let path = dir.join(rel);
    let (dims, data) = read_array(&path).map_err(|e| annotate(e, index))?;
    let space = match dims.as_slice() {
        [3, _, _] => ColorSpace::Rgb,
        [1, _, _] => ColorSpace::Luma,
        _ => {
            return Err(Error::Parse {
                index,
                msg: format!("{rel}: expected a C×H×W image, got dims {dims:?}"),
            })
        }
    };
    ImagePlane::new(dims[1], dims[2], space, data).map_err(|e| annotate(e, index))
}

fn load_mask(dir: &Path, rel: &str, index: usize, h: usize, w: usize) -> Result<Vec<bool>> {
    let (dims, data) = read_array(&dir.join(rel)).map_err(|e| annotate(e, index))?;
    if dims != [h, w] || data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Parse {
            index,
            msg: format!("{rel}: expected a binary {h}x{w} mask"),
        });
    }
    Ok(data.iter().map(|&v| v == 1.0).collect())
}

fn annotate(e: Error, index: usize) -> Error {
    match e {
        Error::MissingFile(p) => Error::Parse {
            index,
            msg: format!("missing file {}", p.display()),
        },
        Error::Format(msg) => Error::Parse { index, msg },
        other => other,
    }
}

pub fn read_dataset(dir: &Path) -> Result<Vec<AnnotatedSample>> {
    let manifest_path: PathBuf = dir.join("manifest.jsonl");
    let f = fs::File::open(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(manifest_path.clone()),
        _ => Error::io(&manifest_path, e),
    })?;
    let mut out = Vec::new();
    for (index, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            index,
            msg: format!("manifest: {e}"),
        })?;
        if row.masks.len() != row.nouns.len() {
            return Err(Error::Parse {
                index,
                msg: format!("{} nouns but {} masks", row.nouns.len(), row.masks.len()),
            });
        }
        let hq = load_image(dir, &row.hq, index)?;
        let lq = load_image(dir, &row.lq, index)?;
        let (h, w) = (hq.height(), hq.width());
        let masks = row
            .masks
            .iter()
            .map(|m| load_mask(dir, m, index, h, w))
            .collect::<Result<Vec<_>>>()?;
        let texture = load_mask(dir, &row.texture, index, h, w)?;
        out.push(AnnotatedSample {
            seed: row.seed,
            hq,
            lq,
            nouns: row.nouns,
            prompt: row.prompt,
            masks,
            texture,
        });
    }
    Ok(out)
}
