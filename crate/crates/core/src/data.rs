//! Image I/O (PNG and binary PPM), paired datasets and the synthetic
//! low-light generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A low-light image and its reference, both `[3,H,W]` in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub low: Tensor<f32>,
    pub gt: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
}

impl ImageFormat {
    /// Chosen from the file extension; anything but `.ppm` is PNG.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ppm") => ImageFormat::Ppm,
            _ => ImageFormat::Png,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Ppm => "ppm",
        }
    }
}

/// Clamps to `[0,1]` and rounds half up to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn from_interleaved(width: usize, height: usize, rgb: &[u8], scale: f32) -> Result<Tensor<f32>> {
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / scale;
        }
    }
    Tensor::new([3, height, width], data)
}

fn to_interleaved<T: Real>(img: &Tensor<T>) -> Result<(usize, usize, Vec<u8>)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim(format!("images must be [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = img.data();
    let rgb = (0..plane)
        .flat_map(|i| (0..3).map(move |c| quantize(d[c * plane + i].as_f64())))
        .collect();
    Ok((w, h, rgb))
}

fn parse_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |m: &str| Error::Image {
        path: path.to_path_buf(),
        message: format!("invalid PPM: {m}"),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("expected a decimal header field"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(bad("zero image size"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    let need = w * h * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad(&format!("expected {need} raster bytes, found {}", bytes.len() - pos)))?;
    from_interleaved(w, h, raster, maxval as f32)
}

/// Reads an 8-bit RGB image as `[3,H,W]` with values `v/255`.
///
/// Binary PPM is recognised by its `P6` signature, anything else goes to the
/// PNG decoder.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        return parse_ppm(&bytes, path);
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    from_interleaved(rgb.width() as usize, rgb.height() as usize, rgb.as_raw(), 255.0)
}

/// Encodes a `[3,H,W]` image after clamping and quantization.
pub fn encode_image<T: Real>(img: &Tensor<T>, format: ImageFormat) -> Result<Vec<u8>> {
    let (w, h, rgb) = to_interleaved(img)?;
    match format {
        ImageFormat::Ppm => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            out.extend_from_slice(&rgb);
            Ok(out)
        }
        ImageFormat::Png => {
            let mut out = Vec::new();
            let enc = image::codecs::png::PngEncoder::new(&mut out);
            image::ImageEncoder::write_image(enc, &rgb, w as u32, h as u32, image::ExtendedColorType::Rgb8)
                .map_err(|e| Error::usage(format!("PNG encoding failed: {e}")))?;
            Ok(out)
        }
    }
}

/// Writes an image in the format implied by the extension of `path`.
pub fn write_image<T: Real>(path: impl AsRef<Path>, img: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(img, ImageFormat::from_path(path))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn image_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if !entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let ext = Path::new(&name).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "ppm")) {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Pairs same-named PNG/PPM files from two directories, in sorted order.
pub fn load_paired_dataset(low_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>) -> Result<Vec<ImagePair>> {
    let (low_dir, gt_dir) = (low_dir.as_ref(), gt_dir.as_ref());
    let low = image_files(low_dir)?;
    let gt = image_files(gt_dir)?;
    for (names, other, dir) in [(&low, &gt, gt_dir), (&gt, &low, low_dir)] {
        if let Some(n) = names.iter().find(|n| other.binary_search(n).is_err()) {
            return Err(Error::usage(format!("{n} has no counterpart in {}", dir.display())));
        }
    }
    if low.is_empty() {
        return Err(Error::usage(format!("no PNG or PPM images in {}", low_dir.display())));
    }
    low.iter()
        .map(|name| {
            let l = read_image(low_dir.join(name))?;
            let g = read_image(gt_dir.join(name))?;
            if l.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "{name}: low image is {:?} but reference is {:?}",
                    l.shape(),
                    g.shape()
                )));
            }
            Ok(ImagePair {
                id: name.clone(),
                low: l,
                gt: g,
            })
        })
        .collect()
}

pub const SYNTH_MIN_SIZE: usize = 16;

/// Deterministic synthetic pairs.
///
/// Each reference channel is a sum of three low-frequency sinusoids rescaled
/// to `[0.2, 0.9]`. The low image is `clamp(gt^γ·s + n)` with per-pair
/// `γ ∈ [2,3]`, `s ∈ [0.2,0.5]` and `n ~ N(0, 0.01²)`. Both images are
/// quantized to 8 bits so they survive a round trip through disk unchanged.
pub fn make_synthetic(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<ImagePair>> {
    if height < SYNTH_MIN_SIZE || width < SYNTH_MIN_SIZE {
        return Err(Error::usage(format!(
            "synthetic images must be at least {SYNTH_MIN_SIZE}×{SYNTH_MIN_SIZE}, got {height}×{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.01).expect("valid deviation");
    let plane = height * width;
    let digits = count.saturating_sub(1).to_string().len().max(3);
    (0..count)
        .map(|i| {
            let mut gt = vec![0.0f64; 3 * plane];
            for c in 0..3 {
                let waves: Vec<[f64; 4]> = (0..3)
                    .map(|_| {
                        [
                            rng.random_range(0.5..1.0),
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                            rng.random_range(0.0..std::f64::consts::TAU),
                        ]
                    })
                    .collect();
                let ch = &mut gt[c * plane..(c + 1) * plane];
                for (p, v) in ch.iter_mut().enumerate() {
                    let (y, x) = ((p / width) as f64 / height as f64, (p % width) as f64 / width as f64);
                    *v = waves
                        .iter()
                        .map(|[a, fx, fy, phase]| a * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin())
                        .sum();
                }
                let (lo, hi) = ch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
                let span = (hi - lo).max(1e-12);
                ch.iter_mut().for_each(|v| *v = 0.2 + 0.7 * (*v - lo) / span);
            }
            let gamma = rng.random_range(2.0..3.0);
            let s = rng.random_range(0.2..0.5);
            let low: Vec<f64> = gt.iter().map(|&g| g.powf(gamma) * s + noise.sample(&mut rng)).collect();
            let q = |v: Vec<f64>| {
                Tensor::new([3, height, width], v.into_iter().map(|x| f32::from(quantize(x)) / 255.0).collect())
            };
            Ok(ImagePair {
                id: format!("{i:0digits$}.png"),
                low: q(low)?,
                gt: q(gt)?,
            })
        })
        .collect()
}

/// Writes `pairs` as `out_dir/low/<id>` and `out_dir/gt/<id>`, with the
/// extension replaced according to `format`.
pub fn write_pairs(pairs: &[ImagePair], out_dir: impl AsRef<Path>, format: ImageFormat) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let mut written = Vec::new();
    for sub in ["low", "gt"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for p in pairs {
            let path = dir.join(Path::new(&p.id).with_extension(format.extension()));
            write_image(&path, if sub == "low" { &p.low } else { &p.gt })?;
            written.push(path);
        }
    }
    Ok(written)
}
