//! Binary Netpbm (P5/P6, 8-bit) and PNG encode/decode, folder ingestion and
//! the dataset manifest.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndnet::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Pnm,
    Png,
}

impl ImageFormat {
    /// File extension for an image with `channels` channels.
    pub fn extension(self, channels: usize) -> &'static str {
        match (self, channels) {
            (ImageFormat::Png, _) => "png",
            (ImageFormat::Pnm, 1) => "pgm",
            (ImageFormat::Pnm, _) => "ppm",
        }
    }
}

impl std::str::FromStr for ImageFormat {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pnm" | "pgm" | "ppm" => Ok(ImageFormat::Pnm),
            "png" => Ok(ImageFormat::Png),
            _ => invalid(format!("unknown image format '{s}' (expected pnm or png)")),
        }
    }
}

/// An 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    /// Quantizes a `[C,H,W]` tensor (C = 1 or 3) after clamping to `[0,1]`.
    pub fn from_tensor(image: &Tensor) -> Result<Self> {
        let &[c, h, w] = image.shape() else {
            return invalid(format!("expected [C,H,W], got {:?}", image.shape()));
        };
        if c != 1 && c != 3 {
            return invalid(format!("only 1 or 3 channels can be encoded, got {c}"));
        }
        let mut pixels = vec![0u8; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                let v = image.data()[ch * h * w + i].clamp(0.0, 1.0);
                pixels[i * c + ch] = (v * 255.0).round() as u8;
            }
        }
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            pixels,
        })
    }

    /// Planar `[C,H,W]` in `[0,1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, hw) = (self.channels, self.width * self.height);
        Tensor::from_fn(&[c, self.height, self.width], |i| {
            let (ch, p) = (i / hw, i % hw);
            self.pixels[p * c + ch] as f32 / 255.0
        })
    }
}

pub fn encode_pnm(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported magic '{m}' (binary P5/P6 only)")),
    };
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        token()?.parse().map_err(|_| format!("bad {what} in header"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if !(1..=255).contains(&maxval) {
        return Err(format!("maxval {maxval} unsupported (8-bit only)"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let len = width * height * channels;
    if bytes.len() < start + len {
        return Err(format!("raster truncated: need {len} bytes"));
    }
    let pixels = bytes[start..start + len]
        .iter()
        .map(|&v| ((v as usize * 255 + maxval / 2) / maxval).min(255) as u8)
        .collect();
    Ok(Raster {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn encode_png(r: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, r.width as u32, r.height as u32);
        enc.set_color(if r.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| LabError::Invalid(format!("png encode: {e}")))?;
        writer
            .write_image_data(&r.pixels)
            .map_err(|e| LabError::Invalid(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_c = info.color_type.samples();
    let keep = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        _ => 3,
    };
    let mut pixels = Vec::with_capacity(w * h * keep);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * src_c].chunks(src_c) {
            pixels.extend_from_slice(&px[..keep]);
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: keep,
        pixels,
    })
}

/// Writes a `[C,H,W]` tensor, choosing the encoder by file extension.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let raster = Raster::from_tensor(image)?;
    let bytes = match extension(path).as_deref() {
        Some("png") => encode_png(&raster)?,
        Some("pgm") | Some("ppm") | Some("pnm") => encode_pnm(&raster),
        _ => return invalid(format!("{}: unsupported image extension", path.display())),
    };
    let file = fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| LabError::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let decoded = match extension(path).as_deref() {
        Some("png") => decode_png(&bytes),
        Some("pgm") | Some("ppm") | Some("pnm") => decode_pnm(&bytes),
        _ => Err("unsupported image extension".into()),
    };
    decoded.map_err(|msg| LabError::format(path, msg))
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

fn is_image(path: &Path) -> bool {
    matches!(extension(path).as_deref(), Some("png" | "pgm" | "ppm" | "pnm"))
}

/// Converts to `channels` (1: luminance average, 3: gray replicated),
/// centre-crops to a square and area-resamples to `size×size`.
pub fn conform(raster: &Raster, channels: usize, size: usize) -> Result<Tensor> {
    if channels != 1 && channels != 3 {
        return invalid(format!("target channel count {channels} must be 1 or 3"));
    }
    let src = raster.to_tensor();
    let (c, h, w) = (raster.channels, raster.height, raster.width);
    let plane = |ch: usize| &src.data()[ch * h * w..(ch + 1) * h * w];
    let planes: Vec<Vec<f32>> = match (c, channels) {
        (1, 1) => vec![plane(0).to_vec()],
        (1, 3) => vec![plane(0).to_vec(); 3],
        (3, 3) => (0..3).map(|ch| plane(ch).to_vec()).collect(),
        (3, 1) => vec![(0..h * w).map(|i| (plane(0)[i] + plane(1)[i] + plane(2)[i]) / 3.0).collect()],
        _ => unreachable!("rasters have 1 or 3 channels"),
    };
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let mut data = Vec::with_capacity(channels * size * size);
    for p in &planes {
        data.extend(area_resample(p, w, y0, x0, side, size));
    }
    Ok(Tensor::new(vec![channels, size, size], data)?)
}

/// Each output pixel averages the source square it covers, weighting
/// partially covered source pixels by overlap.
fn area_resample(src: &[f32], stride: usize, y0: usize, x0: usize, side: usize, size: usize) -> Vec<f32> {
    let scale = side as f64 / size as f64;
    let spans: Vec<Vec<(usize, f64)>> = (0..size)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut span = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < side {
                let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    span.push((i, overlap / scale));
                }
                i += 1;
            }
            span
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for ys in &spans {
        for xs in &spans {
            let mut acc = 0.0f64;
            for &(iy, wy) in ys {
                for &(ix, wx) in xs {
                    acc += wy * wx * src[(y0 + iy) * stride + x0 + ix] as f64;
                }
            }
            out.push(acc as f32);
        }
    }
    out
}

/// Loads every PGM/PPM/PNG in `dir` (sorted by file name) as `channels×size×size`.
pub fn load_folder(dir: &Path, channels: usize, size: usize) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| LabError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| LabError::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return invalid(format!("{}: no PGM/PPM/PNG images found", dir.display()));
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let images = paths
        .iter()
        .map(|p| conform(&read_image(p)?, channels, size))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(images, None, None)
}

/// On-disk dataset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<String>,
    pub labels: Option<Vec<usize>>,
    pub class_names: Option<Vec<String>>,
    pub variants: Option<Vec<usize>>,
    pub shape: Vec<usize>,
    pub normalization: Normalization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Pixel range the images were stored in.
    pub range: [f64; 2],
    /// Dataset mean pixel value; training does not subtract it.
    pub mean: f64,
    pub mean_subtracted: bool,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `img_00000.<ext>` files and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset, format: ImageFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let ext = format.extension(ds.image_shape()[0]);
    let mut names = Vec::with_capacity(ds.len());
    for (i, im) in ds.images.iter().enumerate() {
        let name = format!("img_{i:05}.{ext}");
        write_image(&dir.join(&name), im)?;
        names.push(name);
    }
    let manifest = Manifest {
        images: names,
        labels: ds.labels.clone(),
        class_names: ds.class_names.clone(),
        variants: ds.variants.clone(),
        shape: ds.image_shape().to_vec(),
        normalization: Normalization {
            range: [0.0, 1.0],
            mean: ds.mean,
            mean_subtracted: false,
        },
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| LabError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| LabError::format(&path, e.to_string()))?;
    let &[c, h, w] = m.shape.as_slice() else {
        return Err(LabError::format(&path, "shape must have three entries"));
    };
    if h != w {
        return Err(LabError::format(&path, "images must be square"));
    }
    let images = m
        .images
        .iter()
        .map(|name| conform(&read_image(&dir.join(name))?, c, h))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(images, m.labels, m.class_names)?;
    ds.variants = m.variants;
    Ok(ds)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| LabError::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// Lays `[C,H,W]` images side by side with a one-pixel white gap.
pub fn tile_row(images: &[Tensor]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return invalid("nothing to tile");
    };
    let &[c, h, w] = first.shape() else {
        return invalid(format!("expected [C,H,W], got {:?}", first.shape()));
    };
    if images.iter().any(|im| im.shape() != first.shape()) {
        return invalid("tiled images differ in shape");
    }
    let n = images.len();
    let width = n * w + (n - 1);
    let mut out = Tensor::full(&[c, h, width], 1.0);
    for (k, im) in images.iter().enumerate() {
        for ch in 0..c {
            for y in 0..h {
                let src = &im.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
                let start = (ch * h + y) * width + k * (w + 1);
                out.data_mut()[start..start + w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Reads a whole image file for callers that only need the decoded tensor.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Ok(read_image(path)?.to_tensor())
}
