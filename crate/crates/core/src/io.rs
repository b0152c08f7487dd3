//! File formats: PFM and 16-bit PNG depth, 8-bit PNG images, masks and
//! label maps, row-major `[R|t]` trajectories, and atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageBuffer as PngBuffer, Luma, Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Pose};
use crate::image::{Grid, ImageBuffer, MaskMap};

/// Meters are stored as `value / 256` in 16-bit depth PNGs.
pub const DEPTH_PNG_SCALE: f64 = 256.0;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Single-channel little-endian PFM, rows stored bottom to top.
pub fn write_pfm(path: &Path, grid: &Grid<f64>) -> Result<()> {
    let (w, h) = (grid.width(), grid.height());
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            bytes.extend_from_slice(&(*grid.get(x, y) as f32).to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn read_pfm(path: &Path) -> Result<Grid<f64>> {
    let bytes = read(path)?;
    let bad = |m: &str| Error::format(path, m);
    // three whitespace-terminated header tokens lines: kind, dims, scale
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PFM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if tokens[0] != "Pf" {
        return Err(bad("only single-channel PFM (Pf) is supported"));
    }
    let w: usize = tokens[1].parse().map_err(|_| bad("bad PFM width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad PFM height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad PFM scale"))?;
    let little = scale < 0.0;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * 4 {
        return Err(bad("PFM payload size does not match its header"));
    }
    let mut data = vec![0.0; w * h];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (x, row) = (i % w, i / w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    Grid::from_vec(w, h, data)
}

fn save_png<P, C>(path: &Path, img: &PngBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

fn load_png(path: &Path) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(&read(path)?, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit gray or RGB PNG; other channel counts are rejected.
pub fn write_image_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    match img.channels() {
        1 => save_png(path, &GrayImage::from_fn(w, h, |x, y| Luma([to_u8(img.get(x as usize, y as usize, 0))]))),
        3 => save_png(
            path,
            &RgbImage::from_fn(w, h, |x, y| {
                let p = img.pixel(x as usize, y as usize);
                Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
            }),
        ),
        c => Err(Error::format(path, format!("cannot store {c} channels as PNG"))),
    }
}

/// Intensities in `[0, 1]`; gray PNGs load as one channel, everything else as RGB.
pub fn read_image_png(path: &Path) -> Result<ImageBuffer> {
    let img = load_png(path)?;
    let gray = matches!(img.color(), image::ColorType::L8 | image::ColorType::L16);
    if gray {
        let g = img.to_luma8();
        let (w, h) = (g.width() as usize, g.height() as usize);
        ImageBuffer::new(w, h, 1, g.as_raw().iter().map(|&v| v as f64 / 255.0).collect())
    } else {
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        ImageBuffer::new(w, h, 3, rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect())
    }
}

pub fn write_gray_png(path: &Path, grid: &Grid<u8>) -> Result<()> {
    let img = GrayImage::from_raw(grid.width() as u32, grid.height() as u32, grid.as_slice().to_vec())
        .expect("buffer matches dimensions");
    save_png(path, &img)
}

pub fn read_gray_png(path: &Path) -> Result<Grid<u8>> {
    let g = load_png(path)?.to_luma8();
    Grid::from_vec(g.width() as usize, g.height() as usize, g.into_raw())
}

/// 255 where true, 0 elsewhere.
pub fn write_mask_png(path: &Path, mask: &MaskMap) -> Result<()> {
    write_gray_png(path, &mask.map(|&m| if m { 255 } else { 0 }))
}

pub fn read_mask_png(path: &Path) -> Result<MaskMap> {
    Ok(read_gray_png(path)?.map(|&v| v >= 128))
}

/// Values normalized by `max` (or the map maximum) to an 8-bit heatmap.
pub fn write_heatmap_png(path: &Path, grid: &Grid<f64>, max: Option<f64>) -> Result<()> {
    let top = max.unwrap_or_else(|| grid.as_slice().iter().copied().fold(0.0, f64::max));
    let top = if top > 0.0 { top } else { 1.0 };
    write_gray_png(path, &grid.map(|&v| to_u8(v / top)))
}

/// Depth as `round(meters * 256)` in 16 bits; invalid or unrepresentable pixels become 0.
pub fn write_depth_png16(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width() as u32, depth.height() as u32);
    let img: PngBuffer<Luma<u16>, Vec<u16>> = PngBuffer::from_fn(w, h, |x, y| {
        let v = depth
            .at(x as usize, y as usize)
            .map(|d| (d * DEPTH_PNG_SCALE).round())
            .filter(|v| *v >= 1.0 && *v <= u16::MAX as f64)
            .unwrap_or(0.0);
        Luma([v as u16])
    });
    save_png(path, &img)
}

pub fn read_depth_png16(path: &Path) -> Result<DepthMap> {
    let img = load_png(path)?;
    if !matches!(img.color(), image::ColorType::L16) {
        return Err(Error::format(path, "expected a 16-bit grayscale depth PNG"));
    }
    let g = img.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let raw = g.into_raw();
    let values = Grid::from_vec(w, h, raw.iter().map(|&v| v as f64 / DEPTH_PNG_SCALE).collect())?;
    let valid = Grid::from_vec(w, h, raw.iter().map(|&v| v > 0).collect())?;
    DepthMap::with_mask(values, valid)
}

/// Depth from `.pfm` or 16-bit `.png`, chosen by extension.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => Ok(DepthMap::new(read_pfm(path)?)),
        Some("png") => read_depth_png16(path),
        _ => Err(Error::format(path, "depth files must be .pfm or .png")),
    }
}

/// One pose per line: 12 row-major floats of `[R|t]`.
pub fn write_trajectory(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut text = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major().iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<Vec<Pose>> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, format!("line {}: not a number", i + 1)))?;
            let arr: [f64; 12] = vals
                .try_into()
                .map_err(|_| Error::format(path, format!("line {}: expected 12 values", i + 1)))?;
            Pose::from_row_major(&arr).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}
