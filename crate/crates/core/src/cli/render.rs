//! Slice rendering with an optional mask contour.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volgrid::{Axis, LabelVolume, NormalizationWindow, Volume3D};

pub const CONTOUR_RGB: [u8; 3] = [255, 0, 0];

/// 8-bit raster, gray (1 channel) or RGB (3 channels), rows top to bottom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn pixel(&self, col: usize, row: usize) -> &[u8] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Mask pixels of a slice with a background 4-neighbour or on the slice edge.
pub fn contour(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let at = |c: usize, r: usize| mask[r * width + c];
    let mut out = vec![false; mask.len()];
    for r in 0..height {
        for c in 0..width {
            if !at(c, r) {
                continue;
            }
            let edge = c == 0 || r == 0 || c + 1 == width || r + 1 == height;
            out[r * width + c] = edge || !at(c - 1, r) || !at(c + 1, r) || !at(c, r - 1) || !at(c, r + 1);
        }
    }
    out
}

pub fn render_slice(
    image: &Volume3D,
    mask: Option<&LabelVolume>,
    axis: Axis,
    index: usize,
    window: &NormalizationWindow,
) -> Result<Raster> {
    let slice = image.extract_slice(axis, index)?;
    let (w, h) = (slice.width, slice.height);
    let gray: Vec<u8> = slice
        .data
        .iter()
        .map(|&v| (window.apply(v) * 255.0).round() as u8)
        .collect();
    let Some(mask) = mask else {
        return Ok(Raster {
            width: w,
            height: h,
            channels: 1,
            data: gray,
        });
    };
    if !mask.grid().same_lattice(image.grid()) {
        return Err(Error::Grid("mask and image grids differ".into()));
    }
    let (fast, slow) = axis.plane_dims();
    let fixed = axis.fixed_dim();
    let mut inside = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut p = [0; 3];
            p[fast] = c;
            p[slow] = r;
            p[fixed] = index;
            inside[r * w + c] = mask.at(p);
        }
    }
    let edge = contour(&inside, w, h);
    let mut data = Vec::with_capacity(3 * w * h);
    for (g, e) in gray.iter().zip(edge) {
        if e {
            data.extend_from_slice(&CONTOUR_RGB);
        } else {
            data.extend_from_slice(&[*g; 3]);
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: 3,
        data,
    })
}

/// Writes PNG, or binary PGM/PPM when the extension asks for it.
pub fn write_raster(img: &Raster, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::file(path, e);
    match ext.as_str() {
        "pgm" | "ppm" => {
            let rgb = if ext == "ppm" { to_rgb(img) } else { to_gray(img) };
            let magic = if ext == "ppm" { "P6" } else { "P5" };
            write!(out, "{magic}\n{} {}\n255\n", img.width, img.height).map_err(io)?;
            out.write_all(&rgb).map_err(io)?;
        }
        "png" | "" => {
            let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
            enc.set_color(if img.channels == 3 {
                png::ColorType::Rgb
            } else {
                png::ColorType::Grayscale
            });
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
            w.write_image_data(&img.data)
                .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        }
        other => return Err(Error::config(format!("out: unsupported image extension '{other}'"))),
    }
    out.flush().map_err(io)
}

fn to_rgb(img: &Raster) -> Vec<u8> {
    if img.channels == 3 {
        img.data.clone()
    } else {
        img.data.iter().flat_map(|&g| [g; 3]).collect()
    }
}

fn to_gray(img: &Raster) -> Vec<u8> {
    if img.channels == 1 {
        img.data.clone()
    } else {
        img.data
            .chunks(3)
            .map(|p| ((p[0] as u32 + p[1] as u32 + p[2] as u32) / 3) as u8)
            .collect()
    }
}
