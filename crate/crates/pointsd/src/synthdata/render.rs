//! Orthographic point-splat renderer with depth shading, image stitching,
//! and binary PGM round-tripping.
//!
//! Pixels live in [-1, 1] with empty background exactly -1, and are always
//! quantized to the 8-bit grid `k / 127.5 - 1` so that a PGM write/read
//! round-trip is bit-exact.

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use ndarray::Array2;
use std::io::Read;
use std::path::Path;

/// Minimum shade of the farthest point; nearer points ramp to 1.
const SHADE_FLOOR: f32 = 0.25;

/// One grayscale rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub pixels: Array2<f32>,
    pub view_index: usize,
}

impl RenderedImage {
    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// `[1, H, W]` tensor view for the diffusion model.
    pub fn to_chw(&self) -> crate::tensor::Arr {
        let (h, w) = (self.height(), self.width());
        self.pixels
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(ndarray::IxDyn(&[1, h, w]))
            .unwrap()
    }
}

#[inline]
fn quantize(shade: f32) -> f32 {
    let k = (shade.clamp(0.0, 1.0) * 255.0).round();
    k / 127.5 - 1.0
}

/// Render evenly spaced azimuth views of a normalized cloud.
///
/// View `v` rotates the cloud by `360 * v / num_views` degrees about the
/// z axis and projects orthographically along +y; nearer points shade
/// brighter and win pixel conflicts.
pub fn render_views(pc: &PointCloud, num_views: usize, height: usize, width: usize) -> Vec<RenderedImage> {
    (0..num_views)
        .map(|v| {
            let theta = 2.0 * std::f32::consts::PI * v as f32 / num_views as f32;
            render_single(pc, theta, height, width, v)
        })
        .collect()
}

fn render_single(pc: &PointCloud, theta: f32, height: usize, width: usize, view_index: usize) -> RenderedImage {
    let (c, s) = (theta.cos(), theta.sin());
    let rotated: Vec<[f32; 3]> = pc
        .points
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
        .collect();
    let (dmin, dmax) = rotated
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
    let span = dmax - dmin;
    let mut shade = Array2::<f32>::zeros((height, width));
    for p in &rotated {
        let col = ((p[0] + 1.0) / 2.0 * (width - 1) as f32).round();
        let row = ((1.0 - p[2]) / 2.0 * (height - 1) as f32).round();
        if col < 0.0 || row < 0.0 || col >= width as f32 || row >= height as f32 {
            continue;
        }
        let s = if span > 0.0 {
            SHADE_FLOOR + (1.0 - SHADE_FLOOR) * (dmax - p[1]) / span
        } else {
            1.0
        };
        let (r, cl) = (row as usize, col as usize);
        if s > shade[[r, cl]] {
            shade[[r, cl]] = s;
        }
    }
    let pixels = shade.mapv(|s| if s > 0.0 { quantize(s) } else { -1.0 });
    RenderedImage { pixels, view_index }
}

/// Stitch two equal-height images along the width (left block first).
pub fn stitch_images(x: &RenderedImage, x2: &RenderedImage) -> Result<RenderedImage> {
    if x.height() != x2.height() {
        return Err(Error::SynthData(format!(
            "stitch_images: height mismatch ({} vs {})",
            x.height(),
            x2.height()
        )));
    }
    let pixels = ndarray::concatenate(ndarray::Axis(1), &[x.pixels.view(), x2.pixels.view()])
        .expect("stitch: concat failed")
        .as_standard_layout()
        .into_owned();
    Ok(RenderedImage { pixels, view_index: x.view_index })
}

/// De-normalize to 8-bit and write binary PGM (P5).
pub fn write_pgm(path: &Path, img: &RenderedImage) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = Vec::with_capacity(h * w + 32);
    buf.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for v in img.pixels.iter() {
        buf.push(((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a binary PGM written by [`write_pgm`] back to [-1, 1].
pub fn read_pgm(path: &Path, view_index: usize) -> Result<RenderedImage> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let err = |msg: &str| Error::SynthData(format!("{}: {msg}", path.display()));
    // header: magic, width, height, maxval as whitespace-separated tokens
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        tokens.push(std::str::from_utf8(&data[start..pos]).map_err(|_| err("bad header"))?.to_string());
    }
    if tokens[0] != "P5" || tokens[3] != "255" {
        return Err(err("expected binary PGM with maxval 255"));
    }
    let w: usize = tokens[1].parse().map_err(|_| err("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| err("bad height"))?;
    pos += 1; // single whitespace after maxval
    if data.len() - pos < w * h {
        return Err(err("truncated pixel data"));
    }
    let pixels = Array2::from_shape_vec((h, w), data[pos..pos + w * h].iter().map(|&b| b as f32 / 127.5 - 1.0).collect())
        .map_err(|_| err("bad pixel count"))?;
    Ok(RenderedImage { pixels, view_index })
}
