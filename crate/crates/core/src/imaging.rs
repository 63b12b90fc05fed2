//! Dense feature volumes, target boxes and patch resampling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IngestError, Result};

/// Dense `height × width × channels` volume stored row-major in `(h, w, c)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} tensor needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite tensor value {bad}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty tensor");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a tensor from `f(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(height, width, channels);
        for r in 0..height {
            for c in 0..width {
                for k in 0..channels {
                    let i = t.index(r, c, k);
                    t.data[i] = f(r, c, k);
                }
            }
        }
        t
    }

    /// Interleaves single-channel planes (each `height * width`, row-major).
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        let channels = planes.len();
        if channels == 0 {
            return Err(Error::Shape("no planes".into()));
        }
        if let Some(p) = planes.iter().find(|p| p.len() != height * width) {
            return Err(Error::Shape(format!(
                "plane of {} values does not match {height}x{width}",
                p.len()
            )));
        }
        let mut data = vec![0.0; height * width * channels];
        for (k, plane) in planes.iter().enumerate() {
            for (i, v) in plane.iter().enumerate() {
                data[i * channels + k] = *v;
            }
        }
        Self::new(height, width, channels, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.data[i] = value;
    }

    /// Copies channel `k` out as a row-major plane.
    pub fn channel_plane(&self, k: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(k)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn planes(&self) -> Vec<Vec<f64>> {
        (0..self.channels).map(|k| self.channel_plane(k)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..*self
        }
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        self.map(|v| v + c)
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = (self.height * self.width) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    /// Circular shift: output `(r, c)` takes input `(r - dr, c - dc)` modulo the size.
    pub fn circshift(&self, dr: isize, dc: isize) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = Self::zeros(self.height, self.width, self.channels);
        for r in 0..self.height {
            let sr = (r as isize - dr).rem_euclid(h) as usize;
            for c in 0..self.width {
                let sc = (c as isize - dc).rem_euclid(w) as usize;
                let src = self.index(sr, sc, 0);
                let dst = out.index(r, c, 0);
                out.data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Target state in image pixels, center/size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// From OTB top-left form.
    pub fn from_top_left(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite center ({}, {})",
                self.cx, self.cy
            )));
        }
        if !(self.w.is_finite() && self.h.is_finite() && self.w > 0.0 && self.h > 0.0) {
            return Err(Error::InvalidBox(format!(
                "non-positive size {}x{}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn scaled_size(&self, factor: f64) -> Self {
        Self {
            w: self.w * factor,
            h: self.h * factor,
            ..*self
        }
    }
}

/// Geometry of a square crop that was resampled to `output_side` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMapping {
    pub source_center: (f64, f64),
    pub source_side: f64,
    pub output_side: usize,
}

impl PatchMapping {
    /// Image pixels per patch pixel.
    pub fn pixel_scale(&self) -> f64 {
        self.source_side / self.output_side as f64
    }

    /// Maps a displacement in patch pixels to image pixels.
    pub fn displacement_to_image(&self, dx: f64, dy: f64) -> (f64, f64) {
        let s = self.pixel_scale();
        (dx * s, dy * s)
    }

    /// Maps a continuous patch coordinate (origin at the patch's top-left corner)
    /// to image coordinates.
    pub fn patch_to_image(&self, px: f64, py: f64) -> (f64, f64) {
        let s = self.pixel_scale();
        let half = self.source_side / 2.0;
        (
            self.source_center.0 - half + px * s,
            self.source_center.1 - half + py * s,
        )
    }
}

/// Context multiplier applied to the target's geometric-mean side.
pub const CONTEXT_FACTOR: f64 = 4.0;

/// Side in image pixels of the search region for `b` at `scale_factor`.
pub fn search_side(b: &BoundingBox, scale_factor: f64) -> f64 {
    CONTEXT_FACTOR * (b.w * b.h).sqrt() * scale_factor
}

/// Square region of side `4·sqrt(w·h)·scale_factor` around the box center,
/// bilinearly resampled to `out_side × out_side`. Pixels outside the image read
/// as the per-channel image mean.
pub fn extract_search_region(
    image: &Tensor3,
    b: &BoundingBox,
    scale_factor: f64,
    out_side: usize,
) -> Result<(Tensor3, PatchMapping)> {
    b.validate()?;
    if !(scale_factor > 0.0 && scale_factor.is_finite()) {
        return Err(Error::Argument(format!(
            "scale factor must be positive, got {scale_factor}"
        )));
    }
    let side = search_side(b, scale_factor);
    let mapping = PatchMapping {
        source_center: (b.cx, b.cy),
        source_side: side,
        output_side: out_side,
    };
    Ok((extract_patch(image, &mapping)?, mapping))
}

/// Resamples the square described by `mapping` out of `image`.
pub fn extract_patch(image: &Tensor3, mapping: &PatchMapping) -> Result<Tensor3> {
    let ch = image.channels();
    if ch != 1 && ch != 3 {
        return Err(Error::Shape(format!(
            "image must have 1 or 3 channels, got {ch}"
        )));
    }
    let out = mapping.output_side;
    if out == 0 {
        return Err(Error::Argument("output side must be at least 1".into()));
    }
    if !(mapping.source_side > 0.0 && mapping.source_side.is_finite()) {
        return Err(Error::InvalidBox(format!(
            "source side must be positive, got {}",
            mapping.source_side
        )));
    }
    let means = image.channel_means();
    let (h, w) = (image.height() as isize, image.width() as isize);
    let step = mapping.pixel_scale();
    let x0 = mapping.source_center.0 - mapping.source_side / 2.0;
    let y0 = mapping.source_center.1 - mapping.source_side / 2.0;

    let fetch = |r: isize, c: isize, k: usize| -> f64 {
        if r < 0 || c < 0 || r >= h || c >= w {
            means[k]
        } else {
            image.get(r as usize, c as usize, k)
        }
    };

    let mut patch = Tensor3::zeros(out, out, ch);
    for i in 0..out {
        // Pixel centers sit at half-integers in continuous coordinates.
        let sy = y0 + (i as f64 + 0.5) * step - 0.5;
        let ry = sy.floor();
        let fy = sy - ry;
        let ry = ry as isize;
        for j in 0..out {
            let sx = x0 + (j as f64 + 0.5) * step - 0.5;
            let rx = sx.floor();
            let fx = sx - rx;
            let rx = rx as isize;
            for k in 0..ch {
                let v = if fx == 0.0 && fy == 0.0 {
                    fetch(ry, rx, k)
                } else {
                    (1.0 - fy) * ((1.0 - fx) * fetch(ry, rx, k) + fx * fetch(ry, rx + 1, k))
                        + fy * ((1.0 - fx) * fetch(ry + 1, rx, k) + fx * fetch(ry + 1, rx + 1, k))
                };
                patch.set(i, j, k, v);
            }
        }
    }
    Ok(patch)
}

/// Centered window of `out_h × out_w`; the offset is `floor((dim - out) / 2)`.
pub fn crop_center(t: &Tensor3, out_h: usize, out_w: usize) -> Result<Tensor3> {
    if out_h == 0 || out_w == 0 || out_h > t.height() || out_w > t.width() {
        return Err(Error::Dimension(format!(
            "cannot crop {}x{} out of {}x{}",
            out_h,
            out_w,
            t.height(),
            t.width()
        )));
    }
    let r0 = (t.height() - out_h) / 2;
    let c0 = (t.width() - out_w) / 2;
    crop_window(t, r0, c0, out_h, out_w)
}

pub(crate) fn crop_window(
    t: &Tensor3,
    r0: usize,
    c0: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor3> {
    let ch = t.channels();
    let mut data = Vec::with_capacity(out_h * out_w * ch);
    for r in r0..r0 + out_h {
        let start = t.index(r, c0, 0);
        data.extend_from_slice(&t.data()[start..start + out_w * ch]);
    }
    Tensor3::new(out_h, out_w, ch, data)
}

/// Per-channel bilinear resize with half-pixel-centered sampling.
pub fn resize_bilinear(t: &Tensor3, out_h: usize, out_w: usize) -> Result<Tensor3> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let rows = axis(out_h, t.height());
    let cols = axis(out_w, t.width());
    let ch = t.channels();
    let mut out = Tensor3::zeros(out_h, out_w, ch);
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            for k in 0..ch {
                let top = if fc == 0.0 {
                    t.get(r0, c0, k)
                } else {
                    (1.0 - fc) * t.get(r0, c0, k) + fc * t.get(r0, c1, k)
                };
                let v = if fr == 0.0 {
                    top
                } else {
                    let bottom = if fc == 0.0 {
                        t.get(r1, c0, k)
                    } else {
                        (1.0 - fc) * t.get(r1, c0, k) + fc * t.get(r1, c1, k)
                    };
                    (1.0 - fr) * top + fr * bottom
                };
                out.set(i, j, k, v);
            }
        }
    }
    Ok(out)
}

/// Decodes an 8-bit grayscale or RGB raster into a tensor with values in `[0, 255]`.
pub fn load_image(path: &Path) -> Result<Tensor3, IngestError> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => IngestError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => IngestError::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::La8 | image::ColorType::L16 | image::ColorType::La16
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    let tensor = if gray {
        let buf = img.to_luma8();
        Tensor3::new(h, w, 1, buf.into_raw().into_iter().map(f64::from).collect())
    } else {
        let buf = img.to_rgb8();
        Tensor3::new(h, w, 3, buf.into_raw().into_iter().map(f64::from).collect())
    };
    tensor.map_err(|e| IngestError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes a 1- or 3-channel tensor as an 8-bit PNG, clamping to `[0, 255]`.
pub fn save_image(t: &Tensor3, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let (w, h) = (t.width() as u32, t.height() as u32);
    let res = match t.channels() {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        c => {
            return Err(Error::Shape(format!(
                "can only save 1 or 3 channels, got {c}"
            )))
        }
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(image::ImageError::IoError(e))) => Err(Error::io(path, e)),
        Some(Err(e)) => Err(Error::Config(format!("encoding {}: {e}", path.display()))),
        None => Err(Error::Shape("buffer size mismatch".into())),
    }
}
