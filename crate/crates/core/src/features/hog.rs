use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Tensor3;

/// 18 contrast-sensitive + 9 contrast-insensitive orientations + 4 texture energies.
pub const FHOG_CHANNELS: usize = 31;

const SIGNED_BINS: usize = 18;
const UNSIGNED_BINS: usize = 9;
const NORM_EPS: f64 = 1e-4;
const TEXTURE_SCALE: f64 = 0.2357;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HogConfig {
    pub cell_size: usize,
    /// Clip applied to each block-normalized histogram entry.
    pub truncation: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            cell_size: 4,
            truncation: 0.2,
        }
    }
}

impl HogConfig {
    /// Output cells along an axis of `side` pixels.
    pub fn output_cells(&self, side: usize) -> usize {
        (side / self.cell_size).saturating_sub(1)
    }
}

/// Felzenszwalb 31-channel HOG.
///
/// Histograms are accumulated over `floor(side/cell) + 1` cells per axis with
/// bilinear spatial voting, each cell is normalized by the four 2×2 blocks
/// around it, and the outer ring of cells (which lacks a full neighborhood) is
/// dropped, leaving `floor(side/cell) - 1` cells per axis (62 for 255 px at
/// cell 4). Color images vote with the channel of largest gradient magnitude.
///
/// Channel layout: `0..18` signed orientations, `18..27` unsigned
/// orientations, `27..31` texture (summed truncated energy per normalizer).
pub fn fhog_extract(img: &Tensor3, cfg: &HogConfig) -> Result<Tensor3> {
    if cfg.cell_size == 0 {
        return Err(Error::Config("HOG cell size must be at least 1".into()));
    }
    let (h, w, ch) = img.shape();
    let sbin = cfg.cell_size;
    if h < 2 * sbin || w < 2 * sbin || h < 3 || w < 3 {
        return Err(Error::Size(format!(
            "{h}x{w} image is smaller than two {sbin}-pixel cells"
        )));
    }

    let blocks_r = h / sbin + 1;
    let blocks_c = w / sbin + 1;
    let out_r = blocks_r - 2;
    let out_c = blocks_c - 2;
    let cells = blocks_r * blocks_c;

    let (uu, vv): (Vec<f64>, Vec<f64>) = (0..UNSIGNED_BINS)
        .map(|o| {
            let a = o as f64 * std::f64::consts::PI / UNSIGNED_BINS as f64;
            (a.cos(), a.sin())
        })
        .unzip();

    let mut hist = vec![0.0f64; SIGNED_BINS * cells];
    let visible_r = blocks_r * sbin;
    let visible_c = blocks_c * sbin;
    for x in 1..visible_c - 1 {
        let px = x.min(w - 2);
        for y in 1..visible_r - 1 {
            let py = y.min(h - 2);
            let (mut best_v, mut dx, mut dy) = (-1.0f64, 0.0, 0.0);
            for k in 0..ch {
                let gx = img.get(py, px + 1, k) - img.get(py, px - 1, k);
                let gy = img.get(py + 1, px, k) - img.get(py - 1, px, k);
                let v = gx * gx + gy * gy;
                if v > best_v {
                    best_v = v;
                    dx = gx;
                    dy = gy;
                }
            }
            let mag = best_v.sqrt();

            let (mut best_dot, mut best_o) = (0.0f64, 0usize);
            for o in 0..UNSIGNED_BINS {
                let dot = uu[o] * dx + vv[o] * dy;
                if dot > best_dot {
                    best_dot = dot;
                    best_o = o;
                } else if -dot > best_dot {
                    best_dot = -dot;
                    best_o = o + UNSIGNED_BINS;
                }
            }

            let xp = (x as f64 + 0.5) / sbin as f64 - 0.5;
            let yp = (y as f64 + 0.5) / sbin as f64 - 0.5;
            let ixp = xp.floor() as isize;
            let iyp = yp.floor() as isize;
            let vx0 = xp - ixp as f64;
            let vy0 = yp - iyp as f64;
            let vx1 = 1.0 - vx0;
            let vy1 = 1.0 - vy0;
            let base = best_o * cells;
            let mut vote = |r: isize, c: isize, wgt: f64| {
                if r >= 0 && c >= 0 && (r as usize) < blocks_r && (c as usize) < blocks_c {
                    hist[base + r as usize * blocks_c + c as usize] += wgt * mag;
                }
            };
            vote(iyp, ixp, vx1 * vy1);
            vote(iyp, ixp + 1, vx0 * vy1);
            vote(iyp + 1, ixp, vx1 * vy0);
            vote(iyp + 1, ixp + 1, vx0 * vy0);
        }
    }

    let mut energy = vec![0.0f64; cells];
    for o in 0..UNSIGNED_BINS {
        let a = &hist[o * cells..(o + 1) * cells];
        let b = &hist[(o + UNSIGNED_BINS) * cells..(o + UNSIGNED_BINS + 1) * cells];
        for ((e, a), b) in energy.iter_mut().zip(a).zip(b) {
            *e += (a + b) * (a + b);
        }
    }
    let block_norm = |r: usize, c: usize| -> f64 {
        let s = energy[r * blocks_c + c]
            + energy[(r + 1) * blocks_c + c]
            + energy[r * blocks_c + c + 1]
            + energy[(r + 1) * blocks_c + c + 1];
        1.0 / (s + NORM_EPS).sqrt()
    };

    let clip = cfg.truncation;
    let mut out = Tensor3::zeros(out_r, out_c, FHOG_CHANNELS);
    for r in 0..out_r {
        for c in 0..out_c {
            let norms = [
                block_norm(r + 1, c + 1),
                block_norm(r, c + 1),
                block_norm(r + 1, c),
                block_norm(r, c),
            ];
            let cell = (r + 1) * blocks_c + (c + 1);
            let mut texture = [0.0f64; 4];
            for o in 0..SIGNED_BINS {
                let v = hist[o * cells + cell];
                let mut acc = 0.0;
                for (t, n) in texture.iter_mut().zip(&norms) {
                    let clipped = (v * n).min(clip);
                    acc += clipped;
                    *t += clipped;
                }
                out.set(r, c, o, 0.5 * acc);
            }
            for o in 0..UNSIGNED_BINS {
                let v = hist[o * cells + cell] + hist[(o + UNSIGNED_BINS) * cells + cell];
                let acc: f64 = norms.iter().map(|n| (v * n).min(clip)).sum();
                out.set(r, c, SIGNED_BINS + o, 0.5 * acc);
            }
            for (i, t) in texture.iter().enumerate() {
                out.set(r, c, SIGNED_BINS + UNSIGNED_BINS + i, TEXTURE_SCALE * t);
            }
        }
    }
    Ok(out)
}
