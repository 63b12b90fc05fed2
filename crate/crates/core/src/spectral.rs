//! Fourier-domain kernels: cross-correlation, the closed-form correlation
//! filter, its adjoint, and desired-response construction.
//!
//! Correlation convention: `(t ★ s)[u] = Σ_i t[i] · s[i + u]`, indices taken
//! modulo the plane size in the circular case. Under the unnormalized DFT this
//! reads `F(t ★ s) = conj(T) · S`.

use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Tensor3;

/// Single real plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} plane cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite plane value".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty plane");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.width + c] = v;
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

    /// Row, column and value of the first maximum in row-major order.
    pub fn argmax(&self) -> (usize, usize, f64) {
        let (mut best, mut at) = (f64::NEG_INFINITY, 0);
        for (i, v) in self.data.iter().enumerate() {
            if *v > best {
                best = *v;
                at = i;
            }
        }
        (at / self.width, at % self.width, best)
    }

    /// Output `(r, c)` takes input `(r - dr, c - dc)` modulo the size.
    pub fn circshift(&self, dr: isize, dc: isize) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        Self::from_fn(self.height, self.width, |r, c| {
            let sr = (r as isize - dr).rem_euclid(h) as usize;
            let sc = (c as isize - dc).rem_euclid(w) as usize;
            self.get(sr, sc)
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..*self
        }
    }

    pub fn max_abs_diff(&self, other: &Plane) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Correlation-filter hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfConfig {
    /// Ridge weight added to the spectral energy.
    pub lambda: f64,
    /// Desired-response sigma as a fraction of `sqrt(h·w)`.
    pub label_sigma_ratio: f64,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            label_sigma_ratio: 1.0 / 16.0,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.label_sigma_ratio > 0.0 && self.label_sigma_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "label sigma ratio must be positive, got {}",
                self.label_sigma_ratio
            )));
        }
        Ok(())
    }
}

/// Row/column FFT plans for one plane size.
pub(crate) struct Fft2 {
    height: usize,
    width: usize,
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
    rows_inv: Arc<dyn Fft<f64>>,
    cols_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub(crate) fn new(height: usize, width: usize) -> Self {
        static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
        let mut planner = PLANNER
            .get_or_init(|| Mutex::new(FftPlanner::new()))
            .lock()
            .unwrap_or_else(|e| e.into_inner());
        Self {
            height,
            width,
            rows: planner.plan_fft_forward(width),
            cols: planner.plan_fft_forward(height),
            rows_inv: planner.plan_fft_inverse(width),
            cols_inv: planner.plan_fft_inverse(height),
        }
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(buf.len(), h * w);
        let (rows, cols) = if inverse {
            (&self.rows_inv, &self.cols_inv)
        } else {
            (&self.rows, &self.cols)
        };
        rows.process(buf);
        let mut t = transpose(buf, h, w);
        cols.process(&mut t);
        let back = transpose(&t, w, h);
        buf.copy_from_slice(&back);
        if inverse {
            let n = (h * w) as f64;
            buf.iter_mut().for_each(|v| *v /= n);
        }
    }

    pub(crate) fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, false);
    }

    pub(crate) fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, true);
    }

    /// Forward transform of a real plane, zero-padded (top-left aligned) when smaller.
    pub(crate) fn forward_real(&self, plane: &[f64], ph: usize, pw: usize) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.height * self.width];
        for r in 0..ph {
            for c in 0..pw {
                buf[r * self.width + c] = Complex64::new(plane[r * pw + c], 0.0);
            }
        }
        self.forward(&mut buf);
        buf
    }
}

fn transpose(buf: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        for c in 0..w {
            out[c * h + r] = buf[r * w + c];
        }
    }
    out
}

fn check_correlation_shapes(template: &Tensor3, search: &Tensor3) -> Result<()> {
    if template.channels() != search.channels() {
        return Err(Error::Shape(format!(
            "template has {} channels, search has {}",
            template.channels(),
            search.channels()
        )));
    }
    if template.height() > search.height() || template.width() > search.width() {
        return Err(Error::Shape(format!(
            "template {}x{} larger than search {}x{}",
            template.height(),
            template.width(),
            search.height(),
            search.width()
        )));
    }
    Ok(())
}

/// Cross-correlation summed over channels.
///
/// Equal spatial sizes give the size-preserving circular correlation. A smaller
/// template gives valid-mode linear correlation of size `(H-h+1) × (W-w+1)`:
/// zero-padding the template to the search size makes every offset in that
/// range wrap-free, so both cases share the FFT path.
pub fn circular_cross_correlate(template: &Tensor3, search: &Tensor3) -> Result<Plane> {
    check_correlation_shapes(template, search)?;
    let (sh, sw) = (search.height(), search.width());
    let (h, w) = transform_size(template, search);
    let fft = Fft2::new(h, w);
    let mut acc = vec![Complex64::new(0.0, 0.0); h * w];
    for k in 0..search.channels() {
        let t = fft.forward_real(&template.channel_plane(k), template.height(), template.width());
        let s = fft.forward_real(&search.channel_plane(k), sh, sw);
        for ((a, t), s) in acc.iter_mut().zip(&t).zip(&s) {
            *a += t.conj() * s;
        }
    }
    fft.inverse(&mut acc);
    Ok(valid_window(&acc, w, (sh, sw), template))
}

/// Per-channel correlation planes; their sum is [`circular_cross_correlate`].
pub fn channel_correlations(template: &Tensor3, search: &Tensor3) -> Result<Vec<Plane>> {
    check_correlation_shapes(template, search)?;
    let (sh, sw) = (search.height(), search.width());
    let (h, w) = transform_size(template, search);
    let fft = Fft2::new(h, w);
    (0..search.channels())
        .map(|k| {
            let t = fft.forward_real(&template.channel_plane(k), template.height(), template.width());
            let mut prod = fft.forward_real(&search.channel_plane(k), sh, sw);
            for (p, t) in prod.iter_mut().zip(&t) {
                *p *= t.conj();
            }
            fft.inverse(&mut prod);
            Ok(valid_window(&prod, w, (sh, sw), template))
        })
        .collect()
}

/// FFT size for correlating `template` over `search`: the search size when
/// they match (circular mode), otherwise the next power of two per axis.
/// Zero padding beyond the search keeps valid offsets wrap-free.
fn transform_size(template: &Tensor3, search: &Tensor3) -> (usize, usize) {
    let (sh, sw) = (search.height(), search.width());
    if (template.height(), template.width()) == (sh, sw) {
        (sh, sw)
    } else {
        (sh.next_power_of_two(), sw.next_power_of_two())
    }
}

fn valid_window(full: &[Complex64], fft_w: usize, search: (usize, usize), template: &Tensor3) -> Plane {
    let (th, tw) = (template.height(), template.width());
    let (oh, ow) = if (th, tw) == search {
        search
    } else {
        (search.0 - th + 1, search.1 - tw + 1)
    };
    Plane::from_fn(oh, ow, |r, c| full[r * fft_w + c].re)
}

/// Closed-form multi-channel correlation filter.
///
/// Per frequency `W_k = conj(Y) · Z_k / (Σ_j |Z_j|² + λ)`, the exact ridge
/// solution for `Σ_k w_k ★ z_k ≈ y` over all circular shifts.
pub fn cf_solve(z: &Tensor3, y: &Plane, cfg: &CfConfig) -> Result<Tensor3> {
    cf_solve_with_residue(z, y, cfg).map(|(w, _)| w)
}

/// [`cf_solve`] also returning the largest imaginary magnitude discarded after
/// the inverse transform.
pub fn cf_solve_with_residue(z: &Tensor3, y: &Plane, cfg: &CfConfig) -> Result<(Tensor3, f64)> {
    cfg.validate()?;
    check_plane_matches(z, y)?;
    let (h, w, k) = z.shape();
    let fft = Fft2::new(h, w);
    let zf: Vec<Vec<Complex64>> = z
        .planes()
        .iter()
        .map(|p| fft.forward_real(p, h, w))
        .collect();
    let yf = fft.forward_real(y.data(), h, w);
    let denom = spectral_energy(&zf, cfg.lambda);

    let mut planes = Vec::with_capacity(k);
    let mut residue = 0.0f64;
    for zk in &zf {
        let mut buf: Vec<Complex64> = zk
            .iter()
            .zip(&yf)
            .zip(&denom)
            .map(|((z, y), d)| y.conj() * z / d)
            .collect();
        fft.inverse(&mut buf);
        residue = buf.iter().fold(residue, |m, v| m.max(v.im.abs()));
        planes.push(buf.iter().map(|v| v.re).collect());
    }
    Ok((Tensor3::from_planes(h, w, &planes)?, residue))
}

/// Gradient of a scalar loss with respect to the filter input `z`, given the
/// gradient with respect to the solved filter.
///
/// Differentiating `W_k = conj(Y) Z_k / D` with `D = Σ_j |Z_j|² + λ` yields, in
/// the Fourier domain,
/// `dZ_k = Y · G_k / D − 2 Z_k · Re(Σ_m conj(G_m) conj(Y) Z_m) / D²`.
pub fn cf_backward(grad_w: &Tensor3, z: &Tensor3, y: &Plane, cfg: &CfConfig) -> Result<Tensor3> {
    cfg.validate()?;
    if !grad_w.same_shape(z) {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match input {:?}",
            grad_w.shape(),
            z.shape()
        )));
    }
    check_plane_matches(z, y)?;
    let (h, w, _) = z.shape();
    let fft = Fft2::new(h, w);
    let zf: Vec<Vec<Complex64>> = z
        .planes()
        .iter()
        .map(|p| fft.forward_real(p, h, w))
        .collect();
    let gf: Vec<Vec<Complex64>> = grad_w
        .planes()
        .iter()
        .map(|p| fft.forward_real(p, h, w))
        .collect();
    let yf = fft.forward_real(y.data(), h, w);
    let denom = spectral_energy(&zf, cfg.lambda);

    let n = h * w;
    let mut cross = vec![0.0; n];
    for (g, zk) in gf.iter().zip(&zf) {
        for f in 0..n {
            cross[f] += (g[f].conj() * yf[f].conj() * zk[f]).re;
        }
    }

    let planes: Vec<Vec<f64>> = gf
        .iter()
        .zip(&zf)
        .map(|(g, zk)| {
            let mut buf: Vec<Complex64> = (0..n)
                .map(|f| {
                    let d = denom[f];
                    yf[f] * g[f] / d - zk[f] * (2.0 * cross[f] / (d * d))
                })
                .collect();
            fft.inverse(&mut buf);
            buf.iter().map(|v| v.re).collect()
        })
        .collect();
    Tensor3::from_planes(h, w, &planes)
}

fn spectral_energy(zf: &[Vec<Complex64>], lambda: f64) -> Vec<f64> {
    let n = zf[0].len();
    let mut d = vec![lambda; n];
    for zk in zf {
        for (d, z) in d.iter_mut().zip(zk) {
            *d += z.norm_sqr();
        }
    }
    d
}

fn check_plane_matches(z: &Tensor3, y: &Plane) -> Result<()> {
    if (z.height(), z.width()) != y.dims() {
        return Err(Error::Shape(format!(
            "input is {}x{} but desired response is {}x{}",
            z.height(),
            z.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

/// Index of the center cell along an axis of length `n`.
#[inline]
pub fn center_index(n: usize) -> usize {
    n / 2
}

/// Gaussian with unit peak at the center cell, plain Euclidean distance.
pub fn gaussian_target(h: usize, w: usize, sigma: f64) -> Plane {
    let (cr, cc) = (center_index(h) as f64, center_index(w) as f64);
    let denom = 2.0 * sigma * sigma;
    Plane::from_fn(h, w, |r, c| {
        let dr = r as f64 - cr;
        let dc = c as f64 - cc;
        (-(dr * dr + dc * dc) / denom).exp()
    })
}

/// Desired response for a filter whose cropped center must hold the target:
/// the centered Gaussian rolled so its peak sits at the origin.
pub fn origin_peaked_label(h: usize, w: usize, cfg: &CfConfig) -> Plane {
    let sigma = cfg.label_sigma_ratio * ((h * w) as f64).sqrt();
    gaussian_target(h, w, sigma).circshift(-(center_index(h) as isize), -(center_index(w) as isize))
}
