//! Per-branch responses and their learned fusion
//! `M = s · Σ_d (g_d * k_d) + b`.

use crate::error::{Error, Result, WeightStoreError};
use crate::features::WeightStore;
use crate::imaging::Tensor3;
use crate::spectral::{circular_cross_correlate, Plane};
use crate::RESPONSE_SIDE;

/// Response plane: 33×33 for branch outputs, arbitrary size in other contexts.
pub type ResponseMap = Plane;

/// Square, odd-sided fusion kernel applied by same-size convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionKernel {
    side: usize,
    data: Vec<f64>,
}

impl FusionKernel {
    pub fn scalar(v: f64) -> Self {
        Self {
            side: 1,
            data: vec![v],
        }
    }

    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if side % 2 == 0 || data.len() != side * side {
            return Err(Error::Shape(format!(
                "fusion kernel must be odd-sided and square, got side {side} with {} taps",
                data.len()
            )));
        }
        Ok(Self { side, data })
    }

    /// Kernel with `v` in the center tap and zeros elsewhere.
    pub fn centered(side: usize, v: f64) -> Result<Self> {
        let mut data = vec![0.0; side * side];
        if let Some(c) = data.get_mut(side * side / 2) {
            *c = v;
        }
        Self::new(side, data)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Sum of taps; the effective branch weight for slowly varying maps.
    pub fn mass(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub kernels: Vec<FusionKernel>,
    pub scale: f64,
    pub bias: f64,
}

impl FusionParams {
    /// `branches` scalar kernels of `1/D`, unit scale, zero bias.
    pub fn uniform(branches: usize) -> Self {
        Self::uniform_spatial(branches, 1).expect("1 is odd")
    }

    /// Spatial kernels of the given odd side holding `1/D` in the center tap.
    pub fn uniform_spatial(branches: usize, side: usize) -> Result<Self> {
        let w = 1.0 / branches as f64;
        Ok(Self {
            kernels: (0..branches)
                .map(|_| FusionKernel::centered(side, w))
                .collect::<Result<_>>()?,
            scale: 1.0,
            bias: 0.0,
        })
    }

    /// Scalar selector kernels, e.g. `[1, 0]` keeps only the first branch.
    pub fn selector(weights: &[f64]) -> Self {
        Self {
            kernels: weights.iter().map(|w| FusionKernel::scalar(*w)).collect(),
            scale: 1.0,
            bias: 0.0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.kernels.iter().map(|k| k.data.len()).sum::<usize>() + 2
    }

    /// Kernel taps in branch order, then scale, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.kernels.iter().flat_map(|k| k.data.iter().copied()).collect();
        v.push(self.scale);
        v.push(self.bias);
        v
    }

    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "fusion parameter count");
        let mut rest = flat;
        for k in &mut self.kernels {
            let (head, tail) = rest.split_at(k.data.len());
            k.data.copy_from_slice(head);
            rest = tail;
        }
        self.scale = rest[0];
        self.bias = rest[1];
    }

    /// Zeroed copy with the same layout, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.assign(&vec![0.0; self.num_params()]);
        z
    }

    pub fn to_store(&self, store: &mut WeightStore) -> Result<()> {
        for (d, k) in self.kernels.iter().enumerate() {
            store.insert_f64(format!("fusion.kernel{d}"), vec![k.side, k.side], &k.data)?;
        }
        store.insert_f64("fusion.scale", vec![1], &[self.scale])?;
        store.insert_f64("fusion.bias", vec![1], &[self.bias])?;
        Ok(())
    }

    pub fn from_store(store: &WeightStore, branches: usize) -> Result<Self, WeightStoreError> {
        let mut kernels = Vec::with_capacity(branches);
        for d in 0..branches {
            let name = format!("fusion.kernel{d}");
            let t = store
                .get(&name)
                .ok_or_else(|| WeightStoreError::MissingTensor(name.clone()))?;
            let side = t.shape.first().copied().unwrap_or(0);
            if t.shape.len() != 2 || t.shape[1] != side || side % 2 == 0 {
                return Err(WeightStoreError::ShapeMismatch {
                    name,
                    expected: vec![side | 1, side | 1],
                    found: t.shape.clone(),
                });
            }
            kernels.push(FusionKernel {
                side,
                data: t.data.iter().map(|v| f64::from(*v)).collect(),
            });
        }
        Ok(Self {
            kernels,
            scale: store.get_f64("fusion.scale", &[1])?[0],
            bias: store.get_f64("fusion.bias", &[1])?[0],
        })
    }
}

/// Valid-mode multi-channel correlation of a channel-weighted template with
/// search features; the geometry must yield a 33×33 map.
pub fn branch_response(weighted_template: &Tensor3, search_feat: &Tensor3) -> Result<ResponseMap> {
    let fits = |s: usize, t: usize| s >= t && s - t + 1 == RESPONSE_SIDE;
    if !fits(search_feat.height(), weighted_template.height())
        || !fits(search_feat.width(), weighted_template.width())
    {
        return Err(Error::Config(format!(
            "{}x{} template over {}x{} search does not give a {RESPONSE_SIDE}x{RESPONSE_SIDE} response",
            weighted_template.height(),
            weighted_template.width(),
            search_feat.height(),
            search_feat.width()
        )));
    }
    circular_cross_correlate(weighted_template, search_feat)
}

/// Same-size convolution with zero padding.
pub fn convolve_same(map: &Plane, kernel: &FusionKernel) -> Plane {
    if kernel.side == 1 {
        let k = kernel.data[0];
        return map.map(|v| v * k);
    }
    let (h, w) = map.dims();
    let n = kernel.side;
    let c = (n / 2) as isize;
    Plane::from_fn(h, w, |r, s| {
        let mut acc = 0.0;
        for i in 0..n {
            let pr = r as isize - (i as isize - c);
            if pr < 0 || pr >= h as isize {
                continue;
            }
            for j in 0..n {
                let ps = s as isize - (j as isize - c);
                if ps < 0 || ps >= w as isize {
                    continue;
                }
                acc += kernel.data[i * n + j] * map.get(pr as usize, ps as usize);
            }
        }
        acc
    })
}

fn check_maps(maps: &[ResponseMap], params: &FusionParams) -> Result<(usize, usize)> {
    if maps.is_empty() || maps.len() != params.kernels.len() {
        return Err(Error::Shape(format!(
            "{} response maps for {} fusion kernels",
            maps.len(),
            params.kernels.len()
        )));
    }
    let dims = maps[0].dims();
    if maps.iter().any(|m| m.dims() != dims) {
        return Err(Error::Shape("response maps differ in size".into()));
    }
    Ok(dims)
}

/// Pre-affine fused map `m = Σ_d g_d * k_d`.
pub fn combine_responses(maps: &[ResponseMap], params: &FusionParams) -> Result<Plane> {
    let (h, w) = check_maps(maps, params)?;
    let mut m = Plane::zeros(h, w);
    for (g, k) in maps.iter().zip(&params.kernels) {
        let part = convolve_same(g, k);
        for (a, b) in m.data_mut().iter_mut().zip(part.data()) {
            *a += b;
        }
    }
    Ok(m)
}

/// `M = s · Σ_d (g_d * k_d) + b`.
pub fn fuse_responses(maps: &[ResponseMap], params: &FusionParams) -> Result<ResponseMap> {
    let m = combine_responses(maps, params)?;
    Ok(m.map(|v| params.scale * v + params.bias))
}

/// Gradients of [`fuse_responses`]: with respect to the parameters (same
/// layout as `params`) and to each input map.
pub fn fuse_backward(
    maps: &[ResponseMap],
    params: &FusionParams,
    grad_out: &Plane,
) -> Result<(FusionParams, Vec<Plane>)> {
    let (h, w) = check_maps(maps, params)?;
    if grad_out.dims() != (h, w) {
        return Err(Error::Shape("output gradient does not match maps".into()));
    }
    let m = combine_responses(maps, params)?;
    let mut grads = params.zeros_like();
    grads.scale = m.data().iter().zip(grad_out.data()).map(|(a, b)| a * b).sum();
    grads.bias = grad_out.data().iter().sum();
    let dm = grad_out.map(|v| v * params.scale);

    let mut dmaps = Vec::with_capacity(maps.len());
    for ((g, k), gk) in maps.iter().zip(&params.kernels).zip(&mut grads.kernels) {
        let n = k.side;
        let c = (n / 2) as isize;
        let mut dg = Plane::zeros(h, w);
        for r in 0..h {
            for s in 0..w {
                let d = dm.get(r, s);
                if d == 0.0 {
                    continue;
                }
                for i in 0..n {
                    let pr = r as isize - (i as isize - c);
                    if pr < 0 || pr >= h as isize {
                        continue;
                    }
                    for j in 0..n {
                        let ps = s as isize - (j as isize - c);
                        if ps < 0 || ps >= w as isize {
                            continue;
                        }
                        let (pr, ps) = (pr as usize, ps as usize);
                        gk.data[i * n + j] += d * g.get(pr, ps);
                        let cur = dg.get(pr, ps);
                        dg.set(pr, ps, cur + d * k.data[i * n + j]);
                    }
                }
            }
        }
        dmaps.push(dg);
    }
    Ok((grads, dmaps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(h: usize, w: usize, seed: u64) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn selector_average_and_affine() {
        let a = random_plane(33, 33, 1);
        let b = random_plane(33, 33, 2);
        let maps = [a.clone(), b.clone()];
        assert_eq!(fuse_responses(&maps, &FusionParams::selector(&[1.0, 0.0])).unwrap(), a);
        let avg = fuse_responses(&maps, &FusionParams::uniform(2)).unwrap();
        for i in 0..avg.data().len() {
            assert!((avg.data()[i] - 0.5 * (a.data()[i] + b.data()[i])).abs() < 1e-15);
        }
        let mut p = FusionParams::selector(&[1.0, 0.0]);
        p.scale = 2.0;
        p.bias = -1.0;
        let out = fuse_responses(&[Plane::filled(33, 33, 0.5), b], &p).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mismatch_errors() {
        let a = Plane::zeros(33, 33);
        assert!(matches!(
            fuse_responses(&[a.clone()], &FusionParams::uniform(2)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            fuse_responses(&[a, Plane::zeros(32, 33)], &FusionParams::uniform(2)),
            Err(Error::Shape(_))
        ));
        assert!(FusionKernel::new(2, vec![0.0; 4]).is_err());
    }

    #[test]
    fn branch_response_geometry() {
        let t = Tensor3::zeros(30, 30, 31);
        assert_eq!(branch_response(&t, &Tensor3::zeros(62, 62, 31)).unwrap().dims(), (33, 33));
        let t = Tensor3::zeros(25, 25, 32);
        assert_eq!(branch_response(&t, &Tensor3::zeros(57, 57, 32)).unwrap().dims(), (33, 33));
        assert!(matches!(
            branch_response(&t, &Tensor3::zeros(60, 60, 32)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn embedded_template_peaks_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor3::from_fn(30, 30, 3, |_, _, _| rng.random_range(0.1..1.0));
        let mut s = Tensor3::zeros(62, 62, 3);
        for r in 0..30 {
            for c in 0..30 {
                for k in 0..3 {
                    s.set(r + 16, c + 16, k, t.get(r, c, k));
                }
            }
        }
        let (r, c, _) = branch_response(&t, &s).unwrap().argmax();
        assert_eq!((r, c), (16, 16));
    }

    #[test]
    fn spatial_kernel_matches_direct_convolution() {
        let g = random_plane(6, 5, 3);
        let k = FusionKernel::new(3, (0..9).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let out = convolve_same(&g, &k);
        for r in 0..6isize {
            for s in 0..5isize {
                let mut acc = 0.0;
                for pr in 0..6isize {
                    for ps in 0..5isize {
                        let (i, j) = (r - pr + 1, s - ps + 1);
                        if (0..3).contains(&i) && (0..3).contains(&j) {
                            acc += k.data()[(i * 3 + j) as usize] * g.get(pr as usize, ps as usize);
                        }
                    }
                }
                assert!((out.get(r as usize, s as usize) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn store_roundtrip() {
        let mut p = FusionParams::uniform_spatial(2, 3).unwrap();
        p.scale = 1.5;
        let mut store = WeightStore::new();
        p.to_store(&mut store).unwrap();
        let q = FusionParams::from_store(&store, 2).unwrap();
        assert_eq!(p, q);
    }
}
