use serde::{Deserialize, Serialize};

use super::weights::WeightStore;
use crate::error::{Error, Result, WeightStoreError};
use crate::imaging::Tensor3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConvLayer {
    Conv {
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
}

/// Ordered layer list; convolutions are valid-mode (no padding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub layers: Vec<ConvLayer>,
}

impl ConvNetSpec {
    /// conv 11×11×3→96 /2, relu, maxpool 3 /2, conv 5×5×96→32: 255 px → 57×57×32.
    pub fn two_conv() -> Self {
        Self {
            layers: vec![
                ConvLayer::Conv {
                    kernel_h: 11,
                    kernel_w: 11,
                    in_channels: 3,
                    out_channels: 96,
                    stride: 2,
                },
                ConvLayer::Relu,
                ConvLayer::MaxPool {
                    window: 3,
                    stride: 2,
                },
                ConvLayer::Conv {
                    kernel_h: 5,
                    kernel_w: 5,
                    in_channels: 96,
                    out_channels: 32,
                    stride: 1,
                },
            ],
        }
    }

    /// [`Self::two_conv`] plus relu and conv 5×5×32→32: 255 px → 53×53×32.
    pub fn three_conv() -> Self {
        let mut spec = Self::two_conv();
        spec.layers.push(ConvLayer::Relu);
        spec.layers.push(ConvLayer::Conv {
            kernel_h: 5,
            kernel_w: 5,
            in_channels: 32,
            out_channels: 32,
            stride: 1,
        });
        spec
    }

    pub fn with_depth(depth: usize) -> Result<Self> {
        match depth {
            2 => Ok(Self::two_conv()),
            3 => Ok(Self::three_conv()),
            d => Err(Error::Config(format!(
                "conv depth {d} has no built-in spec; supply a spec file"
            ))),
        }
    }

    /// Checks that channel counts chain and strides are positive. Returns the
    /// input and output channel counts.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let mut input = None;
        let mut current: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                ConvLayer::Conv {
                    kernel_h,
                    kernel_w,
                    in_channels,
                    out_channels,
                    stride,
                } => {
                    if kernel_h == 0 || kernel_w == 0 || in_channels == 0 || out_channels == 0 {
                        return Err(Error::Config(format!("layer {i}: empty convolution")));
                    }
                    if stride == 0 {
                        return Err(Error::Config(format!("layer {i}: stride must be >= 1")));
                    }
                    if let Some(c) = current {
                        if c != in_channels {
                            return Err(Error::Shape(format!(
                                "layer {i} expects {in_channels} channels, previous layer gives {c}"
                            )));
                        }
                    }
                    input.get_or_insert(in_channels);
                    current = Some(out_channels);
                }
                ConvLayer::MaxPool { window, stride } => {
                    if window == 0 || stride == 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: pooling window and stride must be >= 1"
                        )));
                    }
                }
                ConvLayer::Relu => {}
            }
        }
        match (input, current) {
            (Some(i), Some(o)) => Ok((i, o)),
            _ => Err(Error::Config("network has no convolution layer".into())),
        }
    }

    /// Product of all strides: input pixels per output cell.
    pub fn total_stride(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                ConvLayer::Conv { stride, .. } | ConvLayer::MaxPool { stride, .. } => *stride,
                ConvLayer::Relu => 1,
            })
            .product()
    }

    /// Spatial output side for a square input, if every layer fits.
    pub fn output_side(&self, input: usize) -> Option<usize> {
        self.layers.iter().try_fold(input, |side, l| match *l {
            ConvLayer::Conv {
                kernel_h, stride, ..
            } => side.checked_sub(kernel_h).map(|d| d / stride + 1),
            ConvLayer::MaxPool { window, stride } => side.checked_sub(window).map(|d| d / stride + 1),
            ConvLayer::Relu => Some(side),
        })
    }

    /// `(name, shape)` of every tensor the network needs, kernels as `[out, in, kh, kw]`.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut n = 0;
        for l in &self.layers {
            if let ConvLayer::Conv {
                kernel_h,
                kernel_w,
                in_channels,
                out_channels,
                ..
            } = *l
            {
                n += 1;
                out.push((
                    format!("conv{n}.weight"),
                    vec![out_channels, in_channels, kernel_h, kernel_w],
                ));
                out.push((format!("conv{n}.bias"), vec![out_channels]));
            }
        }
        out
    }
}

enum Prepared {
    Conv {
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        /// `[kh·kw·cin, cout]`, row index `(ky·kw + kx)·cin + ci`.
        kernel: Vec<f32>,
        bias: Vec<f32>,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
}

/// A spec bound to its weights, with kernels laid out for matrix multiplication.
pub struct ConvNet {
    layers: Vec<Prepared>,
    input_channels: usize,
    output_channels: usize,
    stride: usize,
}

impl std::fmt::Debug for ConvNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvNet")
            .field("layers", &self.layers.len())
            .field("input_channels", &self.input_channels)
            .field("output_channels", &self.output_channels)
            .finish()
    }
}

impl ConvNet {
    pub fn new(spec: &ConvNetSpec, weights: &WeightStore) -> Result<Self> {
        let (input_channels, output_channels) = spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut n = 0;
        for l in &spec.layers {
            layers.push(match *l {
                ConvLayer::Conv {
                    kernel_h: kh,
                    kernel_w: kw,
                    in_channels: cin,
                    out_channels: cout,
                    stride,
                } => {
                    n += 1;
                    let wname = format!("conv{n}.weight");
                    let bname = format!("conv{n}.bias");
                    let w = fetch(weights, &wname, &[cout, cin, kh, kw])?;
                    let b = fetch(weights, &bname, &[cout])?;
                    let k = kh * kw * cin;
                    let mut kernel = vec![0.0f32; k * cout];
                    for o in 0..cout {
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let src = ((o * cin + ci) * kh + ky) * kw + kx;
                                    let row = (ky * kw + kx) * cin + ci;
                                    kernel[row * cout + o] = w[src];
                                }
                            }
                        }
                    }
                    Prepared::Conv {
                        kh,
                        kw,
                        cin,
                        cout,
                        stride,
                        kernel,
                        bias: b.to_vec(),
                    }
                }
                ConvLayer::Relu => Prepared::Relu,
                ConvLayer::MaxPool { window, stride } => Prepared::MaxPool { window, stride },
            });
        }
        Ok(Self {
            layers,
            input_channels,
            output_channels,
            stride: spec.total_stride(),
        })
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn output_channels(&self) -> usize {
        self.output_channels
    }

    pub fn total_stride(&self) -> usize {
        self.stride
    }

    pub fn forward(&self, img: &Tensor3) -> Result<Tensor3> {
        if img.channels() != self.input_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.input_channels,
                img.channels()
            )));
        }
        let mut act = Activation {
            h: img.height(),
            w: img.width(),
            c: img.channels(),
            data: img.data().iter().map(|v| *v as f32).collect(),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            act = match layer {
                Prepared::Conv {
                    kh,
                    kw,
                    cin,
                    cout,
                    stride,
                    kernel,
                    bias,
                } => {
                    if act.h < *kh || act.w < *kw {
                        return Err(Error::Size(format!(
                            "layer {i}: {}x{} activation smaller than {kh}x{kw} kernel",
                            act.h, act.w
                        )));
                    }
                    conv(&act, *kh, *kw, *cin, *cout, *stride, kernel, bias)
                }
                Prepared::Relu => {
                    act.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    act
                }
                Prepared::MaxPool { window, stride } => {
                    if act.h < *window || act.w < *window {
                        return Err(Error::Size(format!(
                            "layer {i}: {}x{} activation smaller than pooling window {window}",
                            act.h, act.w
                        )));
                    }
                    max_pool(&act, *window, *stride)
                }
            };
        }
        Tensor3::new(
            act.h,
            act.w,
            act.c,
            act.data.into_iter().map(f64::from).collect(),
        )
    }
}

fn fetch<'a>(store: &'a WeightStore, name: &str, shape: &[usize]) -> Result<&'a [f32]> {
    let t = store
        .get(name)
        .ok_or_else(|| Error::Config(format!("weights missing tensor `{name}`")))?;
    if t.shape != shape {
        return Err(WeightStoreError::ShapeMismatch {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape.clone(),
        }
        .into());
    }
    Ok(&t.data)
}

struct Activation {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

#[allow(clippy::too_many_arguments)]
fn conv(
    x: &Activation,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    kernel: &[f32],
    bias: &[f32],
) -> Activation {
    let oh = (x.h - kh) / stride + 1;
    let ow = (x.w - kw) / stride + 1;
    let k = kh * kw * cin;
    let positions = oh * ow;
    let row_span = kw * cin;

    // im2col: one row per output position, each kernel row copied contiguously.
    let mut cols = vec![0.0f32; positions * k];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut cols[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
            for ky in 0..kh {
                let src = ((oy * stride + ky) * x.w + ox * stride) * cin;
                dst[ky * row_span..(ky + 1) * row_span]
                    .copy_from_slice(&x.data[src..src + row_span]);
            }
        }
    }

    let mut out = Vec::with_capacity(positions * cout);
    for _ in 0..positions {
        out.extend_from_slice(bias);
    }
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements with the
    // row-major strides passed below.
    unsafe {
        gemm::gemm(
            positions,
            cout,
            k,
            out.as_mut_ptr(),
            1,
            cout as isize,
            true,
            cols.as_ptr(),
            1,
            k as isize,
            kernel.as_ptr(),
            1,
            cout as isize,
            1.0f32,
            1.0f32,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
    Activation {
        h: oh,
        w: ow,
        c: cout,
        data: out,
    }
}

fn max_pool(x: &Activation, window: usize, stride: usize) -> Activation {
    let oh = (x.h - window) / stride + 1;
    let ow = (x.w - window) / stride + 1;
    let mut out = vec![f32::NEG_INFINITY; oh * ow * x.c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * x.c..(oy * ow + ox + 1) * x.c];
            for dy in 0..window {
                for dx in 0..window {
                    let src = ((oy * stride + dy) * x.w + ox * stride + dx) * x.c;
                    for (d, s) in dst.iter_mut().zip(&x.data[src..src + x.c]) {
                        *d = d.max(*s);
                    }
                }
            }
        }
    }
    Activation {
        h: oh,
        w: ow,
        c: x.c,
        data: out,
    }
}

/// One-shot forward pass; build a [`ConvNet`] once when running many frames.
pub fn cnn_forward(img: &Tensor3, spec: &ConvNetSpec, weights: &WeightStore) -> Result<Tensor3> {
    ConvNet::new(spec, weights)?.forward(img)
}
