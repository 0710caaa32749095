use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One entry in a layer stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Dense {
        out_units: usize,
    },
    ReLU,
    Dropout {
        rate: f64,
    },
    Softmax,
}

impl Layer {
    pub fn conv(out_channels: usize, kernel: usize, pad: usize) -> Layer {
        Layer::Conv {
            out_channels,
            kernel,
            stride: 1,
            pad,
        }
    }

    pub fn pool2() -> Layer {
        Layer::MaxPool { window: 2, stride: 2 }
    }

    pub fn dense(out_units: usize) -> Layer {
        Layer::Dense { out_units }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Dense { .. })
    }
}

/// Per-sample activation shape (channels, height, width). Dense outputs are `(units, 1, 1)`.
pub type Shape = (usize, usize, usize);

pub fn shape_len(s: Shape) -> usize {
    s.0 * s.1 * s.2
}

/// A layer with its resolved input and output shapes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerPlan {
    pub layer: Layer,
    pub input: Shape,
    pub output: Shape,
}

impl LayerPlan {
    /// Shape of the kernel array of a parametric layer.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.layer {
            Layer::Conv {
                out_channels, kernel, ..
            } => Some(vec![out_channels, self.input.0, kernel, kernel]),
            Layer::Dense { out_units } => Some(vec![out_units, shape_len(self.input)]),
            _ => None,
        }
    }

    /// Inputs feeding each output unit, used for He initialization.
    pub fn fan_in(&self) -> usize {
        match self.layer {
            Layer::Conv { kernel, .. } => self.input.0 * kernel * kernel,
            Layer::Dense { .. } => shape_len(self.input),
            _ => 0,
        }
    }
}

/// Layer stack plus input shape. Always ends in a two-way softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let spec = NetworkSpec { input, layers };
        spec.plan()?;
        Ok(spec)
    }

    /// Tri-planar voxel classifier: 3×48×48 input, four convolutions, three
    /// max-pools and two fully connected layers.
    pub fn segmentation_default() -> Self {
        NetworkSpec {
            input: (3, 48, 48),
            layers: vec![
                Layer::conv(16, 3, 1),
                Layer::ReLU,
                Layer::pool2(),
                Layer::conv(32, 3, 1),
                Layer::ReLU,
                Layer::pool2(),
                Layer::conv(32, 3, 1),
                Layer::ReLU,
                Layer::pool2(),
                Layer::conv(64, 3, 1),
                Layer::ReLU,
                Layer::dense(256),
                Layer::ReLU,
                Layer::Dropout { rate: 0.5 },
                Layer::dense(2),
                Layer::Softmax,
            ],
        }
    }

    /// Slice-presence classifier on 1×64×64 downsampled slices.
    pub fn localizer_default() -> Self {
        NetworkSpec {
            input: (1, 64, 64),
            layers: vec![
                Layer::conv(8, 3, 1),
                Layer::ReLU,
                Layer::pool2(),
                Layer::conv(16, 3, 1),
                Layer::ReLU,
                Layer::pool2(),
                Layer::conv(16, 3, 1),
                Layer::ReLU,
                Layer::pool2(),
                Layer::conv(32, 3, 1),
                Layer::ReLU,
                Layer::dense(64),
                Layer::ReLU,
                Layer::Dropout { rate: 0.5 },
                Layer::dense(2),
                Layer::Softmax,
            ],
        }
    }

    pub fn input_len(&self) -> usize {
        shape_len(self.input)
    }

    /// Same stack with every dropout rate replaced.
    pub fn with_dropout_rate(&self, rate: f64) -> NetworkSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dropout { .. } => Layer::Dropout { rate },
                other => *other,
            })
            .collect();
        NetworkSpec {
            input: self.input,
            layers,
        }
    }

    /// Resolves shapes and checks that the stack is well formed.
    pub fn plan(&self) -> Result<Vec<LayerPlan>> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("input shape {:?} has a zero extent", self.input)));
        }
        let n = self.layers.len();
        match self.layers.last() {
            Some(Layer::Softmax) => {}
            _ => return Err(Error::Shape("the last layer must be Softmax".into())),
        }
        if self.layers[..n - 1].iter().any(|l| matches!(l, Layer::Softmax)) {
            return Err(Error::Shape("Softmax may only appear once, as the last layer".into()));
        }

        let mut plans = Vec::with_capacity(n);
        let mut shape = self.input;
        let mut flattened = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let output = match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if flattened {
                        return Err(Error::Shape(format!("layer {i}: Conv after a Dense layer")));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Shape(format!("layer {i}: Conv parameters must be positive")));
                    }
                    let ho = conv_out(shape.1, kernel, stride, pad);
                    let wo = conv_out(shape.2, kernel, stride, pad);
                    match (ho, wo) {
                        (Some(ho), Some(wo)) => (out_channels, ho, wo),
                        _ => {
                            return Err(Error::Shape(format!(
                                "layer {i}: kernel {kernel} does not fit input {shape:?}"
                            )))
                        }
                    }
                }
                Layer::MaxPool { window, stride } => {
                    if flattened {
                        return Err(Error::Shape(format!("layer {i}: MaxPool after a Dense layer")));
                    }
                    if window == 0 || stride == 0 {
                        return Err(Error::Shape(format!("layer {i}: MaxPool parameters must be positive")));
                    }
                    match (conv_out(shape.1, window, stride, 0), conv_out(shape.2, window, stride, 0)) {
                        (Some(ho), Some(wo)) => (shape.0, ho, wo),
                        _ => {
                            return Err(Error::Shape(format!(
                                "layer {i}: pool window {window} does not fit input {shape:?}"
                            )))
                        }
                    }
                }
                Layer::Dense { out_units } => {
                    if out_units == 0 {
                        return Err(Error::Shape(format!("layer {i}: Dense needs at least one unit")));
                    }
                    flattened = true;
                    (out_units, 1, 1)
                }
                Layer::ReLU => shape,
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Shape(format!("layer {i}: dropout rate {rate} outside [0,1)")));
                    }
                    let before = self.layers[..i]
                        .iter()
                        .rev()
                        .find(|l| !matches!(l, Layer::ReLU | Layer::Dropout { .. }));
                    let after = self.layers[i + 1..]
                        .iter()
                        .find(|l| !matches!(l, Layer::ReLU | Layer::Dropout { .. }));
                    if !matches!(before, Some(Layer::Dense { .. })) || !matches!(after, Some(Layer::Dense { .. })) {
                        return Err(Error::Shape(format!("layer {i}: Dropout must sit between Dense layers")));
                    }
                    shape
                }
                Layer::Softmax => {
                    if shape_len(shape) != 2 {
                        return Err(Error::Shape(format!(
                            "Softmax expects 2 inputs, the stack produces {}",
                            shape_len(shape)
                        )));
                    }
                    shape
                }
            };
            plans.push(LayerPlan {
                layer: *layer,
                input: shape,
                output,
            });
            shape = output;
        }
        Ok(plans)
    }

    /// Stable 64-bit fingerprint of the layer stack, stored in weight files.
    pub fn hash(&self) -> u64 {
        let mut text = format!("input {} {} {}\n", self.input.0, self.input.1, self.input.2);
        for layer in &self.layers {
            let _ = match *layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => writeln!(text, "conv {out_channels} {kernel} {stride} {pad}"),
                Layer::MaxPool { window, stride } => writeln!(text, "maxpool {window} {stride}"),
                Layer::Dense { out_units } => writeln!(text, "dense {out_units}"),
                Layer::ReLU => writeln!(text, "relu"),
                Layer::Dropout { .. } => writeln!(text, "dropout"),
                Layer::Softmax => writeln!(text, "softmax"),
            };
        }
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }
}

fn conv_out(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}
