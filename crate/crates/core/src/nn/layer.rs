use std::fmt;

use crate::error::{Error, Result};

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Linear {
        out_features: usize,
    },
    /// Inverted dropout, active only in training mode.
    Dropout {
        p: f64,
    },
    Identity,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn maxpool(kernel: usize, stride: usize) -> Self {
        LayerSpec::MaxPool2d { kernel, stride }
    }

    pub fn linear(out_features: usize) -> Self {
        LayerSpec::Linear { out_features }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                ..
            } => out_channels >= 1 && kernel >= 1 && stride >= 1,
            LayerSpec::MaxPool2d { kernel, stride } => kernel >= 1 && stride >= 1,
            LayerSpec::Linear { out_features } => out_features >= 1,
            LayerSpec::Dropout { p } => (0.0..1.0).contains(&p),
            LayerSpec::Relu | LayerSpec::Flatten | LayerSpec::Identity => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid layer {self}")))
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    /// Output shape (without the batch axis) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => match input {
                [_, h, w] => {
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(format!("kernel {kernel} exceeds padded input {h}x{w}"));
                    }
                    Ok(vec![
                        out_channels,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ])
                }
                _ => Err(format!("expected CHW input, got {input:?}")),
            },
            LayerSpec::MaxPool2d { kernel, stride } => match input {
                [c, h, w] => {
                    if *h < kernel || *w < kernel {
                        return Err(format!("pool kernel {kernel} exceeds input {h}x{w}"));
                    }
                    Ok(vec![*c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
                }
                _ => Err(format!("expected CHW input, got {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Linear { out_features } => match input {
                [_] => Ok(vec![out_features]),
                _ => Err(format!("expected a flat input, got {input:?}")),
            },
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Identity => Ok(input.to_vec()),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv2d({out_channels}, k={kernel}, s={stride}, p={padding})"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::MaxPool2d { kernel, stride } => write!(f, "maxpool2d(k={kernel}, s={stride})"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Linear { out_features } => write!(f, "linear({out_features})"),
            LayerSpec::Dropout { p } => write!(f, "dropout({p})"),
            LayerSpec::Identity => write!(f, "identity"),
        }
    }
}
