//! Sequential CNNs split into an encoder and a classifier.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::dropout::classical_dropout;
use crate::nn::layer::LayerSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named parameter tensor. `value.requires_grad()` doubles as the trainable flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn trainable(&self) -> bool {
        self.value.requires_grad()
    }
}

/// Which half of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Classifier,
}

/// Built-in architectures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchPreset {
    /// Two small conv blocks; fast enough for tests and desk-scale runs.
    CnnTiny,
    /// Three 5×5 conv blocks of 96, 128 and 256 filters with 3×3/2 max-pooling,
    /// then two 2048-unit fully-connected layers.
    CifarZunino,
    /// VGG-style blocks of two 3×3 convs followed by 2×2 max-pooling, one
    /// block per listed width.
    VggLite { channels: Vec<usize> },
}

impl ArchPreset {
    pub fn name(&self) -> &'static str {
        match self {
            ArchPreset::CnnTiny => "cnn-tiny",
            ArchPreset::CifarZunino => "cifar-zunino",
            ArchPreset::VggLite { .. } => "vgg-lite",
        }
    }

    pub fn layers(&self, num_classes: usize) -> (Vec<LayerSpec>, Vec<LayerSpec>) {
        match self {
            ArchPreset::CnnTiny => (
                vec![
                    LayerSpec::conv(8, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::maxpool(2, 2),
                    LayerSpec::conv(16, 3, 1, 1),
                    LayerSpec::Relu,
                    LayerSpec::maxpool(2, 2),
                ],
                vec![
                    LayerSpec::Flatten,
                    LayerSpec::linear(32),
                    LayerSpec::Relu,
                    LayerSpec::linear(num_classes),
                ],
            ),
            ArchPreset::CifarZunino => {
                let mut enc = Vec::new();
                for c in [96, 128, 256] {
                    enc.extend([LayerSpec::conv(c, 5, 1, 2), LayerSpec::Relu, LayerSpec::maxpool(3, 2)]);
                }
                (
                    enc,
                    vec![
                        LayerSpec::Flatten,
                        LayerSpec::linear(2048),
                        LayerSpec::Relu,
                        LayerSpec::linear(2048),
                        LayerSpec::Relu,
                        LayerSpec::linear(num_classes),
                    ],
                )
            }
            ArchPreset::VggLite { channels } => {
                let mut enc = Vec::new();
                for &c in channels {
                    enc.extend([
                        LayerSpec::conv(c, 3, 1, 1),
                        LayerSpec::Relu,
                        LayerSpec::conv(c, 3, 1, 1),
                        LayerSpec::Relu,
                        LayerSpec::maxpool(2, 2),
                    ]);
                }
                (
                    enc,
                    vec![
                        LayerSpec::Flatten,
                        LayerSpec::linear(128),
                        LayerSpec::Relu,
                        LayerSpec::linear(num_classes),
                    ],
                )
            }
        }
    }
}

impl fmt::Display for ArchPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchPreset::VggLite { channels } => {
                let list: Vec<String> = channels.iter().map(|c| c.to_string()).collect();
                write!(f, "vgg-lite:{}", list.join("-"))
            }
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for ArchPreset {
    type Err = Error;

    /// Accepts `cnn-tiny`, `cifar-zunino`, `vgg-lite` and `vgg-lite:16-32-64`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-tiny" => Ok(ArchPreset::CnnTiny),
            "cifar-zunino" => Ok(ArchPreset::CifarZunino),
            "vgg-lite" => Ok(ArchPreset::VggLite {
                channels: vec![16, 32, 64],
            }),
            _ => {
                let Some(list) = s.strip_prefix("vgg-lite:") else {
                    return Err(Error::Config(format!("unknown architecture `{s}`")));
                };
                let channels = list
                    .split('-')
                    .map(|c| c.parse::<usize>().ok().filter(|&c| c > 0))
                    .collect::<Option<Vec<_>>>()
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| Error::Config(format!("bad vgg-lite channel list `{list}`")))?;
                Ok(ArchPreset::VggLite { channels })
            }
        }
    }
}

/// Dropout behaviour during a forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Graph handles of a model's parameters, in [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Every post-ReLU activation of one forward pass plus the latent features.
#[derive(Debug, Clone)]
pub struct ActivationTrace<T> {
    pub relu_outputs: Vec<Tensor<T>>,
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    spec: LayerSpec,
    /// Indices of (weight, bias) in the parameter list.
    params: Option<(usize, usize)>,
}

/// An encoder/classifier pair `f = ψ∘φ` split at the last convolutional
/// feature map `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    arch: String,
    input_shape: [usize; 3],
    feature_shape: [usize; 3],
    num_classes: usize,
    encoder: Vec<Layer>,
    classifier: Vec<Layer>,
    params: Vec<Param<T>>,
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

impl<T: Scalar> Model<T> {
    pub fn from_preset(preset: &ArchPreset, input_shape: [usize; 3], num_classes: usize, rng: &mut dyn RngCore) -> Result<Self> {
        let (enc, cls) = preset.layers(num_classes);
        Self::new(&preset.to_string(), enc, cls, input_shape, num_classes, rng)
    }

    /// Materializes a network with Kaiming-uniform weights and zero biases.
    pub fn new(
        arch: &str,
        encoder: Vec<LayerSpec>,
        classifier: Vec<LayerSpec>,
        input_shape: [usize; 3],
        num_classes: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if input_shape.contains(&0) || num_classes == 0 {
            return Err(Error::Config(format!(
                "input shape {input_shape:?} and class count {num_classes} must be positive"
            )));
        }
        if let Some(bad) = encoder
            .iter()
            .find(|l| matches!(l, LayerSpec::Flatten | LayerSpec::Linear { .. }))
        {
            return Err(Error::Config(format!("encoder must stay spatial, found {bad}")));
        }
        if classifier.first() != Some(&LayerSpec::Flatten) {
            return Err(Error::Config("classifier must start with flatten".into()));
        }
        let mut params = Vec::new();
        let mut shape = input_shape.to_vec();
        let mut build = |part: &str, specs: Vec<LayerSpec>, shape: &mut Vec<usize>, params: &mut Vec<Param<T>>| -> Result<Vec<Layer>> {
            let mut layers = Vec::with_capacity(specs.len());
            for (i, spec) in specs.into_iter().enumerate() {
                spec.validate()?;
                let out = spec.output_shape(shape).map_err(|detail| Error::Layer {
                    index: i,
                    layer: format!("{part}.{i} {spec}"),
                    detail,
                })?;
                let layer_params = match spec {
                    LayerSpec::Conv2d { out_channels, kernel, .. } => {
                        let fan_in = shape[0] * kernel * kernel;
                        let w = kaiming_uniform::<T>(&[out_channels, shape[0], kernel, kernel], fan_in, rng);
                        Some((w, Tensor::zeros(&[out_channels])))
                    }
                    LayerSpec::Linear { out_features } => {
                        let w = kaiming_uniform::<T>(&[out_features, shape[0]], shape[0], rng);
                        Some((w, Tensor::zeros(&[out_features])))
                    }
                    _ => None,
                };
                let params_idx = layer_params.map(|(w, b)| {
                    let wi = params.len();
                    params.push(Param {
                        name: format!("{part}.{i}.weight"),
                        value: w.with_requires_grad(true),
                    });
                    params.push(Param {
                        name: format!("{part}.{i}.bias"),
                        value: b.with_requires_grad(true),
                    });
                    (wi, wi + 1)
                });
                layers.push(Layer {
                    spec,
                    params: params_idx,
                });
                *shape = out;
            }
            Ok(layers)
        };
        let encoder = build("encoder", encoder, &mut shape, &mut params)?;
        let feature_shape: [usize; 3] = shape
            .clone()
            .try_into()
            .map_err(|_| Error::Config(format!("encoder output {shape:?} is not CHW")))?;
        let classifier = build("classifier", classifier, &mut shape, &mut params)?;
        if shape != [num_classes] {
            return Err(Error::Config(format!(
                "classifier produces {shape:?}, expected [{num_classes}]"
            )));
        }
        Ok(Self {
            arch: arch.to_string(),
            input_shape,
            feature_shape,
            num_classes,
            encoder,
            classifier,
            params,
        })
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    /// Shape `(C, H, W)` of the latent feature map.
    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature_shape
    }

    /// Number of latent features `d`.
    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn encoder_specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.encoder.iter().map(|l| &l.spec)
    }

    pub fn classifier_specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.classifier.iter().map(|l| &l.spec)
    }

    pub fn part_of(&self, param_index: usize) -> Part {
        if self.params[param_index].name.starts_with("encoder.") {
            Part::Encoder
        } else {
            Part::Classifier
        }
    }

    pub fn set_trainable(&mut self, part: Part, flag: bool) {
        for i in 0..self.params.len() {
            if self.part_of(i) == part {
                self.params[i].value.set_requires_grad(flag);
            }
        }
    }

    /// Stops all encoder updates; only the classifier keeps training.
    pub fn freeze_encoder(&mut self) {
        self.set_trainable(Part::Encoder, false);
    }

    /// Replaces the classifier with a freshly initialized one for `num_classes`.
    pub fn reinit_classifier(&mut self, num_classes: usize, rng: &mut dyn RngCore) -> Result<()> {
        let specs: Vec<LayerSpec> = self.classifier.iter().map(|l| l.spec.clone()).collect();
        let mut specs = specs;
        match specs.iter_mut().rev().find(|s| matches!(s, LayerSpec::Linear { .. })) {
            Some(last) => *last = LayerSpec::linear(num_classes),
            None => return Err(Error::Config("classifier has no linear layer".into())),
        }
        let fresh = Model::<T>::new(
            &self.arch,
            self.encoder.iter().map(|l| l.spec.clone()).collect(),
            specs,
            self.input_shape,
            num_classes,
            rng,
        )?;
        let encoder_params: Vec<Param<T>> = self
            .params
            .iter()
            .filter(|p| p.name.starts_with("encoder."))
            .cloned()
            .collect();
        let mut params = encoder_params;
        params.extend(fresh.params.into_iter().filter(|p| p.name.starts_with("classifier.")));
        self.params = params;
        self.classifier = fresh.classifier;
        self.num_classes = num_classes;
        Ok(())
    }

    /// Registers every parameter on `g`; trainable ones are tracked.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.leaf(p.value.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant.
    pub fn bind_constant(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect(),
        }
    }

    fn run(
        &self,
        layers: &[Layer],
        part: &str,
        g: &mut Graph<T>,
        bound: &Bound,
        mut x: Var,
        mode: &mut Mode<'_>,
        mut relus: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        for (i, layer) in layers.iter().enumerate() {
            let wrap = |e: Error| match e {
                Error::Shape { detail, .. } => Error::Layer {
                    index: i,
                    layer: format!("{part}.{i} {}", layer.spec),
                    detail,
                },
                other => other,
            };
            let wb = layer.params.map(|(w, b)| (bound.vars[w], bound.vars[b]));
            x = match (&layer.spec, wb) {
                (LayerSpec::Conv2d { stride, padding, .. }, Some((w, b))) => {
                    g.conv2d(x, w, Some(b), *stride, *padding).map_err(wrap)?
                }
                (LayerSpec::Linear { .. }, Some((w, b))) => g.linear(x, w, Some(b)).map_err(wrap)?,
                (LayerSpec::Relu, _) => {
                    let y = g.relu(x);
                    if let Some(r) = relus.as_deref_mut() {
                        r.push(y);
                    }
                    y
                }
                (LayerSpec::MaxPool2d { kernel, stride }, _) => g.maxpool2d(x, *kernel, *stride).map_err(wrap)?,
                (LayerSpec::Flatten, _) => g.flatten(x).map_err(wrap)?,
                (LayerSpec::Dropout { p }, _) => match mode {
                    Mode::Train(rng) => classical_dropout(g, x, *p, true, &mut **rng)?,
                    Mode::Eval => x,
                },
                (LayerSpec::Identity, _) => x,
                (spec, None) => unreachable!("{spec} without parameters"),
            };
        }
        Ok(x)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::shape(
                "forward_encoder",
                format!("input {shape:?} does not match configured [N, {:?}]", self.input_shape),
            ));
        }
        Ok(())
    }

    /// `z = φ(x)` for an NCHW batch.
    pub fn encode(&self, g: &mut Graph<T>, bound: &Bound, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        self.check_input(g.value(x).shape())?;
        self.run(&self.encoder, "encoder", g, bound, x, mode, None)
    }

    /// Pre-softmax class scores `ψ(z)`.
    pub fn classify(&self, g: &mut Graph<T>, bound: &Bound, z: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let shape = g.value(z).shape();
        if shape.len() != 4 || shape[1..] != self.feature_shape {
            return Err(Error::shape(
                "forward_classifier",
                format!("features {shape:?} do not match [N, {:?}]", self.feature_shape),
            ));
        }
        self.run(&self.classifier, "classifier", g, bound, z, mode, None)
    }

    /// Eval-mode encoder pass without gradient tracking.
    pub fn forward_encoder(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let xv = g.constant(x.detach());
        let z = self.encode(&mut g, &bound, xv, &mut Mode::Eval)?;
        Ok(g.value(z).detach())
    }

    /// Eval-mode classifier pass without gradient tracking.
    pub fn forward_classifier(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let zv = g.constant(z.detach());
        let logits = self.classify(&mut g, &bound, zv, &mut Mode::Eval)?;
        Ok(g.value(logits).detach())
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.trace(x)?.logits)
    }

    /// Eval-mode pass recording every ReLU output and the latent features.
    pub fn trace(&self, x: &Tensor<T>) -> Result<ActivationTrace<T>> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let xv = g.constant(x.detach());
        self.check_input(g.value(xv).shape())?;
        let mut relus = Vec::new();
        let z = self.run(&self.encoder, "encoder", &mut g, &bound, xv, &mut Mode::Eval, Some(&mut relus))?;
        let logits = self.run(&self.classifier, "classifier", &mut g, &bound, z, &mut Mode::Eval, Some(&mut relus))?;
        Ok(ActivationTrace {
            relu_outputs: relus.into_iter().map(|v| g.value(v).detach()).collect(),
            features: g.value(z).detach(),
            logits: g.value(logits).detach(),
        })
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            input_shape: self.input_shape,
            feature_shape: self.feature_shape,
            num_classes: self.num_classes,
            encoder: self.encoder.clone(),
            classifier: self.classifier.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Copies values from named tensors; names and shapes must match exactly.
    pub fn load_state(&mut self, state: &[(String, Tensor<T>)]) -> Result<()> {
        if state.len() != self.params.len() {
            return Err(Error::Config(format!(
                "state has {} tensors, model has {} parameters",
                state.len(),
                self.params.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(state) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "state tensor `{name}` {:?} does not match parameter `{}` {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            let trainable = p.trainable();
            p.value = t.clone().with_requires_grad(trainable);
        }
        Ok(())
    }

    /// Copies encoder values from named tensors, ignoring classifier entries.
    pub fn load_encoder_state(&mut self, state: &[(String, Tensor<T>)]) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with("encoder.")) {
            let Some((_, t)) = state.iter().find(|(n, _)| *n == p.name) else {
                return Err(Error::Config(format!("pretrained state lacks `{}`", p.name)));
            };
            if t.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "pretrained `{}` has shape {:?}, encoder expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            let trainable = p.trainable();
            p.value = t.clone().with_requires_grad(trainable);
        }
        Ok(())
    }

    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.detach())).collect()
    }
}
