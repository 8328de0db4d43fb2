//! Latent attribution maps and their input-resolution saliency images.
//!
//! The latent attribution of class `c` at features `z` is
//! `ReLU(∇z ψ_c(z) ⊙ z)`: the elementwise product of the class-score gradient
//! and the activations, keeping only entries where both agree in sign. Unlike
//! Grad-CAM it keeps every channel separately. Each computation runs on its
//! own short-lived graph with the classifier parameters bound as constants, so
//! no parameter gradient is ever produced.

use std::str::FromStr;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::{Mode, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which class score is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Score {
    /// Pre-softmax logit.
    #[default]
    Logit,
    /// Softmax probability.
    Prob,
}

impl FromStr for Score {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(Score::Logit),
            "prob" => Ok(Score::Prob),
            _ => Err(Error::Config(format!("attribution.score must be logit|prob, got `{s}`"))),
        }
    }
}

/// Which parameters produced an attribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Live,
    Ema,
}

/// Non-negative per-feature saliency for one sample, shaped like `z` (C, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap<T> {
    pub values: Tensor<T>,
    pub class_index: usize,
    pub source: Source,
}

/// A 2-D map at input resolution, max-normalized to 1 unless identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SaliencyImage {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Divides by the maximum; maps without a positive entry stay as they are.
    pub fn normalized(mut self) -> Self {
        let m = self.max();
        if m > 0.0 {
            for v in &mut self.values {
                *v /= m;
            }
        }
        self
    }
}

/// `∇z Σ_i ψ_{c_i}(z_i)` for a batch of features. Samples are independent, so
/// row `i` of the result is the gradient of sample `i`'s own class score.
pub fn class_score_gradient<T: Scalar>(model: &Model<T>, z: &Tensor<T>, classes: &[usize], score: Score) -> Result<Tensor<T>> {
    if z.rank() != 4 || classes.len() != z.shape()[0] {
        return Err(Error::shape(
            "latent_attribution",
            format!("features {:?} vs {} class indices", z.shape(), classes.len()),
        ));
    }
    let mut g = Graph::new();
    let bound = model.bind_constant(&mut g);
    let zv = g.leaf(z.detach().with_requires_grad(true));
    let logits = model.classify(&mut g, &bound, zv, &mut Mode::Eval)?;
    let scores = match score {
        Score::Logit => logits,
        Score::Prob => g.softmax(logits)?,
    };
    let total = g.select_sum(scores, classes)?;
    let mut grads = g.backward(total, &[zv])?;
    Ok(grads.take(zv).expect("watched node has a gradient"))
}

/// Batched `ReLU(∇z ψ_c(z) ⊙ z)`; the result has the shape of `z`.
pub fn latent_attribution_batch<T: Scalar>(model: &Model<T>, z: &Tensor<T>, classes: &[usize], score: Score) -> Result<Tensor<T>> {
    let grad = class_score_gradient(model, z, classes, score)?;
    grad.zip_map(z, "latent_attribution", |g, a| {
        let p = g * a;
        if p > T::zero() {
            p
        } else {
            T::zero()
        }
    })
}

/// Attribution of class `c` for a single feature map shaped `(C, H, W)` or `(1, C, H, W)`.
pub fn latent_attribution<T: Scalar>(model: &Model<T>, z: &Tensor<T>, c: usize, score: Score, source: Source) -> Result<AttributionMap<T>> {
    let fs = model.feature_shape();
    let batched = match z.shape() {
        [1, rest @ ..] if rest == fs => z.detach(),
        s if s == fs => z.reshape(&[1, fs[0], fs[1], fs[2]])?,
        s => {
            return Err(Error::shape(
                "latent_attribution",
                format!("features {s:?} do not match {fs:?}"),
            ))
        }
    };
    if c >= model.num_classes() {
        return Err(Error::LabelOutOfRange {
            label: c,
            classes: model.num_classes(),
        });
    }
    let values = latent_attribution_batch(model, &batched, &[c], score)?.reshape(&fs)?;
    Ok(AttributionMap {
        values,
        class_index: c,
        source,
    })
}

/// Bilinear resize with aligned corners.
pub fn upsample_bilinear(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let s = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Sums a `(C, H, W)` map over channels into `H × W`.
pub fn channel_sum<T: Scalar>(values: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let [c, h, w] = match values.shape() {
        [c, h, w] => [*c, *h, *w],
        [1, c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape("reduce_and_upsample", format!("expected CHW, got {s:?}"))),
    };
    let mut out = vec![0.0; h * w];
    for ch in values.data().chunks_exact(h * w).take(c) {
        for (o, &v) in out.iter_mut().zip(ch) {
            *o += v.as_f64();
        }
    }
    Ok((h, w, out))
}

/// Channel-sum, bilinear upsample to `target` (height, width), then divide by
/// the maximum.
pub fn reduce_and_upsample<T: Scalar>(values: &Tensor<T>, target: (usize, usize)) -> Result<SaliencyImage> {
    let (h, w, summed) = channel_sum(values)?;
    if target.0 < h || target.1 < w {
        return Err(Error::shape(
            "reduce_and_upsample",
            format!("target {target:?} smaller than feature map {h}x{w}"),
        ));
    }
    Ok(SaliencyImage {
        height: target.0,
        width: target.1,
        values: upsample_bilinear(&summed, h, w, target.0, target.1),
    }
    .normalized())
}

/// Classic Grad-CAM before upsampling: channel weights are the spatial means
/// of `∇z ψ_c`, and the map is `ReLU(Σ_k weight_k · z_k)` at feature resolution.
pub fn grad_cam_latent<T: Scalar>(model: &Model<T>, x: &Tensor<T>, c: usize, score: Score) -> Result<(usize, usize, Vec<f64>)> {
    let x = single_sample(model, x)?;
    let z = model.forward_encoder(&x)?;
    let grad = class_score_gradient(model, &z, &[c], score)?;
    let [ch, h, w] = model.feature_shape();
    let hw = h * w;
    let mut map = vec![0.0; hw];
    for k in 0..ch {
        let gk = &grad.data()[k * hw..(k + 1) * hw];
        let zk = &z.data()[k * hw..(k + 1) * hw];
        let weight = gk.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        for (m, &zv) in map.iter_mut().zip(zk) {
            *m += weight * zv.as_f64();
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    Ok((h, w, map))
}

/// Classic Grad-CAM at input resolution.
pub fn grad_cam<T: Scalar>(model: &Model<T>, x: &Tensor<T>, c: usize, score: Score) -> Result<SaliencyImage> {
    let (h, w, map) = grad_cam_latent(model, x, c, score)?;
    let [_, ih, iw] = model.input_shape();
    Ok(SaliencyImage {
        height: ih,
        width: iw,
        values: upsample_bilinear(&map, h, w, ih, iw),
    }
    .normalized())
}

/// Latent attribution of one input image, reduced to input resolution.
pub fn saliency_image<T: Scalar>(model: &Model<T>, x: &Tensor<T>, c: usize, score: Score) -> Result<SaliencyImage> {
    let x = single_sample(model, x)?;
    let z = model.forward_encoder(&x)?;
    let a = latent_attribution(model, &z, c, score, Source::Live)?;
    let [_, ih, iw] = model.input_shape();
    reduce_and_upsample(&a.values, (ih, iw))
}

/// Batched variant of [`saliency_image`].
pub fn saliency_images<T: Scalar>(model: &Model<T>, x: &Tensor<T>, classes: &[usize], score: Score) -> Result<Vec<SaliencyImage>> {
    let z = model.forward_encoder(x)?;
    let a = latent_attribution_batch(model, &z, classes, score)?;
    let [_, ih, iw] = model.input_shape();
    let d = model.feature_len();
    let fs = model.feature_shape();
    a.data()
        .chunks_exact(d)
        .map(|chunk| reduce_and_upsample(&Tensor::new(&fs, chunk.to_vec())?, (ih, iw)))
        .collect()
}

fn single_sample<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let is = model.input_shape();
    match x.shape() {
        [1, rest @ ..] if rest == is => Ok(x.detach()),
        s if s == is => x.reshape(&[1, is[0], is[1], is[2]]),
        s => Err(Error::shape("saliency", format!("expected one sample of {is:?}, got {s:?}"))),
    }
}
