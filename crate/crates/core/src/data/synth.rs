//! Synthetic shortcut benchmark. Each image holds a class-specific object at a
//! random location (its box is the ground truth) and a small bright patch in
//! one of the class-owned corners. In training the patch sits in the label's
//! corner with probability `p_train`; otherwise, and in the test split with
//! probability `1 - p_test`, the corner belongs to a uniformly drawn class and
//! carries no label information.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::tensor::Tensor;

/// Object shapes, assigned to classes in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Plus,
    Ring,
    Cross,
}

pub const SHAPES: [Shape; 4] = [Shape::Square, Shape::Plus, Shape::Ring, Shape::Cross];

impl Shape {
    /// Whether `(y, x)` of a `size`×`size` footprint belongs to the shape.
    pub fn covers(self, y: usize, x: usize, size: usize) -> bool {
        let t = (size / 3).max(1);
        let lo = (size - t) / 2;
        let band = |v: usize| v >= lo && v < lo + t;
        match self {
            Shape::Square => true,
            Shape::Plus => band(y) || band(x),
            Shape::Ring => y < 2 || x < 2 || y + 2 >= size || x + 2 >= size,
            Shape::Cross => y.abs_diff(x) <= 1 || (y + x + 1).abs_diff(size) <= 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
    /// Object side range for class 0; class `c` adds `c * size_step`.
    pub object_min: usize,
    pub object_max: usize,
    pub size_step: usize,
    /// Object intensity range for class 0; class `c` adds `c * intensity_step`.
    pub intensity_min: f32,
    pub intensity_max: f32,
    pub intensity_step: f32,
    /// One shape per class when set, squares for every class otherwise.
    pub distinct_shapes: bool,
    pub patch_size: usize,
    pub patch_intensity: f32,
    pub p_train: f64,
    pub p_test: f64,
    /// Background pixels are uniform in `[0, noise)`.
    pub noise: f32,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            classes: 2,
            object_min: 10,
            object_max: 14,
            size_step: 0,
            intensity_min: 0.4,
            intensity_max: 0.8,
            intensity_step: 0.0,
            distinct_shapes: true,
            patch_size: 2,
            patch_intensity: 1.0,
            p_train: 1.0,
            p_test: 0.0,
            noise: 0.1,
            n_train: 2000,
            n_test: 500,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Pixels kept clear of objects along each edge so they never touch a patch.
    pub fn margin(&self) -> usize {
        self.patch_size + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=SHAPES.len()).contains(&self.classes) {
            return bad(format!("synth.classes must be in 1..=4, got {}", self.classes));
        }
        if self.channels == 0 || self.n_train == 0 || self.n_test == 0 {
            return bad("synth channels and sample counts must be positive".into());
        }
        for (name, p) in [("p_train", self.p_train), ("p_test", self.p_test)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("synth.{name} = {p} outside [0, 1]"));
            }
        }
        if self.object_min < 3 || self.object_min > self.object_max {
            return bad(format!("object size range {}..={} is invalid", self.object_min, self.object_max));
        }
        if self.patch_size == 0 {
            return bad("synth.patch_size must be positive".into());
        }
        if self.image_size < 2 * self.margin() + self.largest_object() {
            return bad(format!(
                "object of size {} with patch {} does not fit a {}-pixel image",
                self.largest_object(),
                self.patch_size,
                self.image_size
            ));
        }
        let unit = 0.0..=1.0;
        let top = self.intensity_max + self.intensity_step * (self.classes - 1) as f32;
        if !(unit.contains(&self.intensity_min)
            && unit.contains(&top)
            && self.intensity_step >= 0.0
            && unit.contains(&self.patch_intensity)
            && unit.contains(&self.noise)
            && self.intensity_min <= self.intensity_max)
        {
            return bad("synth intensities and noise must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn largest_object(&self) -> usize {
        self.object_max + self.size_step * (self.classes - 1)
    }

    /// Dimmest object pixel any class can produce.
    pub fn faintest_object(&self) -> f32 {
        self.intensity_min
    }

    /// Top-left pixel of the patch in corner `k` (0 top-left, 1 top-right,
    /// 2 bottom-left, 3 bottom-right).
    pub fn corner_origin(&self, k: usize) -> (usize, usize) {
        let far = self.image_size - 1 - self.patch_size;
        let y = if k < 2 { 1 } else { far };
        let x = if k % 2 == 0 { 1 } else { far };
        (y, x)
    }

    /// Key=value echo of every field.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("image_size", self.image_size.to_string()),
            ("channels", self.channels.to_string()),
            ("classes", self.classes.to_string()),
            ("object_min", self.object_min.to_string()),
            ("object_max", self.object_max.to_string()),
            ("size_step", self.size_step.to_string()),
            ("intensity_min", self.intensity_min.to_string()),
            ("intensity_max", self.intensity_max.to_string()),
            ("intensity_step", self.intensity_step.to_string()),
            ("distinct_shapes", self.distinct_shapes.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("patch_intensity", self.patch_intensity.to_string()),
            ("p_train", self.p_train.to_string()),
            ("p_test", self.p_test.to_string()),
            ("noise", self.noise.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_test", self.n_test.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one field from its echoed key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse `{value}` for synth.{key}")))
        }
        match key {
            "image_size" => self.image_size = p(key, value)?,
            "channels" => self.channels = p(key, value)?,
            "classes" => self.classes = p(key, value)?,
            "object_min" => self.object_min = p(key, value)?,
            "object_max" => self.object_max = p(key, value)?,
            "size_step" => self.size_step = p(key, value)?,
            "intensity_min" => self.intensity_min = p(key, value)?,
            "intensity_max" => self.intensity_max = p(key, value)?,
            "intensity_step" => self.intensity_step = p(key, value)?,
            "distinct_shapes" => self.distinct_shapes = p(key, value)?,
            "patch_size" => self.patch_size = p(key, value)?,
            "patch_intensity" => self.patch_intensity = p(key, value)?,
            "p_train" => self.p_train = p(key, value)?,
            "p_test" => self.p_test = p(key, value)?,
            "noise" => self.noise = p(key, value)?,
            "n_train" => self.n_train = p(key, value)?,
            "n_test" => self.n_test = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            other => return Err(Error::Config(format!("unknown synth key `{other}`"))),
        }
        Ok(())
    }
}

/// One generated sample before it is packed into a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub pixels: Vec<f32>,
    pub label: usize,
    pub object: BBox,
    pub corner: usize,
}

fn sample(spec: &SynthSpec, p: f64, rng: &mut ChaCha8Rng) -> SynthSample {
    let s = spec.image_size;
    let label = rng.random_range(0..spec.classes);
    let grow = spec.size_step * label;
    let size = rng.random_range(spec.object_min + grow..=spec.object_max + grow);
    let lift = spec.intensity_step * label as f32;
    let intensity = rng.random_range(spec.intensity_min + lift..=spec.intensity_max + lift);
    let m = spec.margin();
    let y0 = rng.random_range(m..=s - m - size);
    let x0 = rng.random_range(m..=s - m - size);
    let corner = if rng.random::<f64>() < p {
        label
    } else {
        rng.random_range(0..spec.classes)
    };

    let mut plane = vec![0.0f32; s * s];
    for v in plane.iter_mut() {
        *v = rng.random::<f32>() * spec.noise;
    }
    let shape = if spec.distinct_shapes { SHAPES[label] } else { Shape::Square };
    for y in 0..size {
        for x in 0..size {
            if shape.covers(y, x, size) {
                plane[(y0 + y) * s + x0 + x] = intensity;
            }
        }
    }
    let (py, px) = spec.corner_origin(corner);
    for y in py..py + spec.patch_size {
        for x in px..px + spec.patch_size {
            plane[y * s + x] = spec.patch_intensity;
        }
    }
    let pixels = plane.repeat(spec.channels);
    SynthSample {
        pixels,
        label,
        object: BBox {
            x_min: x0,
            y_min: y0,
            x_max: x0 + size,
            y_max: y0 + size,
        },
        corner,
    }
}

/// Generates `(samples, corners)` for one split.
pub fn generate_split(spec: &SynthSpec, split: Split) -> Result<(Dataset, Vec<usize>)> {
    spec.validate()?;
    let (n, p, stream) = match split {
        Split::Train => (spec.n_train, spec.p_train, 0),
        Split::Test => (spec.n_test, spec.p_test, 1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let s = spec.image_size;
    let mut pixels = Vec::with_capacity(n * spec.channels * s * s);
    let mut labels = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    let mut corners = Vec::with_capacity(n);
    for _ in 0..n {
        let smp = sample(spec, p, &mut rng);
        pixels.extend_from_slice(&smp.pixels);
        labels.push(smp.label);
        boxes.push(vec![smp.object]);
        corners.push(smp.corner);
    }
    let images = Tensor::new(&[n, spec.channels, s, s], pixels)?;
    Ok((Dataset::new(images, labels, Some(boxes), spec.classes, split)?, corners))
}

/// Train and test splits of the shortcut benchmark.
pub fn generate_shortcut(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    Ok((generate_split(spec, Split::Train)?.0, generate_split(spec, Split::Test)?.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_train: 200,
            n_test: 200,
            seed: 11,
            ..Default::default()
        }
    }

    /// Predicts the class whose corner holds the bright patch.
    fn patch_rule(spec: &SynthSpec, ds: &Dataset, i: usize) -> usize {
        let s = spec.image_size;
        let plane = &ds.images.data()[i * spec.channels * s * s..][..s * s];
        (0..4)
            .find(|&k| {
                let (y, x) = spec.corner_origin(k);
                plane[y * s + x] == spec.patch_intensity
            })
            .expect("every image has a patch")
    }

    fn accuracy(spec: &SynthSpec, ds: &Dataset) -> f64 {
        let hits = (0..ds.len()).filter(|&i| patch_rule(spec, ds, i) == ds.labels[i]).count();
        hits as f64 / ds.len() as f64
    }

    #[test]
    fn patch_rule_is_perfect_on_train_and_chance_on_test() {
        let spec = SynthSpec {
            n_test: 4000,
            ..small()
        };
        let (train, test) = generate_shortcut(&spec).unwrap();
        assert_eq!(accuracy(&spec, &train), 1.0);
        // Binomial sd at n = 4000 is under 0.008.
        assert!((accuracy(&spec, &test) - 0.5).abs() < 0.03);
    }

    #[test]
    fn boxes_cover_object_pixels_exactly() {
        let spec = small();
        let (train, _) = generate_shortcut(&spec).unwrap();
        check_boxes(&spec, &train);
        let graded = SynthSpec {
            size_step: 2,
            intensity_step: 0.1,
            intensity_max: 0.7,
            distinct_shapes: false,
            ..small()
        };
        check_boxes(&graded, &generate_shortcut(&graded).unwrap().0);
    }

    fn check_boxes(spec: &SynthSpec, train: &Dataset) {
        let s = spec.image_size;
        let m = spec.margin();
        for i in 0..train.len() {
            let plane = &train.images.data()[i * s * s..][..s * s];
            let mut scan: Option<BBox> = None;
            for y in m..s - m {
                for x in m..s - m {
                    if plane[y * s + x] >= spec.faintest_object() {
                        let b = scan.get_or_insert(BBox {
                            x_min: x,
                            y_min: y,
                            x_max: x + 1,
                            y_max: y + 1,
                        });
                        b.x_min = b.x_min.min(x);
                        b.y_min = b.y_min.min(y);
                        b.x_max = b.x_max.max(x + 1);
                        b.y_max = b.y_max.max(y + 1);
                    }
                }
            }
            assert_eq!(scan, Some(train.boxes.as_ref().unwrap()[i][0]), "sample {i}");
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = small();
        assert_eq!(generate_shortcut(&spec).unwrap(), generate_shortcut(&spec).unwrap());
        let other = SynthSpec { seed: 12, ..small() };
        assert_ne!(generate_shortcut(&spec).unwrap().0, generate_shortcut(&other).unwrap().0);
    }

    #[test]
    fn uncorrelated_train_matches_test_distribution() {
        let spec = SynthSpec {
            p_train: 0.0,
            n_train: 4000,
            n_test: 4000,
            ..small()
        };
        let (_, train_corners) = generate_split(&spec, Split::Train).unwrap();
        let (_, test_corners) = generate_split(&spec, Split::Test).unwrap();
        for k in 0..2 {
            let a = train_corners.iter().filter(|&&c| c == k).count() as f64 / 4000.0;
            let b = test_corners.iter().filter(|&&c| c == k).count() as f64 / 4000.0;
            assert!((a - 0.5).abs() < 0.03 && (b - 0.5).abs() < 0.03);
        }
    }

    #[test]
    fn rejects_specs_that_do_not_fit() {
        assert!(SynthSpec { object_max: 30, ..small() }.validate().is_err());
        assert!(SynthSpec { p_train: 1.5, ..small() }.validate().is_err());
        assert!(SynthSpec { classes: 5, ..small() }.validate().is_err());
        assert!(SynthSpec { intensity_step: 0.3, ..small() }.validate().is_err());
        assert!(SynthSpec { size_step: 12, ..small() }.validate().is_err());
        assert!(SynthSpec::default().validate().is_ok());
    }

    #[test]
    fn shapes_touch_every_edge() {
        for shape in SHAPES {
            for size in 10..=14 {
                let on = |y, x| shape.covers(y, x, size);
                assert!((0..size).any(|x| on(0, x)) && (0..size).any(|x| on(size - 1, x)));
                assert!((0..size).any(|y| on(y, 0)) && (0..size).any(|y| on(y, size - 1)));
            }
        }
    }
}
