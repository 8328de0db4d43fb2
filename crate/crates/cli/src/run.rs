//! The subcommands, as library functions returning their reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgdrop_core::attribution::{grad_cam, saliency_image, saliency_images, SaliencyImage};
use sgdrop_core::data::{
    generate_shortcut, load_cifar10, load_mnist, read_dataset_dir, write_dataset_dir, Dataset, Split, BOXES_HEADER,
};
use sgdrop_core::metrics::{
    coverage_indices, generalization_gap, hit_ratio, mean_area_ratio, neuron_coverage, saliency_bbox, MetricsReport,
    CSV_HEADER,
};
use sgdrop_core::nn::{checkpoint, Model, Optimizer};
use sgdrop_core::sgdrop::SgdropConfig;
use sgdrop_core::train::{evaluate, Regularizer, Trainer};
use sgdrop_core::Scalar;

use crate::config::{DatasetKind, Precision, RunConfig};
use crate::error::{CliError, Result};
use crate::images;

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    images::write(path, text.as_bytes())
}

fn kv_text(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let path = || cfg.data_path.clone().ok_or_else(|| CliError::Config("data_path is not set".into()));
    let (train, test) = match cfg.dataset {
        DatasetKind::Synthetic => generate_shortcut(&cfg.synth_spec())?,
        DatasetKind::Dir => read_dataset_dir(&path()?)?,
        DatasetKind::Mnist => (load_mnist(&path()?, Split::Train)?, load_mnist(&path()?, Split::Test)?),
        DatasetKind::Cifar10 => (load_cifar10(&path()?, Split::Train)?, load_cifar10(&path()?, Split::Test)?),
    };
    if cfg.resize > 0 {
        return Ok((train.resized(cfg.resize)?, test.resized(cfg.resize)?));
    }
    Ok((train, test))
}

/// Test samples whose saliency is tracked every epoch: a seeded shuffle,
/// truncated to `size`.
pub fn probe_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9e0b));
    idx.truncate(size);
    idx
}

/// Saliency-derived metrics of `model` on the given test samples.
fn probe_metrics<T: Scalar>(model: &Model<T>, test: &Dataset, probe: &[usize], cfg: &RunConfig) -> Result<(Vec<SaliencyImage>, Option<f64>)> {
    let mut maps = Vec::with_capacity(probe.len());
    for chunk in probe.chunks(cfg.eval_batch_size) {
        let (x, y) = test.batch::<T>(chunk)?;
        maps.extend(saliency_images(model, &x, &y, cfg.score)?);
    }
    let hits = match &test.boxes {
        Some(boxes) => {
            let truth: Vec<_> = probe.iter().map(|&i| boxes[i].clone()).collect();
            Some(hit_ratio(&maps, &truth)?)
        }
        None => None,
    };
    Ok((maps, hits))
}

fn coverage<T: Scalar>(model: &Model<T>, data: &Dataset, seed: u64) -> Result<(f64, f64)> {
    let batches = coverage_indices(data.len(), seed)
        .iter()
        .map(|idx| data.batch::<T>(idx).map(|(x, _)| x))
        .collect::<sgdrop_core::Result<Vec<_>>>()?;
    Ok(neuron_coverage(model, &batches)?)
}

/// Train and test rows for one finished epoch (1-based in the log).
fn epoch_reports<T: Scalar>(
    model: &Model<T>,
    train: &Dataset,
    test: &Dataset,
    probe: &[usize],
    cfg: &RunConfig,
    epoch: usize,
    rho: Option<f64>,
    step_time: Duration,
) -> Result<(MetricsReport, MetricsReport, Vec<SaliencyImage>)> {
    let (train_loss, train_acc) = evaluate(model, train, cfg.eval_batch_size)?;
    let (test_loss, test_acc) = evaluate(model, test, cfg.eval_batch_size)?;
    let (maps, hits) = probe_metrics(model, test, probe, cfg)?;
    let (cg, cf) = coverage(model, test, cfg.seed)?;
    let train_row = MetricsReport {
        epoch,
        split: Split::Train.to_string(),
        loss: train_loss,
        accuracy: train_acc,
        rho,
        step_time_ms: (!cfg.deterministic).then(|| step_time.as_secs_f64() * 1e3),
        ..Default::default()
    };
    let test_row = MetricsReport {
        epoch,
        split: Split::Test.to_string(),
        loss: test_loss,
        accuracy: test_acc,
        area_ratio: Some(mean_area_ratio(&maps)),
        hit_ratio: hits,
        coverage_global: Some(cg),
        coverage_featuremap: Some(cf),
        ..Default::default()
    };
    Ok((train_row, test_row, maps))
}

/// Everything a training run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    /// Two rows per epoch, train first.
    pub reports: Vec<MetricsReport>,
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
    pub encoder_frozen_intact: Option<bool>,
}

impl RunOutcome {
    pub fn final_train(&self) -> &MetricsReport {
        &self.reports[self.reports.len() - 2]
    }

    pub fn final_test(&self) -> &MetricsReport {
        &self.reports[self.reports.len() - 1]
    }

    pub fn test_rows(&self) -> impl Iterator<Item = &MetricsReport> {
        self.reports.iter().filter(|r| r.split == "test")
    }

    pub fn gap(&self) -> f64 {
        generalization_gap(self.final_train().accuracy, self.final_test().accuracy)
    }
}

fn export_probe_maps(dir: &Path, test: &Dataset, probe: &[usize], maps: &[SaliencyImage]) -> Result<()> {
    mkdir(dir)?;
    let [c, h, w] = test.image_shape();
    for (&i, map) in probe.iter().zip(maps) {
        let image = &test.images.data()[i * c * h * w..(i + 1) * c * h * w];
        images::write(&dir.join(format!("sample_{i:05}.pgm")), &images::pgm_bytes(map))?;
        images::write(&dir.join(format!("sample_{i:05}_overlay.ppm")), &images::overlay_ppm_bytes(image, c, map))?;
    }
    Ok(())
}

fn fit<T: Scalar>(cfg: &RunConfig, model: Model<T>, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    let dir = cfg.out.clone();
    let ckpt_dir = dir.join("checkpoints");
    mkdir(&ckpt_dir)?;
    write_text(&dir.join("config.kv"), &kv_text(&cfg.to_kv()))?;

    let encoder_before: Vec<_> = model
        .state()
        .into_iter()
        .filter(|(n, _)| n.starts_with("encoder."))
        .collect();
    let frozen = model.params().iter().any(|p| p.name.starts_with("encoder.") && !p.trainable());

    let optimizer = Optimizer::new(cfg.optimizer, cfg.lr_schedule)?;
    let mut trainer = Trainer::new(model, optimizer, cfg.regularizer, cfg.epochs, cfg.seed ^ 0xd509)?;
    let probe = probe_indices(test.len(), cfg.probe_size, cfg.seed);

    let mut csv = format!("{CSV_HEADER}\n");
    let csv_path = dir.join("metrics.csv");
    let mut reports = Vec::with_capacity(2 * cfg.epochs);
    let mut best = (0, f64::NEG_INFINITY);
    for epoch in 0..cfg.epochs {
        let stats = trainer.train_epoch(train, cfg.batch_size, cfg.seed, epoch)?;
        let (tr, te, maps) =
            epoch_reports(&trainer.model, train, test, &probe, cfg, epoch + 1, stats.rho, stats.step_time)?;
        writeln!(csv, "{}\n{}", tr.csv_row(), te.csv_row()).unwrap();
        write_text(&csv_path, &csv)?;
        checkpoint::save(&ckpt_dir.join("latest.ckpt"), &trainer.model)?;
        if te.accuracy > best.1 {
            best = (epoch + 1, te.accuracy);
            checkpoint::save(&ckpt_dir.join("best.ckpt"), &trainer.model)?;
        }
        if cfg.saliency_every > 0 && ((epoch + 1) % cfg.saliency_every == 0 || epoch + 1 == cfg.epochs) {
            export_probe_maps(&dir.join("saliency").join(format!("epoch_{:03}", epoch + 1)), test, &probe, &maps)?;
        }
        reports.push(tr);
        reports.push(te);
    }

    let intact = frozen.then(|| {
        let after = trainer.model.state();
        encoder_before
            .iter()
            .all(|(n, t)| after.iter().any(|(m, u)| m == n && u == t))
    });
    let outcome = RunOutcome {
        dir: dir.clone(),
        reports,
        best_epoch: best.0,
        best_test_accuracy: best.1,
        encoder_frozen_intact: intact,
    };
    write_summary(&dir.join("summary.kv"), cfg, &outcome)?;
    Ok(outcome)
}

fn write_summary(path: &Path, cfg: &RunConfig, o: &RunOutcome) -> Result<()> {
    let (tr, te) = (o.final_train(), o.final_test());
    let mut s = String::new();
    let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    writeln!(s, "regularizer={}", cfg.regularizer.name()).unwrap();
    writeln!(s, "epochs={}", cfg.epochs).unwrap();
    writeln!(s, "train_accuracy={}", tr.accuracy).unwrap();
    writeln!(s, "test_accuracy={}", te.accuracy).unwrap();
    writeln!(s, "test_loss={}", te.loss).unwrap();
    writeln!(s, "generalization_gap={}", o.gap()).unwrap();
    writeln!(s, "area_ratio={}", f(te.area_ratio)).unwrap();
    writeln!(s, "hit_ratio={}", f(te.hit_ratio)).unwrap();
    writeln!(s, "coverage_global={}", f(te.coverage_global)).unwrap();
    writeln!(s, "coverage_featuremap={}", f(te.coverage_featuremap)).unwrap();
    writeln!(s, "best_epoch={}", o.best_epoch).unwrap();
    writeln!(s, "best_test_accuracy={}", o.best_test_accuracy).unwrap();
    if let Some(ok) = o.encoder_frozen_intact {
        writeln!(s, "encoder_unchanged={ok}").unwrap();
    }
    write_text(path, &s)
}

fn build_model<T: Scalar>(cfg: &RunConfig, data: &Dataset) -> Result<Model<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(Model::from_preset(&cfg.arch, data.image_shape(), data.class_count, &mut rng)?)
}

/// Trains from scratch and writes `metrics.csv`, `checkpoints/`,
/// `summary.kv` and `config.kv` under `cfg.out`.
pub fn train(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    match cfg.precision {
        Precision::F32 => fit(cfg, build_model::<f32>(cfg, &train)?, &train, &test),
        Precision::F64 => fit(cfg, build_model::<f64>(cfg, &train)?, &train, &test),
    }
}

fn restore<T: Scalar>(cfg: &RunConfig, data: &Dataset, ckpt: &Path) -> Result<Model<T>> {
    let mut model = build_model::<T>(cfg, data)?;
    model.load_state(&checkpoint::load::<T>(ckpt)?)?;
    Ok(model)
}

/// Reuses a pretrained encoder, frozen, under a fresh classifier.
pub fn transfer(cfg: &RunConfig, pretrained: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    require_file(pretrained)?;
    let (train, test) = load_data(cfg)?;
    fn go<T: Scalar>(cfg: &RunConfig, pretrained: &Path, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
        let mut model = build_model::<T>(cfg, train)?;
        model.load_encoder_state(&checkpoint::load::<T>(pretrained)?)?;
        model.freeze_encoder();
        fit(cfg, model, train, test)
    }
    match cfg.precision {
        Precision::F32 => go::<f32>(cfg, pretrained, &train, &test),
        Precision::F64 => go::<f64>(cfg, pretrained, &train, &test),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{} does not exist", path.display())))
    }
}

/// Test-split evaluation of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub coverage_global: f64,
    pub coverage_featuremap: f64,
    pub area_ratio: f64,
    pub hit_ratio: Option<f64>,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "loss={}", self.loss).unwrap();
        writeln!(s, "accuracy={}", self.accuracy).unwrap();
        writeln!(s, "coverage_global={}", self.coverage_global).unwrap();
        writeln!(s, "coverage_featuremap={}", self.coverage_featuremap).unwrap();
        writeln!(s, "area_ratio={}", self.area_ratio).unwrap();
        if let Some(h) = self.hit_ratio {
            writeln!(s, "hit_ratio={h}").unwrap();
        }
        s
    }
}

/// Evaluates `ckpt` on the whole test split and writes `eval.kv`.
pub fn eval(cfg: &RunConfig, ckpt: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    require_file(ckpt)?;
    let (train, test) = load_data(cfg)?;
    fn go<T: Scalar>(cfg: &RunConfig, ckpt: &Path, train: &Dataset, test: &Dataset) -> Result<EvalReport> {
        let model = restore::<T>(cfg, train, ckpt)?;
        let (loss, accuracy) = evaluate(&model, test, cfg.eval_batch_size)?;
        let (coverage_global, coverage_featuremap) = coverage(&model, test, cfg.seed)?;
        let all: Vec<usize> = (0..test.len()).collect();
        let (maps, hit_ratio) = probe_metrics(&model, test, &all, cfg)?;
        Ok(EvalReport {
            loss,
            accuracy,
            coverage_global,
            coverage_featuremap,
            area_ratio: mean_area_ratio(&maps),
            hit_ratio,
        })
    }
    let report = match cfg.precision {
        Precision::F32 => go::<f32>(cfg, ckpt, &train, &test)?,
        Precision::F64 => go::<f64>(cfg, ckpt, &train, &test)?,
    };
    mkdir(&cfg.out)?;
    write_text(&cfg.out.join("eval.kv"), &report.to_kv())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyMethod {
    Latent,
    GradCam,
}

impl std::str::FromStr for SaliencyMethod {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(SaliencyMethod::Latent),
            "gradcam" => Ok(SaliencyMethod::GradCam),
            _ => Err(CliError::Config(format!("method must be latent|gradcam, got `{s}`"))),
        }
    }
}

/// Writes a PGM map and a PPM overlay per index into `cfg.out/saliency`,
/// plus `boxes.csv` with each map's derived box (empty fields if none).
/// Maps are taken for the true label.
pub fn saliency(cfg: &RunConfig, ckpt: &Path, split: Split, indices: &[usize], method: SaliencyMethod) -> Result<Vec<SaliencyImage>> {
    cfg.validate()?;
    require_file(ckpt)?;
    let (train, test) = load_data(cfg)?;
    let data = match split {
        Split::Train => &train,
        Split::Test => &test,
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
        return Err(CliError::Config(format!(
            "index {bad} out of range: valid {split} indices are 0..{}",
            data.len()
        )));
    }
    fn go<T: Scalar>(cfg: &RunConfig, ckpt: &Path, train: &Dataset, data: &Dataset, indices: &[usize], method: SaliencyMethod) -> Result<Vec<SaliencyImage>> {
        let model = restore::<T>(cfg, train, ckpt)?;
        indices
            .iter()
            .map(|&i| {
                let (x, y) = data.batch::<T>(&[i])?;
                Ok(match method {
                    SaliencyMethod::Latent => saliency_image(&model, &x, y[0], cfg.score)?,
                    SaliencyMethod::GradCam => grad_cam(&model, &x, y[0], cfg.score)?,
                })
            })
            .collect()
    }
    let maps = match cfg.precision {
        Precision::F32 => go::<f32>(cfg, ckpt, &train, data, indices, method)?,
        Precision::F64 => go::<f64>(cfg, ckpt, &train, data, indices, method)?,
    };
    let dir = cfg.out.join("saliency");
    export_probe_maps(&dir, data, indices, &maps)?;
    let mut csv = format!("{BOXES_HEADER}\n");
    for (&i, m) in indices.iter().zip(&maps) {
        match saliency_bbox(m) {
            Some(b) => writeln!(csv, "{i},{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max).unwrap(),
            None => writeln!(csv, "{i},,,,").unwrap(),
        }
    }
    write_text(&dir.join("boxes.csv"), &csv)?;
    Ok(maps)
}

/// Median step times of vanilla and SGDrop training on the same batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub steps: usize,
    pub vanilla_ms: f64,
    pub sgdrop_ms: f64,
    /// SGDrop over vanilla.
    pub ratio: f64,
    /// A second vanilla series over the first; measures timing noise.
    pub self_ratio: f64,
}

impl BenchReport {
    pub fn to_kv(&self) -> String {
        format!(
            "steps={}\nvanilla_median_ms={}\nsgdrop_median_ms={}\nratio={}\nvanilla_self_ratio={}\n",
            self.steps, self.vanilla_ms, self.sgdrop_ms, self.ratio, self.self_ratio
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `bench.steps` optimizer steps of each regime, interleaved so that
/// drift in machine load hits all of them alike. Warmup steps are discarded.
pub fn bench_overhead(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    if cfg.bench_steps < 10 {
        return Err(CliError::Config(format!("bench.steps must be at least 10, got {}", cfg.bench_steps)));
    }
    let (train, _) = load_data(cfg)?;
    fn go<T: Scalar>(cfg: &RunConfig, train: &Dataset) -> Result<BenchReport> {
        let idx: Vec<usize> = (0..cfg.batch_size.min(train.len())).collect();
        let (x, y) = train.batch::<T>(&idx)?;
        let sgdrop = match cfg.regularizer {
            Regularizer::Sgdrop(c) => c,
            _ => SgdropConfig::default(),
        };
        let model = build_model::<T>(cfg, train)?;
        let make = |reg| -> Result<Trainer<T>> {
            Ok(Trainer::new(model.clone(), Optimizer::new(cfg.optimizer, cfg.lr_schedule)?, reg, 1, cfg.seed)?)
        };
        let mut runs = [make(Regularizer::None)?, make(Regularizer::Sgdrop(sgdrop))?, make(Regularizer::None)?];
        let mut times = [Vec::new(), Vec::new(), Vec::new()];
        for step in 0..cfg.bench_warmup + cfg.bench_steps {
            for (trainer, t) in runs.iter_mut().zip(times.iter_mut()) {
                let start = Instant::now();
                trainer.step(&x, &y, 0)?;
                if step >= cfg.bench_warmup {
                    t.push(start.elapsed().as_secs_f64() * 1e3);
                }
            }
        }
        let [v, s, v2] = times.map(median);
        Ok(BenchReport {
            steps: cfg.bench_steps,
            vanilla_ms: v,
            sgdrop_ms: s,
            ratio: s / v,
            self_ratio: v2 / v,
        })
    }
    let report = match cfg.precision {
        Precision::F32 => go::<f32>(cfg, &train)?,
        Precision::F64 => go::<f64>(cfg, &train)?,
    };
    mkdir(&cfg.out)?;
    write_text(&cfg.out.join("bench.kv"), &report.to_kv())?;
    Ok(report)
}

/// Writes the synthetic dataset described by `cfg` to `cfg.out`.
pub fn synth(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let spec = cfg.synth_spec();
    spec.validate()?;
    let (train, test) = generate_shortcut(&spec)?;
    mkdir(&cfg.out)?;
    write_dataset_dir(&cfg.out, &train, &test, &spec.to_kv())?;
    Ok((train, test))
}
