use std::fmt::Write as _;

use crate::attribution::SaliencyImage;

/// Header of the per-epoch metrics log.
pub const CSV_HEADER: &str =
    "epoch,split,loss,accuracy,area_ratio,hit_ratio,coverage_global,coverage_featuremap,rho,step_time_ms";

/// Share of pixels strictly above 0.5 in a max-normalized map; 0 for the zero map.
pub fn area_ratio(s: &SaliencyImage) -> f64 {
    if s.values.is_empty() {
        return 0.0;
    }
    s.values.iter().filter(|&&v| v > 0.5).count() as f64 / s.values.len() as f64
}

/// Mean [`area_ratio`] over several maps.
pub fn mean_area_ratio(maps: &[SaliencyImage]) -> f64 {
    if maps.is_empty() {
        return 0.0;
    }
    maps.iter().map(area_ratio).sum::<f64>() / maps.len() as f64
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub area_ratio: Option<f64>,
    pub hit_ratio: Option<f64>,
    pub coverage_global: Option<f64>,
    pub coverage_featuremap: Option<f64>,
    pub rho: Option<f64>,
    pub step_time_ms: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.loss,
            self.accuracy,
            opt(self.area_ratio),
            opt(self.hit_ratio),
            opt(self.coverage_global),
            opt(self.coverage_featuremap),
            opt(self.rho),
            opt(self.step_time_ms),
        )
        .unwrap();
        s
    }

    /// Parses a row written by [`MetricsReport::csv_row`].
    pub fn parse_csv_row(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 10 {
            return None;
        }
        let num = |s: &str| if s.is_empty() { Some(None) } else { s.parse::<f64>().ok().map(Some) };
        Some(Self {
            epoch: f[0].parse().ok()?,
            split: f[1].to_string(),
            loss: f[2].parse().ok()?,
            accuracy: f[3].parse().ok()?,
            area_ratio: num(f[4])?,
            hit_ratio: num(f[5])?,
            coverage_global: num(f[6])?,
            coverage_featuremap: num(f[7])?,
            rho: num(f[8])?,
            step_time_ms: num(f[9])?,
        })
    }
}

/// Train accuracy minus test accuracy.
pub fn generalization_gap(train_accuracy: f64, test_accuracy: f64) -> f64 {
    train_accuracy - test_accuracy
}
