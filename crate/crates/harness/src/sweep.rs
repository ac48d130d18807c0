//! Parameter sweeps: masking ratio, labeled ratio, noise measurer and
//! scheduler comparisons. Each grid point runs the pipeline over all
//! seeds; per-point failures are recorded and the sweep continues.

use crate::ablation::mean_std;
use crate::config::Config;
use crate::pipeline::{run_pipeline, ArtifactRoot, Metrics, PipelineError};
use crate::plot::{line_plot, Series};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepKind {
    /// Varies `mask.rho_v`.
    MaskRatio(Vec<f64>),
    /// Varies `corpus.labeled_ratio`.
    LabeledRatio(Vec<f64>),
    /// Varies `curriculum.measurer`.
    Measurer(Vec<String>),
    /// Varies `curriculum.scheduler`.
    Scheduler(Vec<String>),
}

impl SweepKind {
    pub fn name(&self) -> &'static str {
        match self {
            SweepKind::MaskRatio(_) => "mask_ratio",
            SweepKind::LabeledRatio(_) => "labeled_ratio",
            SweepKind::Measurer(_) => "measurer",
            SweepKind::Scheduler(_) => "scheduler",
        }
    }

    fn points(&self) -> Vec<GridPoint> {
        match self {
            SweepKind::MaskRatio(grid) => grid
                .iter()
                .map(|&v| GridPoint {
                    label: format!("{v}"),
                    numeric: v,
                })
                .collect(),
            SweepKind::LabeledRatio(grid) => grid
                .iter()
                .map(|&v| GridPoint {
                    label: format!("{v}"),
                    numeric: v,
                })
                .collect(),
            SweepKind::Measurer(grid) | SweepKind::Scheduler(grid) => grid
                .iter()
                .enumerate()
                .map(|(i, v)| GridPoint {
                    label: v.clone(),
                    numeric: i as f64,
                })
                .collect(),
        }
    }

    fn configure(&self, base: &Config, point: &GridPoint) -> Config {
        let mut config = base.clone();
        match self {
            SweepKind::MaskRatio(_) => config.mask_rho_v = point.numeric,
            SweepKind::LabeledRatio(_) => config.corpus_labeled_ratio = point.numeric,
            SweepKind::Measurer(_) => config.curriculum_measurer = point.label.clone(),
            SweepKind::Scheduler(_) => config.curriculum_scheduler = point.label.clone(),
        }
        config
    }
}

#[derive(Debug, Clone)]
struct GridPoint {
    label: String,
    numeric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub x: f64,
    pub per_seed: Vec<(u64, Option<Metrics>)>,
    pub mean_rank1: f64,
    pub std_rank1: f64,
    pub mean_map: f64,
    pub std_map: f64,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: String,
    pub points: Vec<SweepPoint>,
    pub plot_file: Option<String>,
}

pub fn run_sweep(
    root: &ArtifactRoot,
    base: &Config,
    kind: &SweepKind,
    seeds: &[u64],
    out_dir: &Path,
    force: bool,
) -> Result<SweepTable, PipelineError> {
    let grid = kind.points();
    if grid.is_empty() {
        return Err(PipelineError::Artifact("sweep grid is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let jobs: Vec<(usize, u64)> = grid
        .iter()
        .enumerate()
        .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(usize, u64, Result<Option<Metrics>, String>)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let mut config = kind.configure(base, &grid[i]);
            config.seed = seed;
            let outcome = match run_pipeline(root, &config, force) {
                Ok(manifest) => Ok(manifest.metrics),
                Err(e) => Err(e.to_string()),
            };
            (i, seed, outcome)
        })
        .collect();

    let mut points = Vec::with_capacity(grid.len());
    for (i, point) in grid.iter().enumerate() {
        let mut per_seed = Vec::new();
        let mut errors = Vec::new();
        for &(j, seed, ref outcome) in &results {
            if j != i {
                continue;
            }
            match outcome {
                Ok(m) => per_seed.push((seed, m.clone())),
                Err(e) => {
                    log::warn!("sweep {} point {} seed {}: {}", kind.name(), point.label, seed, e);
                    errors.push(format!("seed {seed}: {e}"));
                    per_seed.push((seed, None));
                }
            }
        }
        per_seed.sort_by_key(|(s, _)| *s);
        let r1: Vec<f64> = per_seed.iter().filter_map(|(_, m)| m.as_ref().map(|m| m.rank1)).collect();
        let map: Vec<f64> = per_seed.iter().filter_map(|(_, m)| m.as_ref().map(|m| m.map)).collect();
        let (mean_rank1, std_rank1) = mean_std(&r1);
        let (mean_map, std_map) = mean_std(&map);
        points.push(SweepPoint {
            label: point.label.clone(),
            x: point.numeric,
            per_seed,
            mean_rank1,
            std_rank1,
            mean_map,
            std_map,
            errors,
        });
    }

    let plot_path = out_dir.join(format!("{}.svg", kind.name()));
    let series = vec![
        Series {
            name: "R-1".into(),
            points: points.iter().map(|p| (p.x, p.mean_rank1)).collect(),
        },
        Series {
            name: "mAP".into(),
            points: points.iter().map(|p| (p.x, p.mean_map)).collect(),
        },
    ];
    line_plot(
        &plot_path,
        &format!("retrieval vs {}", kind.name()),
        kind.name(),
        "metric",
        &series,
    )?;

    let table = SweepTable {
        kind: kind.name().to_string(),
        points,
        plot_file: Some(plot_path.display().to_string()),
    };
    std::fs::write(out_dir.join(format!("{}.csv", kind.name())), table.csv())?;
    let json = serde_json::to_string_pretty(&table)
        .map_err(|e| PipelineError::Artifact(e.to_string()))?;
    std::fs::write(out_dir.join(format!("{}.json", kind.name())), json)?;
    Ok(table)
}

impl SweepTable {
    pub fn csv(&self) -> String {
        let mut out = String::from("point,seed,rank1,rank5,rank10,map\n");
        for p in &self.points {
            for (seed, metrics) in &p.per_seed {
                match metrics {
                    Some(m) => out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        p.label, seed, m.rank1, m.rank5, m.rank10, m.map
                    )),
                    None => out.push_str(&format!("{},{},,,,\n", p.label, seed)),
                }
            }
        }
        out
    }

    pub fn text(&self) -> String {
        let mut out = format!("sweep: {}\n", self.kind);
        out.push_str(&format!(
            "{:<20} {:>8} {:>8} {:>8} {:>8}\n",
            "point", "R-1", "±", "mAP", "±"
        ));
        for p in &self.points {
            out.push_str(&format!(
                "{:<20} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                p.label, p.mean_rank1, p.std_rank1, p.mean_map, p.std_map
            ));
        }
        if let Some(plot) = &self.plot_file {
            out.push_str(&format!("plot: {plot}\n"));
        }
        out
    }

    pub fn point(&self, label: &str) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.label == label)
    }

    pub fn load(path: &PathBuf) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Artifact(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points_carry_labels_and_positions() {
        let kind = SweepKind::MaskRatio(vec![0.0, 0.1, 0.2, 0.4]);
        let points = kind.points();
        assert_eq!(points.len(), 4);
        assert_eq!(points[2].numeric, 0.2);

        let kind = SweepKind::Measurer(vec!["random".into(), "blipscore_analog".into()]);
        let points = kind.points();
        assert_eq!(points[1].label, "blipscore_analog");
        assert_eq!(points[1].numeric, 1.0);
    }

    #[test]
    fn configure_touches_only_its_field() {
        let base = Config::default();
        let kind = SweepKind::MaskRatio(vec![0.4]);
        let point = &kind.points()[0];
        let config = kind.configure(&base, point);
        assert_eq!(config.mask_rho_v, 0.4);
        assert_eq!(config.corpus_labeled_ratio, base.corpus_labeled_ratio);

        let kind = SweepKind::Scheduler(vec!["baby_step".into()]);
        let config = kind.configure(&base, &kind.points()[0]);
        assert_eq!(config.curriculum_scheduler, "baby_step");
    }
}
