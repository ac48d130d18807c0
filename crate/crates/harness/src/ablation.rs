//! Component ablation ladder: labeled-only baseline, the basic
//! generation-then-retrieval pipeline, each masking level alone and
//! combined, the curriculum alone, and the full configuration.

use crate::config::Config;
use crate::pipeline::{run_pipeline, ArtifactRoot, Metrics, PipelineError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    M1,
    M2,
    M3,
    M4,
    M5,
    Ours,
}

pub const LADDER: [Variant; 7] = [
    Variant::Baseline,
    Variant::M1,
    Variant::M2,
    Variant::M3,
    Variant::M4,
    Variant::M5,
    Variant::Ours,
];

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::M1 => "m1_basic",
            Variant::M2 => "m2_patch_mask",
            Variant::M3 => "m3_channel_mask",
            Variant::M4 => "m4_pc_mask",
            Variant::M5 => "m5_curriculum",
            Variant::Ours => "ours",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        LADDER.iter().copied().find(|v| v.name() == s)
    }

    /// Feature flags for this rung, applied over a base configuration.
    pub fn apply(&self, base: &Config, seed: u64) -> Config {
        let mut config = base.clone();
        config.seed = seed;
        // start from everything off, then enable per rung
        config.pipeline_use_pseudo = true;
        config.mask_patch_v = false;
        config.mask_patch_t = false;
        config.mask_channel_v = false;
        config.mask_channel_t = false;
        config.curriculum_scheduler = "off".into();
        match self {
            Variant::Baseline => {
                config.pipeline_use_pseudo = false;
            }
            Variant::M1 => {}
            Variant::M2 => {
                config.mask_patch_v = true;
                config.mask_patch_t = true;
            }
            Variant::M3 => {
                config.mask_channel_v = true;
                config.mask_channel_t = true;
            }
            Variant::M4 => {
                config.mask_patch_v = true;
                config.mask_patch_t = true;
                config.mask_channel_v = true;
                config.mask_channel_t = true;
            }
            Variant::M5 => {
                config.curriculum_scheduler = base.curriculum_scheduler.clone();
                if config.curriculum_scheduler == "off" {
                    config.curriculum_scheduler = "linear".into();
                }
            }
            Variant::Ours => {
                config.mask_patch_v = true;
                config.mask_patch_t = true;
                config.mask_channel_v = true;
                config.mask_channel_t = true;
                config.curriculum_scheduler = base.curriculum_scheduler.clone();
                if config.curriculum_scheduler == "off" {
                    config.curriculum_scheduler = "linear".into();
                }
            }
        }
        config
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub config_hash: String,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderRow {
    pub variant: String,
    pub cells: Vec<Cell>,
    pub mean_rank1: f64,
    pub std_rank1: f64,
    pub mean_map: f64,
    pub std_map: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LadderTable {
    pub rows: Vec<LadderRow>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1.0);
    (mean, var.sqrt())
}

fn summarize(variant: Variant, cells: Vec<Cell>) -> LadderRow {
    let r1: Vec<f64> = cells.iter().filter_map(|c| c.metrics.as_ref().map(|m| m.rank1)).collect();
    let map: Vec<f64> = cells.iter().filter_map(|c| c.metrics.as_ref().map(|m| m.map)).collect();
    let (mean_rank1, std_rank1) = mean_std(&r1);
    let (mean_map, std_map) = mean_std(&map);
    LadderRow {
        variant: variant.name().to_string(),
        cells,
        mean_rank1,
        std_rank1,
        mean_map,
        std_map,
    }
}

/// Runs one (variant, seed) cell through the pipeline cache.
pub fn run_cell(
    root: &ArtifactRoot,
    base: &Config,
    variant: Variant,
    seed: u64,
    force: bool,
) -> Cell {
    let config = variant.apply(base, seed);
    match run_pipeline(root, &config, force) {
        Ok(manifest) => Cell {
            seed,
            config_hash: config.hash(),
            metrics: manifest.metrics,
            error: manifest.error,
        },
        Err(e) => Cell {
            seed,
            config_hash: config.hash(),
            metrics: None,
            error: Some(e.to_string()),
        },
    }
}

/// The full ladder over the given seeds; independent cells run in
/// parallel and per-cell failures are recorded, not fatal.
pub fn run_ablation_ladder(
    root: &ArtifactRoot,
    base: &Config,
    seeds: &[u64],
    force: bool,
) -> LadderTable {
    let jobs: Vec<(Variant, u64)> = LADDER
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let cells: Vec<(Variant, Cell)> = jobs
        .par_iter()
        .map(|&(variant, seed)| (variant, run_cell(root, base, variant, seed, force)))
        .collect();

    let rows = LADDER
        .iter()
        .map(|&variant| {
            let mut mine: Vec<Cell> = cells
                .iter()
                .filter(|(v, _)| *v == variant)
                .map(|(_, c)| c.clone())
                .collect();
            mine.sort_by_key(|c| c.seed);
            for cell in &mine {
                if let Some(err) = &cell.error {
                    log::warn!("{} seed {}: {}", variant.name(), cell.seed, err);
                }
            }
            summarize(variant, mine)
        })
        .collect();
    LadderTable { rows }
}

impl LadderTable {
    pub fn row(&self, variant: Variant) -> Option<&LadderRow> {
        self.rows.iter().find(|r| r.variant == variant.name())
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("variant,seed,config_hash,rank1,rank5,rank10,map,error\n");
        for row in &self.rows {
            for cell in &row.cells {
                let (r1, r5, r10, map) = match &cell.metrics {
                    Some(m) => (
                        m.rank1.to_string(),
                        m.rank5.to_string(),
                        m.rank10.to_string(),
                        m.map.to_string(),
                    ),
                    None => Default::default(),
                };
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    row.variant,
                    cell.seed,
                    cell.config_hash,
                    r1,
                    r5,
                    r10,
                    map,
                    cell.error.clone().unwrap_or_default()
                ));
            }
        }
        out
    }

    pub fn text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>8} {:>8} {:>6}\n",
            "variant", "R-1", "±", "mAP", "±", "cells"
        ));
        for row in &self.rows {
            let ok = row.cells.iter().filter(|c| c.metrics.is_some()).count();
            out.push_str(&format!(
                "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>3}/{:<2}\n",
                row.variant,
                row.mean_rank1,
                row.std_rank1,
                row.mean_map,
                row.std_map,
                ok,
                row.cells.len()
            ));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ladder.csv"), self.csv())?;
        std::fs::write(dir.join("ladder.txt"), self.text())?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| PipelineError::Artifact(e.to_string()))?;
        let mut f = std::fs::File::create(dir.join("ladder.json"))?;
        f.write_all(json.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(dir.join("ladder.json"))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Artifact(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_flags_compose() {
        let base = Config::default();
        let m2 = Variant::M2.apply(&base, 1);
        assert!(m2.mask_patch_v && m2.mask_patch_t);
        assert!(!m2.mask_channel_v && !m2.mask_channel_t);
        assert_eq!(m2.curriculum_scheduler, "off");

        let m3 = Variant::M3.apply(&base, 1);
        assert!(!m3.mask_patch_v && m3.mask_channel_v);

        // m4 = m2 union m3
        let m4 = Variant::M4.apply(&base, 1);
        assert!(m4.mask_patch_v && m4.mask_patch_t && m4.mask_channel_v && m4.mask_channel_t);
        assert_eq!(m4.curriculum_scheduler, "off");

        let m5 = Variant::M5.apply(&base, 1);
        assert!(!m5.mask_patch_v && !m5.mask_channel_v);
        assert_eq!(m5.curriculum_scheduler, "linear");

        let ours = Variant::Ours.apply(&base, 1);
        assert!(ours.mask_patch_v && ours.mask_channel_v);
        assert_eq!(ours.curriculum_scheduler, "linear");
        assert!(ours.pipeline_use_pseudo);

        let baseline = Variant::Baseline.apply(&base, 1);
        assert!(!baseline.pipeline_use_pseudo);

        // the full config equals a direct run with both mask levels on
        let mut direct = base.clone();
        direct.seed = 1;
        direct.curriculum_scheduler = "off".into();
        direct.mask_patch_v = true;
        direct.mask_patch_t = true;
        direct.mask_channel_v = true;
        direct.mask_channel_t = true;
        assert_eq!(m4.hash(), direct.hash(), "m4 differs from a direct mask run");
    }

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12);
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let (m, _) = mean_std(&[]);
        assert!(m.is_nan());
    }
}
