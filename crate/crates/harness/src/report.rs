//! Human-readable reports over stored run manifests and tables.

use crate::pipeline::{ArtifactRoot, ExperimentManifest, PipelineError};
use std::fmt::Write as _;
use std::path::Path;

/// Renders one run manifest.
pub fn run_report(manifest: &ExperimentManifest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run {}  (seed {})", manifest.config_hash, manifest.seed);
    if let Some(metrics) = &manifest.metrics {
        let _ = writeln!(
            out,
            "R-1 {:.4}  R-5 {:.4}  R-10 {:.4}  mAP {:.4}",
            metrics.rank1, metrics.rank5, metrics.rank10, metrics.map
        );
    }
    if let Some(err) = &manifest.error {
        let _ = writeln!(out, "FAILED: {err}");
    }
    let _ = writeln!(out, "stages:");
    for (name, secs) in &manifest.stage_seconds {
        let path = manifest.artifacts.get(name).cloned().unwrap_or_default();
        let _ = writeln!(out, "  {name:<16} {secs:>8.2}s  {path}");
    }
    out
}

/// Collects every stored run under the root into a summary table.
pub fn all_runs_report(root: &ArtifactRoot) -> Result<String, PipelineError> {
    let runs_dir = root.path.join("runs");
    let mut out = String::new();
    let _ = writeln!(out, "{:<18} {:>8} {:>8} {:>8} {:>8}  status", "run", "R-1", "R-5", "R-10", "mAP");
    if !runs_dir.exists() {
        let _ = writeln!(out, "(no runs recorded under {})", runs_dir.display());
        return Ok(out);
    }
    let mut entries: Vec<_> = std::fs::read_dir(&runs_dir)?.filter_map(|e| e.ok()).collect();
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let manifest_path = entry.path().join("manifest.json");
        if !manifest_path.exists() {
            continue;
        }
        let manifest = ExperimentManifest::load(&manifest_path)?;
        match (&manifest.metrics, &manifest.error) {
            (Some(m), None) => {
                let _ = writeln!(
                    out,
                    "{:<18} {:>8.4} {:>8.4} {:>8.4} {:>8.4}  ok",
                    manifest.config_hash, m.rank1, m.rank5, m.rank10, m.map
                );
            }
            (_, Some(err)) => {
                let _ = writeln!(out, "{:<18} {:>35}  failed: {err}", manifest.config_hash, "");
            }
            _ => {
                let _ = writeln!(out, "{:<18} {:>35}  incomplete", manifest.config_hash, "");
            }
        }
    }
    Ok(out)
}

/// Loads a manifest by config hash or direct path.
pub fn find_manifest(root: &ArtifactRoot, what: &str) -> Result<ExperimentManifest, PipelineError> {
    let direct = Path::new(what);
    if direct.is_file() {
        return ExperimentManifest::load(direct);
    }
    let by_hash = root.path.join("runs").join(what).join("manifest.json");
    if by_hash.exists() {
        return ExperimentManifest::load(&by_hash);
    }
    Err(PipelineError::Artifact(format!(
        "no manifest found for {what:?} (looked for a file and under {})",
        root.path.join("runs").display()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Metrics;
    use std::collections::BTreeMap;

    #[test]
    fn report_renders_metrics_and_stages() {
        let manifest = ExperimentManifest {
            config_hash: "abc123".into(),
            seed: 7,
            config_text: String::new(),
            artifacts: BTreeMap::from([("corpus_dir".to_string(), "/tmp/c".to_string())]),
            metrics: Some(Metrics {
                rank1: 0.5,
                rank5: 0.8,
                rank10: 0.9,
                map: 0.4,
            }),
            stage_seconds: BTreeMap::from([("corpus_dir".to_string(), 1.25)]),
            error: None,
        };
        let text = run_report(&manifest);
        assert!(text.contains("abc123"));
        assert!(text.contains("R-1 0.5000"));
        assert!(text.contains("corpus_dir"));
    }
}
