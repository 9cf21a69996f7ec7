use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::rules::Provenance;
use crate::trees::{ForestConfig, TreeConfig};

use super::PipelineError;

fn methods_default() -> Vec<String> {
    vec!["dt-bb".into(), "anchor-bb".into()]
}

/// Everything a pipeline run needs. Relative paths are resolved against
/// the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scenario_path: PathBuf,
    pub detector_config_path: Option<PathBuf>,
    pub external_detections_path: Option<PathBuf>,
    pub train_size: usize,
    pub test_size: usize,
    pub validate_size: usize,
    pub f1_threshold: f64,
    pub iou_threshold: f64,
    pub methods: Vec<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Monte Carlo samples for feature-space coverage.
    pub coverage_samples: usize,
    pub max_rejections: u64,
    /// Weight classes inversely to their frequency when fitting.
    pub balance_labels: bool,
    pub tree: TreeConfig,
    pub forest: ForestConfig,
    pub anchors: AnchorConfig,
    /// Tree used to mine activation patterns.
    pub pattern_tree: TreeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scenario_path: PathBuf::new(),
            detector_config_path: None,
            external_detections_path: None,
            train_size: 950,
            test_size: 950,
            validate_size: 500,
            f1_threshold: 0.8,
            iou_threshold: 0.5,
            methods: methods_default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            coverage_samples: 10_000,
            max_rejections: 10_000,
            balance_labels: true,
            tree: TreeConfig::default(),
            forest: ForestConfig::default(),
            anchors: AnchorConfig::default(),
            pattern_tree: TreeConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Reads a config file and makes its paths absolute.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(dir);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.scenario_path);
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.detector_config_path {
            fix(p);
        }
        if let Some(p) = &mut self.external_detections_path {
            fix(p);
        }
    }

    pub fn provenances(&self) -> Result<Vec<Provenance>, PipelineError> {
        let mut out = Vec::new();
        for m in &self.methods {
            let p =
                Provenance::parse(m).ok_or_else(|| PipelineError::Config(format!("unknown method `{m}`")))?;
            if !out.contains(&p) {
                out.push(p);
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.train_size == 0 || self.test_size == 0 || self.validate_size == 0 {
            return bad("sample sizes must be at least 1");
        }
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if self.detector_config_path.is_some() == self.external_detections_path.is_some() {
            return bad("set exactly one of detector_config_path and external_detections_path");
        }
        if self.tree.min_bucket > self.tree.min_split {
            return bad("tree.min_bucket must not exceed tree.min_split");
        }
        let a = &self.anchors;
        if !(0.0 < a.precision_threshold && a.precision_threshold < 1.0)
            || !(0.0 < a.delta && a.delta < 1.0)
            || a.epsilon <= 0.0
            || a.beam_width == 0
        {
            return bad("anchor parameters out of range");
        }
        self.provenances().map(|_| ())
    }
}
