//! JSON run configuration. Every field is optional; command-line flags win
//! over the file, and the file wins over built-in defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use taskmerge_core::adaptation::AdaRankConfig;
use taskmerge_core::suites::ClassificationParams;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub matrix_include: Option<Vec<String>>,
    pub matrix_exclude: Option<Vec<String>>,
    pub merge: MergeSection,
    pub index: IndexSection,
    pub analyze: AnalyzeSection,
    pub sweep: SweepSection,
    pub certify: CertifySection,
    pub adapt: AdaptSection,
    pub samplesize: SampleSizeSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSection {
    pub pretrained: Option<PathBuf>,
    pub finetuned: Option<Vec<PathBuf>>,
    pub origin: Option<String>,
    pub ratio: Option<f64>,
    pub lambda: Option<f64>,
    pub coefficients: Option<PathBuf>,
    pub rankmin_steps: Option<usize>,
    pub rankmin_step_size: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub pretrained: Option<PathBuf>,
    pub finetuned: Option<Vec<PathBuf>>,
    pub task: Option<usize>,
    pub ratio: Option<f64>,
    pub float_bits: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub pretrained: Option<PathBuf>,
    pub finetuned: Option<Vec<PathBuf>>,
    pub ks: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Option<Vec<f64>>,
    pub ratios: Option<Vec<f64>>,
    pub origin: Option<String>,
    pub suite: Option<ClassificationParams>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    pub count: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSection {
    pub method: Option<String>,
    pub lr: Option<f64>,
    pub iters: Option<usize>,
    pub init_lambda: Option<f64>,
    pub adarank: Option<AdaRankConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSizeSection {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub eps: Option<f64>,
    pub z: Option<f64>,
}

pub fn load(path: &Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
}
