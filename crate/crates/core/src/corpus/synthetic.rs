//! Synthetic features-to-report task: findings planted on a grid of regions,
//! with deterministic templated report text. Stands in for real image
//! datasets so the whole pipeline can train and evaluate on a desk.

use super::{CorpusError, CorpusResult, FeatureSet};
use crate::tensor::RngState;

const FINDING_TYPES: [&str; 8] = [
    "nodule",
    "opacity",
    "effusion",
    "consolidation",
    "mass",
    "atelectasis",
    "fracture",
    "edema",
];

const ROW_WORDS: [&str; 5] = ["top", "upper", "middle", "lower", "bottom"];
const COL_WORDS: [&str; 5] = ["left", "nearleft", "center", "nearright", "right"];

/// Configuration of the generator. Regions form a `grid x grid` lattice;
/// each finding plants a type-specific basis vector in its cell's feature
/// row, on top of Gaussian noise of scale `noise_sigma`.
#[derive(Clone, Debug)]
pub struct SyntheticTaskConfig {
    pub grid: usize,
    pub finding_types: usize,
    pub max_findings: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub images: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            grid: 4,
            finding_types: 6,
            max_findings: 4,
            feature_dim: 32,
            noise_sigma: 0.05,
            images: 200,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn regions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> CorpusResult<()> {
        if self.grid == 0 || self.grid > ROW_WORDS.len() {
            return Err(CorpusError::InvalidConfig(format!(
                "grid must be 1..={}, got {}",
                ROW_WORDS.len(),
                self.grid
            )));
        }
        if self.finding_types < 2 || self.finding_types > FINDING_TYPES.len() {
            return Err(CorpusError::InvalidConfig(format!(
                "finding_types must be 2..={}, got {}",
                FINDING_TYPES.len(),
                self.finding_types
            )));
        }
        if self.feature_dim < self.finding_types {
            return Err(CorpusError::InvalidConfig(
                "feature_dim must be at least finding_types".into(),
            ));
        }
        if self.max_findings > self.regions() {
            return Err(CorpusError::InvalidConfig(
                "max_findings cannot exceed the number of grid cells".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(CorpusError::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One generated image: features, the planted findings as (cell, type), and
/// the templated report text.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticExample {
    pub features: FeatureSet,
    pub findings: Vec<(usize, usize)>,
    pub text: String,
}

/// Report sentence for one finding, in grid words.
fn finding_sentence(grid: usize, cell: usize, kind: usize) -> String {
    let (row, col) = (cell / grid, cell % grid);
    format!(
        "there is a {} in the {} {} region .",
        FINDING_TYPES[kind], ROW_WORDS[row], COL_WORDS[col]
    )
}

/// Rebuild the report text from planted findings (canonical cell order).
pub fn report_text(grid: usize, findings: &[(usize, usize)]) -> String {
    if findings.is_empty() {
        return "no findings .".to_string();
    }
    findings
        .iter()
        .map(|&(cell, kind)| finding_sentence(grid, cell, kind))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generate the full dataset, fully determined by the config seed.
pub fn generate_synthetic_dataset(
    cfg: &SyntheticTaskConfig,
) -> CorpusResult<Vec<SyntheticExample>> {
    cfg.validate()?;
    let n = cfg.regions();
    let base = RngState::new(cfg.seed);
    let mut out = Vec::with_capacity(cfg.images);
    for img in 0..cfg.images {
        let mut rng = base.derive(img as u64);
        let image_id = format!("img{:04}", img);

        let k = rng.below(cfg.max_findings + 1);
        let mut cells: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut cells);
        let mut chosen: Vec<usize> = cells[..k].to_vec();
        chosen.sort_unstable();
        let findings: Vec<(usize, usize)> = chosen
            .into_iter()
            .map(|cell| (cell, rng.below(cfg.finding_types)))
            .collect();

        let mut values = vec![0.0; n * cfg.feature_dim];
        for v in values.iter_mut() {
            *v = cfg.noise_sigma * rng.normal();
        }
        for &(cell, kind) in &findings {
            values[cell * cfg.feature_dim + kind] += 1.0;
        }

        out.push(SyntheticExample {
            features: FeatureSet::new(&image_id, n, cfg.feature_dim, values),
            text: report_text(cfg.grid, &findings),
            findings,
        });
    }
    Ok(out)
}

/// Recover the planted findings from a noise-free feature matrix. Used to
/// verify that reports are a deterministic function of the features.
pub fn recover_findings(features: &FeatureSet, finding_types: usize) -> Vec<(usize, usize)> {
    let mut findings = Vec::new();
    for cell in 0..features.n_regions {
        let row = features.row(cell);
        let (kind, &peak) = row[..finding_types]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if peak >= 0.5 {
            findings.push((cell, kind));
        }
    }
    findings
}
