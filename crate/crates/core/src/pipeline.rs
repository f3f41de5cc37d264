//! Inference, evaluation and cost reports on top of a trained model.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;

use crate::backbone::{build_backbone, extract_features, load_rgb, preprocess, ConvBackbone, FeatureMap, ImageTensor};
use crate::config::{ModelConfig, ReconstructionMode};
use crate::data::{load_mask, DatasetIndex, Split};
use crate::error::{Result, SivtError};
use crate::induction::seeded_partition;
use crate::metrics::{evaluate_run, EvalResult, ImageResult};
use crate::model::{count_flops, count_parameters, SivtModel};
use crate::objective::{anomaly_map, export_map, image_score, postprocess, AnomalyMap};
use crate::seed::derive_seed;
use crate::train::TrainState;

/// Frozen backbone plus trained model.
pub struct Detector {
    pub model: SivtModel,
    pub backbone: ConvBackbone,
}

/// Score and map for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub map: AnomalyMap,
    pub score: f64,
}

impl Detector {
    pub fn new(model: SivtModel) -> Result<Self> {
        let backbone = build_backbone(&model.config.backbone)?;
        Ok(Self { model, backbone })
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        Self::new(TrainState::load(path)?.model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn features(&self, image: &ImageTensor) -> Result<FeatureMap> {
        extract_features(image, &self.config().backbone, &self.backbone)
    }

    /// Partition seed for ensemble member `k`.
    pub fn partition_seed(&self, k: usize) -> u64 {
        derive_seed(self.config().partition.inference_seed, &[k as u64])
    }

    /// Raw (feature-resolution) map. Under self-induction the maps of
    /// `ensemble` partitions are averaged.
    pub fn raw_map(&self, feature: &FeatureMap, vanilla: bool, ensemble: usize) -> Result<Array2<f64>> {
        let eps = self.config().scoring.cosine_eps;
        if vanilla {
            return anomaly_map(feature, &self.model.forward_vanilla(feature)?, eps);
        }
        if ensemble == 0 {
            return Err(SivtError::Parameter("ensemble size must be at least 1".into()));
        }
        let c = self.config();
        let mut acc = Array2::zeros((feature.height(), feature.width()));
        for k in 0..ensemble {
            let part = seeded_partition(c.num_tokens(), c.model.subsets, self.partition_seed(k))?;
            acc += &anomaly_map(feature, &self.model.forward(feature, &part)?, eps)?;
        }
        Ok(acc / ensemble as f64)
    }

    pub fn detect_feature(&self, feature: &FeatureMap, vanilla: bool, ensemble: usize) -> Result<Detection> {
        let raw = self.raw_map(feature, vanilla, ensemble)?;
        let c = self.config();
        let map = postprocess(&raw, c.input_resolution, c.input_resolution, c.scoring.sigma);
        let score = image_score(&map);
        Ok(Detection { map, score })
    }

    pub fn detect_path(&self, path: &Path, vanilla: bool, ensemble: usize) -> Result<Detection> {
        let img = preprocess(&load_rgb(path)?, self.config())?;
        self.detect_feature(&self.features(&img)?, vanilla, ensemble)
    }

    fn default_vanilla(&self) -> bool {
        self.config().mode == ReconstructionMode::Vanilla
    }

    /// Score every path, write `<out>/<index>_<stem>.{png,txt,f64}` maps
    /// and `<out>/scores.csv`.
    pub fn infer(&self, inputs: &[PathBuf], out: &Path, ensemble: Option<usize>) -> Result<Vec<(PathBuf, f64)>> {
        fs::create_dir_all(out).map_err(|e| SivtError::io(out, e))?;
        let k = ensemble.unwrap_or(self.config().partition.ensemble);
        let vanilla = self.default_vanilla();
        let detections: Vec<Result<Detection>> =
            inputs.par_iter().map(|p| self.detect_path(p, vanilla, k)).collect();
        let mut csv = String::from("path,score\n");
        let mut scores = Vec::with_capacity(inputs.len());
        for (i, (path, det)) in inputs.iter().zip(detections).enumerate() {
            let det = det?;
            let stem = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            export_map(&det.map.data, &out.join(format!("{i:04}_{stem}")))?;
            writeln!(csv, "{},{}", path.display(), det.score).expect("string write");
            scores.push((path.clone(), det.score));
        }
        let table = out.join("scores.csv");
        fs::write(&table, csv).map_err(|e| SivtError::io(&table, e))?;
        Ok(scores)
    }

    /// Score the test split and compute image- and pixel-level metrics.
    /// Masks are resampled to the map resolution.
    pub fn evaluate(&self, index: &DatasetIndex, vanilla: Option<bool>) -> Result<EvalResult> {
        let vanilla = vanilla.unwrap_or_else(|| self.default_vanilla());
        let k = self.config().partition.ensemble;
        let res = self.config().input_resolution;
        let test = index.split(Split::Test);
        if test.is_empty() {
            return Err(SivtError::Index("test split is empty".into()));
        }
        let results: Vec<Result<ImageResult>> = test
            .par_iter()
            .map(|r| {
                let det = self.detect_path(&r.image, vanilla, k)?;
                let mask = match &r.mask {
                    Some(m) => Some(load_mask(m, res, res)?.into_iter().collect()),
                    None => None,
                };
                Ok(ImageResult {
                    category: r.category.clone(),
                    score: det.score,
                    map: det.map.data.into_iter().collect(),
                    mask,
                    is_anomalous: r.is_anomalous(),
                })
            })
            .collect();
        evaluate_run(&results.into_iter().collect::<Result<Vec<_>>>()?)
    }
}

/// Quantity varied by a cost sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Subsets,
    PatchSize,
}

impl std::str::FromStr for Sweep {
    type Err = SivtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "n" | "subsets" => Ok(Self::Subsets),
            "P" | "p" | "patch" => Ok(Self::PatchSize),
            other => Err(SivtError::Parameter(format!("unknown sweep `{other}`, expected N or P"))),
        }
    }
}

/// CSV cost table: one row per setting with parameter count and MACs for
/// both routes. Settings the configuration cannot support are skipped.
pub fn flops_report(config: &ModelConfig, sweep: Option<Sweep>) -> Result<String> {
    config.validate()?;
    let variants: Vec<ModelConfig> = match sweep {
        None => vec![config.clone()],
        Some(Sweep::Subsets) => [2, 4, 6, 8]
            .into_iter()
            .map(|n| {
                let mut c = config.clone();
                c.model.subsets = n;
                c
            })
            .collect(),
        Some(Sweep::PatchSize) => [1, 2, 4, 8]
            .into_iter()
            .map(|p| {
                let mut c = config.clone();
                c.model.patch_size = p;
                c
            })
            .collect(),
    };
    let mut out = String::from("subsets,patch_size,tokens,parameters,sivt_macs,vanilla_macs\n");
    for c in variants.into_iter().filter(|c| c.validate().is_ok()) {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            c.model.subsets,
            c.model.patch_size,
            c.num_tokens(),
            count_parameters(&c),
            count_flops(&c, false).total(),
            count_flops(&c, true).total()
        )
        .expect("string write");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.input_resolution = 32;
        c.backbone.target_size = 8;
        c.model.embed_dim = 16;
        c.model.heads = 2;
        c.model.encoder_depth = 1;
        c.model.decoder_depth = 1;
        c
    }

    #[test]
    fn ensemble_map_is_mean_of_members() {
        let det = Detector::new(SivtModel::new(tiny()).unwrap()).unwrap();
        let img = preprocess(&image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([x as u8 * 7, y as u8 * 5, 90])), det.config()).unwrap();
        let f = det.features(&img).unwrap();
        let joint = det.detect_feature(&f, false, 4).unwrap();
        let c = det.config();
        let mut mean = Array2::<f64>::zeros((32, 32));
        for k in 0..4 {
            let part = seeded_partition(c.num_tokens(), c.model.subsets, det.partition_seed(k)).unwrap();
            let raw = anomaly_map(&f, &det.model.forward(&f, &part).unwrap(), c.scoring.cosine_eps).unwrap();
            mean += &postprocess(&raw, 32, 32, c.scoring.sigma).data;
        }
        mean /= 4.0;
        let diff = (&joint.map.data - &mean).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn infer_and_evaluate_on_synthetic() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            families: 2,
            image_size: 32,
            train_per_family: 2,
            test_good_per_family: 2,
            test_defect_per_family: 2,
            ..SyntheticSpec::default()
        };
        let index = generate_synthetic(&spec, &dir.path().join("data")).unwrap();
        let det = Detector::new(SivtModel::new(tiny()).unwrap()).unwrap();
        let paths: Vec<PathBuf> = index.split(Split::Test).iter().map(|r| r.image.clone()).collect();
        let scores = det.infer(&paths, &dir.path().join("out"), Some(1)).unwrap();
        assert_eq!(scores.len(), 8);
        let csv = fs::read_to_string(dir.path().join("out/scores.csv")).unwrap();
        assert!(csv.starts_with("path,score\n"));
        assert_eq!(csv.lines().count(), 9);
        let eval = det.evaluate(&index, None).unwrap();
        assert_eq!(eval.per_category.len(), 2);
        assert!(eval.to_csv().starts_with("category,"));
    }

    #[test]
    fn flops_sweep_rows() {
        let report = flops_report(&ModelConfig::toy(), Some(Sweep::Subsets)).unwrap();
        let rows: Vec<&str> = report.lines().collect();
        assert_eq!(rows.len(), 5);
        let report = flops_report(&ModelConfig::toy(), Some(Sweep::PatchSize)).unwrap();
        assert_eq!(report.lines().count(), 5);
        assert!("Q".parse::<Sweep>().is_err());
    }
}
