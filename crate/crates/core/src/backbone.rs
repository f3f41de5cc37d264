//! Frozen multi-scale feature extraction.
//!
//! A backbone is a list of convolution stages. The outputs of the selected
//! stages are bilinearly resized to a common spatial size and concatenated
//! along channels into a [`FeatureMap`]. Extractors are immutable once
//! built; nothing in this module can update their weights.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::config::{BackboneKind, BackboneSpec, ModelConfig};
use crate::error::{Result, SivtError};

/// Preprocessed image, `H×W×3`, channel-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

/// Fused multi-scale features, `H×W×C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SivtError::NonFinite {
                stage: "feature map".into(),
            });
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, channels)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.channels())
    }
}

/// Decode an image file into an 8-bit RGB raster. Grayscale and RGBA
/// files are converted to RGB.
pub fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|e| SivtError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Resize to the configured resolution and normalize with the configured
/// per-channel mean and std (values first scaled to `[0, 1]`).
pub fn preprocess(raw: &image::RgbImage, config: &ModelConfig) -> Result<ImageTensor> {
    let (w, h) = raw.dimensions();
    preprocess_raw(h as usize, w as usize, 3, raw.as_raw(), config)
}

/// Same as [`preprocess`] on an interleaved `u8` buffer with an explicit
/// channel count. Anything other than three channels is rejected.
pub fn preprocess_raw(
    height: usize,
    width: usize,
    channels: usize,
    pixels: &[u8],
    config: &ModelConfig,
) -> Result<ImageTensor> {
    let decode_err = |reason: String| SivtError::Decode {
        path: "<memory>".into(),
        reason,
    };
    if channels != 3 {
        return Err(decode_err(format!("expected 3 channels, got {channels}")));
    }
    if height == 0 || width == 0 {
        return Err(decode_err("image has no pixels".into()));
    }
    if pixels.len() != height * width * 3 {
        return Err(decode_err(format!(
            "buffer length {} does not match {height}×{width}×3",
            pixels.len()
        )));
    }
    let unit = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
        pixels[(y * width + x) * 3 + c] as f64 / 255.0
    });
    Ok(normalize(unit, config))
}

/// Resize and normalize an image already scaled to `[0, 1]`.
pub fn normalize(unit: Array3<f64>, config: &ModelConfig) -> ImageTensor {
    let res = config.input_resolution;
    let mut data = resize_bilinear(&unit, res, res);
    for c in 0..3 {
        let (m, s) = (config.mean[c], config.std[c]);
        data.index_axis_mut(Axis(2), c).mapv_inplace(|v| (v - m) / s);
    }
    ImageTensor { data }
}

/// Bilinear resize of an `H×W×C` array with half-pixel centers and edge
/// clamping. Same-size resizes return an exact copy.
pub fn resize_bilinear(input: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (in_h, in_w, c) = input.dim();
    if in_h == out_h && in_w == out_w {
        return input.clone();
    }
    let ys = sample_coords(in_h, out_h);
    let xs = sample_coords(in_w, out_w);
    let mut out = Array3::zeros((out_h, out_w, c));
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = input[[y0, x0, ch]] * (1.0 - fx) + input[[y0, x1, ch]] * fx;
                let bottom = input[[y1, x0, ch]] * (1.0 - fx) + input[[y1, x1, ch]] * fx;
                out[[oy, ox, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn sample_coords(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Silu => v / (1.0 + (-v).exp()),
            Activation::Identity => v,
        }
    }
}

/// Per-layer metadata stored in a weights archive. Kernel size and channel
/// counts come from the weight tensor shape `[out, in/groups, k, k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayout {
    pub name: String,
    pub stride: usize,
    pub padding: usize,
    #[serde(default = "one")]
    pub groups: usize,
    pub activation: Activation,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLayout {
    pub layers: Vec<ConvLayout>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackboneLayout {
    pub stages: Vec<StageLayout>,
}

/// 2-D convolution over `H×W×C` arrays. Batch-norm must already be folded
/// into the weights and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub layout: ConvLayout,
    /// `[out, in/groups, k, k]`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.layout.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let (out, _, kh, kw) = self.weight.dim();
        let g = self.layout.groups;
        if g == 0 || out % g != 0 || kh != kw || self.layout.stride == 0 || self.bias.len() != out {
            return Err(SivtError::Config(format!(
                "conv layer `{}` has inconsistent shape {:?} for {g} groups",
                self.layout.name,
                self.weight.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let (h, w, _) = input.dim();
        let (out_c, cin_g, k, _) = self.weight.dim();
        let stride = self.layout.stride;
        let pad = self.layout.padding as isize;
        let groups = self.layout.groups;
        let cout_g = out_c / groups;
        let oh = (h + 2 * self.layout.padding - k) / stride + 1;
        let ow = (w + 2 * self.layout.padding - k) / stride + 1;
        let mut out = Array3::zeros((oh, ow, out_c));
        for g in 0..groups {
            let mut cols = Array2::zeros((oh * ow, k * k * cin_g));
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = oy * ow + ox;
                    for ky in 0..k {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin_g {
                                cols[[row, (ky * k + kx) * cin_g + ci]] =
                                    input[[iy as usize, ix as usize, g * cin_g + ci]];
                            }
                        }
                    }
                }
            }
            let wmat = Array2::from_shape_fn((k * k * cin_g, cout_g), |(r, co)| {
                let (kk, ci) = (r / cin_g, r % cin_g);
                self.weight[[g * cout_g + co, ci, kk / k, kk % k]]
            });
            let res = cols.dot(&wmat);
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout_g {
                        let oc = g * cout_g + co;
                        out[[oy, ox, oc]] = self
                            .layout
                            .activation
                            .apply(res[[oy * ow + ox, co]] + self.bias[oc]);
                    }
                }
            }
        }
        out
    }
}

/// Anything that maps a preprocessed image to a list of stage activations.
pub trait FeatureExtractor: Send + Sync {
    /// Output channel count of every stage, in order.
    fn stage_channels(&self) -> Vec<usize>;

    /// Run the stages up to and including `last`, returning every output.
    fn stages(&self, image: &ImageTensor, last: usize) -> Vec<Array3<f64>>;

    /// Snapshot of all weights, for persistence and frozenness checks.
    fn parameter_archive(&self) -> TensorArchive;
}

/// Sequential convolution stages.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBackbone {
    pub stages: Vec<Vec<Conv2d>>,
}

impl ConvBackbone {
    pub fn layout(&self) -> BackboneLayout {
        BackboneLayout {
            stages: self
                .stages
                .iter()
                .map(|layers| StageLayout {
                    layers: layers.iter().map(|l| l.layout.clone()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuild from an archive holding a `layout` TOML section and
    /// `<name>.weight` / `<name>.bias` tensors for every layer.
    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let layout: BackboneLayout = toml::from_str(archive.text("layout")?)
            .map_err(|e| SivtError::Config(format!("backbone layout: {}", e.message())))?;
        let mut stages = Vec::with_capacity(layout.stages.len());
        let mut channels = 3;
        for stage in layout.stages {
            let mut layers = Vec::with_capacity(stage.layers.len());
            for lay in stage.layers {
                let w = archive
                    .tensors
                    .get(&format!("{}.weight", lay.name))
                    .ok_or_else(|| SivtError::Checkpoint(format!("missing `{}.weight`", lay.name)))?;
                let weight = w
                    .clone()
                    .into_dimensionality()
                    .map_err(|_| SivtError::Checkpoint(format!("`{}.weight` is not 4-D", lay.name)))?;
                let bias = match archive.tensors.get(&format!("{}.bias", lay.name)) {
                    Some(b) => b.clone().into_dimensionality().map_err(|_| {
                        SivtError::Checkpoint(format!("`{}.bias` is not 1-D", lay.name))
                    })?,
                    None => Array1::zeros(w.shape()[0]),
                };
                let conv = Conv2d {
                    layout: lay,
                    weight,
                    bias,
                };
                conv.validate()?;
                if conv.in_channels() != channels {
                    return Err(SivtError::Config(format!(
                        "layer `{}` expects {} input channels, previous layer gives {channels}",
                        conv.layout.name,
                        conv.in_channels()
                    )));
                }
                channels = conv.out_channels();
                layers.push(conv);
            }
            if layers.is_empty() {
                return Err(SivtError::Config("backbone stage without layers".into()));
            }
            stages.push(layers);
        }
        Ok(Self { stages })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}

impl FeatureExtractor for ConvBackbone {
    fn stage_channels(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|layers| layers.last().map_or(0, Conv2d::out_channels))
            .collect()
    }

    fn stages(&self, image: &ImageTensor, last: usize) -> Vec<Array3<f64>> {
        let mut outputs = Vec::with_capacity(last + 1);
        let mut x = image.data.clone();
        for layers in self.stages.iter().take(last + 1) {
            for layer in layers {
                x = layer.forward(&x);
            }
            outputs.push(x.clone());
        }
        outputs
    }

    fn parameter_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::new();
        archive.insert_text(
            "layout",
            toml::to_string(&self.layout()).expect("layout serializes"),
        );
        for layer in self.stages.iter().flatten() {
            archive.insert(
                format!("{}.weight", layer.layout.name),
                layer.weight.clone().into_dyn(),
            );
            archive.insert(
                format!("{}.bias", layer.layout.name),
                layer.bias.clone().into_dyn(),
            );
        }
        archive
    }
}

/// Channel widths of the synthetic stages: the explicit list, or an
/// even split of `expected_channels` over the selected stages.
fn synthetic_stage_channels(spec: &BackboneSpec) -> Vec<usize> {
    if !spec.stage_channels.is_empty() {
        return spec.stage_channels.clone();
    }
    let n_stages = spec.layers.iter().max().map_or(1, |m| m + 1);
    let mut channels = vec![16; n_stages];
    let mut selected: Vec<usize> = spec.layers.clone();
    selected.sort_unstable();
    selected.dedup();
    let share = spec.expected_channels / selected.len();
    let rem = spec.expected_channels % selected.len();
    for (j, &stage) in selected.iter().enumerate() {
        channels[stage] = share + usize::from(j < rem);
    }
    channels
}

/// Fixed-seed random backbone: per stage a stride-2 3×3 convolution
/// followed by a stride-1 3×3 convolution, He-normal weights, ReLU.
pub fn make_synthetic_backbone(seed: u64, spec: &BackboneSpec) -> ConvBackbone {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cin = 3;
    let mut stages = Vec::new();
    for (i, &cout) in synthetic_stage_channels(spec).iter().enumerate() {
        let mut layers = Vec::with_capacity(2);
        for (j, stride) in [2usize, 1].into_iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            let weight = Array4::from_shape_simple_fn((cout, cin, 3, 3), || normal.sample(&mut rng));
            layers.push(Conv2d {
                layout: ConvLayout {
                    name: format!("stage{i}.conv{j}"),
                    stride,
                    padding: 1,
                    groups: 1,
                    activation: Activation::Relu,
                },
                weight,
                bias: Array1::zeros(cout),
            });
            cin = cout;
        }
        stages.push(layers);
    }
    ConvBackbone { stages }
}

/// Build the extractor named by a backbone spec.
pub fn build_backbone(spec: &BackboneSpec) -> Result<ConvBackbone> {
    spec.validate()?;
    let backbone = match spec.kind {
        BackboneKind::SyntheticDeterministic => make_synthetic_backbone(spec.seed, spec),
        BackboneKind::PretrainedCnn => {
            let path = spec.weights.as_ref().expect("validated");
            ConvBackbone::load(path)?
        }
    };
    check_selection(&backbone, spec)?;
    Ok(backbone)
}

fn check_selection(extractor: &dyn FeatureExtractor, spec: &BackboneSpec) -> Result<()> {
    let channels = extractor.stage_channels();
    let mut total = 0;
    for &stage in &spec.layers {
        total += channels.get(stage).ok_or_else(|| {
            SivtError::Config(format!(
                "stage {stage} not present in a backbone with {} stages",
                channels.len()
            ))
        })?;
    }
    if total != spec.expected_channels {
        return Err(SivtError::Config(format!(
            "selected stages give {total} channels, expected {}",
            spec.expected_channels
        )));
    }
    Ok(())
}

/// Resize the selected stage outputs to the target size and concatenate
/// them along channels.
pub fn extract_features(
    image: &ImageTensor,
    spec: &BackboneSpec,
    extractor: &dyn FeatureExtractor,
) -> Result<FeatureMap> {
    check_selection(extractor, spec)?;
    let last = *spec.layers.iter().max().expect("validated non-empty");
    let outputs = extractor.stages(image, last);
    let t = spec.target_size;
    let mut data = Array3::zeros((t, t, spec.expected_channels));
    let mut offset = 0;
    for &stage in &spec.layers {
        let resized = resize_bilinear(&outputs[stage], t, t);
        let c = resized.shape()[2];
        data.slice_mut(s![.., .., offset..offset + c]).assign(&resized);
        offset += c;
    }
    FeatureMap::new(data)
}

/// Flatten an archive's tensors into one vector, for bit-level comparisons.
pub fn archive_fingerprint(archive: &TensorArchive) -> Vec<u64> {
    archive
        .tensors
        .values()
        .flat_map(|t: &ArrayD<f64>| t.iter().map(|v| v.to_bits()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(target: usize, channels: usize) -> BackboneSpec {
        BackboneSpec {
            layers: vec![0, 1],
            target_size: target,
            expected_channels: channels,
            stage_channels: vec![],
            ..BackboneSpec::default()
        }
    }

    fn test_image(res: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        ImageTensor {
            data: Array3::from_shape_simple_fn((res, res, 3), || normal.sample(&mut rng)),
        }
    }

    #[test]
    fn preprocess_identity_resize_and_mean_image() {
        let mut config = ModelConfig::toy();
        config.mean = [10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0];
        let raw = image::RgbImage::from_pixel(64, 64, image::Rgb([10, 20, 30]));
        let t = preprocess(&raw, &config).unwrap();
        assert_eq!(t.data.dim(), (64, 64, 3));
        assert!(t.data.iter().all(|v| v.abs() < 1e-12));

        let big = image::RgbImage::from_pixel(128, 96, image::Rgb([1, 2, 3]));
        assert_eq!(preprocess(&big, &config).unwrap().data.dim(), (64, 64, 3));
    }

    #[test]
    fn preprocess_rejects_non_rgb() {
        let config = ModelConfig::toy();
        let err = preprocess_raw(2, 2, 1, &[0; 4], &config).unwrap_err();
        assert!(matches!(err, SivtError::Decode { .. }));
        assert!(preprocess_raw(0, 0, 3, &[], &config).is_err());
    }

    #[test]
    fn resize_same_size_is_exact_and_constants_survive() {
        let x = test_image(8, 1).data;
        assert_eq!(resize_bilinear(&x, 8, 8), x);
        let c = Array3::from_elem((5, 7, 2), 0.3);
        let up = resize_bilinear(&c, 13, 11);
        assert!(up.iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn synthetic_backbone_shapes_and_channel_sum() {
        let spec = small_spec(32, 64);
        let bb = make_synthetic_backbone(0, &spec);
        let img = test_image(64, 3);
        let f = extract_features(&img, &spec, &bb).unwrap();
        assert_eq!(f.shape(), (32, 32, 64));
        let ch = bb.stage_channels();
        assert_eq!(ch[0] + ch[1], 64);
    }

    #[test]
    fn synthetic_backbone_determinism_and_seed_dependence() {
        let spec = small_spec(8, 20);
        let a = make_synthetic_backbone(7, &spec);
        let b = make_synthetic_backbone(7, &spec);
        let c = make_synthetic_backbone(8, &spec);
        assert_eq!(a.parameter_archive().to_bytes(), b.parameter_archive().to_bytes());
        assert_ne!(
            archive_fingerprint(&a.parameter_archive()),
            archive_fingerprint(&c.parameter_archive())
        );
        let img = test_image(32, 5);
        let fa = extract_features(&img, &spec, &a).unwrap();
        let fb = extract_features(&img, &spec, &b).unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn one_pixel_change_changes_features() {
        let spec = small_spec(8, 20);
        let bb = make_synthetic_backbone(1, &spec);
        let img = test_image(32, 9);
        let mut other = img.clone();
        other.data[[10, 12, 1]] += 0.5;
        let fa = extract_features(&img, &spec, &bb).unwrap();
        let fb = extract_features(&other, &spec, &bb).unwrap();
        assert!(fa.data.iter().zip(fb.data.iter()).any(|(a, b)| a != b));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let spec = small_spec(8, 20);
        let bb = make_synthetic_backbone(1, &spec);
        let mut wrong = spec.clone();
        wrong.expected_channels = 21;
        let img = test_image(32, 9);
        assert!(matches!(
            extract_features(&img, &wrong, &bb),
            Err(SivtError::Config(_))
        ));
        let mut missing = spec;
        missing.layers = vec![0, 9];
        assert!(extract_features(&img, &missing, &bb).is_err());
    }

    #[test]
    fn weights_archive_round_trip_and_missing_file() {
        let spec = small_spec(8, 20);
        let bb = make_synthetic_backbone(2, &spec);
        let back = ConvBackbone::from_archive(&bb.parameter_archive()).unwrap();
        assert_eq!(back, bb);

        let mut pretrained = spec;
        pretrained.kind = BackboneKind::PretrainedCnn;
        pretrained.weights = Some("/nonexistent/weights.sivt".into());
        assert!(matches!(build_backbone(&pretrained), Err(SivtError::Io { .. })));
    }

    #[test]
    fn grouped_conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let conv = Conv2d {
            layout: ConvLayout {
                name: "dw".into(),
                stride: 2,
                padding: 1,
                groups: 2,
                activation: Activation::Identity,
            },
            weight: Array4::from_shape_simple_fn((4, 1, 3, 3), || normal.sample(&mut rng)),
            bias: Array1::from_vec(vec![0.1, 0.2, 0.3, 0.4]),
        };
        let x = Array3::from_shape_simple_fn((5, 5, 2), || normal.sample(&mut rng));
        let y = conv.forward(&x);
        assert_eq!(y.dim(), (3, 3, 4));
        for oy in 0..3 {
            for ox in 0..3 {
                for oc in 0..4 {
                    let g = oc / 2;
                    let mut acc = conv.bias[oc];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                acc += conv.weight[[oc, 0, ky, kx]] * x[[iy as usize, ix as usize, g]];
                            }
                        }
                    }
                    assert!((acc - y[[oy, ox, oc]]).abs() < 1e-12);
                }
            }
        }
    }
}
