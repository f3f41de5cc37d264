// Multi-scale features from the frozen backbone.
//
// Each selected stage is resized to the target size and the stages are
// stacked along channels.

use sivt::backbone::{build_backbone, extract_features, preprocess, FeatureExtractor};
use sivt::ModelConfig;

pub fn run(config: &ModelConfig) -> sivt::Result<()> {
    let backbone = build_backbone(&config.backbone)?;
    println!("stage widths {:?}, selected {:?}", backbone.stage_channels(), config.backbone.layers);
    let size = config.input_resolution as u32;
    let raw = image::RgbImage::from_fn(size, size, |x, y| {
        let v = ((x as f64 * 0.3).sin() * (y as f64 * 0.2).cos() * 100.0 + 128.0) as u8;
        image::Rgb([v, 255 - v, 128])
    });
    let img = preprocess(&raw, config)?;
    let f = extract_features(&img, &config.backbone, &backbone)?;
    let (h, w, c) = f.shape();
    let mean = f.data.mean().unwrap_or(0.0);
    println!("feature map {h}x{w}x{c}, mean {mean:.4}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> sivt::Result<()> {
    run(&ModelConfig::toy())
}
