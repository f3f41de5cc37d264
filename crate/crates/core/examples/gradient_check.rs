// Analytic gradients against central differences on a small model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sivt::backbone::FeatureMap;
use sivt::induction::seeded_partition;
use sivt::model::SivtModel;
use sivt::nn::ParamTree;
use sivt::ModelConfig;

/// Largest relative error over one random direction per parameter tensor.
pub fn run(config: &ModelConfig, seed: u64) -> sivt::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = SivtModel::new(config.clone())?;
    let t = config.backbone.target_size;
    let c = config.backbone.expected_channels;
    let feature = FeatureMap::new(ndarray::Array3::from_shape_simple_fn((t, t, c), || rng.random::<f64>()))?;
    let part = seeded_partition(config.num_tokens(), config.model.subsets, seed)?;
    let (_, grads) = model.loss_and_grad(&feature, Some(&part))?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, (name, g)) in grads.tensors().into_iter().enumerate() {
        let dir = g.mapv(|_| rng.random_range(-1.0..1.0));
        let analytic = (&g * &dir).sum();
        let shifted = |sign: f64| -> sivt::Result<f64> {
            let mut m = model.clone();
            m.params.tensors_mut()[k].1.scaled_add(sign * h, &dir);
            Ok(m.loss_and_grad(&feature, Some(&part))?.0.total)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-300);
        println!("{name:<28} analytic {analytic:+.6e} numeric {numeric:+.6e} rel {rel:.1e}");
        worst = worst.max(rel);
    }
    println!("max relative error {worst:.2e}");
    Ok(worst)
}

#[allow(dead_code)]
fn main() -> sivt::Result<()> {
    let mut config = ModelConfig::toy();
    config.model.encoder_depth = 1;
    config.model.decoder_depth = 1;
    run(&config, 0).map(|_| ())
}
