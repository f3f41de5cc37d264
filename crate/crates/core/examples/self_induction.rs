// One self-induction pass by hand.
//
// The tokens are split into disjoint subsets; each hybrid sequence swaps
// one subset for induction tokens. Perturbing the real tokens of subset
// `i` leaves the reassembled latents at subset `i` bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sivt::backbone::FeatureMap;
use sivt::induction::{build_hybrid_sequences, seeded_partition};
use sivt::model::SivtModel;
use sivt::ModelConfig;

pub fn run(config: &ModelConfig) -> sivt::Result<()> {
    let model = SivtModel::new(config.clone())?;
    let l = config.num_tokens();
    let part = seeded_partition(l, config.model.subsets, 42)?;
    for (i, s) in part.subsets().iter().enumerate() {
        println!("subset {i}: {} positions, first {:?}", s.len(), &s[..s.len().min(6)]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = config.backbone.target_size;
    let c = config.backbone.expected_channels;
    let feature = FeatureMap::new(ndarray::Array3::from_shape_simple_fn((t, t, c), || rng.random::<f64>()))?;
    let (_, tokens, grid) = model.embed(&feature)?;
    let hybrids = build_hybrid_sequences(&tokens, &model.params.induction, &part)?;
    println!("{} hybrid sequences of {} tokens", hybrids.len(), hybrids[0].tokens.nrows());

    let mut moved = feature.clone();
    let p = config.model.patch_size;
    for &pos in &part.subsets()[0] {
        let (gy, gx) = (pos / grid.cols, pos % grid.cols);
        for y in gy * p..(gy + 1) * p {
            for x in gx * p..(gx + 1) * p {
                moved.data[[y, x, 0]] += 10.0;
            }
        }
    }
    let before = model.induction_latents(&feature, &part)?;
    let after = model.induction_latents(&moved, &part)?;
    let untouched = part.subsets()[0].iter().all(|&q| before.row(q) == after.row(q));
    let others_moved = part.subsets()[1].iter().any(|&q| before.row(q) != after.row(q));
    println!("subset 0 latents unchanged: {untouched}; subset 1 latents changed: {others_moved}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> sivt::Result<()> {
    run(&ModelConfig::toy())
}
