// Desk-scale run: synthetic corpus, training, inference and metrics for
// the self-induction model and the plain encoder.
//
// `cargo run --release --example train_and_evaluate -- <work-dir> [epochs]`

use std::path::Path;

use sivt::config::ReconstructionMode;
use sivt::data::{generate_synthetic, Split, SyntheticSpec};
use sivt::pipeline::Detector;
use sivt::train::train;
use sivt::ModelConfig;

pub fn run(work: &Path, spec: &SyntheticSpec, config: &ModelConfig) -> sivt::Result<()> {
    let index = generate_synthetic(spec, &work.join("data"))?;
    for mode in [ReconstructionMode::Sivt, ReconstructionMode::Vanilla] {
        let mut cfg = config.clone();
        cfg.mode = mode;
        let name = format!("{mode:?}").to_lowercase();
        let (state, manifest) = train(&cfg, &index.split(Split::Train), &work.join(&name), None)?;
        let first = state.history.first().map_or(f64::NAN, |e| e.total);
        let last = state.history.last().map_or(f64::NAN, |e| e.total);
        println!("{name}: loss {first:.3} -> {last:.3} in {:.0}s", manifest.wall_clock_secs);
        let detector = Detector::new(state.model)?;
        let sample: Vec<_> = index.split(Split::Test).iter().take(4).map(|r| r.image.clone()).collect();
        detector.infer(&sample, &work.join(&name).join("maps"), None)?;
        print!("{}", detector.evaluate(&index, None)?.to_csv());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> sivt::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = args.next().unwrap_or_else(|| "desk_run".into());
    let mut config = ModelConfig::toy();
    if let Some(e) = args.next() {
        config.training.epochs = e.parse().map_err(|_| sivt::SivtError::Parameter(format!("bad epoch count `{e}`")))?;
    }
    run(Path::new(&work), &SyntheticSpec::default(), &config)
}
