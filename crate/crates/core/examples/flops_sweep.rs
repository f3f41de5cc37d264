// Parameter and multiply-accumulate counts, swept over N and P.

use sivt::model::{count_flops, count_parameters};
use sivt::pipeline::{flops_report, Sweep};
use sivt::ModelConfig;

pub fn run(config: &ModelConfig) -> sivt::Result<()> {
    println!(
        "parameters {}, SIVT {} MACs, vanilla {} MACs",
        count_parameters(config),
        count_flops(config, false).total(),
        count_flops(config, true).total()
    );
    print!("{}", flops_report(config, Some(Sweep::Subsets))?);
    print!("{}", flops_report(config, Some(Sweep::PatchSize))?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> sivt::Result<()> {
    run(&ModelConfig::default())
}
