// Generate a seeded texture corpus in MVTec layout and index it back.
//
// `cargo run --release --example synthetic_dataset -- <out-dir>`

use std::path::Path;

use sivt::data::{generate_synthetic, index_mvtec, Categories, Split, SyntheticSpec};

pub fn run(out: &Path, spec: &SyntheticSpec) -> sivt::Result<()> {
    let index = generate_synthetic(spec, out)?;
    assert_eq!(index_mvtec(out, &Categories::All)?, index);
    for category in index.categories() {
        let test: Vec<_> = index.split(Split::Test).into_iter().filter(|r| r.category == category).collect();
        let defects = test.iter().filter(|r| r.is_anomalous()).count();
        println!(
            "{category}: {} train, {} test ({defects} defective)",
            index.split(Split::Train).iter().filter(|r| r.category == category).count(),
            test.len()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> sivt::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synthetic".into());
    run(Path::new(&out), &SyntheticSpec::default())
}
