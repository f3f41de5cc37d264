// Write the toy and default configurations as TOML.

use std::path::Path;

use sivt::ModelConfig;

pub fn run(dir: &Path) -> sivt::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| sivt::SivtError::Io { path: dir.to_path_buf(), source: e })?;
    ModelConfig::toy().save(&dir.join("toy.toml"))?;
    ModelConfig::default().save(&dir.join("default.toml"))?;
    println!("wrote toy.toml and default.toml to {}", dir.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> sivt::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "configs".into());
    run(Path::new(&dir))
}
