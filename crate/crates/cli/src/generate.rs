use onestop::config::RunSpec;
use onestop::data::Corpus;
use onestop::{Error, Result};

pub fn run(spec: &RunSpec, force: bool) -> Result<()> {
    let dir = spec.paths(crate::env_root().as_deref()).corpus;
    if dir.join("corpus.json").exists() && !force {
        return Err(Error::config(format!(
            "{} already holds a corpus; pass --force to replace it",
            dir.display()
        )));
    }
    let corpus = Corpus::generate(&spec.data)?;
    let hash = corpus.write(&dir)?;
    println!("corpus {}", dir.display());
    println!("manifest sha256 {hash}");
    Ok(())
}
