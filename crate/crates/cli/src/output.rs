use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Failure;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            tool: "pvdisagg",
            version: env!("CARGO_PKG_VERSION"),
            config_hash: cfg.hash(),
            seed: cfg.seed,
        }
    }

    /// Text of the leading `#` line, without the marker.
    pub fn line(&self) -> String {
        format!("{} {} config={} seed={}", self.tool, self.version, self.config_hash, self.seed)
    }
}

pub struct Outputs {
    pub dir: PathBuf,
    pub provenance: Provenance,
}

impl Outputs {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating output directory {}", dir.display()))
            .map_err(Failure::input)?;
        Ok(Self {
            dir,
            provenance: Provenance::of(cfg),
        })
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        let path = self.dir.join(name);
        let file = File::create(&path)
            .with_context(|| format!("creating {}", path.display()))
            .map_err(Failure::input)?;
        Ok((path, BufWriter::new(file)))
    }

    /// Writes a CSV through `body`, which receives the provenance comment.
    pub fn csv(&self, name: &str, body: impl FnOnce(&mut dyn Write, &str) -> std::io::Result<()>) -> Result<PathBuf> {
        let (path, mut w) = self.create(name)?;
        body(&mut w, &self.provenance.line())
            .and_then(|()| w.flush())
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::input)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    /// Writes `{"provenance": ..., <fields of value>}` as pretty JSON.
    pub fn json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Wrapped<'a, T> {
            provenance: &'a Provenance,
            #[serde(flatten)]
            value: &'a T,
        }
        let (path, mut w) = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &Wrapped { provenance: &self.provenance, value })
            .map_err(std::io::Error::from)
            .and_then(|()| writeln!(w))
            .and_then(|()| w.flush())
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::input)?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}
