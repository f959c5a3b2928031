//! Run directories, config loading, and report writing.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use cua_core::distill::corpus::{Corpus, BUNDLED_SEED};

pub type CliResult<T> = Result<T, Box<dyn Error>>;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

impl Common {
    /// Read the config file, or fall back to defaults when none was given.
    pub fn load<T: DeserializeOwned + Default>(&self) -> CliResult<T> {
        match &self.config {
            None => Ok(T::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                Ok(toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", p.display()))?)
            }
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// An output directory holding the resolved config and provenance for
/// every report written into it.
pub struct RunDir {
    pub path: PathBuf,
    pub format: Format,
    pub config_sha256: String,
    pub seed: u64,
}

impl RunDir {
    /// Create the directory and write the effective config into it.
    pub fn create<C: Serialize>(common: &Common, config: &C, seed: u64) -> CliResult<Self> {
        let text = toml::to_string(config)?;
        fs::create_dir_all(&common.out)?;
        fs::write(common.out.join(CONFIG_FILE), &text)?;
        Ok(Self {
            path: common.out.clone(),
            format: common.format,
            config_sha256: hex(&Sha256::digest(text.as_bytes())),
            seed,
        })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn header(&self) -> String {
        format!(
            "# cua {}\n# config_sha256 {}\n# seed {}\n",
            env!("CARGO_PKG_VERSION"),
            self.config_sha256,
            self.seed
        )
    }

    /// CSV with the provenance header, regardless of `--format`.
    pub fn write_csv(&self, name: &str, body: &str) -> CliResult<PathBuf> {
        let path = self.join(name);
        fs::write(&path, format!("{}{body}", self.header()))?;
        Ok(path)
    }

    /// `<stem>.csv` or `<stem>.json` depending on `--format`.
    pub fn write_report<T: Serialize>(&self, stem: &str, csv: &str, data: &T) -> CliResult<PathBuf> {
        match self.format {
            Format::Csv => self.write_csv(&format!("{stem}.csv"), csv),
            Format::Json => {
                let doc = serde_json::json!({
                    "provenance": {
                        "version": env!("CARGO_PKG_VERSION"),
                        "config_sha256": self.config_sha256,
                        "seed": self.seed,
                    },
                    "data": data,
                });
                let path = self.join(&format!("{stem}.json"));
                fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
                Ok(path)
            }
        }
    }
}

/// A corpus file when given, otherwise the generated text of `bytes` length.
pub fn load_corpus(path: Option<&Path>, bytes: usize) -> CliResult<Corpus> {
    Ok(match path {
        Some(p) => Corpus::from_bytes(fs::read(p).map_err(|e| format!("cannot read corpus {}: {e}", p.display()))?)?,
        None => Corpus::synthetic(bytes, BUNDLED_SEED)?,
    })
}
