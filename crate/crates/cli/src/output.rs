//! Output files stamped with a metadata block.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    /// SHA-256 of the resolved configuration, output directory excluded.
    pub config_sha256: String,
    pub seed: u64,
}

impl Metadata {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let hashed = RunConfig {
            out: None,
            ..config.clone()
        };
        let canonical = serde_json::to_string(&hashed).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let config_sha256 = digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
        Self {
            tool: "bbi",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_owned(),
            config_sha256,
            seed: config.seed,
        }
    }

    /// `# key=value` comment lines for text outputs.
    pub fn comment(&self) -> String {
        format!(
            "# tool={} version={} command={} config_sha256={} seed={}\n",
            self.tool, self.version, self.command, self.config_sha256, self.seed
        )
    }
}

/// Writes files into the output directory.
pub struct Sink {
    pub dir: PathBuf,
    pub meta: Metadata,
}

impl Sink {
    pub fn new(dir: PathBuf, meta: Metadata) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, meta })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Text with the metadata comment prepended.
    pub fn text(&self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        std::fs::write(&path, format!("{}{body}", self.meta.comment()))?;
        Ok(path)
    }

    /// A CSV table; values are written with `Display`.
    pub fn csv(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let mut body = header.join(",");
        body.push('\n');
        for r in rows {
            body.push_str(&r.join(","));
            body.push('\n');
        }
        self.text(name, &body)
    }

    /// A JSON object with a top-level `metadata` member.
    pub fn json(&self, name: &str, body: &impl Serialize) -> Result<PathBuf, CliError> {
        let mut v = serde_json::to_value(body).map_err(bbi_core::Error::from)?;
        match v.as_object_mut() {
            Some(obj) => {
                obj.insert("metadata".into(), json!(self.meta));
            }
            None => v = json!({ "metadata": self.meta, "data": v }),
        }
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(&v).map_err(bbi_core::Error::from)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

/// JSON number, or the strings `"inf"`, `"-inf"`, `"nan"`.
pub fn number(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        json!("nan")
    } else if x > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

pub fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        number(x).as_str().unwrap_or("nan").to_owned()
    }
}

pub fn port_columns(prefix: &str) -> Vec<String> {
    (-3..=3).map(|j| format!("{prefix}{j}")).collect()
}

pub fn exists(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_directory() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: Some("elsewhere".into()),
            ..RunConfig::default()
        };
        let c = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_eq!(Metadata::new("x", &a).config_sha256, Metadata::new("x", &b).config_sha256);
        assert_ne!(Metadata::new("x", &a).config_sha256, Metadata::new("x", &c).config_sha256);
        assert_eq!(Metadata::new("x", &a).config_sha256.len(), 64);
    }

    #[test]
    fn non_finite_numbers() {
        assert_eq!(number(f64::INFINITY), json!("inf"));
        assert_eq!(number(1.5), json!(1.5));
        assert_eq!(fmt(f64::NAN), "nan");
    }
}
