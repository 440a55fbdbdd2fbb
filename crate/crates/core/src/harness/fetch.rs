//! Checksummed dataset cache.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};

/// Where a dataset comes from and what its bytes must hash to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSource {
    pub name: &'static str,
    pub url: String,
    pub file_name: &'static str,
    /// Lowercase hex SHA-256; `None` means no checksum has been recorded.
    pub sha256: Option<&'static str>,
    /// Copy shipped with the crate, used instead of the network on a cold cache.
    pub bundled: Option<&'static [u8]>,
    /// Class mapped to `+1`.
    pub positive_label: &'static str,
    pub train_size: usize,
}

const IONOSPHERE: &[u8] = include_bytes!("../../data/ionosphere.data");

/// Known datasets.
pub fn registry() -> Vec<DatasetSource> {
    vec![
        DatasetSource {
            name: "ionosphere",
            url: "https://archive.ics.uci.edu/ml/machine-learning-databases/ionosphere/ionosphere.data".into(),
            file_name: "ionosphere.data",
            sha256: Some("46d52186b84e20be52918adb93e8fb9926b34795ff7504c24350ae0616a04bbd"),
            bundled: Some(IONOSPHERE),
            positive_label: "g",
            train_size: 280,
        },
        DatasetSource {
            name: "sonar",
            url: "https://archive.ics.uci.edu/ml/machine-learning-databases/undocumented/connectionist-bench/sonar/sonar.all-data"
                .into(),
            file_name: "sonar.all-data",
            sha256: None,
            bundled: None,
            positive_label: "M",
            train_size: 165,
        },
    ]
}

/// `$PROXVI_CACHE`, else `$HOME/.cache/proxvi`, else `./.proxvi-cache`.
pub fn cache_dir() -> PathBuf {
    if let Some(p) = std::env::var_os("PROXVI_CACHE") {
        return PathBuf::from(p);
    }
    match std::env::var_os("HOME") {
        Some(h) => PathBuf::from(h).join(".cache").join("proxvi"),
        None => PathBuf::from(".proxvi-cache"),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn verify(path: &Path, expected: Option<&str>) -> Result<()> {
    let Some(expected) = expected else {
        warn!("{}: no recorded checksum; contents not verified", path.display());
        return Ok(());
    };
    let actual = sha256_hex(&fs::read(path)?);
    if actual == expected {
        return Ok(());
    }
    let quarantine = path.with_extension("quarantine");
    fs::rename(path, &quarantine)?;
    Err(Error::Checksum {
        path: path.to_path_buf(),
        expected: expected.to_string(),
        actual,
        quarantine,
    })
}

/// Returns the verified cached path for `source`, populating the cache from
/// the bundled copy or the network when absent.
pub fn fetch_source(source: &DatasetSource, cache: &Path) -> Result<PathBuf> {
    let path = cache.join(source.file_name);
    if path.exists() {
        verify(&path, source.sha256)?;
        return Ok(path);
    }
    fs::create_dir_all(cache)?;
    let bytes = match source.bundled {
        Some(b) => b.to_vec(),
        None => download(&source.url)?,
    };
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, &path)?;
    info!("cached {} at {}", source.name, path.display());
    verify(&path, source.sha256)?;
    Ok(path)
}

fn download(url: &str) -> Result<Vec<u8>> {
    let net = |message: String| Error::Network {
        url: url.to_string(),
        message,
    };
    let mut resp = ureq::get(url).call().map_err(|e| net(e.to_string()))?;
    resp.body_mut().read_to_vec().map_err(|e| net(e.to_string()))
}

/// [`fetch_source`] for a registry entry.
pub fn fetch_dataset(name: &str, cache: &Path) -> Result<PathBuf> {
    let source = registry()
        .into_iter()
        .find(|s| s.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| domain(format!("unknown dataset '{name}'")))?;
    fetch_source(&source, cache)
}
