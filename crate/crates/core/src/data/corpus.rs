use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A list of documents and where they came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Vec<u8>>,
    pub source: String,
}

impl Corpus {
    pub fn new(documents: Vec<Vec<u8>>, source: impl Into<String>) -> Self {
        Self {
            documents,
            source: source.into(),
        }
    }

    /// Reads every regular file in `dir` (sorted by name) as one document.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                paths.push(entry.path());
            }
        }
        paths.sort();
        let documents = paths.iter().map(std::fs::read).collect::<std::io::Result<Vec<_>>>()?;
        Ok(Self::new(documents, dir.display().to_string()))
    }

    /// Writes each document to `dir/doc_NNNNN.txt`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, d) in self.documents.iter().enumerate() {
            std::fs::write(dir.join(format!("doc_{i:05}.txt")), d)?;
        }
        Ok(())
    }

    pub fn total_bytes(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    /// SHA-256 over the length-prefixed documents, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.documents {
            h.update((d.len() as u64).to_le_bytes());
            h.update(d);
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn require_text(&self) -> Result<()> {
        if self.documents.iter().all(Vec::is_empty) {
            return Err(Error::invalid(format!("corpus {} has no text", self.source)));
        }
        Ok(())
    }
}
