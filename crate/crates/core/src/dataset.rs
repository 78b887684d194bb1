//! Line-delimited JSON dataset files.
//!
//! The first line is the [`DatasetManifest`]; every following line is one
//! [`RankingInstance`]. Absent modalities are written as `null`. Output is
//! byte-deterministic for identical input.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{validate_instance, DatasetManifest, RankingInstance};

/// Writes the manifest (with `record_count` set) followed by one line per instance.
pub fn write_dataset<W: Write>(
    mut out: W,
    manifest: &DatasetManifest,
    instances: &[RankingInstance],
) -> Result<()> {
    let mut header = manifest.clone();
    header.record_count = instances.len();
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_dataset(
    manifest: &DatasetManifest,
    instances: &[RankingInstance],
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = File::create(path)?;
    write_dataset(BufWriter::new(file), manifest, instances)
}

/// Streaming reader; yields validated instances in file order.
pub struct DatasetReader<R> {
    manifest: DatasetManifest,
    lines: Lines<R>,
    line_no: usize,
    index: usize,
}

impl<R: BufRead> DatasetReader<R> {
    pub fn new(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            reason: "empty file, expected a manifest line".into(),
        })??;
        let manifest: DatasetManifest = serde_json::from_str(&first).map_err(|e| Error::Parse {
            line: 1,
            reason: format!("manifest: {e}"),
        })?;
        manifest.validate()?;
        Ok(Self {
            manifest,
            lines,
            line_no: 1,
            index: 0,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<RankingInstance>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let index = self.index;
            self.index += 1;
            let parsed: RankingInstance = match serde_json::from_str(&line) {
                Ok(p) => p,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        line: self.line_no,
                        reason: format!("record {index}: {e}"),
                    }))
                }
            };
            return Some(validate_instance(parsed, &self.manifest).map_err(|e| Error::Record {
                index,
                reason: e.to_string(),
            }));
        }
    }
}

/// Opens a dataset file for streaming.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetReader<BufReader<File>>> {
    DatasetReader::new(BufReader::new(File::open(path)?))
}

/// Loads every instance, checking the manifest's record count.
pub fn read_all(path: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<RankingInstance>)> {
    let reader = load_dataset(path)?;
    let manifest = reader.manifest().clone();
    let instances: Vec<RankingInstance> = reader.collect::<Result<_>>()?;
    if instances.len() != manifest.record_count {
        return Err(Error::Validation(format!(
            "manifest declares {} records, file holds {}",
            manifest.record_count,
            instances.len()
        )));
    }
    Ok((manifest, instances))
}
