//! Append-only JSON-lines logs with durable appends.
//!
//! Every append is one line written with a single `write_all` and followed
//! by `sync_data`, so an acknowledged record survives a crash. A crash
//! mid-append can leave a partial final line; opening the log drops it and
//! truncates the file back to the last complete record.

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

#[derive(Debug)]
pub struct JsonlLog<T> {
    path: PathBuf,
    file: File,
    _record: PhantomData<fn(T)>,
}

impl<T: Serialize + DeserializeOwned> JsonlLog<T> {
    /// Opens or creates the log and returns every complete record in it.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Vec<T>)> {
        let path = path.as_ref().to_path_buf();
        let io = |e| Error::io(&path, e);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)
            .map_err(io)?;
        let mut text = Vec::new();
        file.read_to_end(&mut text).map_err(io)?;
        let complete = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let mut records = Vec::new();
        for (i, line) in text[..complete].split(|&b| b == b'\n').enumerate() {
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let record = serde_json::from_slice(line).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                message: format!("{}: {e}", path.display()),
            })?;
            records.push(record);
        }
        if complete < text.len() {
            file.set_len(complete as u64).map_err(io)?;
            file.sync_data().map_err(io)?;
        }
        file.seek(SeekFrom::End(0)).map_err(io)?;
        Ok((
            Self {
                path,
                file,
                _record: PhantomData,
            },
            records,
        ))
    }

    /// Appends one record and syncs it to disk before returning.
    pub fn append(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_vec(record).map_err(|e| Error::MalformedRecord {
            line: 0,
            message: e.to_string(),
        })?;
        line.push(b'\n');
        let io = |e| Error::io(&self.path, e);
        self.file.write_all(&line).map_err(io)?;
        self.file.sync_data().map_err(io)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads every complete record without opening the log for writing.
pub fn read_records<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let complete = text.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    text[..complete]
        .split(|&b| b == b'\n')
        .enumerate()
        .filter(|(_, l)| !l.iter().all(u8::is_ascii_whitespace))
        .map(|(i, l)| {
            serde_json::from_slice(l).map_err(|e| Error::MalformedRecord {
                line: i + 1,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}
