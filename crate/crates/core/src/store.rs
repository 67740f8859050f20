//! On-disk session store.
//!
//! ```text
//! <root>/sessions/<session_id>.jsonl   append-only event log, one event per line
//! <root>/results.jsonl                 one record per completed session
//! <root>/results.index.json            session id -> byte range in results.jsonl
//! ```
//!
//! A torn final line (crash mid-write) is dropped on load and truncated away
//! before the next append. The index is derived data and is rebuilt by
//! scanning when it disagrees with the results file.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::protocol::{EventRecord, Session};

pub const RESULT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Corrupt {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("session {0} is not complete")]
    Incomplete(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A completed session as written to the results store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub v: u32,
    pub session: Session,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct IndexFile {
    format: String,
    results_len: u64,
    entries: BTreeMap<String, IndexEntry>,
}

pub struct Store {
    root: PathBuf,
    fsync: bool,
    index: Mutex<BTreeMap<String, IndexEntry>>,
}

/// Parse complete lines; a final line without a newline or that fails to
/// parse is torn. Returns the parsed values and the byte length of the valid
/// prefix.
fn read_lines<T: for<'de> Deserialize<'de>>(
    path: &Path,
) -> Result<(Vec<(u64, u64, T)>, u64), StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut line = String::new();
    let mut n = 0;
    loop {
        line.clear();
        let read = reader.read_line(&mut line).map_err(io_err(path))? as u64;
        if read == 0 {
            break;
        }
        n += 1;
        let complete = line.ends_with('\n');
        match serde_json::from_str::<T>(line.trim_end()) {
            Ok(v) if complete => out.push((offset, read, v)),
            Ok(_) => break,
            Err(e) => {
                let mut rest = String::new();
                reader.read_to_string(&mut rest).map_err(io_err(path))?;
                if !complete || rest.is_empty() {
                    break;
                }
                return Err(StoreError::Corrupt {
                    path: path.display().to_string(),
                    line: n,
                    reason: e.to_string(),
                });
            }
        }
        offset += read;
    }
    Ok((out, offset))
}

impl Store {
    pub fn open(root: impl AsRef<Path>, fsync: bool) -> Result<Store, StoreError> {
        let root = root.as_ref().to_path_buf();
        let sessions = root.join("sessions");
        fs::create_dir_all(&sessions).map_err(io_err(&sessions))?;
        let store = Store {
            root,
            fsync,
            index: Mutex::new(BTreeMap::new()),
        };
        let index = store.load_index()?;
        *store.index.lock().expect("index lock") = index;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn session_path(&self, session_id: &str) -> PathBuf {
        self.root
            .join("sessions")
            .join(format!("{session_id}.jsonl"))
    }

    pub fn results_path(&self) -> PathBuf {
        self.root.join("results.jsonl")
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("results.index.json")
    }

    fn append_line(
        &self,
        path: &Path,
        line: &str,
        valid_len: Option<u64>,
    ) -> Result<(), StoreError> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        if let Some(len) = valid_len {
            if f.metadata().map_err(io_err(path))?.len() > len {
                f.set_len(len).map_err(io_err(path))?;
            }
        }
        let mut buf = line.to_string();
        buf.push('\n');
        f.write_all(buf.as_bytes()).map_err(io_err(path))?;
        if self.fsync {
            f.sync_data().map_err(io_err(path))?;
        }
        Ok(())
    }

    pub fn append_event(&self, session_id: &str, record: &EventRecord) -> Result<(), StoreError> {
        let line = serde_json::to_string(record).expect("event serialises");
        self.append_line(&self.session_path(session_id), &line, None)
    }

    /// Events of one session; a torn last line is dropped and truncated.
    pub fn load_events(&self, session_id: &str) -> Result<Vec<EventRecord>, StoreError> {
        let path = self.session_path(session_id);
        let (lines, valid) = read_lines::<EventRecord>(&path)?;
        if let Ok(meta) = fs::metadata(&path) {
            if meta.len() > valid {
                let f = OpenOptions::new()
                    .write(true)
                    .open(&path)
                    .map_err(io_err(&path))?;
                f.set_len(valid).map_err(io_err(&path))?;
            }
        }
        Ok(lines.into_iter().map(|(_, _, r)| r).collect())
    }

    pub fn session_ids(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("sessions");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_string_lossy().to_string();
                name.strip_suffix(".jsonl").map(String::from)
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    fn load_index(&self) -> Result<BTreeMap<String, IndexEntry>, StoreError> {
        let results = self.results_path();
        let len = fs::metadata(&results).map(|m| m.len()).unwrap_or(0);
        let cached = fs::read_to_string(self.index_path())
            .ok()
            .and_then(|t| serde_json::from_str::<IndexFile>(&t).ok())
            .filter(|i| i.results_len == len);
        if let Some(i) = cached {
            return Ok(i.entries);
        }
        let (lines, valid) = read_lines::<ResultRecord>(&results)?;
        let entries: BTreeMap<String, IndexEntry> = lines
            .into_iter()
            .map(|(offset, len, r)| (r.session.session_id, IndexEntry { offset, len }))
            .collect();
        self.save_index(&entries, valid)?;
        Ok(entries)
    }

    fn save_index(
        &self,
        entries: &BTreeMap<String, IndexEntry>,
        results_len: u64,
    ) -> Result<(), StoreError> {
        let file = IndexFile {
            format: "trustshift-results-index".into(),
            results_len,
            entries: entries.clone(),
        };
        let path = self.index_path();
        write_atomic(
            &path,
            serde_json::to_string(&file)
                .expect("index serialises")
                .as_bytes(),
        )
        .map_err(io_err(&path))
    }

    pub fn has_result(&self, session_id: &str) -> bool {
        self.index
            .lock()
            .expect("index lock")
            .contains_key(session_id)
    }

    /// Append a completed session to the results store. Writing the same
    /// session twice is a no-op.
    pub fn write_result(&self, session: &Session) -> Result<(), StoreError> {
        if !session.is_complete() {
            return Err(StoreError::Incomplete(session.session_id.clone()));
        }
        let mut index = self.index.lock().expect("index lock");
        if index.contains_key(&session.session_id) {
            return Ok(());
        }
        let path = self.results_path();
        let valid = index.values().map(|e| e.offset + e.len).max().unwrap_or(0);
        let line = serde_json::to_string(&ResultRecord {
            v: RESULT_VERSION,
            session: session.clone(),
        })
        .expect("result serialises");
        self.append_line(&path, &line, Some(valid))?;
        index.insert(
            session.session_id.clone(),
            IndexEntry {
                offset: valid,
                len: line.len() as u64 + 1,
            },
        );
        self.save_index(&index, valid + line.len() as u64 + 1)
    }

    pub fn result(&self, session_id: &str) -> Result<Option<ResultRecord>, StoreError> {
        let Some(entry) = self
            .index
            .lock()
            .expect("index lock")
            .get(session_id)
            .copied()
        else {
            return Ok(None);
        };
        let path = self.results_path();
        let mut f = File::open(&path).map_err(io_err(&path))?;
        f.seek(SeekFrom::Start(entry.offset))
            .map_err(io_err(&path))?;
        let mut buf = vec![0u8; entry.len as usize];
        f.read_exact(&mut buf).map_err(io_err(&path))?;
        serde_json::from_slice(&buf)
            .map(Some)
            .map_err(|e| StoreError::Corrupt {
                path: path.display().to_string(),
                line: 0,
                reason: e.to_string(),
            })
    }

    pub fn load_results(&self) -> Result<Vec<ResultRecord>, StoreError> {
        load_results(&self.results_path())
    }
}

/// Every complete record in a results file, in write order.
pub fn load_results(path: &Path) -> Result<Vec<ResultRecord>, StoreError> {
    let (lines, _) = read_lines::<ResultRecord>(path)?;
    Ok(lines.into_iter().map(|(_, _, r)| r).collect())
}

/// Results file inside a store directory, or the path itself if it is a file.
pub fn results_file(store_or_file: &Path) -> PathBuf {
    if store_or_file.is_dir() {
        store_or_file.join("results.jsonl")
    } else {
        store_or_file.to_path_buf()
    }
}
