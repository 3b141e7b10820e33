//! Append-only persistence: one JSONL event log per session plus a
//! `sessions.jsonl` index. State is rebuilt by replaying the logs.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::model::{Event, Session};

const INDEX_FILE: &str = "sessions.jsonl";
const SESSION_DIR: &str = "sessions";

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    session_id: String,
    file: String,
    created_at: String,
}

/// An open session log. Appends are whole lines written with one call.
#[derive(Debug)]
pub struct SessionLog {
    file: File,
    fsync: bool,
}

impl SessionLog {
    pub fn append(&mut self, event: &Event) -> io::Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        if self.fsync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    fsync: bool,
    index: Mutex<File>,
}

pub fn valid_session_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl Store {
    /// Open (or initialize) `root` and replay every session found there.
    pub fn open(root: &Path, fsync: bool) -> io::Result<(Self, Vec<(Session, SessionLog)>)> {
        fs::create_dir_all(root.join(SESSION_DIR))?;
        let index_path = root.join(INDEX_FILE);
        let indexed: BTreeSet<String> = match fs::read(&index_path) {
            Ok(bytes) => complete_lines(&bytes)
                .filter_map(|l| serde_json::from_slice::<IndexEntry>(l).ok())
                .map(|e| e.session_id)
                .collect(),
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeSet::new(),
            Err(e) => return Err(e),
        };
        repair_tail(&index_path)?;
        let store = Self {
            root: root.to_path_buf(),
            fsync,
            index: Mutex::new(OpenOptions::new().create(true).append(true).open(&index_path)?),
        };

        let mut paths: Vec<PathBuf> = fs::read_dir(root.join(SESSION_DIR))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut sessions = Vec::new();
        for path in paths {
            let Some(session) = replay(&path)? else { continue };
            if !indexed.contains(&session.session_id) {
                store.index_session(&session)?;
            }
            let file = OpenOptions::new().append(true).open(&path)?;
            sessions.push((session, SessionLog { file, fsync }));
        }
        Ok((store, sessions))
    }

    fn session_path(&self, session_id: &str) -> PathBuf {
        self.root.join(SESSION_DIR).join(format!("{session_id}.jsonl"))
    }

    fn index_session(&self, session: &Session) -> io::Result<()> {
        let entry = IndexEntry {
            session_id: session.session_id.clone(),
            file: format!("{SESSION_DIR}/{}.jsonl", session.session_id),
            created_at: session.created_at.clone(),
        };
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        let mut index = self.index.lock().unwrap_or_else(|p| p.into_inner());
        index.write_all(&line)?;
        if self.fsync {
            index.sync_data()?;
        }
        Ok(())
    }

    /// Persist a new session. Fails with `AlreadyExists` if its log exists.
    pub fn create(&self, created: &Event, session: &Session) -> io::Result<SessionLog> {
        let path = self.session_path(&session.session_id);
        let file = OpenOptions::new().create_new(true).append(true).open(&path)?;
        let mut log = SessionLog { file, fsync: self.fsync };
        log.append(created)?;
        self.index_session(session)?;
        Ok(log)
    }
}

/// Newline-terminated lines; an unterminated tail is a torn write.
fn complete_lines(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let end = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    bytes[..end].split(|&b| b == b'\n').filter(|l| !l.is_empty())
}

/// Drop a torn final line so the next append starts on a fresh line.
fn repair_tail(path: &Path) -> io::Result<()> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    let end = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if end < bytes.len() {
        log::warn!("{}: dropping {} bytes of torn trailing write", path.display(), bytes.len() - end);
        OpenOptions::new().write(true).open(path)?.set_len(end as u64)?;
    }
    Ok(())
}

fn replay(path: &Path) -> io::Result<Option<Session>> {
    repair_tail(path)?;
    let bytes = fs::read(path)?;
    if bytes.is_empty() {
        // creation was interrupted before the first event landed
        fs::remove_file(path)?;
        return Ok(None);
    }
    let mut events = complete_lines(&bytes).enumerate().filter_map(|(i, line)| {
        serde_json::from_slice::<Event>(line)
            .inspect_err(|e| log::warn!("{}:{}: skipping unreadable event: {e}", path.display(), i + 1))
            .ok()
    });
    let Some(mut session) = events.next().as_ref().and_then(Session::from_created) else {
        log::warn!("{}: log does not start with a creation event; ignored", path.display());
        return Ok(None);
    };
    for event in events {
        if !session.apply(event) {
            log::warn!("{}: skipping event that does not fit the session state", path.display());
        }
    }
    Ok(Some(session))
}
