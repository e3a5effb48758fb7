//! Append-only JSON Lines log. One line per event:
//! `{"ts", "session_id", "event", "payload"}`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub ts: DateTime<Utc>,
    pub session_id: Option<String>,
    pub event: String,
    pub payload: serde_json::Value,
}

#[derive(Debug)]
pub struct EventLog {
    path: Option<PathBuf>,
    file: Mutex<Option<File>>,
    events: Mutex<Vec<Event>>,
}

impl EventLog {
    /// Log kept only in memory.
    pub fn memory() -> Self {
        Self { path: None, file: Mutex::new(None), events: Mutex::new(Vec::new()) }
    }

    /// In-memory copy of the events in `path`, leaving the file untouched.
    pub fn snapshot(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let (events, _) = read_events(path.as_ref())?;
        Ok(Self { path: None, file: Mutex::new(None), events: Mutex::new(events) })
    }

    /// Open (or create) a log file and load the events already in it.
    /// A torn final line is dropped with a warning; any other bad line is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let (events, torn) = if path.exists() { read_events(&path)? } else { (Vec::new(), false) };
        if torn {
            let tmp = path.with_extension("jsonl.tmp");
            let mut out = String::new();
            for e in &events {
                out.push_str(&serde_json::to_string(e).expect("events serialize"));
                out.push('\n');
            }
            std::fs::write(&tmp, out)?;
            std::fs::rename(&tmp, &path)?;
        }
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
        let len = file.metadata()?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            file.seek(SeekFrom::Start(len - 1))?;
            file.read_exact(&mut last)?;
            if last[0] != b'\n' {
                file.write_all(b"\n")?;
            }
        }
        Ok(Self { path: Some(path), file: Mutex::new(Some(file)), events: Mutex::new(events) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Write one event as a single line and flush before returning.
    pub fn append(&self, event: &Event) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(event).expect("events serialize");
        line.push('\n');
        let mut file = self.file.lock();
        if let Some(f) = file.as_mut() {
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.events.lock().push(event.clone());
        Ok(())
    }

    pub fn events(&self) -> Vec<Event> {
        self.events.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Events in the file, and whether a torn final line was dropped.
fn read_events(path: &Path) -> Result<(Vec<Event>, bool), ServiceError> {
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
    let last = lines.len();
    let mut events = Vec::new();
    let mut torn = false;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Event>(line) {
            Ok(e) => events.push(e),
            Err(e) if i + 1 == last => {
                tracing::warn!(line = i + 1, error = %e, "dropping torn event log line");
                torn = true;
            }
            Err(e) => return Err(ServiceError::CorruptLog { line: i + 1, reason: e.to_string() }),
        }
    }
    Ok((events, torn))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(n: u32) -> Event {
        Event {
            ts: Utc::now(),
            session_id: Some(format!("s{n}")),
            event: "test".into(),
            payload: serde_json::json!({ "n": n }),
        }
    }

    #[test]
    fn reopen_reads_back_events() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("events.jsonl");
        let log = EventLog::open(&p).unwrap();
        log.append(&ev(1)).unwrap();
        log.append(&ev(2)).unwrap();
        drop(log);
        let again = EventLog::open(&p).unwrap();
        assert_eq!(again.events().len(), 2);
        assert_eq!(again.events()[1].payload["n"], 2);
    }

    #[test]
    fn torn_tail_is_dropped_but_middle_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("events.jsonl");
        let good = serde_json::to_string(&ev(1)).unwrap();
        std::fs::write(&p, format!("{good}\n{{\"ts\":")).unwrap();
        let log = EventLog::open(&p).unwrap();
        assert_eq!(log.len(), 1);
        log.append(&ev(2)).unwrap();
        drop(log);
        assert_eq!(EventLog::open(&p).unwrap().len(), 2);
        std::fs::write(&p, format!("garbage\n{good}\n")).unwrap();
        assert!(matches!(EventLog::open(&p), Err(ServiceError::CorruptLog { line: 1, .. })));
    }

    #[test]
    fn snapshot_leaves_the_file_alone() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("events.jsonl");
        let good = serde_json::to_string(&ev(1)).unwrap();
        let raw = format!("{good}\n{{\"ts\":");
        std::fs::write(&p, &raw).unwrap();
        let snap = EventLog::snapshot(&p).unwrap();
        assert_eq!(snap.len(), 1);
        assert!(snap.path().is_none());
        assert_eq!(std::fs::read_to_string(&p).unwrap(), raw);
    }
}
