//! In-process conversation history, one bounded turn list per session.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use crate::prompts::HistoryTurn;

pub const MAX_HISTORY_TURNS: usize = 20;

#[derive(Debug, Default)]
pub struct Session {
    turns: VecDeque<HistoryTurn>,
}

impl Session {
    pub fn turns(&self) -> Vec<HistoryTurn> {
        self.turns.iter().cloned().collect()
    }

    /// Appends a turn, evicting the oldest beyond `cap`.
    pub fn push(&mut self, turn: HistoryTurn, cap: usize) {
        self.turns.push_back(turn);
        while self.turns.len() > cap {
            self.turns.pop_front();
        }
    }
}

/// Sessions keyed by id. Each session has its own lock, held by the
/// orchestrator for a whole turn, so turns within a session never interleave
/// while different sessions proceed in parallel.
#[derive(Debug)]
pub struct SessionStore {
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    cap: usize,
}

impl Default for SessionStore {
    fn default() -> Self {
        Self::new(MAX_HISTORY_TURNS)
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl SessionStore {
    pub fn new(cap: usize) -> Self {
        Self {
            sessions: Mutex::new(HashMap::new()),
            cap: cap.max(1),
        }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// The session with this id, created empty if unknown.
    pub fn get_or_create(&self, id: &str) -> Arc<Mutex<Session>> {
        lock(&self.sessions).entry(id.to_string()).or_default().clone()
    }

    /// History of `id`; unknown ids have none and are not created.
    pub fn history(&self, id: &str) -> Vec<HistoryTurn> {
        let session = lock(&self.sessions).get(id).cloned();
        session.map(|s| lock(&s).turns()).unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        lock(&self.sessions).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes all sessions as JSON, atomically.
    pub fn snapshot(&self, path: &Path) -> io::Result<()> {
        let all: std::collections::BTreeMap<String, Vec<HistoryTurn>> = lock(&self.sessions)
            .iter()
            .map(|(id, s)| (id.clone(), lock(s).turns()))
            .collect();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&all)?)?;
        fs::rename(tmp, path)
    }

    /// Replaces the current sessions with a snapshot; a missing file leaves none.
    pub fn restore(&self, path: &Path) -> io::Result<()> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e),
        };
        let all: HashMap<String, Vec<HistoryTurn>> = serde_json::from_str(&text)?;
        let mut sessions = lock(&self.sessions);
        sessions.clear();
        for (id, turns) in all {
            let mut s = Session::default();
            for t in turns {
                s.push(t, self.cap);
            }
            sessions.insert(id, Arc::new(Mutex::new(s)));
        }
        Ok(())
    }
}
