//! Server-side conversation memory.
//!
//! Conversations hold user and assistant messages only; the system prompt travels
//! with each request. `window(k)` returns the last `k` individual messages.
//!
//! Optionally every append is journaled as one JSON object per line
//! (`{"conv_id","role","content","seq"}`) and replayed when the store is reopened.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{ChatMessage, Role};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("system messages are supplied per request and cannot be stored")]
    SystemRoleRejected,
    #[error("{0} message content must not be empty")]
    EmptyContent(Role),
    #[error("journal I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal line {line}: {reason}")]
    CorruptJournal { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    /// Strictly increasing within a conversation, starting at 1.
    pub seq: u64,
}

impl From<&Message> for ChatMessage {
    fn from(m: &Message) -> Self {
        ChatMessage::new(m.role, m.content.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct JournalEntry {
    conv_id: String,
    role: Role,
    content: String,
    seq: u64,
}

type Conversation = Arc<Mutex<Vec<Message>>>;

#[derive(Default)]
pub struct MemoryStore {
    conversations: RwLock<HashMap<String, Conversation>>,
    journal: Option<Mutex<File>>,
    journal_path: Option<PathBuf>,
}

impl MemoryStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Open (or create) a journal-backed store, replaying existing entries.
    pub fn with_journal(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        let path = path.as_ref();
        let mut map: HashMap<String, Vec<Message>> = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
            let raw = std::fs::read(path)?;
            let torn_tail = !raw.is_empty() && raw.last() != Some(&b'\n');
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: JournalEntry = match serde_json::from_str(line) {
                    Ok(e) => e,
                    Err(_) if torn_tail && i + 1 == lines.len() => {
                        tracing::warn!(line = i + 1, "dropping torn final journal line");
                        break;
                    }
                    Err(e) => {
                        return Err(MemoryError::CorruptJournal { line: i + 1, reason: e.to_string() })
                    }
                };
                if entry.role == Role::System {
                    return Err(MemoryError::CorruptJournal {
                        line: i + 1,
                        reason: "system role in journal".into(),
                    });
                }
                let conv = map.entry(entry.conv_id).or_default();
                if conv.last().is_some_and(|m| m.seq >= entry.seq) {
                    return Err(MemoryError::CorruptJournal {
                        line: i + 1,
                        reason: "sequence numbers must increase".into(),
                    });
                }
                conv.push(Message { role: entry.role, content: entry.content, seq: entry.seq });
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let conversations = map
            .into_iter()
            .map(|(k, v)| (k, Arc::new(Mutex::new(v))))
            .collect();
        Ok(Self {
            conversations: RwLock::new(conversations),
            journal: Some(Mutex::new(file)),
            journal_path: Some(path.to_path_buf()),
        })
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal_path.as_deref()
    }

    pub fn new_conversation_id() -> String {
        uuid::Uuid::new_v4().to_string()
    }

    pub fn contains(&self, conv_id: &str) -> bool {
        self.conversations.read().contains_key(conv_id)
    }

    pub fn conversation_count(&self) -> usize {
        self.conversations.read().len()
    }

    fn conversation(&self, conv_id: &str) -> Conversation {
        if let Some(c) = self.conversations.read().get(conv_id) {
            return c.clone();
        }
        self.conversations
            .write()
            .entry(conv_id.to_string())
            .or_default()
            .clone()
    }

    /// Append one message, creating the conversation on first use. Returns the new length.
    pub fn append(&self, conv_id: &str, role: Role, content: impl Into<String>) -> Result<usize, MemoryError> {
        self.append_all(conv_id, vec![(role, content.into())])
    }

    /// Append several messages atomically with respect to other writers of the same
    /// conversation. Returns the new length.
    pub fn append_all(&self, conv_id: &str, messages: Vec<(Role, String)>) -> Result<usize, MemoryError> {
        for (role, content) in &messages {
            if *role == Role::System {
                return Err(MemoryError::SystemRoleRejected);
            }
            if content.is_empty() {
                return Err(MemoryError::EmptyContent(*role));
            }
        }
        let conv = self.conversation(conv_id);
        let mut msgs = conv.lock();
        let mut seq = msgs.last().map_or(0, |m| m.seq);
        let mut lines = String::new();
        let mut staged = Vec::with_capacity(messages.len());
        for (role, content) in messages {
            seq += 1;
            if self.journal.is_some() {
                let entry = JournalEntry { conv_id: conv_id.to_string(), role, content: content.clone(), seq };
                lines.push_str(&serde_json::to_string(&entry).expect("journal entry serializes"));
                lines.push('\n');
            }
            staged.push(Message { role, content, seq });
        }
        if let Some(journal) = &self.journal {
            let mut f = journal.lock();
            f.write_all(lines.as_bytes())?;
            f.flush()?;
        }
        msgs.extend(staged);
        Ok(msgs.len())
    }

    /// The last `memory_k` messages in original order. Unknown conversations are empty.
    pub fn window(&self, conv_id: &str, memory_k: usize) -> Vec<Message> {
        let Some(conv) = self.conversations.read().get(conv_id).cloned() else {
            return Vec::new();
        };
        let msgs = conv.lock();
        let start = msgs.len().saturating_sub(memory_k);
        msgs[start..].to_vec()
    }

    pub fn len(&self, conv_id: &str) -> usize {
        self.conversations
            .read()
            .get(conv_id)
            .map_or(0, |c| c.lock().len())
    }

    pub fn is_empty(&self, conv_id: &str) -> bool {
        self.len(conv_id) == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn five() -> MemoryStore {
        let s = MemoryStore::in_memory();
        for (r, c) in [
            (Role::User, "u1"),
            (Role::Assistant, "a1"),
            (Role::User, "u2"),
            (Role::Assistant, "a2"),
            (Role::User, "u3"),
        ] {
            s.append("c", r, c).unwrap();
        }
        s
    }

    #[test]
    fn append_lengths_and_system_rejection() {
        let s = MemoryStore::in_memory();
        assert_eq!(s.append("new", Role::User, "hi").unwrap(), 1);
        assert_eq!(s.append("new", Role::Assistant, "hello").unwrap(), 2);
        assert!(matches!(s.append("new", Role::System, "x"), Err(MemoryError::SystemRoleRejected)));
        assert!(matches!(s.append("new", Role::User, ""), Err(MemoryError::EmptyContent(_))));
        assert_eq!(s.len("new"), 2);
    }

    #[test]
    fn window_matches_slicing_oracle_for_every_k() {
        let s = five();
        let all = ["u1", "a1", "u2", "a2", "u3"];
        for k in 0..=7 {
            let got: Vec<String> = s.window("c", k).into_iter().map(|m| m.content).collect();
            // oracle: brute-force suffix by index arithmetic
            let mut expected = Vec::new();
            for (i, c) in all.iter().enumerate() {
                if i + k >= all.len() {
                    expected.push(c.to_string());
                }
            }
            assert_eq!(got, expected, "k={k}");
        }
        let two: Vec<_> = s.window("c", 2).into_iter().map(|m| m.content).collect();
        assert_eq!(two, vec!["a2", "u3"]);
        assert!(s.window("c", 0).is_empty());
        assert_eq!(s.window("c", 100).len(), 5);
        assert!(s.window("missing", 3).is_empty());
    }

    #[test]
    fn sequence_numbers_increase() {
        let s = five();
        let seqs: Vec<u64> = s.window("c", 10).iter().map(|m| m.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn journal_replay_restores_conversations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.jsonl");
        {
            let s = MemoryStore::with_journal(&path).unwrap();
            s.append("a", Role::User, "hello").unwrap();
            s.append("b", Role::User, "other").unwrap();
            s.append("a", Role::Assistant, "line one\nline \"two\"").unwrap();
        }
        let raw = std::fs::read_to_string(&path).unwrap();
        assert_eq!(raw.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(raw.lines().next().unwrap()).unwrap();
        assert_eq!(first["conv_id"], "a");
        assert_eq!(first["role"], "user");
        assert_eq!(first["seq"], 1);

        let s = MemoryStore::with_journal(&path).unwrap();
        let a = s.window("a", 10);
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].content, "line one\nline \"two\"");
        assert_eq!(s.len("b"), 1);
        assert_eq!(s.append("a", Role::User, "again").unwrap(), 3);
        assert_eq!(s.window("a", 1)[0].seq, 3);
    }

    #[test]
    fn journal_torn_tail_is_dropped_but_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(
            &path,
            "{\"conv_id\":\"a\",\"role\":\"user\",\"content\":\"x\",\"seq\":1}\n{\"conv_id\":\"a\",\"ro",
        )
        .unwrap();
        let s = MemoryStore::with_journal(&path).unwrap();
        assert_eq!(s.len("a"), 1);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "garbage\n{\"conv_id\":\"a\",\"role\":\"user\",\"content\":\"x\",\"seq\":1}\n").unwrap();
        assert!(matches!(
            MemoryStore::with_journal(&bad),
            Err(MemoryError::CorruptJournal { line: 1, .. })
        ));
    }

    #[test]
    fn concurrent_appends_keep_per_conversation_order() {
        let s = Arc::new(MemoryStore::in_memory());
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let s = s.clone();
                std::thread::spawn(move || {
                    let id = format!("conv{t}");
                    for i in 0..200 {
                        s.append_all(&id, vec![(Role::User, format!("u{i}")), (Role::Assistant, format!("a{i}"))])
                            .unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        for t in 0..8 {
            let w = s.window(&format!("conv{t}"), usize::MAX);
            assert_eq!(w.len(), 400);
            for (i, pair) in w.chunks(2).enumerate() {
                assert_eq!(pair[0].content, format!("u{i}"));
                assert_eq!(pair[1].content, format!("a{i}"));
            }
        }
    }

    proptest! {
        #[test]
        fn window_suffix_properties(n in 0usize..30, k in 0usize..40) {
            let s = MemoryStore::in_memory();
            for i in 0..n {
                let role = if i % 2 == 0 { Role::User } else { Role::Assistant };
                s.append("p", role, format!("m{i}")).unwrap();
            }
            let wk = s.window("p", k);
            let wk1 = s.window("p", k + 1);
            prop_assert_eq!(wk.len(), k.min(n));
            prop_assert!(wk1.ends_with(&wk));
        }
    }
}
