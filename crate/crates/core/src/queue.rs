//! Durable command queue with at-least-once delivery.
//!
//! Every state change is journaled before it becomes visible. Workers compete
//! for messages on one shared FIFO queue; an unacknowledged delivery becomes
//! deliverable again once its visibility deadline lapses. Messages that lapse
//! after `max_attempts` deliveries are parked in the dead-letter list.

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::journal::{CorruptJournal, Journal, JournalError, JournalStore, PayloadReader, PayloadWriter, RecordKind};
use crate::model::{Command, Timestamp};

pub const DEFAULT_VISIBILITY_TIMEOUT_S: u64 = 30;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueConfig {
    pub visibility_timeout_s: u64,
    pub max_attempts: u32,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self { visibility_timeout_s: DEFAULT_VISIBILITY_TIMEOUT_S, max_attempts: DEFAULT_MAX_ATTEMPTS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageState {
    Pending,
    Inflight,
    Acked,
    DeadLettered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueMessage {
    pub msg_id: u64,
    pub command: Command,
    pub idempotency_key: String,
    pub enqueued_at: Timestamp,
    pub attempts: u32,
    pub state: MessageState,
    pub visibility_deadline: Option<Timestamp>,
}

#[derive(Debug, Error)]
pub enum QueueError {
    #[error("queue storage failure: {0}")]
    StorageFailure(String),
    #[error("unknown message {0}")]
    UnknownMessage(u64),
    #[error("visibility timeout must be positive")]
    InvalidTimeout,
    #[error("undecodable journal record at offset {0}")]
    BadRecord(u64),
}

impl QueueError {
    pub fn code(&self) -> &'static str {
        match self {
            QueueError::StorageFailure(_) => "StorageFailure",
            QueueError::UnknownMessage(_) => "UnknownMessage",
            QueueError::InvalidTimeout => "InvalidTimeout",
            QueueError::BadRecord(_) => "CorruptJournal",
        }
    }
}

impl From<JournalError> for QueueError {
    fn from(e: JournalError) -> Self {
        QueueError::StorageFailure(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckStatus {
    Acked,
    /// The message was already acknowledged; nothing changed.
    AlreadyAcked,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub records: usize,
    pub messages: usize,
    pub requeued: usize,
    pub dead_lettered: usize,
    pub corruption: Option<CorruptJournal>,
}

struct Inner {
    journal: Journal,
    messages: BTreeMap<u64, QueueMessage>,
    pending: BTreeSet<u64>,
    next_id: u64,
}

pub struct TaskQueue {
    inner: Mutex<Inner>,
    clock: Clock,
    config: QueueConfig,
}

impl TaskQueue {
    /// Opens the queue over `store`, replaying its journal.
    ///
    /// Replay stops at the first damaged record; that record and everything
    /// after it is cut off and described in the report.
    pub fn open(store: Box<dyn JournalStore>, clock: Clock, config: QueueConfig) -> Result<(Self, RecoveryReport), QueueError> {
        let (journal, replay) = Journal::open(store)?;
        let mut messages: BTreeMap<u64, QueueMessage> = BTreeMap::new();
        let mut next_id = 1;
        for rec in &replay.records {
            let mut r = PayloadReader::new(&rec.payload);
            let bad = || QueueError::BadRecord(rec.offset);
            match rec.kind {
                RecordKind::Enqueued => {
                    let msg_id = r.u64().ok_or_else(bad)?;
                    let enqueued_at = r.u64().ok_or_else(bad)?;
                    let key = r.bytes().ok_or_else(bad)?;
                    let cmd = r.bytes().ok_or_else(bad)?;
                    let idempotency_key = String::from_utf8(key.to_vec()).map_err(|_| bad())?;
                    let command: Command = serde_json::from_slice(cmd).map_err(|_| bad())?;
                    next_id = next_id.max(msg_id + 1);
                    messages.insert(
                        msg_id,
                        QueueMessage {
                            msg_id,
                            command,
                            idempotency_key,
                            enqueued_at,
                            attempts: 0,
                            state: MessageState::Pending,
                            visibility_deadline: None,
                        },
                    );
                }
                RecordKind::Delivered => {
                    let msg_id = r.u64().ok_or_else(bad)?;
                    let attempts = r.u32().ok_or_else(bad)?;
                    let deadline = r.u64().ok_or_else(bad)?;
                    let msg = messages.get_mut(&msg_id).ok_or_else(bad)?;
                    if msg.state != MessageState::Acked {
                        msg.state = MessageState::Inflight;
                        msg.attempts = attempts;
                        msg.visibility_deadline = Some(deadline);
                    }
                }
                RecordKind::Acked => {
                    let msg_id = r.u64().ok_or_else(bad)?;
                    let msg = messages.get_mut(&msg_id).ok_or_else(bad)?;
                    msg.state = MessageState::Acked;
                    msg.visibility_deadline = None;
                }
                RecordKind::Allocation => {}
            }
        }

        let pending = messages.values().filter(|m| m.state == MessageState::Pending).map(|m| m.msg_id).collect();
        let mut inner = Inner { journal, messages, pending, next_id };
        let (requeued, dead_lettered) = expire_lapsed(&mut inner, clock.now(), config.max_attempts);
        let report = RecoveryReport {
            records: replay.records.len(),
            messages: inner.messages.len(),
            requeued,
            dead_lettered,
            corruption: replay.corruption,
        };
        Ok((Self { inner: Mutex::new(inner), clock, config }, report))
    }

    pub fn config(&self) -> QueueConfig {
        self.config
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    /// Journals the command as PENDING and returns its id.
    pub fn enqueue(&self, command: Command, idempotency_key: &str) -> Result<u64, QueueError> {
        let mut inner = self.inner.lock();
        let msg_id = inner.next_id;
        let enqueued_at = self.clock.now();
        let cmd = serde_json::to_vec(&command).map_err(|e| QueueError::StorageFailure(e.to_string()))?;
        let payload = PayloadWriter::default().u64(msg_id).u64(enqueued_at).bytes(idempotency_key.as_bytes()).bytes(&cmd).finish();
        inner.journal.append(RecordKind::Enqueued, &payload)?;
        inner.next_id += 1;
        inner.messages.insert(
            msg_id,
            QueueMessage {
                msg_id,
                command,
                idempotency_key: idempotency_key.to_string(),
                enqueued_at,
                attempts: 0,
                state: MessageState::Pending,
                visibility_deadline: None,
            },
        );
        inner.pending.insert(msg_id);
        Ok(msg_id)
    }

    /// Hands the oldest deliverable message to `worker_id`, or `None`.
    pub fn receive(&self, _worker_id: &str, visibility_timeout_s: u64) -> Result<Option<QueueMessage>, QueueError> {
        if visibility_timeout_s == 0 {
            return Err(QueueError::InvalidTimeout);
        }
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        expire_lapsed(&mut inner, now, self.config.max_attempts);
        let Some(&msg_id) = inner.pending.iter().next() else {
            return Ok(None);
        };
        let attempts = inner.messages[&msg_id].attempts + 1;
        let deadline = now + visibility_timeout_s;
        let payload = PayloadWriter::default().u64(msg_id).u32(attempts).u64(deadline).finish();
        inner.journal.append(RecordKind::Delivered, &payload)?;
        inner.pending.remove(&msg_id);
        let msg = inner.messages.get_mut(&msg_id).expect("pending id has a message");
        msg.state = MessageState::Inflight;
        msg.attempts = attempts;
        msg.visibility_deadline = Some(deadline);
        Ok(Some(msg.clone()))
    }

    pub fn ack(&self, msg_id: u64) -> Result<AckStatus, QueueError> {
        let mut inner = self.inner.lock();
        let state = inner.messages.get(&msg_id).ok_or(QueueError::UnknownMessage(msg_id))?.state;
        if state == MessageState::Acked {
            return Ok(AckStatus::AlreadyAcked);
        }
        inner.journal.append(RecordKind::Acked, &PayloadWriter::default().u64(msg_id).finish())?;
        inner.pending.remove(&msg_id);
        let msg = inner.messages.get_mut(&msg_id).expect("checked above");
        msg.state = MessageState::Acked;
        msg.visibility_deadline = None;
        Ok(AckStatus::Acked)
    }

    pub fn get(&self, msg_id: u64) -> Option<QueueMessage> {
        self.inner.lock().messages.get(&msg_id).cloned()
    }

    pub fn messages(&self) -> Vec<QueueMessage> {
        self.inner.lock().messages.values().cloned().collect()
    }

    pub fn dead_letters(&self) -> Vec<QueueMessage> {
        self.inner.lock().messages.values().filter(|m| m.state == MessageState::DeadLettered).cloned().collect()
    }

    /// Messages that are pending now or will be once their deadline lapses.
    pub fn outstanding(&self) -> usize {
        self.inner
            .lock()
            .messages
            .values()
            .filter(|m| matches!(m.state, MessageState::Pending | MessageState::Inflight))
            .count()
    }

    pub fn pending_count(&self) -> usize {
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        expire_lapsed(&mut inner, now, self.config.max_attempts);
        inner.pending.len()
    }
}

/// Reverts lapsed INFLIGHT messages; returns (requeued, dead-lettered).
fn expire_lapsed(inner: &mut Inner, now: Timestamp, max_attempts: u32) -> (usize, usize) {
    let mut requeued = 0;
    let mut dead = 0;
    for msg in inner.messages.values_mut() {
        if msg.state != MessageState::Inflight || msg.visibility_deadline.is_some_and(|d| d > now) {
            continue;
        }
        msg.visibility_deadline = None;
        if msg.attempts >= max_attempts {
            msg.state = MessageState::DeadLettered;
            dead += 1;
        } else {
            msg.state = MessageState::Pending;
            inner.pending.insert(msg.msg_id);
            requeued += 1;
        }
    }
    (requeued, dead)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect<T> {
    Applied(T),
    Skipped,
}

/// Keys whose effect has been applied. Gives exactly-once effects on top of
/// at-least-once delivery.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectLedger {
    applied: BTreeSet<String>,
}

impl EffectLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs `handler` unless `key` already produced an effect. A failing
    /// handler leaves no trace, so a later delivery may try again.
    pub fn dedupe_effect<T, E>(&mut self, key: &str, handler: impl FnOnce() -> Result<T, E>) -> Result<Effect<T>, E> {
        if self.applied.contains(key) {
            return Ok(Effect::Skipped);
        }
        let out = handler()?;
        self.applied.insert(key.to_string());
        Ok(Effect::Applied(out))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.applied.contains(key)
    }

    pub fn len(&self) -> usize {
        self.applied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.applied.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::journal::MemStore;
    use uuid::Uuid;

    fn stop(n: u128) -> Command {
        Command::Stop { uuid: Uuid::from_u128(n) }
    }

    fn open(store: &MemStore, clock: &Clock) -> (TaskQueue, RecoveryReport) {
        TaskQueue::open(Box::new(store.clone()), clock.clone(), QueueConfig::default()).unwrap()
    }

    #[test]
    fn ids_start_at_one_and_increase() {
        let (q, _) = open(&MemStore::new(), &Clock::simulated(0));
        assert_eq!(q.enqueue(stop(1), "k1").unwrap(), 1);
        assert_eq!(q.enqueue(stop(2), "k2").unwrap(), 2);
    }

    #[test]
    fn enqueue_survives_a_crash() {
        let store = MemStore::new();
        let clock = Clock::simulated(0);
        let id = open(&store, &clock).0.enqueue(stop(1), "k1").unwrap();
        let (q, report) = open(&store, &clock);
        assert_eq!(report.messages, 1);
        let msg = q.receive("w", 30).unwrap().unwrap();
        assert_eq!((msg.msg_id, msg.attempts, msg.state), (id, 1, MessageState::Inflight));
        assert_eq!(msg.command, stop(1));
        // new ids continue after the replayed ones
        assert_eq!(q.enqueue(stop(2), "k2").unwrap(), 2);
    }

    #[test]
    fn empty_queue_returns_nothing() {
        let (q, report) = open(&MemStore::new(), &Clock::simulated(0));
        assert_eq!(report, RecoveryReport::default());
        assert!(q.receive("w", 30).unwrap().is_none());
        assert!(matches!(q.receive("w", 0), Err(QueueError::InvalidTimeout)));
    }

    #[test]
    fn lapsed_delivery_is_redelivered() {
        let clock = Clock::simulated(0);
        let (q, _) = open(&MemStore::new(), &clock);
        q.enqueue(stop(1), "k1").unwrap();
        assert_eq!(q.receive("w1", 30).unwrap().unwrap().attempts, 1);
        clock.advance(29);
        assert!(q.receive("w2", 30).unwrap().is_none(), "still invisible inside the window");
        clock.advance(1);
        let again = q.receive("w2", 30).unwrap().unwrap();
        assert_eq!((again.attempts, again.command.clone()), (2, stop(1)));
    }

    #[test]
    fn ack_is_terminal_and_durable() {
        let store = MemStore::new();
        let clock = Clock::simulated(0);
        let (q, _) = open(&store, &clock);
        let id = q.enqueue(stop(1), "k1").unwrap();
        q.receive("w", 30).unwrap();
        assert_eq!(q.ack(id).unwrap(), AckStatus::Acked);
        assert_eq!(q.ack(id).unwrap(), AckStatus::AlreadyAcked);
        clock.advance(100);
        assert!(q.receive("w", 30).unwrap().is_none());
        assert!(matches!(q.ack(999), Err(QueueError::UnknownMessage(999))));
        drop(q);
        let (q, _) = open(&store, &clock);
        assert_eq!(q.get(id).unwrap().state, MessageState::Acked);
        assert!(q.receive("w", 30).unwrap().is_none());
    }

    #[test]
    fn recovery_requeues_lapsed_inflight() {
        let store = MemStore::new();
        let clock = Clock::simulated(0);
        {
            let (q, _) = open(&store, &clock);
            q.enqueue(stop(1), "a").unwrap();
            q.receive("w", 30).unwrap();
        }
        clock.advance(31);
        let (q, report) = open(&store, &clock);
        assert_eq!(report.requeued, 1);
        assert_eq!(q.get(1).unwrap().state, MessageState::Pending);
        assert_eq!(q.receive("w", 30).unwrap().unwrap().attempts, 2);
    }

    #[test]
    fn recovery_keeps_unexpired_inflight_invisible() {
        let store = MemStore::new();
        let clock = Clock::simulated(0);
        {
            let (q, _) = open(&store, &clock);
            q.enqueue(stop(1), "a").unwrap();
            q.receive("w", 30).unwrap();
        }
        let (q, _) = open(&store, &clock);
        assert_eq!(q.get(1).unwrap().state, MessageState::Inflight);
        assert!(q.receive("w", 30).unwrap().is_none());
    }

    #[test]
    fn poison_message_is_dead_lettered() {
        let clock = Clock::simulated(0);
        let (q, _) = open(&MemStore::new(), &clock);
        q.enqueue(stop(1), "poison").unwrap();
        for attempt in 1..=DEFAULT_MAX_ATTEMPTS {
            assert_eq!(q.receive("w", 1).unwrap().unwrap().attempts, attempt);
            clock.advance(1);
        }
        assert!(q.receive("w", 1).unwrap().is_none());
        assert_eq!(q.dead_letters().len(), 1);
        assert_eq!(q.outstanding(), 0);
    }

    #[test]
    fn failed_journal_write_hides_the_message() {
        let store = MemStore::new();
        let (q, _) = open(&store, &Clock::simulated(0));
        store.set_failing(true);
        assert!(matches!(q.enqueue(stop(1), "k"), Err(QueueError::StorageFailure(_))));
        store.set_failing(false);
        assert!(q.receive("w", 30).unwrap().is_none());
        assert_eq!(q.enqueue(stop(1), "k").unwrap(), 1);
    }

    #[test]
    fn corrupted_record_stops_replay() {
        let store = MemStore::new();
        let clock = Clock::simulated(0);
        {
            let (q, _) = open(&store, &clock);
            q.enqueue(stop(1), "a").unwrap();
            q.enqueue(stop(2), "b").unwrap();
        }
        let first_len = store.len() / 2;
        store.flip_byte(first_len + 10);
        let (q, report) = open(&store, &clock);
        assert_eq!(report.corruption.as_ref().unwrap().offset, first_len as u64);
        assert_eq!(report.messages, 1);
        assert_eq!(q.enqueue(stop(3), "c").unwrap(), 2);
    }

    #[test]
    fn dedupe_runs_each_key_once() {
        let mut ledger = EffectLedger::new();
        let mut effects = 0;
        assert_eq!(ledger.dedupe_effect::<_, ()>("k", || {
            effects += 1;
            Ok(())
        }), Ok(Effect::Applied(())));
        assert_eq!(ledger.dedupe_effect::<(), ()>("k", || unreachable!()), Ok(Effect::Skipped));
        assert_eq!(ledger.dedupe_effect::<_, ()>("other", || Ok(1)), Ok(Effect::Applied(1)));
        assert_eq!(effects, 1);
        // failures do not consume the key
        assert_eq!(ledger.dedupe_effect::<(), _>("f", || Err("no")), Err("no"));
        assert_eq!(ledger.dedupe_effect::<_, ()>("f", || Ok(2)), Ok(Effect::Applied(2)));
    }
}
