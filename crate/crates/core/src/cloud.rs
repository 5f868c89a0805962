//! Central node: the shared task queue, the simulated hypervisor it drives,
//! and the clock both run on.

use parking_lot::{Mutex, MutexGuard};
use thiserror::Error;

use crate::clock::Clock;
use crate::hypersim::{CommandResult, HvError, Hypervisor, Outcome, StatusReport, Worker};
use crate::journal::{JournalStore, MemStore};
use crate::model::{Command, ModelError};
use crate::queue::{QueueConfig, QueueError, RecoveryReport, TaskQueue};

#[derive(Debug, Error)]
pub enum CloudError {
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error("invalid command: {0}")]
    Invalid(#[from] ModelError),
    #[error(transparent)]
    Hypervisor(#[from] HvError),
    #[error("message {0} was not processed")]
    NotProcessed(u64),
}

impl CloudError {
    pub fn code(&self) -> &'static str {
        match self {
            CloudError::Queue(e) => e.code(),
            CloudError::Invalid(e) => e.code(),
            CloudError::Hypervisor(e) => e.code(),
            CloudError::NotProcessed(_) => "NotProcessed",
        }
    }
}

pub struct NestedCloud {
    queue: TaskQueue,
    hv: Mutex<Hypervisor>,
    worker: Worker,
}

impl NestedCloud {
    /// A cloud whose queue lives in memory only.
    pub fn in_memory(hv: Hypervisor, clock: Clock) -> Self {
        Self::open(hv, Box::new(MemStore::new()), clock, QueueConfig::default()).expect("memory journal cannot fail").0
    }

    /// Recovers the queue from `store` and attaches it to `hv`.
    pub fn open(hv: Hypervisor, store: Box<dyn JournalStore>, clock: Clock, config: QueueConfig) -> Result<(Self, RecoveryReport), CloudError> {
        let (queue, report) = TaskQueue::open(store, clock, config)?;
        let worker = Worker::new("worker-0", config.visibility_timeout_s);
        Ok((Self { queue, hv: Mutex::new(hv), worker }, report))
    }

    pub fn clock(&self) -> &Clock {
        self.queue.clock()
    }

    pub fn queue(&self) -> &TaskQueue {
        &self.queue
    }

    pub fn hypervisor(&self) -> MutexGuard<'_, Hypervisor> {
        self.hv.lock()
    }

    pub fn hypervisor_mutex(&self) -> &Mutex<Hypervisor> {
        &self.hv
    }

    pub fn worker(&self) -> &Worker {
        &self.worker
    }

    pub fn submit(&self, command: Command, key: &str) -> Result<u64, CloudError> {
        command.validate()?;
        Ok(self.queue.enqueue(command, key)?)
    }

    /// Handles pending messages until none is left.
    pub fn drain(&self) -> Result<Vec<CommandResult>, CloudError> {
        let mut out = Vec::new();
        while let Some(r) = self.worker.poll(&self.queue, &self.hv)? {
            out.push(r);
        }
        Ok(out)
    }

    /// Enqueues `command` and runs the queue until it has been handled.
    pub fn execute(&self, command: Command, key: &str) -> Result<CommandResult, CloudError> {
        let id = self.submit(command, key)?;
        self.drain()?
            .into_iter()
            .find(|r| r.msg_id == id)
            .ok_or(CloudError::NotProcessed(id))
    }

    /// Runs the scheduler at the current time and enqueues what it emits.
    pub fn tick(&self) -> Result<Vec<u64>, CloudError> {
        let now = self.clock().now();
        let emitted = self.hv.lock().tick(now)?;
        emitted.into_iter().map(|e| self.submit(e.command, &e.idempotency_key)).collect()
    }

    /// Moves a simulated clock forward one second at a time, ticking and
    /// draining after each step.
    pub fn advance(&self, secs: u64) -> Result<Vec<CommandResult>, CloudError> {
        let mut out = Vec::new();
        for _ in 0..secs {
            self.clock().advance(1);
            self.tick()?;
            out.extend(self.drain()?);
        }
        if secs == 0 {
            self.tick()?;
            out.extend(self.drain()?);
        }
        Ok(out)
    }

    pub fn status(&self) -> StatusReport {
        self.hv.lock().status(self.clock().now())
    }
}

/// Turns a rejected result into its error code and detail.
pub fn rejection(result: &CommandResult) -> Option<(&str, &str)> {
    match &result.outcome {
        Outcome::Rejected { code, detail, .. } => Some((code, detail)),
        _ => None,
    }
}
