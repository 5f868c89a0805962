//! Admission control over the nesting tree and time-based allocations.
//!
//! [`Inventory`] owns every [`HostNode`] and [`VmRecord`]; it is the only
//! place capacity is charged or released, so checking a request and
//! reserving it always happen under the same `&mut` borrow.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use crate::clock::{Clock, ClockMode};
use crate::journal::{Journal, JournalError, JournalStore, RecordKind};
use crate::model::{Command, Dimension, HostNode, ModelError, NodeId, ResourceVector, Timestamp, VmDefinition, VmRecord, VmState, MAX_LEVEL};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CapacityError {
    #[error("admission denied on {0}")]
    AdmissionDenied(Dimension),
    #[error("cannot shrink below child usage on {0}")]
    ShrinkBelowChildUsage(Dimension),
    #[error("unknown host {0}")]
    UnknownHost(NodeId),
    #[error("unknown vm {0}")]
    UnknownVm(Uuid),
    #[error("vm {0} already exists")]
    DuplicateUuid(Uuid),
    #[error("nesting depth exceeded: level {0}")]
    NestingDepthExceeded(u8),
    #[error("level {level} vm cannot run on host {host}")]
    LevelMismatch { level: u8, host: NodeId },
    #[error("parent {0} is not running")]
    ParentNotRunning(NodeId),
    #[error("illegal state {0}")]
    IllegalState(VmState),
    #[error("invalid definition: {0}")]
    InvalidDefinition(ModelError),
}

impl CapacityError {
    pub fn code(&self) -> &'static str {
        match self {
            CapacityError::AdmissionDenied(_) => "AdmissionDenied",
            CapacityError::ShrinkBelowChildUsage(_) => "ShrinkBelowChildUsage",
            CapacityError::UnknownHost(_) => "UnknownHost",
            CapacityError::UnknownVm(_) => "UnknownVm",
            CapacityError::DuplicateUuid(_) => "DuplicateUuid",
            CapacityError::NestingDepthExceeded(_) => "NestingDepthExceeded",
            CapacityError::LevelMismatch { .. } => "LevelMismatch",
            CapacityError::ParentNotRunning(_) => "ParentNotRunning",
            CapacityError::IllegalState(_) => "IllegalState",
            CapacityError::InvalidDefinition(e) => e.code(),
        }
    }
}

impl From<ModelError> for CapacityError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NestingDepthExceeded(l) => CapacityError::NestingDepthExceeded(l),
            ModelError::IllegalTransition { from, .. } => CapacityError::IllegalState(from),
            other => CapacityError::InvalidDefinition(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "dimension", rename_all = "snake_case")]
pub enum Admission {
    Granted,
    Denied(Dimension),
}

impl Admission {
    pub fn is_granted(self) -> bool {
        self == Admission::Granted
    }

    fn into_result(self) -> Result<(), CapacityError> {
        match self {
            Admission::Granted => Ok(()),
            Admission::Denied(d) => Err(CapacityError::AdmissionDenied(d)),
        }
    }
}

/// Hosts and VM records of one deployment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    hosts: BTreeMap<NodeId, HostNode>,
    records: BTreeMap<Uuid, VmRecord>,
}

impl Inventory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_physical_host(&mut self, name: &str, capacity: ResourceVector) -> NodeId {
        let id = NodeId::Physical(name.to_string());
        self.hosts.entry(id.clone()).or_insert_with(|| HostNode::new(id.clone(), 0, capacity));
        id
    }

    pub fn host(&self, id: &NodeId) -> Option<&HostNode> {
        self.hosts.get(id)
    }

    pub fn hosts(&self) -> impl Iterator<Item = &HostNode> {
        self.hosts.values()
    }

    pub fn physical_hosts(&self) -> impl Iterator<Item = &HostNode> {
        self.hosts.values().filter(|h| h.level == 0)
    }

    pub fn record(&self, uuid: &Uuid) -> Option<&VmRecord> {
        self.records.get(uuid)
    }

    pub fn records(&self) -> impl Iterator<Item = &VmRecord> {
        self.records.values()
    }

    /// Consumables charged to `host`: active children plus volume disk.
    pub fn usage(&self, id: &NodeId) -> Result<ResourceVector, CapacityError> {
        let host = self.hosts.get(id).ok_or_else(|| CapacityError::UnknownHost(id.clone()))?;
        let mut used = ResourceVector::disk_only(host.volume_disk_gib);
        for child in &host.children {
            let rec = &self.records[child];
            if rec.state.consumes_capacity() {
                used = used.plus(&rec.definition.resources);
            }
        }
        Ok(used)
    }

    /// Capacity minus usage per consumable; priority is the host's own.
    pub fn free_capacity(&self, id: &NodeId) -> Result<ResourceVector, CapacityError> {
        let host = self.hosts.get(id).ok_or_else(|| CapacityError::UnknownHost(id.clone()))?;
        let mut free = host.capacity.saturating_minus(&self.usage(id)?);
        free.cpu_priority = host.capacity.cpu_priority;
        Ok(free)
    }

    /// Fit test of `request` against the free pool of `host`; denial names
    /// the first short dimension in cores, ram, disk, nics order.
    pub fn admit(&self, host: &NodeId, request: &ResourceVector) -> Result<Admission, CapacityError> {
        let free = self.free_capacity(host)?;
        Ok(match request.first_shortfall(&free) {
            None => Admission::Granted,
            Some(d) => Admission::Denied(d),
        })
    }

    /// Creates the record for `def` under `host` and moves it to `state`
    /// (RUNNING or SCHEDULED), charging its resources to the host.
    pub fn place_vm(&mut self, def: VmDefinition, host: &NodeId, state: VmState, now: Timestamp) -> Result<&VmRecord, CapacityError> {
        if def.level > MAX_LEVEL {
            return Err(CapacityError::NestingDepthExceeded(def.level));
        }
        def.validate()?;
        if self.records.contains_key(&def.uuid) {
            return Err(CapacityError::DuplicateUuid(def.uuid));
        }
        let parent = self.hosts.get(host).ok_or_else(|| CapacityError::UnknownHost(host.clone()))?;
        if parent.level + 1 != def.level {
            return Err(CapacityError::LevelMismatch { level: def.level, host: host.clone() });
        }
        self.ensure_parent_running(host)?;
        self.admit(host, &def.resources)?.into_result()?;

        let uuid = def.uuid;
        let mut rec = VmRecord::new(def, host.clone());
        rec.transition(state, now)?;
        if rec.definition.level == 1 {
            let node = NodeId::Vm(uuid);
            self.hosts.insert(node.clone(), HostNode::new(node, 1, rec.definition.resources));
        }
        self.hosts.get_mut(host).expect("checked").children.insert(uuid);
        self.records.insert(uuid, rec);
        Ok(&self.records[&uuid])
    }

    /// Moves a SCHEDULED or STOPPED record to RUNNING, re-admitting it if it
    /// was not holding capacity.
    pub fn start_vm(&mut self, uuid: &Uuid, now: Timestamp) -> Result<&VmRecord, CapacityError> {
        let rec = self.records.get(uuid).ok_or(CapacityError::UnknownVm(*uuid))?;
        if !matches!(rec.state, VmState::Scheduled | VmState::Stopped) {
            return Err(CapacityError::IllegalState(rec.state));
        }
        let parent = rec.parent.clone();
        self.ensure_parent_running(&parent)?;
        if !rec.state.consumes_capacity() {
            let resources = rec.definition.resources;
            self.admit(&parent, &resources)?.into_result()?;
        }
        let rec = self.records.get_mut(uuid).expect("checked");
        rec.transition(VmState::Running, now)?;
        Ok(rec)
    }

    /// Stops a RUNNING or SCHEDULED VM, children first when it hosts any.
    /// Returns every record that changed, in stop order.
    pub fn stop_vm(&mut self, uuid: &Uuid, now: Timestamp) -> Result<Vec<VmRecord>, CapacityError> {
        let rec = self.records.get(uuid).ok_or(CapacityError::UnknownVm(*uuid))?;
        if !matches!(rec.state, VmState::Running | VmState::Scheduled) {
            return Err(CapacityError::IllegalState(rec.state));
        }
        let mut stopped = Vec::new();
        if let Some(host) = self.hosts.get(&NodeId::Vm(*uuid)) {
            let children: Vec<Uuid> = host.children.iter().copied().collect();
            for child in children {
                if self.records[&child].state.consumes_capacity() {
                    stopped.extend(self.stop_vm(&child, now)?);
                }
            }
        }
        let rec = self.records.get_mut(uuid).expect("checked");
        rec.transition(VmState::Stopped, now)?;
        stopped.push(rec.clone());
        Ok(stopped)
    }

    /// Marks a RUNNING VM failed; children of a failed host are stopped.
    pub fn fail_vm(&mut self, uuid: &Uuid, now: Timestamp) -> Result<Vec<VmRecord>, CapacityError> {
        let rec = self.records.get(uuid).ok_or(CapacityError::UnknownVm(*uuid))?;
        if rec.state != VmState::Running {
            return Err(CapacityError::IllegalState(rec.state));
        }
        let mut changed = Vec::new();
        if let Some(host) = self.hosts.get(&NodeId::Vm(*uuid)) {
            let children: Vec<Uuid> = host.children.iter().copied().collect();
            for child in children {
                if self.records[&child].state.consumes_capacity() {
                    changed.extend(self.stop_vm(&child, now)?);
                }
            }
        }
        let rec = self.records.get_mut(uuid).expect("checked");
        rec.transition(VmState::Failed, now)?;
        changed.push(rec.clone());
        Ok(changed)
    }

    /// Replaces the resources of a RUNNING VM in one step.
    ///
    /// The parent must admit the growth on every dimension; an L1 host may
    /// not shrink below what its own children and volumes hold.
    pub fn rescale_vm(&mut self, uuid: &Uuid, new: ResourceVector, now: Timestamp) -> Result<&VmRecord, CapacityError> {
        new.validate()?;
        let rec = self.records.get(uuid).ok_or(CapacityError::UnknownVm(*uuid))?;
        if rec.state != VmState::Running {
            return Err(CapacityError::IllegalState(rec.state));
        }
        let current = rec.definition.resources;
        let parent = rec.parent.clone();
        let headroom = self.free_capacity(&parent)?.plus(&current);
        if let Some(d) = new.first_shortfall(&headroom) {
            return Err(CapacityError::AdmissionDenied(d));
        }
        let own = NodeId::Vm(*uuid);
        if self.hosts.contains_key(&own) {
            let used = self.usage(&own)?;
            if let Some(d) = used.first_shortfall(&new) {
                return Err(CapacityError::ShrinkBelowChildUsage(d));
            }
            self.hosts.get_mut(&own).expect("checked").capacity = new;
        }
        let rec = self.records.get_mut(uuid).expect("checked");
        rec.transition(VmState::Running, now)?;
        rec.definition.resources = new;
        Ok(rec)
    }

    /// Charges `gib` of volume disk to `host`.
    pub fn reserve_disk(&mut self, host: &NodeId, gib: u64) -> Result<(), CapacityError> {
        self.admit(host, &ResourceVector::disk_only(gib))?.into_result()?;
        self.hosts.get_mut(host).expect("admit checked the host").volume_disk_gib += gib;
        Ok(())
    }

    pub fn release_disk(&mut self, host: &NodeId, gib: u64) -> Result<(), CapacityError> {
        let h = self.hosts.get_mut(host).ok_or_else(|| CapacityError::UnknownHost(host.clone()))?;
        h.volume_disk_gib = h.volume_disk_gib.saturating_sub(gib);
        Ok(())
    }

    /// Checks the hierarchical capacity invariant on every host and that no
    /// RUNNING VM sits under a non-running L1 host.
    pub fn check_invariants(&self) -> Result<(), String> {
        for host in self.hosts.values() {
            let used = self.usage(&host.node_id).map_err(|e| e.to_string())?;
            if let Some(d) = used.first_shortfall(&host.capacity) {
                return Err(format!("host {} over capacity on {d}: used {used:?} cap {:?}", host.node_id, host.capacity));
            }
            if let NodeId::Vm(uuid) = &host.node_id {
                let rec = self.records.get(uuid).ok_or_else(|| format!("host {uuid} has no record"))?;
                if rec.definition.resources != host.capacity {
                    return Err(format!("L1 host {uuid} capacity differs from its definition"));
                }
                if rec.state != VmState::Running && rec.state != VmState::Scheduled {
                    for child in &host.children {
                        if self.records[child].state == VmState::Running {
                            return Err(format!("running vm {child} under {} host {uuid}", rec.state));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn ensure_parent_running(&self, host: &NodeId) -> Result<(), CapacityError> {
        if let NodeId::Vm(parent) = host {
            let state = self.records.get(parent).map(|r| r.state);
            if state != Some(VmState::Running) {
                return Err(CapacityError::ParentNotRunning(host.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("start time {start} is before now ({now})")]
    StartInPast { start: Timestamp, now: Timestamp },
    #[error("duration must be positive")]
    InvalidDuration,
    #[error("clock went backwards: tick({now}) after tick({last})")]
    ClockWentBackwards { now: Timestamp, last: Timestamp },
    #[error("invalid definition: {0}")]
    InvalidDefinition(ModelError),
    #[error("schedule journal failure: {0}")]
    Storage(String),
}

impl ScheduleError {
    pub fn code(&self) -> &'static str {
        match self {
            ScheduleError::StartInPast { .. } => "StartInPast",
            ScheduleError::InvalidDuration => "InvalidDuration",
            ScheduleError::ClockWentBackwards { .. } => "ClockWentBackwards",
            ScheduleError::InvalidDefinition(e) => e.code(),
            ScheduleError::Storage(_) => "StorageFailure",
        }
    }
}

impl From<JournalError> for ScheduleError {
    fn from(e: JournalError) -> Self {
        ScheduleError::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AllocationState {
    Waiting,
    Active,
    Completed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledAllocation {
    pub id: u64,
    pub definition: VmDefinition,
    pub host: NodeId,
    pub start_time: Timestamp,
    pub duration_s: u64,
    pub state: AllocationState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ScheduledAllocation {
    pub fn end_time(&self) -> Timestamp {
        self.start_time + self.duration_s
    }
}

/// A command produced by [`Scheduler::tick`], with its idempotency key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmittedCommand {
    pub command: Command,
    pub idempotency_key: String,
}

/// Allocations that start at a future time. Capacity is only taken when an
/// allocation activates.
#[derive(Serialize, Deserialize, Default)]
pub struct Scheduler {
    allocations: BTreeMap<u64, ScheduledAllocation>,
    next_id: u64,
    last_tick: Option<Timestamp>,
    #[serde(skip)]
    journal: Option<Journal>,
}

impl std::fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler")
            .field("allocations", &self.allocations)
            .field("next_id", &self.next_id)
            .field("last_tick", &self.last_tick)
            .finish()
    }
}

impl Clone for Scheduler {
    fn clone(&self) -> Self {
        Self { allocations: self.allocations.clone(), next_id: self.next_id, last_tick: self.last_tick, journal: None }
    }
}

impl Scheduler {
    pub fn new() -> Self {
        Self { next_id: 1, ..Self::default() }
    }

    /// Opens a journaled scheduler; each record (kind 4) holds the latest
    /// JSON snapshot of one allocation.
    pub fn open(store: Box<dyn JournalStore>) -> Result<(Self, Option<crate::journal::CorruptJournal>), ScheduleError> {
        let (journal, replay) = Journal::open(store)?;
        let mut s = Scheduler::new();
        for rec in replay.records.iter().filter(|r| r.kind == RecordKind::Allocation) {
            let alloc: ScheduledAllocation =
                serde_json::from_slice(&rec.payload).map_err(|e| ScheduleError::Storage(format!("record at {}: {e}", rec.offset)))?;
            s.next_id = s.next_id.max(alloc.id + 1);
            s.allocations.insert(alloc.id, alloc);
        }
        s.journal = Some(journal);
        Ok((s, replay.corruption))
    }

    /// Rebuilds allocations from `store`; when the journal is empty the
    /// `snapshot` allocations seed it instead. The last tick time always
    /// comes from the snapshot.
    pub fn restore(store: Box<dyn JournalStore>, snapshot: &Scheduler) -> Result<(Self, Option<crate::journal::CorruptJournal>), ScheduleError> {
        let (mut s, corruption) = Scheduler::open(store)?;
        if s.allocations.is_empty() {
            let journal = s.journal.take().expect("opened with a journal");
            s = Scheduler { journal: None, ..snapshot.clone() };
            s.attach_journal(journal)?;
        }
        s.last_tick = snapshot.last_tick.max(s.last_tick);
        Ok((s, corruption))
    }

    /// Attaches a journal; existing allocations are written to it.
    pub fn attach_journal(&mut self, journal: Journal) -> Result<(), ScheduleError> {
        self.journal = Some(journal);
        let all: Vec<ScheduledAllocation> = self.allocations.values().cloned().collect();
        for a in &all {
            self.persist(a)?;
        }
        Ok(())
    }

    pub fn allocations(&self) -> impl Iterator<Item = &ScheduledAllocation> {
        self.allocations.values()
    }

    pub fn allocation(&self, id: u64) -> Option<&ScheduledAllocation> {
        self.allocations.get(&id)
    }

    pub fn last_tick(&self) -> Option<Timestamp> {
        self.last_tick
    }

    pub fn schedule_future(
        &mut self,
        definition: VmDefinition,
        host: NodeId,
        start_time: Timestamp,
        duration_s: u64,
        now: Timestamp,
    ) -> Result<ScheduledAllocation, ScheduleError> {
        definition.validate().map_err(ScheduleError::InvalidDefinition)?;
        if start_time < now {
            return Err(ScheduleError::StartInPast { start: start_time, now });
        }
        if duration_s == 0 {
            return Err(ScheduleError::InvalidDuration);
        }
        let alloc = ScheduledAllocation {
            id: self.next_id.max(1),
            definition,
            host,
            start_time,
            duration_s,
            state: AllocationState::Waiting,
            reason: None,
        };
        self.persist(&alloc)?;
        self.next_id = alloc.id + 1;
        self.allocations.insert(alloc.id, alloc.clone());
        Ok(alloc)
    }

    /// Activates due allocations (in scheduling order) and expires finished
    /// ones. Activation reserves capacity by placing the VM as SCHEDULED and
    /// emits a Launch; expiry emits a Stop. Both bounds are inclusive.
    pub fn tick(&mut self, now: Timestamp, inventory: &mut Inventory) -> Result<Vec<EmittedCommand>, ScheduleError> {
        if let Some(last) = self.last_tick {
            if now < last {
                return Err(ScheduleError::ClockWentBackwards { now, last });
            }
        }
        self.last_tick = Some(now);
        let mut emitted = Vec::new();
        let ids: Vec<u64> = self.allocations.keys().copied().collect();
        for id in ids {
            let alloc = &self.allocations[&id];
            if alloc.state == AllocationState::Waiting && alloc.start_time <= now {
                let placed = inventory.place_vm(alloc.definition.clone(), &alloc.host, VmState::Scheduled, now).map(|_| ());
                let alloc = self.allocations.get_mut(&id).expect("id from keys");
                match placed {
                    Ok(()) => {
                        alloc.state = AllocationState::Active;
                        emitted.push(EmittedCommand {
                            command: Command::Launch { definition: alloc.definition.clone(), host: Some(alloc.host.clone()) },
                            idempotency_key: format!("alloc-{id}-launch"),
                        });
                    }
                    Err(e) => {
                        alloc.state = AllocationState::Cancelled;
                        alloc.reason = Some(e.to_string());
                    }
                }
                let snapshot = alloc.clone();
                self.persist(&snapshot)?;
            }
            let alloc = &self.allocations[&id];
            if alloc.state == AllocationState::Active && alloc.end_time() <= now {
                let alloc = self.allocations.get_mut(&id).expect("id from keys");
                alloc.state = AllocationState::Completed;
                emitted.push(EmittedCommand {
                    command: Command::Stop { uuid: alloc.definition.uuid },
                    idempotency_key: format!("alloc-{id}-stop"),
                });
                let snapshot = alloc.clone();
                self.persist(&snapshot)?;
            }
        }
        Ok(emitted)
    }

    fn persist(&mut self, alloc: &ScheduledAllocation) -> Result<(), ScheduleError> {
        if let Some(j) = self.journal.as_mut() {
            let bytes = serde_json::to_vec(alloc).map_err(|e| ScheduleError::Storage(e.to_string()))?;
            j.append(RecordKind::Allocation, &bytes)?;
        }
        Ok(())
    }
}
