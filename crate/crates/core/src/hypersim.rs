//! Simulated nested hypervisor and the satellite worker that drives it.

use std::collections::BTreeMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use uuid::Uuid;

use crate::blockstore::{BlockStore, BlockVolume, VolumeError};
use crate::model::{serialize_definition, Command, ModelError, NodeId, ResourceVector, Timestamp, VmDefinition, VmRecord, VmState, VolumeId};
use crate::perfbench::OverheadModel;
use crate::queue::{Effect, EffectLedger, QueueError, QueueMessage, TaskQueue};
use crate::scheduler::{CapacityError, EmittedCommand, Inventory, ScheduleError, ScheduledAllocation, Scheduler};

pub const L1_BOOT_LATENCY_MS: u64 = 500;
pub const DEFAULT_HOST: &str = "l0";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HvError {
    #[error(transparent)]
    Capacity(#[from] CapacityError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("level {0} vm needs an explicit host")]
    MissingHost(u8),
}

impl From<ModelError> for HvError {
    fn from(e: ModelError) -> Self {
        HvError::Capacity(e.into())
    }
}

impl HvError {
    pub fn code(&self) -> &'static str {
        match self {
            HvError::Capacity(e) => e.code(),
            HvError::Volume(e) => e.code(),
            HvError::Schedule(e) => e.code(),
            HvError::MissingHost(_) => "MissingHost",
        }
    }

    /// Domain errors cannot be fixed by retrying; storage failures can.
    pub fn is_permanent(&self) -> bool {
        !matches!(self, HvError::Schedule(ScheduleError::Storage(_)))
    }
}

/// Performance view of one VM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimMachine {
    pub uuid: Uuid,
    pub level: u8,
    pub effective_service_factor: f64,
    pub boot_latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmStatus {
    pub uuid: Uuid,
    pub name: String,
    pub level: u8,
    pub state: VmState,
    pub resources: ResourceVector,
    pub image_ref: String,
    pub uptime_s: u64,
    /// Present when the VM is itself a host (L1).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub host: Option<Box<HostStatus>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostStatus {
    pub node_id: NodeId,
    pub level: u8,
    pub capacity: ResourceVector,
    pub free: ResourceVector,
    pub volume_disk_gib: u64,
    pub vms: Vec<VmStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub now: Timestamp,
    pub hosts: Vec<HostStatus>,
    pub volumes: Vec<BlockVolume>,
    pub allocations: Vec<ScheduledAllocation>,
}

impl StatusReport {
    pub fn find_vm(&self, uuid: &Uuid) -> Option<&VmStatus> {
        fn walk<'a>(vms: &'a [VmStatus], uuid: &Uuid) -> Option<&'a VmStatus> {
            vms.iter().find_map(|v| if v.uuid == *uuid { Some(v) } else { v.host.as_ref().and_then(|h| walk(&h.vms, uuid)) })
        }
        self.hosts.iter().find_map(|h| walk(&h.vms, uuid))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("status is plain data")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Outcome {
    Applied { output: Value },
    Skipped,
    Rejected { code: String, detail: String, permanent: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandResult {
    pub msg_id: u64,
    pub idempotency_key: String,
    pub outcome: Outcome,
}

impl CommandResult {
    pub fn is_ok(&self) -> bool {
        !matches!(self.outcome, Outcome::Rejected { .. })
    }
}

/// The whole simulated deployment: hosts, VMs, volumes, scheduled
/// allocations and the set of applied idempotency keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hypervisor {
    inventory: Inventory,
    scheduler: Scheduler,
    blocks: BlockStore,
    ledger: EffectLedger,
    /// Canonical definition documents of every VM ever launched.
    definitions: BTreeMap<Uuid, String>,
    overhead: OverheadModel,
    default_host: NodeId,
}

impl Hypervisor {
    pub fn new(capacity: ResourceVector) -> Self {
        Self::with_host(DEFAULT_HOST, capacity)
    }

    pub fn with_host(name: &str, capacity: ResourceVector) -> Self {
        let mut inventory = Inventory::new();
        let default_host = inventory.add_physical_host(name, capacity);
        Self {
            inventory,
            scheduler: Scheduler::new(),
            blocks: BlockStore::new(),
            ledger: EffectLedger::new(),
            definitions: BTreeMap::new(),
            overhead: OverheadModel::default(),
            default_host,
        }
    }

    pub fn add_physical_host(&mut self, name: &str, capacity: ResourceVector) -> NodeId {
        self.inventory.add_physical_host(name, capacity)
    }

    pub fn default_host(&self) -> &NodeId {
        &self.default_host
    }

    pub fn inventory(&self) -> &Inventory {
        &self.inventory
    }

    pub fn blocks(&self) -> &BlockStore {
        &self.blocks
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn scheduler_mut(&mut self) -> &mut Scheduler {
        &mut self.scheduler
    }

    pub fn replace_scheduler(&mut self, scheduler: Scheduler) -> Scheduler {
        std::mem::replace(&mut self.scheduler, scheduler)
    }

    pub fn ledger(&self) -> &EffectLedger {
        &self.ledger
    }

    pub fn set_overhead(&mut self, model: OverheadModel) {
        self.overhead = model;
    }

    pub fn definition_document(&self, uuid: &Uuid) -> Option<&str> {
        self.definitions.get(uuid).map(String::as_str)
    }

    pub fn record(&self, uuid: &Uuid) -> Option<&VmRecord> {
        self.inventory.record(uuid)
    }

    pub fn machine(&self, uuid: &Uuid) -> Option<SimMachine> {
        let rec = self.inventory.record(uuid)?;
        let level = rec.definition.level;
        let factor = self.overhead.factor(level);
        let boot = if level <= 1 { L1_BOOT_LATENCY_MS } else { (L1_BOOT_LATENCY_MS as f64 * factor).round() as u64 };
        Some(SimMachine { uuid: *uuid, level, effective_service_factor: factor, boot_latency_ms: boot })
    }

    fn resolve_host(&self, level: u8, host: Option<&NodeId>) -> Result<NodeId, HvError> {
        match host {
            Some(h) => Ok(h.clone()),
            None if level <= 1 => Ok(self.default_host.clone()),
            None => Err(HvError::MissingHost(level)),
        }
    }

    /// Boots `def` on `host`. A Launch for a record the scheduler already
    /// placed as SCHEDULED completes that placement.
    pub fn launch_vm(&mut self, def: VmDefinition, host: Option<&NodeId>, now: Timestamp) -> Result<VmRecord, HvError> {
        let host = self.resolve_host(def.level, host)?;
        if let Some(rec) = self.inventory.record(&def.uuid) {
            if rec.state == VmState::Scheduled && rec.definition == def && rec.parent == host {
                return Ok(self.inventory.start_vm(&def.uuid, now)?.clone());
            }
            return Err(CapacityError::DuplicateUuid(def.uuid).into());
        }
        let doc = String::from_utf8(serialize_definition(&def)).expect("document is utf-8");
        let rec = self.inventory.place_vm(def, &host, VmState::Running, now)?.clone();
        self.definitions.insert(rec.uuid(), doc);
        Ok(rec)
    }

    pub fn start_vm(&mut self, uuid: &Uuid, now: Timestamp) -> Result<VmRecord, HvError> {
        Ok(self.inventory.start_vm(uuid, now)?.clone())
    }

    pub fn stop_vm(&mut self, uuid: &Uuid, now: Timestamp) -> Result<Vec<VmRecord>, HvError> {
        Ok(self.inventory.stop_vm(uuid, now)?)
    }

    pub fn fail_vm(&mut self, uuid: &Uuid, now: Timestamp) -> Result<Vec<VmRecord>, HvError> {
        Ok(self.inventory.fail_vm(uuid, now)?)
    }

    pub fn rescale_vm(&mut self, uuid: &Uuid, new: ResourceVector, now: Timestamp) -> Result<VmRecord, HvError> {
        let rec = self.inventory.rescale_vm(uuid, new, now)?.clone();
        let doc = String::from_utf8(serialize_definition(&rec.definition)).expect("document is utf-8");
        self.definitions.insert(*uuid, doc);
        Ok(rec)
    }

    pub fn schedule_allocation(
        &mut self,
        def: VmDefinition,
        host: Option<&NodeId>,
        start: Timestamp,
        duration_s: u64,
        now: Timestamp,
    ) -> Result<ScheduledAllocation, HvError> {
        let host = self.resolve_host(def.level, host)?;
        Ok(self.scheduler.schedule_future(def, host, start, duration_s, now)?)
    }

    pub fn tick(&mut self, now: Timestamp) -> Result<Vec<EmittedCommand>, HvError> {
        Ok(self.scheduler.tick(now, &mut self.inventory)?)
    }

    pub fn create_volume(&mut self, size_gib: u64, host: Option<&NodeId>) -> Result<BlockVolume, HvError> {
        let host = host.cloned().unwrap_or_else(|| self.default_host.clone());
        Ok(self.blocks.create_volume(&mut self.inventory, &host, size_gib)?)
    }

    pub fn resize_volume(&mut self, id: VolumeId, size_gib: u64) -> Result<BlockVolume, HvError> {
        Ok(self.blocks.resize_volume(&mut self.inventory, id, size_gib)?)
    }

    pub fn delete_volume(&mut self, id: VolumeId) -> Result<BlockVolume, HvError> {
        Ok(self.blocks.delete_volume(&mut self.inventory, id)?)
    }

    pub fn attach_volume(&mut self, id: VolumeId, vm: Option<Uuid>) -> Result<BlockVolume, HvError> {
        Ok(self.blocks.attach(&self.inventory, id, vm)?)
    }

    pub fn snapshot_instance(&mut self, vm: Uuid, id: VolumeId, now: Timestamp) -> Result<Value, HvError> {
        let obj = self.blocks.snapshot_instance(&self.inventory, vm, id, now)?;
        Ok(json!(obj))
    }

    /// Applies one command without deduplication.
    pub fn apply(&mut self, command: &Command, now: Timestamp) -> Result<Value, HvError> {
        command.validate()?;
        Ok(match command {
            Command::Launch { definition, host } => json!(self.launch_vm(definition.clone(), host.as_ref(), now)?),
            Command::Start { uuid } => json!(self.start_vm(uuid, now)?),
            Command::Stop { uuid } => json!(self.stop_vm(uuid, now)?),
            Command::Rescale { uuid, resources } => json!(self.rescale_vm(uuid, *resources, now)?),
            Command::ScheduleAllocation { definition, host, start_time, duration_s } => {
                json!(self.schedule_allocation(definition.clone(), host.as_ref(), *start_time, *duration_s, now)?)
            }
            Command::Status => json!(self.status(now)),
            Command::VolumeCreate { size_gib, host } => json!(self.create_volume(*size_gib, host.as_ref())?),
            Command::VolumeResize { volume_id, size_gib } => json!(self.resize_volume(*volume_id, *size_gib)?),
            Command::VolumeDelete { volume_id } => json!(self.delete_volume(*volume_id)?),
            Command::VolumeAttach { volume_id, vm_uuid } => json!(self.attach_volume(*volume_id, *vm_uuid)?),
            Command::SnapshotCreate { vm_uuid, volume_id } => self.snapshot_instance(*vm_uuid, *volume_id, now)?,
        })
    }

    /// Applies `command` at most once per idempotency key. Status reads
    /// are not effects and never consume a key.
    pub fn execute(&mut self, command: &Command, key: &str, now: Timestamp) -> Result<Effect<Value>, HvError> {
        if matches!(command, Command::Status) {
            return Ok(Effect::Applied(json!(self.status(now))));
        }
        let mut ledger = std::mem::take(&mut self.ledger);
        let result = ledger.dedupe_effect(key, || self.apply(command, now));
        self.ledger = ledger;
        result
    }

    pub fn status(&self, now: Timestamp) -> StatusReport {
        let hosts = self.inventory.physical_hosts().map(|h| self.host_status(&h.node_id, now)).collect();
        StatusReport {
            now,
            hosts,
            volumes: self.blocks.volumes().cloned().collect(),
            allocations: self.scheduler.allocations().cloned().collect(),
        }
    }

    fn host_status(&self, id: &NodeId, now: Timestamp) -> HostStatus {
        let host = self.inventory.host(id).expect("host listed by inventory");
        let vms = host
            .children
            .iter()
            .map(|u| {
                let rec = self.inventory.record(u).expect("child has a record");
                let own = NodeId::Vm(*u);
                VmStatus {
                    uuid: *u,
                    name: rec.definition.name.clone(),
                    level: rec.definition.level,
                    state: rec.state,
                    resources: rec.definition.resources,
                    image_ref: rec.definition.image_ref.clone(),
                    uptime_s: match (rec.state, rec.started_at) {
                        (VmState::Running, Some(t)) => now.saturating_sub(t),
                        _ => 0,
                    },
                    host: self.inventory.host(&own).map(|_| Box::new(self.host_status(&own, now))),
                }
            })
            .collect();
        HostStatus {
            node_id: id.clone(),
            level: host.level,
            capacity: host.capacity,
            free: self.inventory.free_capacity(id).expect("known host"),
            volume_disk_gib: host.volume_disk_gib,
            vms,
        }
    }

    /// Capacity, cascade and disk-conservation checks over the whole tree.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.inventory.check_invariants()?;
        self.blocks.check_invariants(&self.inventory)?;
        for host in self.inventory.hosts() {
            let used = self.inventory.usage(&host.node_id).map_err(|e| e.to_string())?;
            let free = self.inventory.free_capacity(&host.node_id).map_err(|e| e.to_string())?;
            let vm_disk: u64 = host
                .children
                .iter()
                .map(|u| self.inventory.record(u).expect("child record"))
                .filter(|r| r.state.consumes_capacity())
                .map(|r| r.definition.resources.disk_gib)
                .sum();
            if host.capacity.disk_gib != free.disk_gib + host.volume_disk_gib + vm_disk || used.disk_gib != host.volume_disk_gib + vm_disk {
                return Err(format!("disk not conserved on {}", host.node_id));
            }
        }
        Ok(())
    }
}

/// A satellite worker attached to the shared queue.
#[derive(Debug, Clone)]
pub struct Worker {
    pub worker_id: String,
    pub visibility_timeout_s: u64,
}

impl Worker {
    pub fn new(worker_id: impl Into<String>, visibility_timeout_s: u64) -> Self {
        Self { worker_id: worker_id.into(), visibility_timeout_s }
    }

    /// Receives and handles one message; `None` when nothing is pending.
    pub fn poll(&self, queue: &TaskQueue, hv: &Mutex<Hypervisor>) -> Result<Option<CommandResult>, QueueError> {
        match queue.receive(&self.worker_id, self.visibility_timeout_s)? {
            Some(msg) => self.handle(queue, hv, &msg).map(Some),
            None => Ok(None),
        }
    }

    /// Applies the message's command under its idempotency key, then acks
    /// unless the failure was transient (the deadline then lapses and the
    /// message is redelivered).
    pub fn handle(&self, queue: &TaskQueue, hv: &Mutex<Hypervisor>, msg: &QueueMessage) -> Result<CommandResult, QueueError> {
        let now = queue.clock().now();
        let outcome = match hv.lock().execute(&msg.command, &msg.idempotency_key, now) {
            Ok(Effect::Applied(output)) => Outcome::Applied { output },
            Ok(Effect::Skipped) => Outcome::Skipped,
            Err(e) => Outcome::Rejected { code: e.code().to_string(), detail: e.to_string(), permanent: e.is_permanent() },
        };
        if !matches!(outcome, Outcome::Rejected { permanent: false, .. }) {
            queue.ack(msg.msg_id)?;
        }
        Ok(CommandResult { msg_id: msg.msg_id, idempotency_key: msg.idempotency_key.clone(), outcome })
    }
}
