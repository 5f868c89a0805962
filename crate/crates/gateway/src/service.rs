//! Shared service layer. The CLI and the HTTP handlers both call these
//! methods, so one request has one code path whichever way it arrives.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use nestery_core::clock::{Clock, ClockMode};
use nestery_core::cloud::NestedCloud;
use nestery_core::hypersim::{CommandResult, Hypervisor, StatusReport};
use nestery_core::journal::{FileStore, JournalStore, MemStore};
use nestery_core::market::{
    Contract, ContractCommand, LedgerReport, Market, Money, OfferFilter, OfferSpec, PricePoint, ProviderProfile, ResaleLedger, ServiceOffer, User,
};
use nestery_core::model::{Command, NodeId, ResourceVector, Timestamp, VmRecord};
use nestery_core::queue::{QueueConfig, QueueMessage, RecoveryReport};
use nestery_core::scheduler::Scheduler;

use crate::error::ApiError;

pub const STATE_FILE: &str = "state.json";
pub const QUEUE_FILE: &str = "queue.journal";
pub const SCHEDULE_FILE: &str = "schedule.journal";

/// Capacity of the default physical host when a data directory is created.
pub const DEFAULT_CAPACITY: ResourceVector = ResourceVector::new(32, 1024, 131_072, 2_000, 8);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: Option<PathBuf>,
    pub clock: ClockMode,
    pub host_capacity: ResourceVector,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { data_dir: None, clock: ClockMode::Simulated, host_capacity: DEFAULT_CAPACITY }
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    clock_now: Timestamp,
    hypervisor: Hypervisor,
    market: Market,
    #[serde(default)]
    results: BTreeMap<u64, CommandResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submitted {
    pub msg_id: u64,
    pub idempotency_key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandView {
    pub message: QueueMessage,
    pub result: Option<CommandResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerView {
    pub user_id: String,
    pub ledger: ResaleLedger,
    pub report: LedgerReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferRequest {
    pub spec: OfferSpec,
    pub floor_price: Money,
    pub cap_price: Money,
    pub price: Money,
    #[serde(default)]
    pub quality: BTreeMap<String, String>,
    #[serde(default)]
    pub host: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub profile: ProviderProfile,
    pub backing: NodeId,
}

pub struct Service {
    cloud: NestedCloud,
    market: Mutex<Market>,
    results: Mutex<BTreeMap<u64, CommandResult>>,
    // serializes everything that drains the queue or writes state.json
    op: Mutex<()>,
    data_dir: Option<PathBuf>,
    recovery: RecoveryReport,
}

impl Service {
    pub fn open(config: &ServiceConfig) -> Result<Service, ApiError> {
        let snapshot = match &config.data_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| storage(dir, e))?;
                load_snapshot(dir)?
            }
            None => None,
        };
        let (now, mut hv, market, results) = match snapshot {
            Some(s) => (s.clock_now, s.hypervisor, s.market, s.results),
            None => (0, Hypervisor::new(config.host_capacity), Market::new(), BTreeMap::new()),
        };
        let clock = match config.clock {
            ClockMode::Simulated => Clock::simulated(now),
            ClockMode::Wall => Clock::wall(),
        };
        let queue_store: Box<dyn JournalStore> = match &config.data_dir {
            Some(dir) => {
                let sched_store = open_store(&dir.join(SCHEDULE_FILE))?;
                let (sched, _) = Scheduler::restore(sched_store, hv.scheduler()).map_err(|e| ApiError::new(e.code(), e.to_string()))?;
                hv.replace_scheduler(sched);
                open_store(&dir.join(QUEUE_FILE))?
            }
            None => Box::new(MemStore::new()),
        };
        let (cloud, recovery) = NestedCloud::open(hv, queue_store, clock, QueueConfig::default())?;
        let svc = Service {
            cloud,
            market: Mutex::new(market),
            results: Mutex::new(results),
            op: Mutex::new(()),
            data_dir: config.data_dir.clone(),
            recovery,
        };
        // finish whatever the previous process left in the queue
        svc.pump()?;
        Ok(svc)
    }

    pub fn in_memory(capacity: ResourceVector) -> Service {
        Service::open(&ServiceConfig { host_capacity: capacity, ..ServiceConfig::default() }).expect("in-memory service cannot fail")
    }

    pub fn cloud(&self) -> &NestedCloud {
        &self.cloud
    }

    pub fn recovery(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn now(&self) -> Timestamp {
        self.cloud.clock().now()
    }

    pub fn status(&self) -> StatusReport {
        self.cloud.status()
    }

    pub fn vm_record(&self, uuid: &uuid::Uuid) -> Result<VmRecord, ApiError> {
        self.cloud.hypervisor().record(uuid).cloned().ok_or_else(|| ApiError::new("UnknownVm", format!("unknown vm {uuid}")))
    }

    /// Enqueues a command without waiting for it.
    pub fn submit(&self, command: Command, key: Option<String>) -> Result<Submitted, ApiError> {
        let key = key.unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
        if key.is_empty() {
            return Err(ApiError::invalid("idempotency key must not be empty"));
        }
        let msg_id = self.cloud.submit(command, &key)?;
        Ok(Submitted { msg_id, idempotency_key: key })
    }

    /// Enqueues a command and drains the queue until it is handled.
    pub fn execute(&self, command: Command, key: Option<String>) -> Result<CommandResult, ApiError> {
        let _g = self.op.lock();
        let sub = self.submit(command, key)?;
        self.drain_locked()?;
        self.save()?;
        let result = self.results.lock().get(&sub.msg_id).cloned();
        result.ok_or_else(|| ApiError::new("NotProcessed", format!("message {} was not processed", sub.msg_id)))
    }

    /// Runs due scheduler work (wall clock only), drains the queue and
    /// settles billing. Returns the results handled by this call.
    pub fn pump(&self) -> Result<Vec<CommandResult>, ApiError> {
        let _g = self.op.lock();
        if self.cloud.clock().mode() == ClockMode::Wall {
            self.cloud.tick()?;
        }
        let out = self.drain_locked()?;
        let before = self.market.lock().clone();
        self.market.lock().accrue(self.now());
        if !out.is_empty() || *self.market.lock() != before {
            self.save()?;
        }
        Ok(out)
    }

    /// Moves the simulated clock forward, running the scheduler each second.
    pub fn advance(&self, secs: u64) -> Result<Timestamp, ApiError> {
        if self.cloud.clock().mode() != ClockMode::Simulated {
            return Err(ApiError::new("ClockNotSimulated", "the clock only advances in sim mode"));
        }
        let _g = self.op.lock();
        let results = self.cloud.advance(secs)?;
        self.remember(results);
        let now = self.now();
        self.market.lock().accrue(now);
        self.save()?;
        Ok(now)
    }

    pub fn command(&self, msg_id: u64) -> Result<CommandView, ApiError> {
        let message = self.cloud.queue().get(msg_id).ok_or_else(|| ApiError::new("UnknownMessage", format!("unknown message {msg_id}")))?;
        let result = self.results.lock().get(&msg_id).cloned();
        Ok(CommandView { message, result })
    }

    pub fn ensure_user(&self, user_id: &str) -> Result<(), ApiError> {
        if user_id.trim().is_empty() {
            return Err(ApiError::invalid("user id must not be empty"));
        }
        let mut m = self.market.lock();
        if m.user(user_id).is_err() {
            m.register_user(user_id);
        }
        Ok(())
    }

    pub fn user(&self, user_id: &str) -> Result<User, ApiError> {
        Ok(self.market.lock().user(user_id)?.clone())
    }

    pub fn offers(&self, filter: &OfferFilter) -> Vec<ServiceOffer> {
        self.market.lock().list_offers(filter)
    }

    pub fn offer(&self, offer_id: u64) -> Result<ServiceOffer, ApiError> {
        Ok(self.market.lock().offer(offer_id)?.clone())
    }

    pub fn prices(&self, offer_id: u64, from: Option<Timestamp>, to: Option<Timestamp>) -> Result<Vec<PricePoint>, ApiError> {
        Ok(self.market.lock().price_history(offer_id, from, to)?)
    }

    pub fn contract(&self, caller: &str, contract_id: u64) -> Result<Contract, ApiError> {
        let c = self.market.lock().contract(contract_id)?.clone();
        if c.consumer_id != caller && c.provider_id != caller {
            return Err(ApiError::new("NotYourContract", format!("contract {contract_id} belongs to another user")));
        }
        Ok(c)
    }

    pub fn contracts(&self, caller: &str) -> Vec<Contract> {
        self.market.lock().contracts().filter(|c| c.consumer_id == caller || c.provider_id == caller).cloned().collect()
    }

    pub fn become_provider(&self, caller: &str, user_id: &str, req: ProviderRequest) -> Result<User, ApiError> {
        same_user(caller, user_id)?;
        self.mutate(|m, cloud| Ok(m.become_provider(user_id, req.profile, req.backing, cloud)?.clone()))
    }

    pub fn register_offer(&self, caller: &str, req: OfferRequest) -> Result<ServiceOffer, ApiError> {
        self.mutate(|m, cloud| Ok(m.register_offer(caller, req.spec, req.floor_price, req.cap_price, req.price, req.quality, req.host, cloud)?))
    }

    pub fn withdraw_offer(&self, caller: &str, offer_id: u64) -> Result<ServiceOffer, ApiError> {
        self.mutate(|m, _| Ok(m.withdraw_offer(caller, offer_id)?))
    }

    pub fn negotiate(&self, caller: &str, offer_id: u64) -> Result<Contract, ApiError> {
        self.mutate(|m, cloud| Ok(m.negotiate_contract(caller, offer_id, cloud)?))
    }

    pub fn control(&self, caller: &str, contract_id: u64, command: ContractCommand, key: Option<String>) -> Result<CommandResult, ApiError> {
        let key = key.unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
        let r = self.mutate(|m, cloud| Ok(m.control_allocation(caller, contract_id, command, &key, cloud)?))?;
        ApiError::check(r)
    }

    pub fn terminate(&self, caller: &str, contract_id: u64) -> Result<Contract, ApiError> {
        self.mutate(|m, cloud| Ok(m.terminate_contract(caller, contract_id, cloud)?))
    }

    pub fn ledger(&self, caller: &str, user_id: &str) -> Result<LedgerView, ApiError> {
        same_user(caller, user_id)?;
        let m = self.market.lock();
        Ok(LedgerView { user_id: user_id.into(), ledger: m.ledger(user_id)?, report: m.ledger_report(user_id)? })
    }

    /// Runs a market operation under the op lock and persists afterwards,
    /// also when it fails part way.
    fn mutate<T>(&self, f: impl FnOnce(&mut Market, &NestedCloud) -> Result<T, ApiError>) -> Result<T, ApiError> {
        let _g = self.op.lock();
        let out = {
            let mut m = self.market.lock();
            f(&mut m, &self.cloud)
        };
        self.drain_locked()?;
        self.save()?;
        out
    }

    fn drain_locked(&self) -> Result<Vec<CommandResult>, ApiError> {
        let out = self.cloud.drain()?;
        self.remember(out.clone());
        Ok(out)
    }

    fn remember(&self, results: Vec<CommandResult>) {
        let mut r = self.results.lock();
        for res in results {
            r.insert(res.msg_id, res);
        }
    }

    pub fn save(&self) -> Result<(), ApiError> {
        let Some(dir) = &self.data_dir else { return Ok(()) };
        let snapshot = Snapshot {
            clock_now: self.now(),
            hypervisor: self.cloud.hypervisor().clone(),
            market: self.market.lock().clone(),
            results: self.results.lock().clone(),
        };
        let bytes = serde_json::to_vec(&snapshot).map_err(|e| ApiError::internal(e.to_string()))?;
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, dir.join(STATE_FILE))
        };
        write().map_err(|e| storage(dir, e))
    }
}

fn same_user(caller: &str, user_id: &str) -> Result<(), ApiError> {
    if caller != user_id {
        return Err(ApiError::new("Forbidden", format!("{caller} may not act for {user_id}")));
    }
    Ok(())
}

fn storage(path: &Path, e: std::io::Error) -> ApiError {
    ApiError::new("StorageFailure", format!("{}: {e}", path.display()))
}

fn open_store(path: &Path) -> Result<Box<dyn JournalStore>, ApiError> {
    Ok(Box::new(FileStore::open(path, true).map_err(|e| storage(path, e))?))
}

fn load_snapshot(dir: &Path) -> Result<Option<Snapshot>, ApiError> {
    let path = dir.join(STATE_FILE);
    match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| ApiError::new("StorageFailure", format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(storage(&path, e)),
    }
}
