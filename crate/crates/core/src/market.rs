//! Spot marketplace for reselling slices of compute and storage.
//!
//! Providers list offers backed by a host they control (a physical host for
//! infrastructure operators, or a running L1 Nested Cloud VM for resellers).
//! A negotiated contract creates the allocation through the task queue and
//! bills the agreed hourly price from consumer to provider.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use uuid::Uuid;

use crate::cloud::{rejection, CloudError, NestedCloud};
use crate::hypersim::{CommandResult, Outcome};
use crate::model::{Command, Dimension, NodeId, ResourceVector, Timestamp, VmDefinition, VmState, VolumeId};

pub const SECONDS_PER_HOUR: u64 = 3600;
pub const SPOT_ALPHA: f64 = 0.5;
pub const SPOT_TARGET_UTILIZATION: f64 = 0.8;
pub const CONTRACT_IMAGE: &str = "contract-image";

/// Currency amount with four fractional digits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Money(pub i64);

impl Money {
    pub const SCALE: i64 = 10_000;
    pub const ZERO: Money = Money(0);

    pub fn from_f64(v: f64) -> Money {
        Money((v * Self::SCALE as f64).round() as i64)
    }

    pub fn from_units(units: i64) -> Money {
        Money(units * Self::SCALE)
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / Self::SCALE as f64
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, o: Money) -> Money {
        Money(self.0 + o.0)
    }
}

impl std::ops::Sub for Money {
    type Output = Money;
    fn sub(self, o: Money) -> Money {
        Money(self.0 - o.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let a = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:04}", a / Self::SCALE as u64, a % Self::SCALE as u64)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !v.is_finite() {
            return Err(serde::de::Error::custom("amount must be finite"));
        }
        Ok(Money::from_f64(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MarketError {
    #[error("user {0} is not a provider")]
    NotAProvider(String),
    #[error("offer spec exceeds free capacity on {0}")]
    SpecExceedsFreeCapacity(Dimension),
    #[error("price band must satisfy 0 < floor <= price <= cap")]
    InvalidPriceBand,
    #[error("unknown offer {0}")]
    UnknownOffer(u64),
    #[error("capacity gone: {0}")]
    CapacityGone(String),
    #[error("contract {0} belongs to another user")]
    NotYourContract(u64),
    #[error("contract {0} is not active")]
    ContractNotActive(u64),
    #[error("provider profile is missing {0}")]
    IncompleteProfile(&'static str),
    #[error("no backing cloud: {0}")]
    NoBackingCloud(String),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("unknown contract {0}")]
    UnknownContract(u64),
    #[error("utilization must be within [0, 1]")]
    InvalidUtilization,
    #[error("admission denied on {0}")]
    AdmissionDenied(Dimension),
    #[error("{0} is not supported for {1} contracts")]
    UnsupportedCommand(&'static str, OfferKind),
    #[error("invalid offer: {0}")]
    InvalidOffer(&'static str),
    #[error("cloud rejected the request: {code}: {detail}")]
    Rejected { code: String, detail: String },
    #[error("cloud failure: {0}")]
    Cloud(String),
}

impl MarketError {
    pub fn code(&self) -> &str {
        match self {
            MarketError::NotAProvider(_) => "NotAProvider",
            MarketError::SpecExceedsFreeCapacity(_) => "SpecExceedsFreeCapacity",
            MarketError::InvalidPriceBand => "InvalidPriceBand",
            MarketError::UnknownOffer(_) => "UnknownOffer",
            MarketError::CapacityGone(_) => "CapacityGone",
            MarketError::NotYourContract(_) => "NotYourContract",
            MarketError::ContractNotActive(_) => "ContractNotActive",
            MarketError::IncompleteProfile(_) => "IncompleteProfile",
            MarketError::NoBackingCloud(_) => "NoBackingCloud",
            MarketError::UnknownUser(_) => "UnknownUser",
            MarketError::UnknownContract(_) => "UnknownContract",
            MarketError::InvalidUtilization => "InvalidUtilization",
            MarketError::AdmissionDenied(_) => "AdmissionDenied",
            MarketError::UnsupportedCommand(..) => "UnsupportedCommand",
            MarketError::InvalidOffer(_) => "InvalidOffer",
            MarketError::Rejected { code, .. } => code,
            MarketError::Cloud(_) => "CloudFailure",
        }
    }
}

impl From<CloudError> for MarketError {
    fn from(e: CloudError) -> Self {
        match e {
            CloudError::Invalid(m) => MarketError::Rejected { code: m.code().into(), detail: m.to_string() },
            other => MarketError::Cloud(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Consumer,
    Provider,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderProfile {
    pub company_name: String,
    pub tax_number: String,
    #[serde(default)]
    pub bank_account: Option<String>,
    #[serde(default)]
    pub postal_address: Option<String>,
}

impl ProviderProfile {
    pub fn validate(&self) -> Result<(), MarketError> {
        let present = |s: &Option<String>| s.as_deref().is_some_and(|v| !v.trim().is_empty());
        if self.company_name.trim().is_empty() {
            return Err(MarketError::IncompleteProfile("company_name"));
        }
        if self.tax_number.trim().is_empty() {
            return Err(MarketError::IncompleteProfile("tax_number"));
        }
        if !present(&self.bank_account) && !present(&self.postal_address) {
            return Err(MarketError::IncompleteProfile("bank_account_or_postal_address"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub user_id: String,
    pub roles: BTreeSet<Role>,
    pub profile: Option<ProviderProfile>,
    /// Hosts whose free capacity this user may offer.
    pub backings: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfferKind {
    Compute,
    Storage,
}

impl fmt::Display for OfferKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OfferKind::Compute => "compute",
            OfferKind::Storage => "storage",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfferSpec {
    Compute(ResourceVector),
    Storage { size_gib: u64 },
}

impl OfferSpec {
    pub fn kind(&self) -> OfferKind {
        match self {
            OfferSpec::Compute(_) => OfferKind::Compute,
            OfferSpec::Storage { .. } => OfferKind::Storage,
        }
    }

    /// Host resources the offer would take when contracted.
    pub fn footprint(&self) -> ResourceVector {
        match self {
            OfferSpec::Compute(r) => *r,
            OfferSpec::Storage { size_gib } => ResourceVector::disk_only(*size_gib),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OfferStatus {
    Listed,
    Taken,
    Withdrawn,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceOffer {
    pub offer_id: u64,
    pub kind: OfferKind,
    pub provider_id: String,
    pub host: NodeId,
    pub spec: OfferSpec,
    pub current_price: Money,
    pub floor_price: Money,
    pub cap_price: Money,
    pub quality: BTreeMap<String, String>,
    pub status: OfferStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricePoint {
    pub offer_id: u64,
    pub timestamp: Timestamp,
    pub price: Money,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ContractState {
    Negotiating,
    Active,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    Vm(Uuid),
    Volume(VolumeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contract {
    pub contract_id: u64,
    pub consumer_id: String,
    pub provider_id: String,
    pub offer_id: u64,
    pub state: ContractState,
    pub allocation: Option<Allocation>,
    pub agreed_price: Money,
    pub started_at: Timestamp,
    pub ended_at: Option<Timestamp>,
    pub billed_hours: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncomeEvent {
    pub timestamp: Timestamp,
    pub amount: Money,
    pub contract_id: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResaleLedger {
    pub purchase_cost: Money,
    pub income_events: Vec<IncomeEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub purchase_cost: Money,
    pub cumulative_income: Money,
    pub net: Money,
    pub offset_achieved: bool,
}

/// Commands a consumer may issue against a contracted allocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContractCommand {
    Start,
    Stop,
    Rescale { resources: ResourceVector },
    Status,
}

impl ContractCommand {
    fn name(&self) -> &'static str {
        match self {
            ContractCommand::Start => "start",
            ContractCommand::Stop => "stop",
            ContractCommand::Rescale { .. } => "rescale",
            ContractCommand::Status => "status",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OfferFilter {
    pub kind: Option<OfferKind>,
    pub max_price: Option<Money>,
    pub min_spec: Option<ResourceVector>,
    pub status: Option<OfferStatus>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Market {
    users: BTreeMap<String, User>,
    offers: BTreeMap<u64, ServiceOffer>,
    prices: BTreeMap<u64, Vec<PricePoint>>,
    contracts: BTreeMap<u64, Contract>,
    ledgers: BTreeMap<String, ResaleLedger>,
    next_offer: u64,
    next_contract: u64,
}

/// Spot price update: `p * (1 + alpha * (u - u*))`, clamped to the band.
pub fn spot_price(current: Money, floor: Money, cap: Money, utilization: f64) -> Money {
    let raw = current.as_f64() * (1.0 + SPOT_ALPHA * (utilization - SPOT_TARGET_UTILIZATION));
    Money::from_f64(raw).clamp(floor, cap)
}

/// Deterministic uuid for the VM created by a compute contract.
pub fn contract_vm_uuid(contract_id: u64) -> Uuid {
    Uuid::from_u128(0x636f_6e74_7261_4000_8000_0000_0000_0000 | contract_id as u128)
}

impl Market {
    pub fn new() -> Self {
        Self { next_offer: 1, next_contract: 1, ..Self::default() }
    }

    /// Registers a consumer; registering twice is a no-op.
    pub fn register_user(&mut self, user_id: &str) -> &User {
        self.users.entry(user_id.to_string()).or_insert_with(|| User {
            user_id: user_id.to_string(),
            roles: BTreeSet::from([Role::Consumer]),
            profile: None,
            backings: BTreeSet::new(),
        })
    }

    pub fn user(&self, user_id: &str) -> Result<&User, MarketError> {
        self.users.get(user_id).ok_or_else(|| MarketError::UnknownUser(user_id.into()))
    }

    pub fn users(&self) -> impl Iterator<Item = &User> {
        self.users.values()
    }

    pub fn offer(&self, id: u64) -> Result<&ServiceOffer, MarketError> {
        self.offers.get(&id).ok_or(MarketError::UnknownOffer(id))
    }

    pub fn contract(&self, id: u64) -> Result<&Contract, MarketError> {
        self.contracts.get(&id).ok_or(MarketError::UnknownContract(id))
    }

    pub fn contracts(&self) -> impl Iterator<Item = &Contract> {
        self.contracts.values()
    }

    /// Grants the provider role backed by `backing`.
    ///
    /// A VM backing must be a RUNNING L1 Nested Cloud that the user holds a
    /// contract for or that nobody else has contracted. Physical hosts back
    /// infrastructure operators.
    pub fn become_provider(&mut self, user_id: &str, profile: ProviderProfile, backing: NodeId, cloud: &NestedCloud) -> Result<&User, MarketError> {
        profile.validate()?;
        self.user(user_id)?;
        match &backing {
            NodeId::Vm(uuid) => {
                let hv = cloud.hypervisor();
                let rec = hv.record(uuid).ok_or_else(|| MarketError::NoBackingCloud(format!("unknown vm {uuid}")))?;
                if rec.definition.level != 1 {
                    return Err(MarketError::NoBackingCloud(format!("vm {uuid} is level {}, only L1 clouds can resell", rec.definition.level)));
                }
                if rec.state != VmState::Running {
                    return Err(MarketError::NoBackingCloud(format!("vm {uuid} is {}", rec.state)));
                }
                let held_by_other = self.contracts.values().any(|c| {
                    c.state == ContractState::Active && c.allocation == Some(Allocation::Vm(*uuid)) && c.consumer_id != user_id
                });
                if held_by_other {
                    return Err(MarketError::NoBackingCloud(format!("vm {uuid} is contracted by another user")));
                }
            }
            NodeId::Physical(_) => {
                if cloud.hypervisor().inventory().host(&backing).is_none() {
                    return Err(MarketError::NoBackingCloud(format!("unknown host {backing}")));
                }
            }
        }
        let user = self.users.get_mut(user_id).expect("checked");
        user.roles.insert(Role::Provider);
        user.profile = Some(profile);
        user.backings.insert(backing);
        Ok(user)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn register_offer(
        &mut self,
        provider_id: &str,
        spec: OfferSpec,
        floor: Money,
        cap: Money,
        initial: Money,
        quality: BTreeMap<String, String>,
        host: Option<NodeId>,
        cloud: &NestedCloud,
    ) -> Result<ServiceOffer, MarketError> {
        let user = self.user(provider_id)?;
        if !user.roles.contains(&Role::Provider) {
            return Err(MarketError::NotAProvider(provider_id.into()));
        }
        let host = match host {
            Some(h) if user.backings.contains(&h) => h,
            Some(h) => return Err(MarketError::NoBackingCloud(format!("{h} is not a backing host of {provider_id}"))),
            None => user.backings.iter().next().cloned().ok_or_else(|| MarketError::NotAProvider(provider_id.into()))?,
        };
        if !(floor.0 > 0 && floor <= initial && initial <= cap) {
            return Err(MarketError::InvalidPriceBand);
        }
        match spec {
            OfferSpec::Compute(r) => r.validate().map_err(|_| MarketError::InvalidOffer("compute spec is not a valid resource vector"))?,
            OfferSpec::Storage { size_gib: 0 } => return Err(MarketError::InvalidOffer("storage size must be at least 1 GiB")),
            OfferSpec::Storage { .. } => {}
        }
        let free = cloud.hypervisor().inventory().free_capacity(&host).map_err(|e| MarketError::NoBackingCloud(e.to_string()))?;
        if let Some(d) = spec.footprint().first_shortfall(&free) {
            return Err(MarketError::SpecExceedsFreeCapacity(d));
        }
        let now = cloud.clock().now();
        let offer = ServiceOffer {
            offer_id: self.next_offer.max(1),
            kind: spec.kind(),
            provider_id: provider_id.into(),
            host,
            spec,
            current_price: initial,
            floor_price: floor,
            cap_price: cap,
            quality,
            status: OfferStatus::Listed,
        };
        self.next_offer = offer.offer_id + 1;
        self.prices.insert(offer.offer_id, vec![PricePoint { offer_id: offer.offer_id, timestamp: now, price: initial }]);
        self.offers.insert(offer.offer_id, offer.clone());
        Ok(offer)
    }

    pub fn withdraw_offer(&mut self, provider_id: &str, offer_id: u64) -> Result<ServiceOffer, MarketError> {
        let offer = self.offers.get_mut(&offer_id).ok_or(MarketError::UnknownOffer(offer_id))?;
        if offer.provider_id != provider_id {
            return Err(MarketError::NotAProvider(provider_id.into()));
        }
        if offer.status == OfferStatus::Taken {
            return Err(MarketError::CapacityGone(format!("offer {offer_id} is under contract")));
        }
        offer.status = OfferStatus::Withdrawn;
        Ok(offer.clone())
    }

    /// Offers matching every given predicate, cheapest first.
    pub fn list_offers(&self, filter: &OfferFilter) -> Vec<ServiceOffer> {
        let mut out: Vec<ServiceOffer> = self
            .offers
            .values()
            .filter(|o| filter.kind.is_none_or(|k| o.kind == k))
            .filter(|o| filter.max_price.is_none_or(|p| o.current_price <= p))
            .filter(|o| filter.status.is_none_or(|s| o.status == s))
            .filter(|o| match (filter.min_spec, o.spec) {
                (None, _) => true,
                (Some(min), OfferSpec::Compute(r)) => min.fits_within(&r),
                (Some(min), OfferSpec::Storage { size_gib }) => min.disk_gib <= size_gib,
            })
            .cloned()
            .collect();
        out.sort_by(|a, b| a.current_price.cmp(&b.current_price).then(a.offer_id.cmp(&b.offer_id)));
        out
    }

    pub fn update_spot_price(&mut self, offer_id: u64, utilization: f64, now: Timestamp) -> Result<PricePoint, MarketError> {
        if !(0.0..=1.0).contains(&utilization) {
            return Err(MarketError::InvalidUtilization);
        }
        let offer = self.offers.get_mut(&offer_id).ok_or(MarketError::UnknownOffer(offer_id))?;
        offer.current_price = spot_price(offer.current_price, offer.floor_price, offer.cap_price, utilization);
        let point = PricePoint { offer_id, timestamp: now, price: offer.current_price };
        self.prices.entry(offer_id).or_default().push(point);
        Ok(point)
    }

    /// Points with `from <= timestamp <= to`, oldest first.
    pub fn price_history(&self, offer_id: u64, from: Option<Timestamp>, to: Option<Timestamp>) -> Result<Vec<PricePoint>, MarketError> {
        let series = self.prices.get(&offer_id).ok_or(MarketError::UnknownOffer(offer_id))?;
        let (lo, hi) = (from.unwrap_or(0), to.unwrap_or(Timestamp::MAX));
        Ok(series.iter().filter(|p| p.timestamp >= lo && p.timestamp <= hi).copied().collect())
    }

    /// Allocated over total cores of `host`.
    pub fn utilization(host: &NodeId, cloud: &NestedCloud) -> f64 {
        let hv = cloud.hypervisor();
        match (hv.inventory().host(host), hv.inventory().usage(host)) {
            (Some(h), Ok(used)) if h.capacity.cpu_cores > 0 => (used.cpu_cores as f64 / h.capacity.cpu_cores as f64).min(1.0),
            _ => 0.0,
        }
    }

    fn reprice_host(&mut self, host: &NodeId, cloud: &NestedCloud) {
        let u = Self::utilization(host, cloud);
        let now = cloud.clock().now();
        let ids: Vec<u64> = self.offers.values().filter(|o| &o.host == host && o.status == OfferStatus::Listed).map(|o| o.offer_id).collect();
        for id in ids {
            self.update_spot_price(id, u, now).expect("listed offer exists and u is clamped");
        }
    }

    /// Accepts `offer_id` at its current price and creates the allocation.
    pub fn negotiate_contract(&mut self, consumer_id: &str, offer_id: u64, cloud: &NestedCloud) -> Result<Contract, MarketError> {
        self.user(consumer_id)?;
        let offer = self.offer(offer_id)?.clone();
        if offer.status != OfferStatus::Listed {
            return Err(MarketError::CapacityGone(format!("offer {offer_id} is {:?}", offer.status).to_lowercase()));
        }
        let contract_id = self.next_contract.max(1);
        let key = format!("contract-{contract_id}-create");
        let allocation = match offer.spec {
            OfferSpec::Compute(resources) => {
                let level = cloud.hypervisor().inventory().host(&offer.host).map(|h| h.level + 1).unwrap_or(1);
                let uuid = contract_vm_uuid(contract_id);
                let def = VmDefinition::new(uuid, format!("contract-{contract_id}"), resources, CONTRACT_IMAGE, level);
                let r = cloud.execute(Command::Launch { definition: def, host: Some(offer.host.clone()) }, &key)?;
                if let Some((code, detail)) = rejection(&r) {
                    return Err(MarketError::CapacityGone(format!("{code}: {detail}")));
                }
                Allocation::Vm(uuid)
            }
            OfferSpec::Storage { size_gib } => {
                let r = cloud.execute(Command::VolumeCreate { size_gib, host: Some(offer.host.clone()) }, &key)?;
                match &r.outcome {
                    Outcome::Applied { output } => Allocation::Volume(VolumeId(output["volume_id"].as_u64().expect("volume output has an id"))),
                    Outcome::Rejected { code, detail, .. } => return Err(MarketError::CapacityGone(format!("{code}: {detail}"))),
                    Outcome::Skipped => return Err(MarketError::CapacityGone(format!("{key} was already used"))),
                }
            }
        };
        let contract = Contract {
            contract_id,
            consumer_id: consumer_id.into(),
            provider_id: offer.provider_id.clone(),
            offer_id,
            state: ContractState::Active,
            allocation: Some(allocation),
            agreed_price: offer.current_price,
            started_at: cloud.clock().now(),
            ended_at: None,
            billed_hours: 0,
        };
        self.next_contract = contract_id + 1;
        self.contracts.insert(contract_id, contract.clone());
        self.offers.get_mut(&offer_id).expect("checked").status = OfferStatus::Taken;
        self.reprice_host(&offer.host, cloud);
        Ok(contract)
    }

    /// Relays a consumer command to the contracted allocation. Rescales
    /// must stay within the offered spec.
    pub fn control_allocation(
        &mut self,
        caller: &str,
        contract_id: u64,
        command: ContractCommand,
        client_key: &str,
        cloud: &NestedCloud,
    ) -> Result<CommandResult, MarketError> {
        let c = self.contract(contract_id)?;
        if c.consumer_id != caller {
            return Err(MarketError::NotYourContract(contract_id));
        }
        if c.state != ContractState::Active {
            return Err(MarketError::ContractNotActive(contract_id));
        }
        let offer = self.offer(c.offer_id)?;
        let uuid = match c.allocation {
            Some(Allocation::Vm(u)) => u,
            _ if command == ContractCommand::Status => Uuid::nil(),
            _ => return Err(MarketError::UnsupportedCommand(command.name(), offer.kind)),
        };
        let cmd = match command {
            ContractCommand::Start => Command::Start { uuid },
            ContractCommand::Stop => Command::Stop { uuid },
            ContractCommand::Rescale { resources } => {
                if let OfferSpec::Compute(limit) = offer.spec {
                    if let Some(d) = resources.first_shortfall(&limit) {
                        return Err(MarketError::AdmissionDenied(d));
                    }
                }
                Command::Rescale { uuid, resources }
            }
            ContractCommand::Status => Command::Status,
        };
        Ok(cloud.execute(cmd, &format!("contract-{contract_id}-{client_key}"))?)
    }

    /// Settles billing, releases the allocation and relists the offer.
    pub fn terminate_contract(&mut self, caller: &str, contract_id: u64, cloud: &NestedCloud) -> Result<Contract, MarketError> {
        let c = self.contract(contract_id)?.clone();
        if c.consumer_id != caller && c.provider_id != caller {
            return Err(MarketError::NotYourContract(contract_id));
        }
        if c.state != ContractState::Active {
            return Err(MarketError::ContractNotActive(contract_id));
        }
        let now = cloud.clock().now();
        self.accrue(now);
        let key = format!("contract-{contract_id}-release");
        match c.allocation {
            Some(Allocation::Vm(uuid)) => {
                let running = cloud.hypervisor().record(&uuid).is_some_and(|r| r.state.consumes_capacity());
                if running {
                    let r = cloud.execute(Command::Stop { uuid }, &key)?;
                    if let Some((code, detail)) = rejection(&r) {
                        return Err(MarketError::Rejected { code: code.into(), detail: detail.into() });
                    }
                }
            }
            Some(Allocation::Volume(volume_id)) => {
                cloud.execute(Command::VolumeAttach { volume_id, vm_uuid: None }, &format!("{key}-detach"))?;
                let r = cloud.execute(Command::VolumeDelete { volume_id }, &key)?;
                if let Some((code, detail)) = rejection(&r) {
                    return Err(MarketError::Rejected { code: code.into(), detail: detail.into() });
                }
            }
            None => {}
        }
        let contract = self.contracts.get_mut(&contract_id).expect("checked");
        contract.state = ContractState::Terminated;
        contract.ended_at = Some(now);
        let out = contract.clone();
        let host = {
            let offer = self.offers.get_mut(&c.offer_id).expect("contract offer exists");
            offer.status = OfferStatus::Listed;
            offer.host.clone()
        };
        self.reprice_host(&host, cloud);
        Ok(out)
    }

    /// Bills every active contract for each whole simulated hour elapsed
    /// since it started.
    pub fn accrue(&mut self, now: Timestamp) {
        for c in self.contracts.values_mut().filter(|c| c.state == ContractState::Active) {
            let due = now.saturating_sub(c.started_at) / SECONDS_PER_HOUR;
            while c.billed_hours < due {
                c.billed_hours += 1;
                let at = c.started_at + c.billed_hours * SECONDS_PER_HOUR;
                let consumer = self.ledgers.entry(c.consumer_id.clone()).or_default();
                consumer.purchase_cost = consumer.purchase_cost + c.agreed_price;
                self.ledgers.entry(c.provider_id.clone()).or_default().income_events.push(IncomeEvent {
                    timestamp: at,
                    amount: c.agreed_price,
                    contract_id: Some(c.contract_id),
                });
            }
        }
    }

    /// Adds a purchase made outside the market to `user_id`'s cost.
    pub fn record_purchase(&mut self, user_id: &str, amount: Money) -> Result<(), MarketError> {
        self.user(user_id)?;
        if amount.0 < 0 {
            return Err(MarketError::InvalidPriceBand);
        }
        let l = self.ledgers.entry(user_id.into()).or_default();
        l.purchase_cost = l.purchase_cost + amount;
        Ok(())
    }

    pub fn ledger(&self, user_id: &str) -> Result<ResaleLedger, MarketError> {
        self.user(user_id)?;
        Ok(self.ledgers.get(user_id).cloned().unwrap_or_default())
    }

    pub fn ledger_report(&self, user_id: &str) -> Result<LedgerReport, MarketError> {
        let l = self.ledger(user_id)?;
        let income: Money = l.income_events.iter().map(|e| e.amount).sum();
        let net = income - l.purchase_cost;
        Ok(LedgerReport { purchase_cost: l.purchase_cost, cumulative_income: income, net, offset_achieved: net.0 >= 0 })
    }

    /// Checks the resale invariants: prices inside their bands, and active
    /// contract specs on a host never exceeding its capacity.
    pub fn check_invariants(&self, cloud: &NestedCloud) -> Result<(), String> {
        for (id, series) in &self.prices {
            let o = &self.offers[id];
            if series.iter().any(|p| p.price < o.floor_price || p.price > o.cap_price) {
                return Err(format!("offer {id} priced outside its band"));
            }
            if series.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
                return Err(format!("offer {id} history out of order"));
            }
        }
        let hv = cloud.hypervisor();
        let mut per_host: BTreeMap<&NodeId, ResourceVector> = BTreeMap::new();
        for c in self.contracts.values().filter(|c| c.state == ContractState::Active) {
            let o = &self.offers[&c.offer_id];
            let e = per_host.entry(&o.host).or_insert(ResourceVector::new(0, 0, 0, 0, 0));
            *e = e.plus(&o.spec.footprint());
        }
        for (host, sum) in per_host {
            let cap = hv.inventory().host(host).map(|h| h.capacity).ok_or_else(|| format!("offer host {host} vanished"))?;
            if let Some(d) = sum.first_shortfall(&cap) {
                return Err(format!("contracts on {host} exceed capacity on {d}"));
            }
        }
        Ok(())
    }
}
