//! Domain types shared by every part of the control plane: resource vectors,
//! VM definitions and records, host nodes, the command set, and the canonical
//! VM definition document.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;
use uuid::Uuid;

pub const MIN_RAM_MIB: u64 = 64;
pub const MAX_CPU_PRIORITY: u32 = 1024;
pub const MAX_NAME_LEN: usize = 128;
/// Deepest nesting level a VM may run at (host = 0, nested cloud = 1, app VM = 2).
pub const MAX_LEVEL: u8 = 2;

/// Seconds on the control-plane clock.
pub type Timestamp = u64;

/// Fields that can fail validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Uuid,
    Name,
    CpuCores,
    CpuPriority,
    RamMib,
    DiskGib,
    Nics,
    ImageRef,
    Level,
}

impl Field {
    pub fn as_str(self) -> &'static str {
        match self {
            Field::Uuid => "uuid",
            Field::Name => "name",
            Field::CpuCores => "cpu_cores",
            Field::CpuPriority => "cpu_priority",
            Field::RamMib => "ram_mib",
            Field::DiskGib => "disk_gib",
            Field::Nics => "nics",
            Field::ImageRef => "image_ref",
            Field::Level => "level",
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Consumable dimensions, in the fixed order admission checks them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Cores,
    Ram,
    Disk,
    Nics,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [Dimension::Cores, Dimension::Ram, Dimension::Disk, Dimension::Nics];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Cores => "cores",
            Dimension::Ram => "ram",
            Dimension::Disk => "disk",
            Dimension::Nics => "nics",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("malformed definition document: {0}")]
    MalformedDocument(String),
    #[error("invariant violated on field {0}")]
    InvariantViolation(Field),
    #[error("nesting depth exceeded: level {0} is deeper than L{MAX_LEVEL}")]
    NestingDepthExceeded(u8),
    #[error("illegal state transition {from} -> {to}")]
    IllegalTransition { from: VmState, to: VmState },
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::MalformedDocument(_) => "MalformedDocument",
            ModelError::InvariantViolation(_) => "InvariantViolation",
            ModelError::NestingDepthExceeded(_) => "NestingDepthExceeded",
            ModelError::IllegalTransition { .. } => "IllegalState",
        }
    }
}

/// The five resource dimensions of an allocation.
///
/// `cpu_priority` is a scheduling weight: it never takes part in fit tests or
/// capacity sums. Free pools and usage sums are also expressed as vectors, so
/// construction is unchecked; call [`ResourceVector::validate`] on requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ResourceVector {
    pub cpu_cores: u32,
    pub cpu_priority: u32,
    pub ram_mib: u64,
    pub disk_gib: u64,
    pub nics: u32,
}

impl ResourceVector {
    pub const fn new(cpu_cores: u32, cpu_priority: u32, ram_mib: u64, disk_gib: u64, nics: u32) -> Self {
        Self { cpu_cores, cpu_priority, ram_mib, disk_gib, nics }
    }

    /// Smallest valid request: one core, lowest weight, minimum RAM, no disk, no NIC.
    pub const fn minimum() -> Self {
        Self::new(1, 1, MIN_RAM_MIB, 0, 0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.cpu_cores < 1 {
            return Err(ModelError::InvariantViolation(Field::CpuCores));
        }
        if !(1..=MAX_CPU_PRIORITY).contains(&self.cpu_priority) {
            return Err(ModelError::InvariantViolation(Field::CpuPriority));
        }
        if self.ram_mib < MIN_RAM_MIB {
            return Err(ModelError::InvariantViolation(Field::RamMib));
        }
        Ok(())
    }

    pub fn amount(&self, dim: Dimension) -> u64 {
        match dim {
            Dimension::Cores => self.cpu_cores as u64,
            Dimension::Ram => self.ram_mib,
            Dimension::Disk => self.disk_gib,
            Dimension::Nics => self.nics as u64,
        }
    }

    /// First dimension (cores, ram, disk, nics) on which `self` exceeds `free`.
    pub fn first_shortfall(&self, free: &ResourceVector) -> Option<Dimension> {
        Dimension::ALL.into_iter().find(|&d| self.amount(d) > free.amount(d))
    }

    /// Partial order on consumables: `self ≼ other`.
    pub fn fits_within(&self, other: &ResourceVector) -> bool {
        self.first_shortfall(other).is_none()
    }

    /// Consumable sum; keeps `self`'s priority.
    pub fn plus(&self, other: &ResourceVector) -> ResourceVector {
        ResourceVector {
            cpu_cores: self.cpu_cores + other.cpu_cores,
            cpu_priority: self.cpu_priority,
            ram_mib: self.ram_mib + other.ram_mib,
            disk_gib: self.disk_gib + other.disk_gib,
            nics: self.nics + other.nics,
        }
    }

    /// Consumable difference clamped at zero; keeps `self`'s priority.
    pub fn saturating_minus(&self, other: &ResourceVector) -> ResourceVector {
        ResourceVector {
            cpu_cores: self.cpu_cores.saturating_sub(other.cpu_cores),
            cpu_priority: self.cpu_priority,
            ram_mib: self.ram_mib.saturating_sub(other.ram_mib),
            disk_gib: self.disk_gib.saturating_sub(other.disk_gib),
            nics: self.nics.saturating_sub(other.nics),
        }
    }

    /// Vector holding only `gib` of disk.
    pub fn disk_only(gib: u64) -> ResourceVector {
        ResourceVector { disk_gib: gib, ..ResourceVector::default() }
    }
}

/// True iff `request ≼ free` on cores, ram, disk and nics.
pub fn vector_fits(request: &ResourceVector, free: &ResourceVector) -> bool {
    request.fits_within(free)
}

/// Declarative VM configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmDefinition {
    pub uuid: Uuid,
    pub name: String,
    pub resources: ResourceVector,
    pub image_ref: String,
    pub level: u8,
}

impl VmDefinition {
    pub fn new(uuid: Uuid, name: impl Into<String>, resources: ResourceVector, image_ref: impl Into<String>, level: u8) -> Self {
        Self { uuid, name: name.into(), resources, image_ref: image_ref.into(), level }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.level > MAX_LEVEL {
            return Err(ModelError::NestingDepthExceeded(self.level));
        }
        if self.level == 0 {
            return Err(ModelError::InvariantViolation(Field::Level));
        }
        if self.name.is_empty() || self.name.chars().count() > MAX_NAME_LEN {
            return Err(ModelError::InvariantViolation(Field::Name));
        }
        if self.image_ref.is_empty() {
            return Err(ModelError::InvariantViolation(Field::ImageRef));
        }
        self.resources.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VmState {
    Defined,
    Scheduled,
    Running,
    Stopped,
    Failed,
}

impl VmState {
    pub const ALL: [VmState; 5] = [VmState::Defined, VmState::Scheduled, VmState::Running, VmState::Stopped, VmState::Failed];

    pub fn can_transition(self, to: VmState) -> bool {
        use VmState::*;
        matches!(
            (self, to),
            (Defined, Scheduled)
                | (Defined, Running)
                | (Scheduled, Running)
                | (Scheduled, Stopped)
                | (Running, Running)
                | (Running, Stopped)
                | (Running, Failed)
                | (Stopped, Running)
        )
    }

    /// States whose resources are charged to the parent host.
    pub fn consumes_capacity(self) -> bool {
        matches!(self, VmState::Running | VmState::Scheduled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VmState::Defined => "DEFINED",
            VmState::Scheduled => "SCHEDULED",
            VmState::Running => "RUNNING",
            VmState::Stopped => "STOPPED",
            VmState::Failed => "FAILED",
        }
    }
}

impl fmt::Display for VmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A host in the nesting tree: either a physical L0 machine or an L1 VM.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Physical(String),
    Vm(Uuid),
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Physical(name) => f.write_str(name),
            NodeId::Vm(uuid) => write!(f, "{uuid}"),
        }
    }
}

impl FromStr for NodeId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(ModelError::MalformedDocument("empty node id".into()));
        }
        Ok(match Uuid::parse_str(s) {
            Ok(uuid) => NodeId::Vm(uuid),
            Err(_) => NodeId::Physical(s.to_string()),
        })
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Live state of a VM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmRecord {
    pub definition: VmDefinition,
    pub state: VmState,
    pub parent: NodeId,
    pub started_at: Option<Timestamp>,
    pub stopped_at: Option<Timestamp>,
}

impl VmRecord {
    pub fn new(definition: VmDefinition, parent: NodeId) -> Self {
        Self { definition, state: VmState::Defined, parent, started_at: None, stopped_at: None }
    }

    pub fn uuid(&self) -> Uuid {
        self.definition.uuid
    }

    /// Applies a transition; on rejection the record is left untouched.
    pub fn transition(&mut self, to: VmState, now: Timestamp) -> Result<(), ModelError> {
        if !self.state.can_transition(to) {
            return Err(ModelError::IllegalTransition { from: self.state, to });
        }
        match to {
            VmState::Running if self.state != VmState::Running => {
                self.started_at = Some(now);
                self.stopped_at = None;
            }
            VmState::Stopped | VmState::Failed => self.stopped_at = Some(now),
            _ => {}
        }
        self.state = to;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostNode {
    pub node_id: NodeId,
    pub level: u8,
    pub capacity: ResourceVector,
    pub children: BTreeSet<Uuid>,
    /// Disk held by block volumes placed on this host.
    pub volume_disk_gib: u64,
}

impl HostNode {
    pub fn new(node_id: NodeId, level: u8, capacity: ResourceVector) -> Self {
        Self { node_id, level, capacity, children: BTreeSet::new(), volume_disk_gib: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VolumeId(pub u64);

impl fmt::Display for VolumeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Orchestration commands carried by the task queue.
///
/// `host` on launch-like commands names the parent node; L1 definitions fall
/// back to the default physical host, L2 definitions must name their L1 VM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Command {
    Launch {
        definition: VmDefinition,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        host: Option<NodeId>,
    },
    Start {
        uuid: Uuid,
    },
    Stop {
        uuid: Uuid,
    },
    Rescale {
        uuid: Uuid,
        resources: ResourceVector,
    },
    ScheduleAllocation {
        definition: VmDefinition,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        host: Option<NodeId>,
        start_time: Timestamp,
        duration_s: u64,
    },
    Status,
    VolumeCreate {
        size_gib: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        host: Option<NodeId>,
    },
    VolumeResize {
        volume_id: VolumeId,
        size_gib: u64,
    },
    VolumeDelete {
        volume_id: VolumeId,
    },
    VolumeAttach {
        volume_id: VolumeId,
        #[serde(default)]
        vm_uuid: Option<Uuid>,
    },
    SnapshotCreate {
        vm_uuid: Uuid,
        volume_id: VolumeId,
    },
}

impl Command {
    pub fn kind(&self) -> &'static str {
        match self {
            Command::Launch { .. } => "launch",
            Command::Start { .. } => "start",
            Command::Stop { .. } => "stop",
            Command::Rescale { .. } => "rescale",
            Command::ScheduleAllocation { .. } => "schedule_allocation",
            Command::Status => "status",
            Command::VolumeCreate { .. } => "volume_create",
            Command::VolumeResize { .. } => "volume_resize",
            Command::VolumeDelete { .. } => "volume_delete",
            Command::VolumeAttach { .. } => "volume_attach",
            Command::SnapshotCreate { .. } => "snapshot_create",
        }
    }

    /// Payload checks that do not need any state.
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Command::Launch { definition, .. } | Command::ScheduleAllocation { definition, .. } => definition.validate(),
            Command::Rescale { resources, .. } => resources.validate(),
            _ => Ok(()),
        }
    }
}

// Canonical definition document.

pub fn serialize_definition(def: &VmDefinition) -> Vec<u8> {
    let r = &def.resources;
    format!(
        "<vm uuid=\"{}\" level=\"{}\"><name>{}</name><resources cores=\"{}\" priority=\"{}\" ram_mib=\"{}\" disk_gib=\"{}\" nics=\"{}\"/><image ref=\"{}\"/></vm>",
        def.uuid.simple(),
        def.level,
        escape(&def.name),
        r.cpu_cores,
        r.cpu_priority,
        r.ram_mib,
        r.disk_gib,
        r.nics,
        escape(&def.image_ref),
    )
    .into_bytes()
}

pub fn parse_definition(bytes: &[u8]) -> Result<VmDefinition, ModelError> {
    let text = std::str::from_utf8(bytes).map_err(|_| malformed("document is not UTF-8"))?;
    let mut cur = Cursor { rest: text };

    cur.expect("<vm uuid=\"")?;
    let uuid_hex = cur.until('"')?;
    if uuid_hex.len() != 32 || !uuid_hex.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(ModelError::InvariantViolation(Field::Uuid));
    }
    let uuid = Uuid::parse_str(uuid_hex).map_err(|_| ModelError::InvariantViolation(Field::Uuid))?;
    cur.expect("\" level=\"")?;
    let level = cur.number::<u8>(Field::Level)?;
    cur.expect("\"><name>")?;
    let name = unescape(cur.until('<')?)?;
    cur.expect("</name><resources cores=\"")?;
    let cpu_cores = cur.number::<u32>(Field::CpuCores)?;
    cur.expect("\" priority=\"")?;
    let cpu_priority = cur.number::<u32>(Field::CpuPriority)?;
    cur.expect("\" ram_mib=\"")?;
    let ram_mib = cur.number::<u64>(Field::RamMib)?;
    cur.expect("\" disk_gib=\"")?;
    let disk_gib = cur.number::<u64>(Field::DiskGib)?;
    cur.expect("\" nics=\"")?;
    let nics = cur.number::<u32>(Field::Nics)?;
    cur.expect("\"/><image ref=\"")?;
    let image_ref = unescape(cur.until('"')?)?;
    cur.expect("\"/></vm>")?;
    if !cur.rest.is_empty() {
        return Err(malformed("trailing bytes after </vm>"));
    }

    let def = VmDefinition {
        uuid,
        name,
        resources: ResourceVector { cpu_cores, cpu_priority, ram_mib, disk_gib, nics },
        image_ref,
        level,
    };
    match def.validate() {
        Err(ModelError::NestingDepthExceeded(_)) => Err(ModelError::InvariantViolation(Field::Level)),
        other => other.map(|_| def),
    }
}

fn malformed(reason: &str) -> ModelError {
    ModelError::MalformedDocument(reason.to_string())
}

struct Cursor<'a> {
    rest: &'a str,
}

impl<'a> Cursor<'a> {
    fn expect(&mut self, literal: &str) -> Result<(), ModelError> {
        match self.rest.strip_prefix(literal) {
            Some(rest) => {
                self.rest = rest;
                Ok(())
            }
            None => Err(ModelError::MalformedDocument(format!("expected `{literal}`"))),
        }
    }

    fn until(&mut self, stop: char) -> Result<&'a str, ModelError> {
        let idx = self.rest.find(stop).ok_or_else(|| malformed("unterminated value"))?;
        let (head, tail) = self.rest.split_at(idx);
        self.rest = tail;
        Ok(head)
    }

    fn number<T: FromStr>(&mut self, field: Field) -> Result<T, ModelError> {
        let raw = self.until('"')?;
        if raw.is_empty() || !raw.bytes().all(|b| b.is_ascii_digit()) || (raw.len() > 1 && raw.starts_with('0')) {
            return Err(ModelError::MalformedDocument(format!("non-canonical number for {field}")));
        }
        raw.parse().map_err(|_| ModelError::InvariantViolation(field))
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, ModelError> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(idx) = rest.find('&') {
        out.push_str(&rest[..idx]);
        rest = &rest[idx..];
        let end = rest.find(';').ok_or_else(|| malformed("unterminated entity"))?;
        out.push(match &rest[..=end] {
            "&amp;" => '&',
            "&lt;" => '<',
            "&gt;" => '>',
            "&quot;" => '"',
            "&apos;" => '\'',
            _ => return Err(malformed("unknown entity")),
        });
        rest = &rest[end + 1..];
    }
    if rest.contains(['<', '>', '"']) {
        return Err(malformed("unescaped markup in text"));
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn web() -> VmDefinition {
        VmDefinition::new(Uuid::from_u128(1), "web", ResourceVector::new(2, 512, 2048, 20, 1), "app.qcow2", 1)
    }

    #[test]
    fn canonical_document_bytes() {
        let doc = serialize_definition(&web());
        assert_eq!(
            std::str::from_utf8(&doc).unwrap(),
            "<vm uuid=\"00000000000000000000000000000001\" level=\"1\"><name>web</name>\
             <resources cores=\"2\" priority=\"512\" ram_mib=\"2048\" disk_gib=\"20\" nics=\"1\"/>\
             <image ref=\"app.qcow2\"/></vm>"
        );
        assert_eq!(parse_definition(&doc).unwrap(), web());
    }

    #[test]
    fn name_change_is_local() {
        let mut other = web();
        other.name = "db".into();
        let a = String::from_utf8(serialize_definition(&web())).unwrap();
        let b = String::from_utf8(serialize_definition(&other)).unwrap();
        assert_eq!(a.replace("<name>web</name>", "<name>db</name>"), b);
    }

    #[test]
    fn zero_cores_is_an_invariant_violation() {
        let doc = String::from_utf8(serialize_definition(&web())).unwrap().replace("cores=\"2\"", "cores=\"0\"");
        assert_eq!(parse_definition(doc.as_bytes()), Err(ModelError::InvariantViolation(Field::CpuCores)));
        let doc = String::from_utf8(serialize_definition(&web())).unwrap().replace("ram_mib=\"2048\"", "ram_mib=\"32\"");
        assert_eq!(parse_definition(doc.as_bytes()), Err(ModelError::InvariantViolation(Field::RamMib)));
    }

    #[test]
    fn truncated_document_is_malformed() {
        let doc = serialize_definition(&web());
        for cut in [0, 5, doc.len() / 2, doc.len() - 1] {
            assert!(matches!(parse_definition(&doc[..cut]), Err(ModelError::MalformedDocument(_))), "cut at {cut}");
        }
        let mut padded = doc.clone();
        padded.push(b' ');
        assert!(matches!(parse_definition(&padded), Err(ModelError::MalformedDocument(_))));
    }

    #[test]
    fn markup_in_names_is_escaped() {
        let mut def = web();
        def.name = "a<b> & \"c\"".into();
        let doc = serialize_definition(&def);
        assert!(!std::str::from_utf8(&doc).unwrap().contains("a<b>"));
        assert_eq!(parse_definition(&doc).unwrap(), def);
    }

    #[test]
    fn fit_ignores_priority() {
        let req = ResourceVector::new(2, 512, 4096, 40, 1);
        assert!(vector_fits(&req, &ResourceVector::new(2, 1, 4096, 40, 1)));
        let req = ResourceVector::new(3, 512, 2048, 10, 1);
        assert!(!vector_fits(&req, &ResourceVector::new(2, 512, 8192, 100, 2)));
        assert_eq!(req.first_shortfall(&ResourceVector::new(2, 512, 8192, 100, 2)), Some(Dimension::Cores));
        let min = ResourceVector::minimum();
        assert!(vector_fits(&min, &ResourceVector::new(1, 1, 64, 0, 0)));
    }

    #[test]
    fn vector_bounds() {
        assert!(ResourceVector::minimum().validate().is_ok());
        assert_eq!(ResourceVector::new(1, 0, 64, 0, 0).validate(), Err(ModelError::InvariantViolation(Field::CpuPriority)));
        assert_eq!(ResourceVector::new(1, 1025, 64, 0, 0).validate(), Err(ModelError::InvariantViolation(Field::CpuPriority)));
    }

    #[test]
    fn definition_level_bounds() {
        let mut def = web();
        def.level = 3;
        assert_eq!(def.validate(), Err(ModelError::NestingDepthExceeded(3)));
        def.level = 0;
        assert_eq!(def.validate(), Err(ModelError::InvariantViolation(Field::Level)));
        def.level = 2;
        def.name = "x".repeat(129);
        assert_eq!(def.validate(), Err(ModelError::InvariantViolation(Field::Name)));
    }

    #[test]
    fn node_id_round_trips_through_strings() {
        let vm = NodeId::Vm(Uuid::from_u128(7));
        assert_eq!(vm.to_string().parse::<NodeId>().unwrap(), vm);
        assert_eq!("l0".parse::<NodeId>().unwrap(), NodeId::Physical("l0".into()));
        let json = serde_json::to_string(&vm).unwrap();
        assert_eq!(serde_json::from_str::<NodeId>(&json).unwrap(), vm);
    }

    #[test]
    fn command_json_shape() {
        let cmd = Command::Stop { uuid: Uuid::from_u128(2) };
        let json = serde_json::to_value(&cmd).unwrap();
        assert_eq!(json["type"], "stop");
        assert_eq!(serde_json::from_value::<Command>(json).unwrap(), cmd);
    }

    fn arb_state() -> impl Strategy<Value = VmState> {
        prop::sample::select(VmState::ALL.to_vec())
    }

    fn arb_definition() -> impl Strategy<Value = VmDefinition> {
        (
            any::<u128>(),
            "[ -~]{1,40}",
            1u32..64,
            1u32..=1024,
            64u64..1 << 20,
            0u64..10_000,
            0u32..16,
            "[ -~]{1,40}",
            1u8..=2,
        )
            .prop_map(|(id, name, c, p, r, d, n, img, level)| {
                VmDefinition::new(Uuid::from_u128(id), name, ResourceVector::new(c, p, r, d, n), img, level)
            })
    }

    proptest! {
        #[test]
        fn document_round_trip(def in arb_definition()) {
            let doc = serialize_definition(&def);
            let back = parse_definition(&doc).unwrap();
            prop_assert_eq!(&back, &def);
            prop_assert_eq!(serialize_definition(&back), doc);
        }

        #[test]
        fn transitions_stay_in_the_state_machine(steps in prop::collection::vec(arb_state(), 0..64)) {
            let mut rec = VmRecord::new(arb_fixed(), NodeId::Physical("l0".into()));
            for (t, to) in steps.into_iter().enumerate() {
                let before = rec.clone();
                match rec.transition(to, t as u64) {
                    Ok(()) => prop_assert_eq!(rec.state, to),
                    Err(_) => prop_assert_eq!(&rec, &before),
                }
                prop_assert!(VmState::ALL.contains(&rec.state));
            }
        }

        #[test]
        fn fit_is_monotone(
            r in (1u32..8, 0u64..4096, 0u64..100, 0u32..4),
            shrink in (0u32..8, 0u64..4096, 0u64..100, 0u32..4),
            f in (0u32..8, 0u64..4096, 0u64..100, 0u32..4),
        ) {
            let req = ResourceVector::new(r.0, 1, r.1, r.2, r.3);
            let free = ResourceVector::new(f.0, 1, f.1, f.2, f.3);
            let smaller = req.saturating_minus(&ResourceVector::new(shrink.0, 1, shrink.1, shrink.2, shrink.3));
            if vector_fits(&req, &free) {
                prop_assert!(vector_fits(&smaller, &free));
            }
        }
    }

    fn arb_fixed() -> VmDefinition {
        web()
    }
}
