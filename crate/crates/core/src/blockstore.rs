//! Host-local block volumes and instance snapshots.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::model::{Dimension, NodeId, Timestamp, VolumeId};
use crate::scheduler::{CapacityError, Inventory};

pub const DEFAULT_FILESYSTEM: &str = "ext4";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VolumeError {
    #[error("volume size must be at least 1 GiB")]
    InvalidSize,
    #[error("admission denied on {0}")]
    AdmissionDenied(Dimension),
    #[error("cannot shrink below used size ({used} GiB)")]
    ShrinkBelowUsed { used: u64 },
    #[error("unknown volume {0}")]
    UnknownVolume(VolumeId),
    #[error("volume {0} is attached")]
    VolumeAttached(VolumeId),
    #[error("insufficient space: need {needed} GiB, {free} GiB free")]
    InsufficientSpace { needed: u64, free: u64 },
    #[error("unknown vm {0}")]
    UnknownVm(Uuid),
    #[error("unknown host {0}")]
    UnknownHost(NodeId),
}

impl VolumeError {
    pub fn code(&self) -> &'static str {
        match self {
            VolumeError::InvalidSize => "InvalidSize",
            VolumeError::AdmissionDenied(_) => "AdmissionDenied",
            VolumeError::ShrinkBelowUsed { .. } => "ShrinkBelowUsed",
            VolumeError::UnknownVolume(_) => "UnknownVolume",
            VolumeError::VolumeAttached(_) => "VolumeAttached",
            VolumeError::InsufficientSpace { .. } => "InsufficientSpace",
            VolumeError::UnknownVm(_) => "UnknownVm",
            VolumeError::UnknownHost(_) => "UnknownHost",
        }
    }
}

impl From<CapacityError> for VolumeError {
    fn from(e: CapacityError) -> Self {
        match e {
            CapacityError::AdmissionDenied(d) => VolumeError::AdmissionDenied(d),
            CapacityError::UnknownHost(h) => VolumeError::UnknownHost(h),
            CapacityError::UnknownVm(u) => VolumeError::UnknownVm(u),
            other => unreachable!("disk reservation cannot fail with {other}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    Snapshot,
    Data,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredObject {
    pub name: String,
    pub kind: ContentKind,
    pub size_gib: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockVolume {
    pub volume_id: VolumeId,
    pub host: NodeId,
    pub size_gib: u64,
    pub used_gib: u64,
    pub filesystem_label: String,
    pub attached_to: Option<Uuid>,
    pub contents: Vec<StoredObject>,
}

impl BlockVolume {
    pub fn free_gib(&self) -> u64 {
        self.size_gib - self.used_gib
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockStore {
    volumes: BTreeMap<VolumeId, BlockVolume>,
    next_id: u64,
}

impl BlockStore {
    pub fn new() -> Self {
        Self { volumes: BTreeMap::new(), next_id: 1 }
    }

    pub fn volume(&self, id: VolumeId) -> Result<&BlockVolume, VolumeError> {
        self.volumes.get(&id).ok_or(VolumeError::UnknownVolume(id))
    }

    pub fn volumes(&self) -> impl Iterator<Item = &BlockVolume> {
        self.volumes.values()
    }

    pub fn create_volume(&mut self, inv: &mut Inventory, host: &NodeId, size_gib: u64) -> Result<BlockVolume, VolumeError> {
        if size_gib == 0 {
            return Err(VolumeError::InvalidSize);
        }
        inv.reserve_disk(host, size_gib)?;
        let id = VolumeId(self.next_id.max(1));
        self.next_id = id.0 + 1;
        let vol = BlockVolume {
            volume_id: id,
            host: host.clone(),
            size_gib,
            used_gib: 0,
            filesystem_label: DEFAULT_FILESYSTEM.to_string(),
            attached_to: None,
            contents: Vec::new(),
        };
        self.volumes.insert(id, vol.clone());
        Ok(vol)
    }

    pub fn resize_volume(&mut self, inv: &mut Inventory, id: VolumeId, new_size_gib: u64) -> Result<BlockVolume, VolumeError> {
        let vol = self.volume(id)?;
        if new_size_gib == 0 {
            return Err(VolumeError::InvalidSize);
        }
        if new_size_gib < vol.used_gib {
            return Err(VolumeError::ShrinkBelowUsed { used: vol.used_gib });
        }
        let (host, old) = (vol.host.clone(), vol.size_gib);
        if new_size_gib > old {
            inv.reserve_disk(&host, new_size_gib - old)?;
        } else {
            inv.release_disk(&host, old - new_size_gib)?;
        }
        let vol = self.volumes.get_mut(&id).expect("checked");
        vol.size_gib = new_size_gib;
        Ok(vol.clone())
    }

    pub fn delete_volume(&mut self, inv: &mut Inventory, id: VolumeId) -> Result<BlockVolume, VolumeError> {
        let vol = self.volume(id)?;
        if vol.attached_to.is_some() {
            return Err(VolumeError::VolumeAttached(id));
        }
        inv.release_disk(&vol.host, vol.size_gib)?;
        Ok(self.volumes.remove(&id).expect("checked"))
    }

    /// Attaches the volume to `vm`, or detaches it when `vm` is `None`.
    pub fn attach(&mut self, inv: &Inventory, id: VolumeId, vm: Option<Uuid>) -> Result<BlockVolume, VolumeError> {
        self.volume(id)?;
        if let Some(u) = vm {
            inv.record(&u).ok_or(VolumeError::UnknownVm(u))?;
        }
        let vol = self.volumes.get_mut(&id).expect("checked");
        vol.attached_to = vm;
        Ok(vol.clone())
    }

    /// Stores a full-size snapshot of `vm` on the volume. Names carry the
    /// timestamp and a per-volume sequence number so repeated snapshots stay
    /// distinct within one second.
    pub fn snapshot_instance(&mut self, inv: &Inventory, vm: Uuid, id: VolumeId, now: Timestamp) -> Result<StoredObject, VolumeError> {
        let rec = inv.record(&vm).ok_or(VolumeError::UnknownVm(vm))?;
        let vol = self.volumes.get_mut(&id).ok_or(VolumeError::UnknownVolume(id))?;
        let needed = rec.definition.resources.disk_gib;
        if needed > vol.free_gib() {
            return Err(VolumeError::InsufficientSpace { needed, free: vol.free_gib() });
        }
        let obj = StoredObject {
            name: format!("{}-{}-{}", vm.simple(), now, vol.contents.len() + 1),
            kind: ContentKind::Snapshot,
            size_gib: needed,
        };
        vol.used_gib += needed;
        vol.contents.push(obj.clone());
        Ok(obj)
    }

    /// Checks volume usage and that hosts are charged exactly the volume sizes.
    pub fn check_invariants(&self, inv: &Inventory) -> Result<(), String> {
        let mut per_host: BTreeMap<&NodeId, u64> = BTreeMap::new();
        for v in self.volumes.values() {
            let sum: u64 = v.contents.iter().map(|c| c.size_gib).sum();
            if sum != v.used_gib || v.used_gib > v.size_gib {
                return Err(format!("volume {} used {} contents {} size {}", v.volume_id, v.used_gib, sum, v.size_gib));
            }
            if let Some(u) = v.attached_to {
                if inv.record(&u).is_none() {
                    return Err(format!("volume {} attached to unknown vm {u}", v.volume_id));
                }
            }
            *per_host.entry(&v.host).or_default() += v.size_gib;
        }
        for host in inv.hosts() {
            let charged = per_host.get(&host.node_id).copied().unwrap_or(0);
            if charged != host.volume_disk_gib {
                return Err(format!("host {} charged {} GiB of volumes, volumes hold {}", host.node_id, host.volume_disk_gib, charged));
            }
        }
        Ok(())
    }
}
