//! Python bindings: an in-memory nested cloud with its market, plus the
//! benchmark helpers.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;
use uuid::Uuid;

use nestery_core::clock::Clock;
use nestery_core::cloud::{rejection, NestedCloud};
use nestery_core::hypersim::Hypervisor;
use nestery_core::market::{ContractCommand, Market, MarketError, Money, OfferFilter, OfferSpec, ProviderProfile};
use nestery_core::model::{self, Command, NodeId, ResourceVector, VmDefinition, VolumeId};
use nestery_core::perfbench::{self, BenchConfig, StatsWindow};

create_exception!(nestery, NesteryError, PyException, "Domain error; args are (code, detail).");

fn err(code: &str, detail: impl ToString) -> PyErr {
    NesteryError::new_err((code.to_string(), detail.to_string()))
}

fn market_err(e: MarketError) -> PyErr {
    match &e {
        MarketError::Rejected { code, detail } => err(code, detail),
        _ => err(e.code(), &e),
    }
}

/// Converts any serializable value to plain Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| err("Internal", e))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn parse_uuid(s: &str) -> PyResult<Uuid> {
    Uuid::parse_str(s).map_err(|e| err("MalformedDocument", format!("bad uuid {s:?}: {e}")))
}

fn parse_node(s: &str) -> PyResult<NodeId> {
    s.parse().map_err(|e: model::ModelError| err(e.code(), e))
}

#[pyclass(name = "ResourceVector", frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyResources {
    inner: ResourceVector,
}

#[pymethods]
impl PyResources {
    #[new]
    #[pyo3(signature = (cpu_cores, cpu_priority=512, ram_mib=1024, disk_gib=10, nics=1))]
    fn new(cpu_cores: u32, cpu_priority: u32, ram_mib: u64, disk_gib: u64, nics: u32) -> Self {
        Self { inner: ResourceVector::new(cpu_cores, cpu_priority, ram_mib, disk_gib, nics) }
    }

    #[getter]
    fn cpu_cores(&self) -> u32 {
        self.inner.cpu_cores
    }
    #[getter]
    fn cpu_priority(&self) -> u32 {
        self.inner.cpu_priority
    }
    #[getter]
    fn ram_mib(&self) -> u64 {
        self.inner.ram_mib
    }
    #[getter]
    fn disk_gib(&self) -> u64 {
        self.inner.disk_gib
    }
    #[getter]
    fn nics(&self) -> u32 {
        self.inner.nics
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(|e| err(e.code(), e))
    }

    fn fits_within(&self, other: &PyResources) -> bool {
        self.inner.fits_within(&other.inner)
    }

    fn __repr__(&self) -> String {
        let r = &self.inner;
        format!("ResourceVector(cpu_cores={}, cpu_priority={}, ram_mib={}, disk_gib={}, nics={})", r.cpu_cores, r.cpu_priority, r.ram_mib, r.disk_gib, r.nics)
    }
}

/// A simulated nested cloud on one physical host `l0`, driven through its
/// task queue, together with a resale market.
#[pyclass(unsendable)]
pub struct Cloud {
    cloud: NestedCloud,
    market: Market,
    next_key: u64,
}

impl Cloud {
    fn key(&mut self, key: Option<String>) -> String {
        key.unwrap_or_else(|| {
            self.next_key += 1;
            format!("py-{}", self.next_key)
        })
    }

    fn run<'py>(&mut self, py: Python<'py>, cmd: Command, key: Option<String>) -> PyResult<Bound<'py, PyAny>> {
        let key = self.key(key);
        let r = self.cloud.execute(cmd, &key).map_err(|e| err(e.code(), &e))?;
        if let Some((code, detail)) = rejection(&r) {
            return Err(err(code, detail));
        }
        to_py(py, &r.outcome)
    }

    fn resources(&self, uuid: &Uuid) -> PyResult<ResourceVector> {
        let hv = self.cloud.hypervisor();
        hv.record(uuid).map(|r| r.definition.resources).ok_or_else(|| err("UnknownVm", format!("unknown vm {uuid}")))
    }
}

#[pymethods]
impl Cloud {
    #[new]
    #[pyo3(signature = (capacity, start=0))]
    fn new(capacity: PyResources, start: u64) -> PyResult<Self> {
        capacity.validate()?;
        Ok(Self { cloud: NestedCloud::in_memory(Hypervisor::new(capacity.inner), Clock::simulated(start)), market: Market::new(), next_key: 0 })
    }

    #[getter]
    fn now(&self) -> u64 {
        self.cloud.clock().now()
    }

    /// Launches a VM and returns its uuid.
    #[pyo3(signature = (name, resources, level=1, host=None, uuid=None, image="base-image", key=None))]
    #[allow(clippy::too_many_arguments)]
    fn launch(
        &mut self,
        py: Python<'_>,
        name: &str,
        resources: PyResources,
        level: u8,
        host: Option<&str>,
        uuid: Option<&str>,
        image: &str,
        key: Option<String>,
    ) -> PyResult<String> {
        let uuid = uuid.map(parse_uuid).transpose()?.unwrap_or_else(Uuid::new_v4);
        let host = host.map(parse_node).transpose()?;
        let definition = VmDefinition::new(uuid, name, resources.inner, image, level);
        self.run(py, Command::Launch { definition, host }, key)?;
        Ok(uuid.to_string())
    }

    #[pyo3(signature = (uuid, key=None))]
    fn start<'py>(&mut self, py: Python<'py>, uuid: &str, key: Option<String>) -> PyResult<Bound<'py, PyAny>> {
        let uuid = parse_uuid(uuid)?;
        self.run(py, Command::Start { uuid }, key)
    }

    #[pyo3(signature = (uuid, key=None))]
    fn stop<'py>(&mut self, py: Python<'py>, uuid: &str, key: Option<String>) -> PyResult<Bound<'py, PyAny>> {
        let uuid = parse_uuid(uuid)?;
        self.run(py, Command::Stop { uuid }, key)
    }

    #[pyo3(signature = (uuid, resources, key=None))]
    fn rescale<'py>(&mut self, py: Python<'py>, uuid: &str, resources: PyResources, key: Option<String>) -> PyResult<Bound<'py, PyAny>> {
        let uuid = parse_uuid(uuid)?;
        self.run(py, Command::Rescale { uuid, resources: resources.inner }, key)
    }

    /// Reserves a VM for `[start_time, start_time + duration_s)`.
    #[pyo3(signature = (name, resources, start_time, duration_s, level=1, host=None, uuid=None, key=None))]
    #[allow(clippy::too_many_arguments)]
    fn schedule<'py>(
        &mut self,
        py: Python<'py>,
        name: &str,
        resources: PyResources,
        start_time: u64,
        duration_s: u64,
        level: u8,
        host: Option<&str>,
        uuid: Option<&str>,
        key: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let uuid = uuid.map(parse_uuid).transpose()?.unwrap_or_else(Uuid::new_v4);
        let host = host.map(parse_node).transpose()?;
        let definition = VmDefinition::new(uuid, name, resources.inner, "base-image", level);
        self.run(py, Command::ScheduleAllocation { definition, host, start_time, duration_s }, key)
    }

    #[pyo3(signature = (size_gib, host=None, key=None))]
    fn create_volume<'py>(&mut self, py: Python<'py>, size_gib: u64, host: Option<&str>, key: Option<String>) -> PyResult<Bound<'py, PyAny>> {
        let host = host.map(parse_node).transpose()?;
        self.run(py, Command::VolumeCreate { size_gib, host }, key)
    }

    #[pyo3(signature = (volume_id, size_gib, key=None))]
    fn resize_volume<'py>(&mut self, py: Python<'py>, volume_id: u64, size_gib: u64, key: Option<String>) -> PyResult<Bound<'py, PyAny>> {
        self.run(py, Command::VolumeResize { volume_id: VolumeId(volume_id), size_gib }, key)
    }

    #[pyo3(signature = (volume_id, key=None))]
    fn delete_volume<'py>(&mut self, py: Python<'py>, volume_id: u64, key: Option<String>) -> PyResult<Bound<'py, PyAny>> {
        self.run(py, Command::VolumeDelete { volume_id: VolumeId(volume_id) }, key)
    }

    #[pyo3(signature = (volume_id, vm=None, key=None))]
    fn attach_volume<'py>(&mut self, py: Python<'py>, volume_id: u64, vm: Option<&str>, key: Option<String>) -> PyResult<Bound<'py, PyAny>> {
        let vm_uuid = vm.map(parse_uuid).transpose()?;
        self.run(py, Command::VolumeAttach { volume_id: VolumeId(volume_id), vm_uuid }, key)
    }

    #[pyo3(signature = (vm, volume_id, key=None))]
    fn snapshot<'py>(&mut self, py: Python<'py>, vm: &str, volume_id: u64, key: Option<String>) -> PyResult<Bound<'py, PyAny>> {
        let vm_uuid = parse_uuid(vm)?;
        self.run(py, Command::SnapshotCreate { vm_uuid, volume_id: VolumeId(volume_id) }, key)
    }

    /// Moves the clock forward, running scheduled work each second and
    /// settling contract billing.
    fn advance(&mut self, seconds: u64) -> PyResult<u64> {
        self.cloud.advance(seconds).map_err(|e| err(e.code(), &e))?;
        let now = self.cloud.clock().now();
        self.market.accrue(now);
        Ok(now)
    }

    fn status<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.cloud.status())
    }

    fn vm_resources(&self, uuid: &str) -> PyResult<PyResources> {
        Ok(PyResources { inner: self.resources(&parse_uuid(uuid)?)? })
    }

    /// Raises if any capacity, disk or market invariant is broken.
    fn check_invariants(&self) -> PyResult<()> {
        self.cloud.hypervisor().check_invariants().map_err(|e| err("InvariantViolation", e))?;
        self.market.check_invariants(&self.cloud).map_err(|e| err("InvariantViolation", e))
    }

    #[pyo3(signature = (user_id, company_name, tax_number, backing, bank_account=None, postal_address=None))]
    #[allow(clippy::too_many_arguments)]
    fn become_provider<'py>(
        &mut self,
        py: Python<'py>,
        user_id: &str,
        company_name: &str,
        tax_number: &str,
        backing: &str,
        bank_account: Option<String>,
        postal_address: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.market.register_user(user_id);
        let profile = ProviderProfile { company_name: company_name.into(), tax_number: tax_number.into(), bank_account, postal_address };
        let user = self.market.become_provider(user_id, profile, parse_node(backing)?, &self.cloud).map_err(market_err)?;
        to_py(py, user)
    }

    /// Registers an offer; pass `resources` for compute or `storage_gib`.
    #[pyo3(signature = (provider_id, floor, cap, price, resources=None, storage_gib=None, host=None))]
    #[allow(clippy::too_many_arguments)]
    fn register_offer<'py>(
        &mut self,
        py: Python<'py>,
        provider_id: &str,
        floor: f64,
        cap: f64,
        price: f64,
        resources: Option<PyResources>,
        storage_gib: Option<u64>,
        host: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let spec = match (resources, storage_gib) {
            (Some(r), None) => OfferSpec::Compute(r.inner),
            (None, Some(g)) => OfferSpec::Storage { size_gib: g },
            _ => return Err(err("InvalidOffer", "pass exactly one of resources or storage_gib")),
        };
        let host = host.map(parse_node).transpose()?;
        let offer = self
            .market
            .register_offer(provider_id, spec, Money::from_f64(floor), Money::from_f64(cap), Money::from_f64(price), BTreeMap::new(), host, &self.cloud)
            .map_err(market_err)?;
        to_py(py, &offer)
    }

    fn offers<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.market.list_offers(&OfferFilter::default()))
    }

    fn negotiate<'py>(&mut self, py: Python<'py>, consumer_id: &str, offer_id: u64) -> PyResult<Bound<'py, PyAny>> {
        self.market.register_user(consumer_id);
        let c = self.market.negotiate_contract(consumer_id, offer_id, &self.cloud).map_err(market_err)?;
        to_py(py, &c)
    }

    /// Steers a contracted VM: `action` is start, stop, status or rescale.
    #[pyo3(signature = (consumer_id, contract_id, action, resources=None, key=None))]
    fn control<'py>(
        &mut self,
        py: Python<'py>,
        consumer_id: &str,
        contract_id: u64,
        action: &str,
        resources: Option<PyResources>,
        key: Option<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cmd = match (action, resources) {
            ("start", None) => ContractCommand::Start,
            ("stop", None) => ContractCommand::Stop,
            ("status", None) => ContractCommand::Status,
            ("rescale", Some(r)) => ContractCommand::Rescale { resources: r.inner },
            _ => return Err(err("InvalidRequest", format!("unsupported action {action:?} or resources mismatch"))),
        };
        let key = self.key(key);
        let r = self.market.control_allocation(consumer_id, contract_id, cmd, &key, &self.cloud).map_err(market_err)?;
        if let Some((code, detail)) = rejection(&r) {
            return Err(err(code, detail));
        }
        to_py(py, &r.outcome)
    }

    fn terminate<'py>(&mut self, py: Python<'py>, user_id: &str, contract_id: u64) -> PyResult<Bound<'py, PyAny>> {
        let c = self.market.terminate_contract(user_id, contract_id, &self.cloud).map_err(market_err)?;
        to_py(py, &c)
    }

    fn record_purchase(&mut self, user_id: &str, amount: f64) -> PyResult<()> {
        self.market.register_user(user_id);
        self.market.record_purchase(user_id, Money::from_f64(amount)).map_err(market_err)
    }

    fn ledger<'py>(&self, py: Python<'py>, user_id: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.market.ledger_report(user_id).map_err(market_err)?)
    }

    fn utilization(&self, host: &str) -> PyResult<f64> {
        Ok(Market::utilization(&parse_node(host)?, &self.cloud))
    }
}

/// Percentage by which `subject` exceeds `baseline`.
#[pyfunction]
fn overhead_pct(baseline: f64, subject: f64) -> PyResult<f64> {
    let b = perfbench::StatsSummary::new(baseline, baseline, baseline);
    let s = perfbench::StatsSummary::new(subject, subject, subject);
    perfbench::overhead_pct(&b, &s).map_err(|e| err(e.code(), e))
}

/// avg / p80 / p90 / count of a list of durations.
#[pyfunction]
fn compute_stats<'py>(py: Python<'py>, durations: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &perfbench::compute_stats(&durations).map_err(|e| err(e.code(), e))?)
}

/// Simulates all three levels and returns the summary document.
#[pyfunction]
#[pyo3(signature = (seed=1, users=64, period_s=180, warmup_peak=None, include_warmup=false))]
fn run_bench<'py>(py: Python<'py>, seed: u64, users: u32, period_s: u32, warmup_peak: Option<f64>, include_warmup: bool) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = BenchConfig::default();
    cfg.profile.seed = seed;
    cfg.profile.users = users;
    cfg.profile.period_s = period_s;
    if let Some(p) = warmup_peak {
        cfg.model.warmup_peak_multiplier = p;
    }
    if include_warmup {
        cfg.window = StatsWindow::Full;
    }
    let exp = perfbench::run_experiment(&cfg).map_err(|e| err(e.code(), e))?;
    to_py(py, &perfbench::summary_json(&exp))
}

/// Canonical definition document of a VM.
#[pyfunction]
#[pyo3(signature = (uuid, name, resources, image_ref, level=1))]
fn serialize_definition(uuid: &str, name: &str, resources: PyResources, image_ref: &str, level: u8) -> PyResult<String> {
    let def = VmDefinition::new(parse_uuid(uuid)?, name, resources.inner, image_ref, level);
    def.validate().map_err(|e| err(e.code(), e))?;
    String::from_utf8(model::serialize_definition(&def)).map_err(|e| err("Internal", e))
}

#[pyfunction]
fn parse_definition<'py>(py: Python<'py>, document: &str) -> PyResult<Bound<'py, PyAny>> {
    let def = model::parse_definition(document.as_bytes()).map_err(|e| err(e.code(), e))?;
    to_py(py, &def)
}

#[pymodule]
pub fn nestery(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NesteryError", m.py().get_type::<NesteryError>())?;
    m.add_class::<PyResources>()?;
    m.add_class::<Cloud>()?;
    m.add_function(wrap_pyfunction!(overhead_pct, m)?)?;
    m.add_function(wrap_pyfunction!(compute_stats, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_definition, m)?)?;
    m.add_function(wrap_pyfunction!(parse_definition, m)?)?;
    Ok(())
}
