//! The `nestery` operator CLI. Each subcommand maps to one service call.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use uuid::Uuid;

use nestery_core::hypersim::{CommandResult, HostStatus, Outcome, StatusReport, VmStatus};
use nestery_core::market::{ContractCommand, Money, OfferFilter, OfferKind, OfferSpec, OfferStatus, ProviderProfile};
use nestery_core::model::{Command, NodeId, ResourceVector, Timestamp, VmDefinition, VolumeId};
use nestery_core::perfbench::{self, BenchConfig, StatsWindow, REFERENCE_STATS};

use crate::config::{parse_clock, parse_listen, parse_tokens, ApiConfig, DEFAULT_DATA_DIR, DEFAULT_LISTEN};
use crate::error::ApiError;
use crate::service::{OfferRequest, ProviderRequest, Service, ServiceConfig, DEFAULT_CAPACITY, STATE_FILE};

#[derive(Debug, Parser)]
#[command(name = "nestery", version, about = "Control plane for nested virtualization clouds")]
pub struct Cli {
    /// Directory holding state.json and the journals.
    #[arg(long, global = true, env = "NESTERY_DATA_DIR", default_value = DEFAULT_DATA_DIR)]
    pub data_dir: PathBuf,
    /// `sim` (moves only on `clock advance`) or `wall`.
    #[arg(long, global = true, env = "NESTERY_CLOCK", default_value = "sim")]
    pub clock: String,
    /// Market user the command acts as.
    #[arg(long, global = true, env = "NESTERY_USER", default_value = "operator")]
    pub user: String,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Create a data directory with the given physical host capacity.
    Init(InitArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Define and start a VM.
    Launch(LaunchArgs),
    /// Start a stopped or scheduled VM.
    Start(TargetArgs),
    /// Stop a VM and everything nested in it.
    Stop(TargetArgs),
    /// Change the resources of a VM; omitted dimensions keep their value.
    Rescale(RescaleArgs),
    /// Reserve a VM for a future time window.
    Schedule(ScheduleArgs),
    /// Show hosts, VMs, volumes and scheduled allocations.
    Status,
    #[command(subcommand)]
    Volume(VolumeCmd),
    /// Store a snapshot of a VM on a volume.
    Snapshot(SnapshotArgs),
    #[command(subcommand)]
    Market(MarketCmd),
    #[command(subcommand)]
    Clock(ClockCmd),
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Show a queued command and its result.
    Command { msg_id: u64 },
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub capacity: ResourceArgs,
    /// Replace an existing data directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "NESTERY_LISTEN", default_value = DEFAULT_LISTEN)]
    pub listen: String,
    /// `user:token` pairs, comma separated.
    #[arg(long, env = "NESTERY_TOKENS", default_value = "")]
    pub tokens: String,
}

#[derive(Debug, Args, Default)]
pub struct ResourceArgs {
    #[arg(long)]
    pub cores: Option<u32>,
    #[arg(long)]
    pub priority: Option<u32>,
    #[arg(long)]
    pub ram_mib: Option<u64>,
    #[arg(long)]
    pub disk_gib: Option<u64>,
    #[arg(long)]
    pub nics: Option<u32>,
}

impl ResourceArgs {
    fn over(&self, base: ResourceVector) -> ResourceVector {
        ResourceVector::new(
            self.cores.unwrap_or(base.cpu_cores),
            self.priority.unwrap_or(base.cpu_priority),
            self.ram_mib.unwrap_or(base.ram_mib),
            self.disk_gib.unwrap_or(base.disk_gib),
            self.nics.unwrap_or(base.nics),
        )
    }

    fn is_empty(&self) -> bool {
        self.cores.is_none() && self.priority.is_none() && self.ram_mib.is_none() && self.disk_gib.is_none() && self.nics.is_none()
    }
}

const DEFAULT_VM: ResourceVector = ResourceVector::new(1, 512, 1024, 10, 1);

#[derive(Debug, Args)]
pub struct VmArgs {
    #[arg(long)]
    pub name: String,
    /// Random when omitted.
    #[arg(long)]
    pub uuid: Option<Uuid>,
    #[arg(long, default_value_t = 1)]
    pub level: u8,
    #[arg(long, default_value = "base-image")]
    pub image: String,
    /// Parent node: a physical host name or the uuid of an L1 VM.
    #[arg(long)]
    pub host: Option<NodeId>,
    #[command(flatten)]
    pub resources: ResourceArgs,
}

impl VmArgs {
    fn definition(&self) -> VmDefinition {
        VmDefinition::new(self.uuid.unwrap_or_else(Uuid::new_v4), &self.name, self.resources.over(DEFAULT_VM), &self.image, self.level)
    }
}

#[derive(Debug, Args)]
pub struct LaunchArgs {
    #[command(flatten)]
    pub vm: VmArgs,
    #[arg(long)]
    pub key: Option<String>,
}

#[derive(Debug, Args)]
pub struct TargetArgs {
    pub uuid: Uuid,
    #[arg(long)]
    pub key: Option<String>,
}

#[derive(Debug, Args)]
pub struct RescaleArgs {
    pub uuid: Uuid,
    #[command(flatten)]
    pub resources: ResourceArgs,
    #[arg(long)]
    pub key: Option<String>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[command(flatten)]
    pub vm: VmArgs,
    /// Absolute start time in clock seconds.
    #[arg(long, conflicts_with = "start_in")]
    pub start: Option<Timestamp>,
    /// Start this many seconds from now.
    #[arg(long = "in")]
    pub start_in: Option<u64>,
    #[arg(long)]
    pub duration: u64,
    #[arg(long)]
    pub key: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum VolumeCmd {
    Create {
        #[arg(long)]
        size: u64,
        #[arg(long)]
        host: Option<NodeId>,
        #[arg(long)]
        key: Option<String>,
    },
    Resize {
        volume_id: u64,
        #[arg(long)]
        size: u64,
        #[arg(long)]
        key: Option<String>,
    },
    Delete {
        volume_id: u64,
        #[arg(long)]
        key: Option<String>,
    },
    /// Attach to a VM, or detach when --vm is omitted.
    Attach {
        volume_id: u64,
        #[arg(long)]
        vm: Option<Uuid>,
        #[arg(long)]
        key: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct SnapshotArgs {
    pub vm: Uuid,
    #[arg(long)]
    pub volume: u64,
    #[arg(long)]
    pub key: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Compute,
    Storage,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatusArg {
    Listed,
    Taken,
    Withdrawn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ControlAction {
    Start,
    Stop,
    Rescale,
    Status,
}

#[derive(Debug, Subcommand)]
pub enum MarketCmd {
    /// List offers, cheapest first.
    Offers {
        #[arg(long)]
        kind: Option<KindArg>,
        #[arg(long)]
        max_price: Option<f64>,
        #[arg(long)]
        status: Option<StatusArg>,
        #[command(flatten)]
        min: ResourceArgs,
    },
    /// Publish an offer from a backing host.
    Offer {
        #[command(flatten)]
        spec: ResourceArgs,
        /// Offer a storage volume of this size instead of compute.
        #[arg(long)]
        storage_gib: Option<u64>,
        #[arg(long)]
        floor: f64,
        #[arg(long)]
        cap: f64,
        #[arg(long)]
        price: f64,
        #[arg(long)]
        host: Option<NodeId>,
        /// Quality attribute as key=value; repeatable.
        #[arg(long = "quality", value_parser = parse_pair)]
        quality: Vec<(String, String)>,
    },
    Withdraw { offer_id: u64 },
    /// Contract an offer.
    Negotiate { offer_id: u64 },
    Contract { contract_id: u64 },
    Contracts,
    /// Steer a contracted allocation.
    Control {
        contract_id: u64,
        action: ControlAction,
        #[command(flatten)]
        resources: ResourceArgs,
        #[arg(long)]
        key: Option<String>,
    },
    Terminate { contract_id: u64 },
    Prices {
        offer_id: u64,
        #[arg(long)]
        from: Option<Timestamp>,
        #[arg(long)]
        to: Option<Timestamp>,
    },
    Ledger,
    BecomeProvider {
        #[arg(long)]
        company: String,
        #[arg(long)]
        tax_number: String,
        #[arg(long)]
        bank_account: Option<String>,
        #[arg(long)]
        postal_address: Option<String>,
        /// Host whose free capacity will be offered.
        #[arg(long)]
        backing: NodeId,
    },
}

#[derive(Debug, Subcommand)]
pub enum ClockCmd {
    Now,
    /// Move the simulated clock forward, running due work each second.
    Advance { seconds: u64 },
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    pub users: u32,
    #[arg(long, default_value_t = 180)]
    pub period: u32,
    #[arg(long, default_value_t = perfbench::DEFAULT_THINK_MEAN_S)]
    pub think_mean: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = perfbench::DEFAULT_SERVING_SLOTS)]
    pub slots: u32,
    #[arg(long)]
    pub warmup_peak: Option<f64>,
    #[arg(long)]
    pub warmup_duration: Option<f64>,
    /// Include warm-up requests in the statistics.
    #[arg(long)]
    pub include_warmup: bool,
}

impl BenchArgs {
    fn config(&self) -> BenchConfig {
        let mut cfg = BenchConfig::default();
        cfg.profile.users = self.users;
        cfg.profile.period_s = self.period;
        cfg.profile.think_mean_s = self.think_mean;
        cfg.profile.seed = self.seed;
        cfg.serving_slots = self.slots;
        if let Some(p) = self.warmup_peak {
            cfg.model.warmup_peak_multiplier = p;
        }
        if let Some(d) = self.warmup_duration {
            cfg.model.warmup_duration_s = d;
        }
        if self.include_warmup {
            cfg.window = StatsWindow::Full;
        }
        cfg
    }
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Fit the base service time to the L0 reference statistics.
    Calibrate(BenchArgs),
    /// Simulate L0, L1 and L2 and report statistics and overheads.
    Run {
        #[command(flatten)]
        args: BenchArgs,
        /// Write samples CSV, summary JSON and gnuplot data here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| format!("{s:?} is not key=value"))
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {}", e.code, e.detail);
            1
        }
    }
}

fn emit<T: Serialize>(out: &mut dyn Write, v: &T) -> Result<(), ApiError> {
    let s = serde_json::to_string_pretty(v).map_err(|e| ApiError::internal(e.to_string()))?;
    writeln!(out, "{s}").map_err(|e| ApiError::internal(e.to_string()))
}

fn line(out: &mut dyn Write, s: impl std::fmt::Display) -> Result<(), ApiError> {
    writeln!(out, "{s}").map_err(|e| ApiError::internal(e.to_string()))
}

fn open(cli: &Cli) -> Result<Service, ApiError> {
    let svc = Service::open(&ServiceConfig { data_dir: Some(cli.data_dir.clone()), clock: parse_clock(&cli.clock)?, host_capacity: DEFAULT_CAPACITY })?;
    svc.ensure_user(&cli.user)?;
    Ok(svc)
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<(), ApiError> {
    match &cli.command {
        Cmd::Init(a) => init(cli, a, out),
        Cmd::Serve(a) => {
            let config = ApiConfig { listen: parse_listen(&a.listen)?, data_dir: cli.data_dir.clone(), clock: parse_clock(&cli.clock)?, tokens: parse_tokens(&a.tokens)? };
            if config.tokens.is_empty() {
                return Err(ApiError::invalid("no bearer tokens configured; pass --tokens user:token"));
            }
            let svc = Arc::new(open(cli)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| ApiError::internal(e.to_string()))?;
            rt.block_on(crate::http::serve(config, svc))
        }
        Cmd::Launch(a) => {
            let svc = open(cli)?;
            let r = svc.execute(Command::Launch { definition: a.vm.definition(), host: a.vm.host.clone() }, a.key.clone())?;
            report(cli, out, "launch", r)
        }
        Cmd::Start(a) => {
            let r = open(cli)?.execute(Command::Start { uuid: a.uuid }, a.key.clone())?;
            report(cli, out, "start", r)
        }
        Cmd::Stop(a) => {
            let r = open(cli)?.execute(Command::Stop { uuid: a.uuid }, a.key.clone())?;
            report(cli, out, "stop", r)
        }
        Cmd::Rescale(a) => {
            let svc = open(cli)?;
            if a.resources.is_empty() {
                return Err(ApiError::invalid("nothing to change; pass at least one resource flag"));
            }
            let current = svc.vm_record(&a.uuid)?.definition.resources;
            let r = svc.execute(Command::Rescale { uuid: a.uuid, resources: a.resources.over(current) }, a.key.clone())?;
            report(cli, out, "rescale", r)
        }
        Cmd::Schedule(a) => {
            let svc = open(cli)?;
            let start_time = match (a.start, a.start_in) {
                (Some(t), _) => t,
                (None, Some(d)) => svc.now() + d,
                (None, None) => return Err(ApiError::invalid("pass --start or --in")),
            };
            let cmd = Command::ScheduleAllocation { definition: a.vm.definition(), host: a.vm.host.clone(), start_time, duration_s: a.duration };
            let r = svc.execute(cmd, a.key.clone())?;
            report(cli, out, "schedule", r)
        }
        Cmd::Status => {
            let s = open(cli)?.status();
            if cli.json {
                emit(out, &s)
            } else {
                render_status(out, &s)
            }
        }
        Cmd::Volume(v) => {
            let (cmd, key) = match v {
                VolumeCmd::Create { size, host, key } => (Command::VolumeCreate { size_gib: *size, host: host.clone() }, key),
                VolumeCmd::Resize { volume_id, size, key } => (Command::VolumeResize { volume_id: VolumeId(*volume_id), size_gib: *size }, key),
                VolumeCmd::Delete { volume_id, key } => (Command::VolumeDelete { volume_id: VolumeId(*volume_id) }, key),
                VolumeCmd::Attach { volume_id, vm, key } => (Command::VolumeAttach { volume_id: VolumeId(*volume_id), vm_uuid: *vm }, key),
            };
            let kind = cmd.kind();
            let r = open(cli)?.execute(cmd, key.clone())?;
            report(cli, out, kind, r)
        }
        Cmd::Snapshot(a) => {
            let r = open(cli)?.execute(Command::SnapshotCreate { vm_uuid: a.vm, volume_id: VolumeId(a.volume) }, a.key.clone())?;
            report(cli, out, "snapshot", r)
        }
        Cmd::Market(m) => market(cli, m, out),
        Cmd::Clock(ClockCmd::Now) => {
            let now = open(cli)?.now();
            if cli.json {
                emit(out, &serde_json::json!({ "now": now }))
            } else {
                line(out, now)
            }
        }
        Cmd::Clock(ClockCmd::Advance { seconds }) => {
            let now = open(cli)?.advance(*seconds)?;
            if cli.json {
                emit(out, &serde_json::json!({ "now": now }))
            } else {
                line(out, format!("clock at {now}"))
            }
        }
        Cmd::Bench(b) => bench(cli, b, out),
        Cmd::Command { msg_id } => {
            let v = open(cli)?.command(*msg_id)?;
            emit(out, &v)
        }
    }
}

fn init(cli: &Cli, a: &InitArgs, out: &mut dyn Write) -> Result<(), ApiError> {
    if cli.data_dir.join(STATE_FILE).exists() {
        if !a.force {
            return Err(ApiError::new("AlreadyInitialized", format!("{} already holds state; pass --force to replace it", cli.data_dir.display())));
        }
        fs::remove_dir_all(&cli.data_dir).map_err(|e| ApiError::new("StorageFailure", e.to_string()))?;
    }
    let capacity = a.capacity.over(DEFAULT_CAPACITY);
    let svc = Service::open(&ServiceConfig { data_dir: Some(cli.data_dir.clone()), clock: parse_clock(&cli.clock)?, host_capacity: capacity })?;
    svc.save()?;
    line(out, format!("initialized {} with host l0 {}", cli.data_dir.display(), fmt_res(&capacity)))
}

/// Prints a command result; a rejection becomes the command's error.
fn report(cli: &Cli, out: &mut dyn Write, what: &str, r: CommandResult) -> Result<(), ApiError> {
    let r = ApiError::check(r)?;
    if cli.json {
        return emit(out, &r);
    }
    match &r.outcome {
        Outcome::Applied { output } => line(out, format!("{what}: applied (msg {}) {}", r.msg_id, summarize(output))),
        Outcome::Skipped => line(out, format!("{what}: already applied under key {} (msg {})", r.idempotency_key, r.msg_id)),
        Outcome::Rejected { .. } => unreachable!("rejections are errors"),
    }
}

fn summarize(v: &serde_json::Value) -> String {
    let pick = |k: &str| v.get(k).map(|x| x.as_str().map(str::to_string).unwrap_or_else(|| x.to_string()));
    let fields: Vec<String> = ["uuid", "state", "volume_id", "size_gib", "id", "name"]
        .iter()
        .filter_map(|k| pick(k).map(|val| format!("{k}={val}")))
        .collect();
    fields.join(" ")
}

fn fmt_res(r: &ResourceVector) -> String {
    format!("{}c/{}p {}MiB {}GiB {}nic", r.cpu_cores, r.cpu_priority, r.ram_mib, r.disk_gib, r.nics)
}

fn render_status(out: &mut dyn Write, s: &StatusReport) -> Result<(), ApiError> {
    fn host(out: &mut Vec<String>, h: &HostStatus, depth: usize) {
        let pad = "  ".repeat(depth);
        out.push(format!("{pad}host {} L{} free {} of {}", h.node_id, h.level, fmt_res(&h.free), fmt_res(&h.capacity)));
        for v in &h.vms {
            vm(out, v, depth + 1);
        }
    }
    fn vm(out: &mut Vec<String>, v: &VmStatus, depth: usize) {
        let pad = "  ".repeat(depth);
        out.push(format!("{pad}vm {} {} L{} {} {} up {}s", v.uuid, v.name, v.level, v.state, fmt_res(&v.resources), v.uptime_s));
        if let Some(h) = &v.host {
            for c in &h.vms {
                vm(out, c, depth + 1);
            }
        }
    }
    let mut lines = vec![format!("time {}", s.now)];
    for h in &s.hosts {
        host(&mut lines, h, 0);
    }
    for v in &s.volumes {
        let att = v.attached_to.map(|u| format!(" attached to {u}")).unwrap_or_default();
        lines.push(format!("volume {} on {} {}/{} GiB used{att}", v.volume_id, v.host, v.used_gib, v.size_gib));
    }
    for a in &s.allocations {
        lines.push(format!("allocation {} {} at {} for {}s {:?}", a.id, a.definition.name, a.start_time, a.duration_s, a.state));
    }
    line(out, lines.join("\n"))
}

fn market(cli: &Cli, m: &MarketCmd, out: &mut dyn Write) -> Result<(), ApiError> {
    let svc = open(cli)?;
    let me = cli.user.as_str();
    match m {
        MarketCmd::Offers { kind, max_price, status, min } => {
            let filter = OfferFilter {
                kind: kind.map(|k| match k {
                    KindArg::Compute => OfferKind::Compute,
                    KindArg::Storage => OfferKind::Storage,
                }),
                max_price: max_price.map(Money::from_f64),
                min_spec: (!min.is_empty()).then(|| min.over(ResourceVector::new(0, 0, 0, 0, 0))),
                status: status.map(|s| match s {
                    StatusArg::Listed => OfferStatus::Listed,
                    StatusArg::Taken => OfferStatus::Taken,
                    StatusArg::Withdrawn => OfferStatus::Withdrawn,
                }),
            };
            let offers = svc.offers(&filter);
            if cli.json {
                return emit(out, &offers);
            }
            for o in &offers {
                let spec = match &o.spec {
                    OfferSpec::Compute(r) => fmt_res(r),
                    OfferSpec::Storage { size_gib } => format!("{size_gib} GiB storage"),
                };
                line(out, format!("offer {} {} by {} on {} at {} ({:?}) {spec}", o.offer_id, o.kind, o.provider_id, o.host, o.current_price, o.status))?;
            }
            Ok(())
        }
        MarketCmd::Offer { spec, storage_gib, floor, cap, price, host, quality } => {
            let spec = match storage_gib {
                Some(g) if spec.is_empty() => OfferSpec::Storage { size_gib: *g },
                Some(_) => return Err(ApiError::invalid("--storage-gib cannot be combined with compute flags")),
                None => OfferSpec::Compute(spec.over(DEFAULT_VM)),
            };
            let req = OfferRequest {
                spec,
                floor_price: Money::from_f64(*floor),
                cap_price: Money::from_f64(*cap),
                price: Money::from_f64(*price),
                quality: quality.iter().cloned().collect::<BTreeMap<_, _>>(),
                host: host.clone(),
            };
            let o = svc.register_offer(me, req)?;
            if cli.json {
                emit(out, &o)
            } else {
                line(out, format!("offer {} listed at {}", o.offer_id, o.current_price))
            }
        }
        MarketCmd::Withdraw { offer_id } => {
            let o = svc.withdraw_offer(me, *offer_id)?;
            if cli.json {
                emit(out, &o)
            } else {
                line(out, format!("offer {} withdrawn", o.offer_id))
            }
        }
        MarketCmd::Negotiate { offer_id } => {
            let c = svc.negotiate(me, *offer_id)?;
            if cli.json {
                emit(out, &c)
            } else {
                line(out, format!("contract {} {:?} at {} per hour", c.contract_id, c.state, c.agreed_price))
            }
        }
        MarketCmd::Contract { contract_id } => {
            let c = svc.contract(me, *contract_id)?;
            emit(out, &c)
        }
        MarketCmd::Contracts => emit(out, &svc.contracts(me)),
        MarketCmd::Control { contract_id, action, resources, key } => {
            let cmd = match action {
                ControlAction::Start => ContractCommand::Start,
                ControlAction::Stop => ContractCommand::Stop,
                ControlAction::Status => ContractCommand::Status,
                ControlAction::Rescale => {
                    let current = match svc.contract(me, *contract_id)?.allocation {
                        Some(nestery_core::market::Allocation::Vm(u)) => svc.vm_record(&u)?.definition.resources,
                        _ => ResourceVector::new(0, 0, 0, 0, 0),
                    };
                    ContractCommand::Rescale { resources: resources.over(current) }
                }
            };
            let r = svc.control(me, *contract_id, cmd, key.clone())?;
            report(cli, out, "control", r)
        }
        MarketCmd::Terminate { contract_id } => {
            let c = svc.terminate(me, *contract_id)?;
            if cli.json {
                emit(out, &c)
            } else {
                line(out, format!("contract {} terminated after {} billed hours", c.contract_id, c.billed_hours))
            }
        }
        MarketCmd::Prices { offer_id, from, to } => {
            let p = svc.prices(*offer_id, *from, *to)?;
            if cli.json {
                return emit(out, &p);
            }
            for pt in p {
                line(out, format!("{} {}", pt.timestamp, pt.price))?;
            }
            Ok(())
        }
        MarketCmd::Ledger => {
            let l = svc.ledger(me, me)?;
            if cli.json {
                return emit(out, &l);
            }
            let r = l.report;
            line(out, format!("purchase cost {}  income {}  net {}  offset achieved: {}", r.purchase_cost, r.cumulative_income, r.net, r.offset_achieved))
        }
        MarketCmd::BecomeProvider { company, tax_number, bank_account, postal_address, backing } => {
            let profile = ProviderProfile {
                company_name: company.clone(),
                tax_number: tax_number.clone(),
                bank_account: bank_account.clone(),
                postal_address: postal_address.clone(),
            };
            let u = svc.become_provider(me, me, ProviderRequest { profile, backing: backing.clone() })?;
            if cli.json {
                emit(out, &u)
            } else {
                line(out, format!("{} is now a provider backed by {backing}", u.user_id))
            }
        }
    }
}

fn bench(cli: &Cli, b: &BenchCmd, out: &mut dyn Write) -> Result<(), ApiError> {
    match b {
        BenchCmd::Calibrate(a) => {
            let cfg = a.config();
            let fit = perfbench::calibrate_best(&REFERENCE_STATS[0], &cfg)?;
            let errors = perfbench::relative_errors(&fit.stats, &REFERENCE_STATS[0]);
            if cli.json {
                emit(out, &serde_json::json!({ "base": fit.base, "l0": fit.stats, "relative_errors": errors, "residual": fit.residual }))?;
            } else {
                line(out, format!("mu {:.4} sigma {:.4}", fit.base.mu, fit.base.sigma))?;
                line(out, format!("L0 avg {:.4} p80 {:.4} p90 {:.4}", fit.stats.avg, fit.stats.p80, fit.stats.p90))?;
                line(out, format!("errors avg {:+.2}% p80 {:+.2}% p90 {:+.2}%", errors[0] * 100.0, errors[1] * 100.0, errors[2] * 100.0))?;
            }
            // the best fit is printed either way; a miss still exits 1
            if fit.residual > 1.0 {
                return Err(perfbench::BenchError::CalibrationFailed { best_residual: fit.residual }.into());
            }
            Ok(())
        }
        BenchCmd::Run { args, out: dir } => {
            let exp = perfbench::run_experiment(&args.config())?;
            if let Some(dir) = dir {
                let io = |e: std::io::Error| ApiError::new("StorageFailure", format!("{}: {e}", dir.display()));
                fs::create_dir_all(dir).map_err(io)?;
                for l in &exp.levels {
                    fs::write(dir.join(format!("samples_L{}.csv", l.level)), perfbench::samples_csv(&l.samples)).map_err(io)?;
                }
                let summary = serde_json::to_string_pretty(&perfbench::summary_json(&exp)).map_err(|e| ApiError::internal(e.to_string()))?;
                fs::write(dir.join("summary.json"), summary).map_err(io)?;
                fs::write(dir.join("latency.dat"), perfbench::gnuplot_data(&exp)).map_err(io)?;
            }
            if cli.json {
                return emit(out, &perfbench::summary_json(&exp));
            }
            line(out, "level    avg      p80      p90   count")?;
            for l in &exp.levels {
                let s = l.summary;
                line(out, format!("L{}    {:.4}   {:.4}   {:.4}   {}", l.level, s.avg, s.p80, s.p90, s.count))?;
            }
            let o = exp.overheads;
            line(out, format!("overhead L1/L0 {:.2}%  L2/L0 {:.2}%  L2/L1 {:.2}%", o.l1_over_l0, o.l2_over_l0, o.l2_over_l1))
        }
    }
}
