//! Power samplers and the metering session that runs one alongside
//! training.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use energycomp_core::energy::{ConstantSampler, EnergyLedger, EnergyReport, PowerReading, PowerSample, PowerSampler};
use energycomp_core::model::{EpochObserver, TrainSummary};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// Parses `t cpu_w gpu_w ram_w` lines. Blank lines and `#` comments are
/// skipped; times must strictly increase.
pub fn parse_power_trace(text: &str) -> Result<Vec<PowerSample>> {
    let mut out: Vec<PowerSample> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("power trace line {}: {e}", i + 1)))?;
        let [t, cpu_w, gpu_w, ram_w] = fields[..] else {
            return Err(Error::Format(format!(
                "power trace line {}: expected 4 fields, found {}",
                i + 1,
                fields.len()
            )));
        };
        let power = PowerReading::new(cpu_w, gpu_w, ram_w);
        if !(t.is_finite() && t >= 0.0) || !power.is_valid() {
            return Err(Error::Format(format!("power trace line {}: negative or non-finite value", i + 1)));
        }
        if let Some(prev) = out.last() {
            if t <= prev.t {
                return Err(Error::Format(format!(
                    "power trace line {}: time {t} does not follow {}",
                    i + 1,
                    prev.t
                )));
            }
        }
        out.push(PowerSample { t, power });
    }
    Ok(out)
}

pub fn read_power_trace(path: &Path) -> Result<Vec<PowerSample>> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse_power_trace(&text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// A ledger holding a recorded trace at its own timestamps.
pub fn ledger_from_trace(samples: &[PowerSample], pue: f64) -> Result<EnergyLedger> {
    let mut ledger = EnergyLedger::new(pue)?;
    for s in samples {
        ledger.push(s.t, s.power)?;
    }
    Ok(ledger)
}

/// Replays the readings of a trace one per call, then reports exhaustion.
#[derive(Debug, Clone)]
pub struct TraceReplaySampler {
    readings: VecDeque<PowerReading>,
}

impl TraceReplaySampler {
    pub fn new(samples: &[PowerSample]) -> Self {
        Self {
            readings: samples.iter().map(|s| s.power).collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::new(&read_power_trace(path)?))
    }
}

impl PowerSampler for TraceReplaySampler {
    fn read_power(&mut self) -> Option<PowerReading> {
        self.readings.pop_front()
    }
}

/// Fraction of the machine's CPU capacity used by this process.
pub trait UtilizationSource {
    /// In `[0, 1]`, or `None` when unavailable.
    fn utilization(&mut self) -> Option<f64>;
}

/// Process CPU time from `/proc/self/stat` against wall time, divided by
/// the number of online CPUs. The first call measures from construction.
#[derive(Debug)]
pub struct ProcStatUtilization {
    last_cpu_s: f64,
    last_wall: Instant,
    ticks_per_s: f64,
    cpus: f64,
}

impl ProcStatUtilization {
    pub fn new() -> Option<Self> {
        // SAFETY: sysconf only reads configuration values.
        let (ticks, cpus) = unsafe { (libc::sysconf(libc::_SC_CLK_TCK), libc::sysconf(libc::_SC_NPROCESSORS_ONLN)) };
        if ticks <= 0 || cpus <= 0 {
            return None;
        }
        let ticks_per_s = ticks as f64;
        Some(Self {
            last_cpu_s: process_cpu_seconds(ticks_per_s)?,
            last_wall: Instant::now(),
            ticks_per_s,
            cpus: cpus as f64,
        })
    }
}

fn process_cpu_seconds(ticks_per_s: f64) -> Option<f64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    // The command name may contain spaces; fields resume after the last ')'.
    let rest = &stat[stat.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    // utime and stime are fields 14 and 15 of the full line.
    let utime: f64 = fields.get(11)?.parse().ok()?;
    let stime: f64 = fields.get(12)?.parse().ok()?;
    Some((utime + stime) / ticks_per_s)
}

impl UtilizationSource for ProcStatUtilization {
    fn utilization(&mut self) -> Option<f64> {
        let cpu_s = process_cpu_seconds(self.ticks_per_s)?;
        let now = Instant::now();
        let wall = now.duration_since(self.last_wall).as_secs_f64();
        let busy = cpu_s - self.last_cpu_s;
        self.last_cpu_s = cpu_s;
        self.last_wall = now;
        if wall <= 0.0 {
            return Some(0.0);
        }
        Some((busy / wall / self.cpus).clamp(0.0, 1.0))
    }
}

/// Estimates CPU power as `tdp_w × utilization`; GPU and RAM power are
/// fixed.
pub struct ProcessProxySampler {
    tdp_w: f64,
    gpu_w: f64,
    ram_w: f64,
    source: Box<dyn UtilizationSource + Send>,
}

impl ProcessProxySampler {
    pub fn new(tdp_w: f64, gpu_w: f64, ram_w: f64, source: Box<dyn UtilizationSource + Send>) -> Self {
        Self {
            tdp_w,
            gpu_w,
            ram_w,
            source,
        }
    }

    /// Uses `/proc/self/stat`; utilization reads as zero where that is
    /// unavailable.
    pub fn for_this_process(tdp_w: f64, gpu_w: f64, ram_w: f64) -> Self {
        let source: Box<dyn UtilizationSource + Send> = match ProcStatUtilization::new() {
            Some(s) => Box::new(s),
            None => {
                log::warn!("/proc/self/stat unavailable; CPU utilization will read as 0");
                Box::new(FixedUtilization(0.0))
            }
        };
        Self::new(tdp_w, gpu_w, ram_w, source)
    }
}

impl PowerSampler for ProcessProxySampler {
    fn read_power(&mut self) -> Option<PowerReading> {
        let u = self.source.utilization()?;
        Some(PowerReading::new(self.tdp_w * u, self.gpu_w, self.ram_w))
    }
}

/// A utilization that never changes.
#[derive(Debug, Clone, Copy)]
pub struct FixedUtilization(pub f64);

impl UtilizationSource for FixedUtilization {
    fn utilization(&mut self) -> Option<f64> {
        Some(self.0)
    }
}

/// Which sampler a run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SamplerSpec {
    Constant { cpu_w: f64, gpu_w: f64, ram_w: f64 },
    Trace { path: std::path::PathBuf },
    Proxy {
        #[serde(default = "default_tdp")]
        tdp_w: f64,
        #[serde(default)]
        gpu_w: f64,
        #[serde(default = "default_ram")]
        ram_w: f64,
    },
}

fn default_tdp() -> f64 {
    65.0
}

fn default_ram() -> f64 {
    5.0
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec::Proxy {
            tdp_w: default_tdp(),
            gpu_w: 0.0,
            ram_w: default_ram(),
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        match self {
            SamplerSpec::Constant { cpu_w, gpu_w, ram_w } | SamplerSpec::Proxy { tdp_w: cpu_w, gpu_w, ram_w } => {
                if ![*cpu_w, *gpu_w, *ram_w].into_iter().all(ok) {
                    return Err(Error::Config("sampler watts must be finite and non-negative".into()));
                }
            }
            SamplerSpec::Trace { path } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("power trace {} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn PowerSampler + Send>> {
        Ok(match self {
            SamplerSpec::Constant { cpu_w, gpu_w, ram_w } => {
                Box::new(ConstantSampler(PowerReading::new(*cpu_w, *gpu_w, *ram_w)))
            }
            SamplerSpec::Trace { path } => Box::new(TraceReplaySampler::from_file(path)?),
            SamplerSpec::Proxy { tdp_w, gpu_w, ram_w } => {
                Box::new(ProcessProxySampler::for_this_process(*tdp_w, *gpu_w, *ram_w))
            }
        })
    }
}

/// The sampler, its last reading and whether it ran dry.
type SamplerExit = (Box<dyn PowerSampler + Send>, PowerReading, bool);

struct Shared {
    ledger: Mutex<EnergyLedger>,
    stop: Mutex<bool>,
    wake: Condvar,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// A sampler thread appending to a ledger while the caller marks epochs.
///
/// Time zero is the moment [`MeterSession::start`] takes its first sample.
/// If the sampler runs dry the thread stops with a warning and the closing
/// sample repeats the last reading.
pub struct MeterSession {
    shared: Arc<Shared>,
    origin: Instant,
    handle: Option<JoinHandle<SamplerExit>>,
}

impl MeterSession {
    pub fn start(mut sampler: Box<dyn PowerSampler + Send>, pue: f64, cadence: Duration) -> Result<Self> {
        if cadence.is_zero() {
            return Err(Error::Config("sampling cadence must be positive".into()));
        }
        let first = sampler
            .read_power()
            .ok_or_else(|| Error::Config("power sampler produced no reading".into()))?;
        let mut ledger = EnergyLedger::new(pue)?;
        let origin = Instant::now();
        ledger.push(0.0, first)?;
        let shared = Arc::new(Shared {
            ledger: Mutex::new(ledger),
            stop: Mutex::new(false),
            wake: Condvar::new(),
        });
        let thread_shared = Arc::clone(&shared);
        let handle = std::thread::Builder::new()
            .name("power-sampler".into())
            .spawn(move || sample_loop(&thread_shared, sampler, first, origin, cadence))
            .map_err(|e| Error::Config(format!("cannot start sampler thread: {e}")))?;
        Ok(Self {
            shared,
            origin,
            handle: Some(handle),
        })
    }

    pub fn elapsed(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    pub fn mark_epoch(&self, epoch: usize) {
        let mut ledger = lock(&self.shared.ledger);
        let t = self.elapsed();
        ledger.mark_epoch(epoch, t);
    }

    /// Copy of the ledger as it stands.
    pub fn snapshot(&self) -> EnergyLedger {
        lock(&self.shared.ledger).clone()
    }

    /// Stops sampling, appends a closing sample and integrates.
    pub fn finish(mut self) -> Result<(EnergyReport, EnergyLedger)> {
        *lock(&self.shared.stop) = true;
        self.shared.wake.notify_all();
        let (mut sampler, last, exhausted) = self
            .handle
            .take()
            .expect("finish consumes the session")
            .join()
            .map_err(|_| Error::Config("power sampler thread panicked".into()))?;
        let closing = if exhausted { last } else { sampler.read_power().unwrap_or(last) };
        let mut ledger = lock(&self.shared.ledger).clone();
        let prev = ledger.last_time().unwrap_or(0.0);
        let latest_mark = ledger.marks().iter().map(|m| m.t).fold(prev, f64::max);
        let t = self.elapsed().max(latest_mark).max(prev);
        let t = if t > prev { t } else { next_after(prev) };
        ledger.push(t, closing)?;
        let report = ledger.integrate()?;
        Ok((report, ledger))
    }
}

fn next_after(t: f64) -> f64 {
    (t + 1e-9).max(f64::from_bits(t.to_bits() + 1))
}

fn sample_loop(
    shared: &Shared,
    mut sampler: Box<dyn PowerSampler + Send>,
    mut last: PowerReading,
    origin: Instant,
    cadence: Duration,
) -> (Box<dyn PowerSampler + Send>, PowerReading, bool) {
    let mut next = cadence;
    loop {
        let mut stop = lock(&shared.stop);
        while !*stop {
            let elapsed = origin.elapsed();
            if elapsed >= next {
                break;
            }
            stop = shared
                .wake
                .wait_timeout(stop, next - elapsed)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
        if *stop {
            return (sampler, last, false);
        }
        drop(stop);
        next += cadence;
        let Some(reading) = sampler.read_power() else {
            log::warn!("power sampler exhausted; energy after this point repeats the last reading");
            return (sampler, last, true);
        };
        last = reading;
        let mut ledger = lock(&shared.ledger);
        let t = origin.elapsed().as_secs_f64();
        if let Err(e) = ledger.push(t, reading) {
            log::warn!("dropping power sample: {e}");
        }
    }
}

impl Drop for MeterSession {
    fn drop(&mut self) {
        if let Some(handle) = self.handle.take() {
            *lock(&self.shared.stop) = true;
            self.shared.wake.notify_all();
            let _ = handle.join();
        }
    }
}

impl EpochObserver for &MeterSession {
    fn epoch_end(&mut self, epoch: usize, _validation_loss: f32) {
        self.mark_epoch(epoch);
    }
}

/// Training statistics together with the time and energy they took.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub wall_seconds: f64,
    pub energy: EnergyReport,
}

/// Runs `train` inside a metering session, marking an epoch every time the
/// trainer reports one.
pub fn train_metered<F>(
    sampler: Box<dyn PowerSampler + Send>,
    pue: f64,
    cadence: Duration,
    train: F,
) -> Result<TrainOutcome>
where
    F: FnOnce(&mut dyn EpochObserver) -> energycomp_core::Result<TrainSummary>,
{
    let session = MeterSession::start(sampler, pue, cadence)?;
    let mut observer = &session;
    let summary = train(&mut observer)?;
    let wall_seconds = session.elapsed();
    let (energy, _) = session.finish()?;
    Ok(TrainOutcome {
        summary,
        wall_seconds,
        energy,
    })
}
