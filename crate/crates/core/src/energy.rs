//! Energy accounting: timestamped CPU/GPU/RAM power samples integrated with
//! the trapezoid rule, attributed to epochs, and scaled by a data-center
//! PUE.
//!
//! `P_tot = P_cpu + P_gpu + P_ram` is integrated per component and converted
//! from joules to kWh; the facility figure is `pue · kwh_it`.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Average data-center power usage effectiveness (2023).
pub const DEFAULT_PUE: f64 = 1.58;

const JOULES_PER_KWH: f64 = 3.6e6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PowerReading {
    pub cpu_w: f64,
    pub gpu_w: f64,
    pub ram_w: f64,
}

impl PowerReading {
    pub fn new(cpu_w: f64, gpu_w: f64, ram_w: f64) -> Self {
        Self { cpu_w, gpu_w, ram_w }
    }

    pub fn total(&self) -> f64 {
        self.cpu_w + self.gpu_w + self.ram_w
    }

    fn components(&self) -> [f64; 3] {
        [self.cpu_w, self.gpu_w, self.ram_w]
    }

    /// Every component finite and non-negative.
    pub fn is_valid(&self) -> bool {
        self.components().iter().all(|w| w.is_finite() && *w >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerSample {
    /// Seconds since the session started.
    pub t: f64,
    pub power: PowerReading,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMark {
    pub epoch: usize,
    /// Session time at which the epoch ended.
    pub t: f64,
}

/// Source of instantaneous power readings. `None` means the source is
/// exhausted and the session should stop sampling.
pub trait PowerSampler {
    fn read_power(&mut self) -> Option<PowerReading>;
}

/// Always returns the same reading.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSampler(pub PowerReading);

impl PowerSampler for ConstantSampler {
    fn read_power(&mut self) -> Option<PowerReading> {
        Some(self.0)
    }
}

/// Replays a fixed list of readings once.
#[derive(Debug, Clone)]
pub struct ScriptedSampler {
    readings: Vec<PowerReading>,
    next: usize,
}

impl ScriptedSampler {
    pub fn new(readings: Vec<PowerReading>) -> Self {
        Self { readings, next: 0 }
    }
}

impl PowerSampler for ScriptedSampler {
    fn read_power(&mut self) -> Option<PowerReading> {
        let r = self.readings.get(self.next).copied();
        self.next += 1;
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyLedger {
    samples: Vec<PowerSample>,
    marks: Vec<EpochMark>,
    pue: f64,
}

impl EnergyLedger {
    pub fn new(pue: f64) -> Result<Self> {
        if !(pue.is_finite() && pue >= 1.0) {
            return Err(Error::Ledger(format!("PUE must be finite and >= 1, got {pue}")));
        }
        Ok(Self {
            samples: Vec::new(),
            marks: Vec::new(),
            pue,
        })
    }

    /// Appends a sample. Times must be non-negative and strictly increasing;
    /// watts must be finite and non-negative.
    pub fn push(&mut self, t: f64, power: PowerReading) -> Result<()> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::Ledger(format!("sample time {t} is not a non-negative number")));
        }
        if let Some(last) = self.samples.last() {
            if t <= last.t {
                return Err(Error::Ledger(format!(
                    "sample time {t} does not follow previous sample at {}",
                    last.t
                )));
            }
        }
        if !power.is_valid() {
            return Err(Error::Ledger(format!("invalid power reading {power:?}")));
        }
        self.samples.push(PowerSample { t, power });
        Ok(())
    }

    /// Records the end of `epoch` at session time `t`.
    pub fn mark_epoch(&mut self, epoch: usize, t: f64) {
        self.marks.push(EpochMark { epoch, t });
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    pub fn marks(&self) -> &[EpochMark] {
        &self.marks
    }

    pub fn pue(&self) -> f64 {
        self.pue
    }

    pub fn last_time(&self) -> Option<f64> {
        self.samples.last().map(|s| s.t)
    }

    /// Per-component energy in kWh over `[a, b]`, interpolating power
    /// linearly between samples.
    pub fn energy_between(&self, a: f64, b: f64) -> Result<[f64; 3]> {
        let cum = self.cumulative()?;
        let fa = self.integral_to(&cum, a)?;
        let fb = self.integral_to(&cum, b)?;
        Ok([0, 1, 2].map(|c| (fb[c] - fa[c]) / JOULES_PER_KWH))
    }

    /// Whole-session energy report.
    ///
    /// Epoch `k` covers the time from the previous mark (or the first
    /// sample) to its own mark; whatever follows the final mark is folded
    /// into the final epoch, so the epoch slices always sum to the total.
    pub fn integrate(&self) -> Result<EnergyReport> {
        let cum = self.cumulative()?;
        let t0 = self.samples[0].t;
        let tn = self.samples[self.samples.len() - 1].t;
        let whole = cum[cum.len() - 1];
        let [kwh_cpu, kwh_gpu, kwh_ram] = whole.map(|j| j / JOULES_PER_KWH);
        let kwh_it = kwh_cpu + kwh_gpu + kwh_ram;

        let mut per_epoch_kwh = Vec::with_capacity(self.marks.len().max(1));
        if self.marks.is_empty() {
            per_epoch_kwh.push(kwh_it);
        } else {
            let mut prev_t = t0;
            for (i, m) in self.marks.iter().enumerate() {
                if !(m.t >= t0 && m.t <= tn) {
                    return Err(Error::Ledger(format!(
                        "epoch {} mark at {} lies outside the sampled interval [{t0}, {tn}]",
                        m.epoch, m.t
                    )));
                }
                if m.t < prev_t {
                    return Err(Error::Ledger(format!("epoch {} mark goes back in time", m.epoch)));
                }
                let end = if i + 1 == self.marks.len() { tn } else { m.t };
                let fa = self.integral_to(&cum, prev_t)?;
                let fb = self.integral_to(&cum, end)?;
                per_epoch_kwh.push((0..3).map(|c| fb[c] - fa[c]).sum::<f64>() / JOULES_PER_KWH);
                prev_t = m.t;
            }
        }

        Ok(EnergyReport {
            kwh_cpu,
            kwh_gpu,
            kwh_ram,
            kwh_it,
            kwh_dc: self.pue * kwh_it,
            per_epoch_kwh,
            pue: self.pue,
            duration_s: tn - t0,
        })
    }

    /// Joules accumulated from the first sample up to each sample.
    fn cumulative(&self) -> Result<Vec<[f64; 3]>> {
        if self.samples.len() < 2 {
            return Err(Error::Ledger(format!(
                "need at least 2 samples to integrate, have {}",
                self.samples.len()
            )));
        }
        let mut cum = Vec::with_capacity(self.samples.len());
        let mut acc = [0.0f64; 3];
        cum.push(acc);
        for w in self.samples.windows(2) {
            let dt = w[1].t - w[0].t;
            let (p0, p1) = (w[0].power.components(), w[1].power.components());
            for c in 0..3 {
                acc[c] += 0.5 * (p0[c] + p1[c]) * dt;
            }
            cum.push(acc);
        }
        Ok(cum)
    }

    fn integral_to(&self, cum: &[[f64; 3]], t: f64) -> Result<[f64; 3]> {
        let s = &self.samples;
        if !(t >= s[0].t && t <= s[s.len() - 1].t) {
            return Err(Error::Ledger(format!(
                "time {t} outside the sampled interval [{}, {}]",
                s[0].t,
                s[s.len() - 1].t
            )));
        }
        // Index of the last sample at or before t.
        let i = s.partition_point(|x| x.t <= t).saturating_sub(1);
        if i + 1 >= s.len() || s[i].t == t {
            return Ok(cum[i]);
        }
        let (a, b) = (&s[i], &s[i + 1]);
        let frac = (t - a.t) / (b.t - a.t);
        let (p0, p1) = (a.power.components(), b.power.components());
        let mut out = cum[i];
        for c in 0..3 {
            let pt = p0[c] + (p1[c] - p0[c]) * frac;
            out[c] += 0.5 * (p0[c] + pt) * (t - a.t);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub kwh_cpu: f64,
    pub kwh_gpu: f64,
    pub kwh_ram: f64,
    /// `kwh_cpu + kwh_gpu + kwh_ram`.
    pub kwh_it: f64,
    /// `pue · kwh_it`.
    pub kwh_dc: f64,
    pub per_epoch_kwh: Vec<f64>,
    pub pue: f64,
    pub duration_s: f64,
}

impl EnergyReport {
    pub fn mean_epoch_kwh(&self) -> f64 {
        if self.per_epoch_kwh.is_empty() {
            0.0
        } else {
            self.per_epoch_kwh.iter().sum::<f64>() / self.per_epoch_kwh.len() as f64
        }
    }
}
