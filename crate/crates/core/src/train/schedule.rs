//! Learning-rate schedules, selected by name from a registry.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use super::TrainError;

/// Position of one optimizer step within a run. `cycle` is 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulePoint {
    pub cycle: usize,
    pub cycles: usize,
    pub step: usize,
    pub steps_per_cycle: usize,
}

impl SchedulePoint {
    /// Fraction of the run completed before this step, in `[0, 1)`.
    pub fn progress(&self) -> f64 {
        let total = (self.cycles * self.steps_per_cycle).max(1);
        (self.cycle * self.steps_per_cycle + self.step) as f64 / total as f64
    }
}

pub trait LrSchedule: Send + Sync {
    fn name(&self) -> &'static str;
    fn lr(&self, base: f64, at: SchedulePoint) -> f64;
}

pub struct Constant;

impl LrSchedule for Constant {
    fn name(&self) -> &'static str {
        "constant"
    }

    fn lr(&self, base: f64, _: SchedulePoint) -> f64 {
        base
    }
}

/// x0.1 after half and again after three quarters of the cycles (cycles 6
/// and 9 of 12).
pub struct StepDecay;

impl StepDecay {
    pub fn milestones(cycles: usize) -> [usize; 2] {
        [cycles.div_ceil(2), (3 * cycles).div_ceil(4)]
    }
}

impl LrSchedule for StepDecay {
    fn name(&self) -> &'static str {
        "step"
    }

    fn lr(&self, base: f64, at: SchedulePoint) -> f64 {
        let passed = Self::milestones(at.cycles)
            .iter()
            .filter(|&&m| at.cycle >= m)
            .count();
        base * 0.1f64.powi(passed as i32)
    }
}

/// Linear warm-up from `base / 25` over the first 30% of steps, then cosine
/// annealing towards `base / 1e4`.
pub struct OneCycle;

impl LrSchedule for OneCycle {
    fn name(&self) -> &'static str {
        "one_cycle"
    }

    fn lr(&self, base: f64, at: SchedulePoint) -> f64 {
        let t = at.progress();
        let start = base / 25.0;
        let end = base / 1e4;
        if t < 0.3 {
            start + (base - start) * t / 0.3
        } else {
            let u = (t - 0.3) / 0.7;
            end + (base - end) * 0.5 * (1.0 + (PI * u).cos())
        }
    }
}

#[derive(Default)]
pub struct SchedulerRegistry {
    entries: BTreeMap<&'static str, Box<dyn LrSchedule>>,
}

impl SchedulerRegistry {
    pub fn with_builtins() -> Self {
        let mut r = Self::default();
        r.register(Box::new(Constant));
        r.register(Box::new(StepDecay));
        r.register(Box::new(OneCycle));
        r
    }

    pub fn register(&mut self, s: Box<dyn LrSchedule>) {
        self.entries.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn LrSchedule, TrainError> {
        self.entries.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            TrainError::Config(format!(
                "unknown scheduler `{name}` (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

pub fn default_schedulers() -> &'static SchedulerRegistry {
    static REG: OnceLock<SchedulerRegistry> = OnceLock::new();
    REG.get_or_init(SchedulerRegistry::with_builtins)
}
