use std::time::Instant;

/// Number of initial steps excluded from the per-step time estimate.
pub const CALIBRATION_SKIP: usize = 5;
/// Steps averaged for the per-step time estimate.
pub const CALIBRATION_WINDOW: usize = 100;

/// Source of elapsed time for a training run.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Clock {
    /// Monotonic wall clock.
    #[default]
    Wall,
    /// Each step costs `flops / flops_per_second` seconds. Makes time
    /// budgets and timing columns reproducible across machines.
    Simulated { flops_per_second: f64 },
}

/// Measures one step under a [`Clock`].
pub struct StepTimer {
    clock: Clock,
    start: Instant,
}

impl StepTimer {
    pub fn start(clock: Clock) -> Self {
        Self {
            clock,
            start: Instant::now(),
        }
    }

    pub fn stop(self, step_flops: u64) -> f64 {
        match self.clock {
            Clock::Wall => self.start.elapsed().as_secs_f64(),
            Clock::Simulated { flops_per_second } => step_flops as f64 / flops_per_second,
        }
    }
}

/// Cumulative training cost: steps, analytic FLOPs, and elapsed seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMeter {
    flops_per_step: u64,
    steps: u64,
    seconds: f64,
    calibration: Vec<f64>,
}

impl CostMeter {
    pub fn new(flops_per_step: u64) -> Self {
        Self {
            flops_per_step,
            steps: 0,
            seconds: 0.0,
            calibration: Vec::new(),
        }
    }

    /// Continues from a previous run's totals.
    pub fn resumed(flops_per_step: u64, steps: u64, seconds: f64) -> Self {
        Self {
            steps,
            seconds,
            ..Self::new(flops_per_step)
        }
    }

    /// Exact restore, including the step-time calibration samples.
    pub fn from_parts(flops_per_step: u64, steps: u64, seconds: f64, calibration: Vec<f64>) -> Self {
        Self {
            flops_per_step,
            steps,
            seconds,
            calibration,
        }
    }

    /// Step times kept for [`CostMeter::per_step_estimate`].
    pub fn calibration(&self) -> &[f64] {
        &self.calibration
    }

    pub fn record_step(&mut self, seconds: f64) {
        self.steps += 1;
        self.seconds += seconds.max(0.0);
        if self.calibration.len() < CALIBRATION_SKIP + CALIBRATION_WINDOW {
            self.calibration.push(seconds);
        }
    }

    pub fn gradient_steps(&self) -> u64 {
        self.steps
    }

    pub fn flops_per_step(&self) -> u64 {
        self.flops_per_step
    }

    /// Always `gradient_steps × flops_per_step`.
    pub fn cumulative_flops(&self) -> f64 {
        self.steps as f64 * self.flops_per_step as f64
    }

    pub fn wall_clock_seconds(&self) -> f64 {
        self.seconds
    }

    /// Mean step time over the calibration window (after the first few
    /// warm-up steps), or over whatever was observed if the run was shorter.
    pub fn per_step_estimate(&self) -> Option<f64> {
        let obs = &self.calibration;
        let window = if obs.len() > CALIBRATION_SKIP {
            &obs[CALIBRATION_SKIP..]
        } else {
            &obs[..]
        };
        (!window.is_empty()).then(|| window.iter().sum::<f64>() / window.len() as f64)
    }
}
