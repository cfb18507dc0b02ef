use std::f64::consts::PI;

/// Cosine annealing with warm restarts, stepped once per optimizer step.
///
/// `lr = lr_min + (lr_max - lr_min) * (1 + cos(pi * t_cur / t_i)) / 2`;
/// when `t_cur` reaches `t_i` it resets to 0 and `t_i` grows by `t_mult`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cawrs {
    pub lr_max: f64,
    pub lr_min: f64,
    pub t_mult: usize,
    t_cur: usize,
    t_i: usize,
    cycle: usize,
}

impl Cawrs {
    pub fn new(lr_max: f64, lr_min: f64, t0: usize, t_mult: usize) -> Self {
        assert!(t0 >= 1 && t_mult >= 1, "t0 and t_mult must be >= 1");
        Self {
            lr_max,
            lr_min,
            t_mult,
            t_cur: 0,
            t_i: t0,
            cycle: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        let phase = self.t_cur as f64 / self.t_i as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * phase).cos())
    }

    /// Advances one step; returns true when this step triggered a restart.
    pub fn step(&mut self) -> bool {
        self.t_cur += 1;
        if self.t_cur >= self.t_i {
            self.t_cur = 0;
            self.t_i *= self.t_mult;
            self.cycle += 1;
            return true;
        }
        false
    }

    pub fn t_cur(&self) -> usize {
        self.t_cur
    }

    pub fn cycle_len(&self) -> usize {
        self.t_i
    }

    /// Number of completed cycles.
    pub fn cycle(&self) -> usize {
        self.cycle
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Cawrs(Cawrs),
    Constant(f64),
}

impl LrSchedule {
    pub fn lr(&self) -> f64 {
        match self {
            LrSchedule::Cawrs(c) => c.lr(),
            LrSchedule::Constant(lr) => *lr,
        }
    }

    pub fn step(&mut self) {
        if let LrSchedule::Cawrs(c) = self {
            c.step();
        }
    }
}
