//! Anneal schedules: transverse/classical amplitude tables A(s), B(s), the
//! operating temperature, and piecewise-linear s(t) trajectories.

use crate::error::SsError;

/// Amplitude table plus temperature plus the s(t) trajectory. The default
/// amplitudes are linear, A = 1 - s and B = s; a custom table interpolates
/// linearly between its knots.
#[derive(Clone, Debug)]
pub struct AnnealSchedule {
    /// (s, A, B) knots, sorted by s, covering s = 0 and s = 1.
    table: Vec<(f64, f64, f64)>,
    temperature: f64,
    trajectory: Trajectory,
}

impl AnnealSchedule {
    /// Linear amplitudes A = 1 - s, B = s.
    pub fn linear(temperature: f64, trajectory: Trajectory) -> Result<Self, SsError> {
        Self::from_table(
            vec![(0.0, 1.0, 0.0), (1.0, 0.0, 1.0)],
            temperature,
            trajectory,
        )
    }

    /// Purely classical schedule: A = 0 everywhere, B = 1. Useful as the
    /// exactly-solvable limit of the path-integral engine.
    pub fn classical(temperature: f64, trajectory: Trajectory) -> Result<Self, SsError> {
        Self::from_table(
            vec![(0.0, 0.0, 1.0), (1.0, 0.0, 1.0)],
            temperature,
            trajectory,
        )
    }

    /// Custom amplitude table. Knots must be sorted in s, span [0, 1], and
    /// have non-increasing A and non-decreasing B.
    pub fn from_table(
        table: Vec<(f64, f64, f64)>,
        temperature: f64,
        trajectory: Trajectory,
    ) -> Result<Self, SsError> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(SsError::Problem(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if table.len() < 2 {
            return Err(SsError::Problem("amplitude table needs >= 2 knots".into()));
        }
        if table.first().unwrap().0 != 0.0 || table.last().unwrap().0 != 1.0 {
            return Err(SsError::Problem("amplitude table must span s in [0, 1]".into()));
        }
        for w in table.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(SsError::Problem("amplitude knots must be sorted in s".into()));
            }
            if w[1].1 > w[0].1 + 1e-12 {
                return Err(SsError::Problem("A(s) must be non-increasing".into()));
            }
            if w[1].2 < w[0].2 - 1e-12 {
                return Err(SsError::Problem("B(s) must be non-decreasing".into()));
            }
        }
        if table.iter().any(|&(_, a, b)| a < 0.0 || b < 0.0) {
            return Err(SsError::Problem("amplitudes must be non-negative".into()));
        }
        Ok(AnnealSchedule {
            table,
            temperature,
            trajectory,
        })
    }

    /// Parse a schedule table from text lines "s A B" (comments with `#`).
    pub fn from_text(
        text: &str,
        temperature: f64,
        trajectory: Trajectory,
    ) -> Result<Self, SsError> {
        let mut table = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(SsError::Parse(format!(
                    "schedule line {}: expected \"s A B\"",
                    ln + 1
                )));
            }
            let mut nums = [0.0f64; 3];
            for (slot, f) in nums.iter_mut().zip(&fields) {
                *slot = f
                    .parse()
                    .map_err(|_| SsError::Parse(format!("schedule line {}: bad number", ln + 1)))?;
            }
            table.push((nums[0], nums[1], nums[2]));
        }
        Self::from_table(table, temperature, trajectory)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# s A B\n");
        for &(s, a, b) in &self.table {
            out.push_str(&format!("{s} {a} {b}\n"));
        }
        out
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    pub fn with_trajectory(mut self, trajectory: Trajectory) -> Self {
        self.trajectory = trajectory;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self, SsError> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(SsError::Problem(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        self.temperature = temperature;
        Ok(self)
    }

    /// Interpolated amplitudes and their ratio Q = A/B at a given s.
    /// Q is infinite where B = 0.
    pub fn eval(&self, s: f64) -> Result<(f64, f64, f64), SsError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(SsError::Problem(format!("s = {s} outside [0, 1]")));
        }
        let idx = self
            .table
            .windows(2)
            .position(|w| s <= w[1].0)
            .unwrap_or(self.table.len() - 2);
        let (s0, a0, b0) = self.table[idx];
        let (s1, a1, b1) = self.table[idx + 1];
        let f = (s - s0) / (s1 - s0);
        let a = a0 + f * (a1 - a0);
        let b = b0 + f * (b1 - b0);
        let q = if b == 0.0 {
            if a == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            a / b
        };
        Ok((a, b, q))
    }
}

/// Interpolated (A, B, Q = A/B) at a given s.
pub fn schedule_eval(schedule: &AnnealSchedule, s: f64) -> Result<(f64, f64, f64), SsError> {
    schedule.eval(s)
}

/// Piecewise-linear s(t).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// (t, s) waypoints, t strictly increasing except for instantaneous
    /// jumps (equal t allowed at a discontinuity).
    waypoints: Vec<(f64, f64)>,
}

impl Trajectory {
    /// The reverse-anneal shape: s = 1 at t = 0, ramp to s_p over t_r, hold
    /// for t_p, ramp back to 1 over t_r.
    pub fn reverse_anneal(t_r: f64, s_p: f64, t_p: f64) -> Result<Self, SsError> {
        if t_r < 0.0 || t_p < 0.0 {
            return Err(SsError::Problem("trajectory times must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&s_p) {
            return Err(SsError::Problem(format!("s_p = {s_p} outside [0, 1]")));
        }
        Ok(Trajectory {
            waypoints: vec![
                (0.0, 1.0),
                (t_r, s_p),
                (t_r + t_p, s_p),
                (2.0 * t_r + t_p, 1.0),
            ],
        })
    }

    /// Hold a fixed s for a duration (diagnostic shape; not a valid
    /// reverse-anneal trajectory unless s = 1).
    pub fn hold(s: f64, duration: f64) -> Result<Self, SsError> {
        if !(0.0..=1.0).contains(&s) {
            return Err(SsError::Problem(format!("s = {s} outside [0, 1]")));
        }
        if duration < 0.0 {
            return Err(SsError::Problem("duration must be non-negative".into()));
        }
        Ok(Trajectory {
            waypoints: vec![(0.0, s), (duration, s)],
        })
    }

    /// Arbitrary waypoint list; times must be non-decreasing and s in [0, 1].
    pub fn from_waypoints(waypoints: Vec<(f64, f64)>) -> Result<Self, SsError> {
        if waypoints.is_empty() {
            return Err(SsError::Problem("trajectory needs waypoints".into()));
        }
        if waypoints[0].0 != 0.0 {
            return Err(SsError::Problem("trajectory must start at t = 0".into()));
        }
        for w in waypoints.windows(2) {
            if w[1].0 < w[0].0 {
                return Err(SsError::Problem("trajectory times must be non-decreasing".into()));
            }
        }
        if waypoints.iter().any(|&(_, s)| !(0.0..=1.0).contains(&s)) {
            return Err(SsError::Problem("trajectory s values must lie in [0, 1]".into()));
        }
        Ok(Trajectory { waypoints })
    }

    pub fn waypoints(&self) -> &[(f64, f64)] {
        &self.waypoints
    }

    pub fn total_time(&self) -> f64 {
        self.waypoints.last().unwrap().0
    }

    /// Whether the trajectory both starts and ends fully classical (s = 1),
    /// the shape a reverse anneal requires.
    pub fn is_reverse_anneal(&self) -> bool {
        self.waypoints.first().unwrap().1 == 1.0 && self.waypoints.last().unwrap().1 == 1.0
    }

    /// s at time t (clamped to the trajectory's span). At an instantaneous
    /// jump the post-jump value applies.
    pub fn s_at(&self, t: f64) -> f64 {
        let pts = &self.waypoints;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        for w in pts.windows(2) {
            let ((t0, s0), (t1, s1)) = (w[0], w[1]);
            if t < t1 {
                return s0 + (t - t0) / (t1 - t0) * (s1 - s0);
            }
        }
        pts.last().unwrap().1
    }
}
