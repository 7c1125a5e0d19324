//! Path-integral Monte Carlo emulation of a transverse-field Ising machine.
//!
//! The device Hamiltonian A(s)·(transverse) + B(s)·(classical) is emulated by
//! a ring of M Trotter slices. At inverse temperature 1/T the effective
//! classical energy of the replicated system is
//!
//!   E_eff = sum_m (B/M)·E_phys(slice m) + J_t · sum_{i,m} s_{i,m} s_{i,m+1}
//!
//! with ferromagnetic time coupling J_t = (T/2)·ln tanh(A/(M·T)) <= 0. The
//! magnitude matches the standard Suzuki-Trotter bond strength
//! (T/2)·ln coth(A/(M·T)); the sign here is negative because this code keeps
//! every coupling in energy form (negative = aligning). As A -> 0 the slices
//! lock together and the engine reduces to Metropolis sampling of E_phys.

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

use crate::error::SsError;
use crate::lattice::SpinConfig;
use crate::problem::IsingProblem;
use crate::schedule::AnnealSchedule;

/// Knobs of the path-integral emulator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngineParams {
    /// Trotter slices M.
    pub trotter_slices: usize,
    /// Monte Carlo sweeps per unit of trajectory time.
    pub sweeps_per_unit_time: f64,
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams {
            trotter_slices: 16,
            sweeps_per_unit_time: 10.0,
        }
    }
}

/// Default operating temperature for a problem: 5% of its largest coupling
/// or field magnitude.
pub fn default_temperature(problem: &IsingProblem) -> f64 {
    0.05 * problem.max_abs_j().max(1e-9)
}

/// M replicas of a spin configuration plus the worldline RNG.
#[derive(Clone, Debug)]
pub struct ReplicatedState {
    slices: Vec<Vec<i8>>,
    s: f64,
    rng: ChaCha8Rng,
}

impl ReplicatedState {
    /// All slices initialized to `init`; the trajectory position starts
    /// at s = 1 (fully classical).
    pub fn new(init: &SpinConfig, trotter_slices: usize, seed: u64) -> Result<Self, SsError> {
        if trotter_slices == 0 {
            return Err(SsError::Problem("need at least one Trotter slice".into()));
        }
        let slice: Vec<i8> = init.as_slice().to_vec();
        Ok(ReplicatedState {
            slices: vec![slice; trotter_slices],
            s: 1.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn m(&self) -> usize {
        self.slices.len()
    }

    pub fn n(&self) -> usize {
        self.slices[0].len()
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn slices(&self) -> &[Vec<i8>] {
        &self.slices
    }

    pub fn slice_config(&self, m: usize) -> SpinConfig {
        SpinConfig::new(self.slices[m].clone()).expect("slices hold valid spins")
    }

    /// Mean spin over all slices and sites.
    pub fn mean_spin(&self) -> f64 {
        let total: i64 = self
            .slices
            .iter()
            .flat_map(|sl| sl.iter())
            .map(|&v| i64::from(v))
            .sum();
        total as f64 / (self.m() * self.n()) as f64
    }
}

/// Ferromagnetic coupling between adjacent Trotter slices at transverse
/// amplitude `a`: (T/2)·ln tanh(a/(M·T)) <= 0. The argument is clamped below
/// to keep the A -> 0 limit a strong but finite lock.
pub fn time_coupling(a: f64, m: usize, t: f64) -> f64 {
    let x = (a / (m as f64 * t)).max(1e-12);
    0.5 * t * x.tanh().ln()
}

/// Total effective energy of a replicated state (the quantity the sweeps
/// sample at fixed s): intra-slice classical energy at weight B/M plus the
/// time-ring coupling. Exposed for exactness tests.
pub fn effective_energy(
    problem: &IsingProblem,
    slices: &[Vec<i8>],
    a: f64,
    b: f64,
    t: f64,
) -> f64 {
    let m = slices.len();
    let scale = b / m as f64;
    let mut e: f64 = slices.iter().map(|sl| scale * problem.energy_spins(sl)).sum();
    if m > 1 {
        let jt = time_coupling(a, m, t);
        for im in 0..m {
            let next = &slices[(im + 1) % m];
            let here = &slices[im];
            for i in 0..here.len() {
                e += jt * f64::from(here[i]) * f64::from(next[i]);
            }
        }
    }
    e
}

fn sweep(problem: &IsingProblem, state: &mut ReplicatedState, a: f64, b: f64, t: f64) {
    let m = state.slices.len();
    let n = problem.n();
    let scale = b / m as f64;
    let jt = if m > 1 { time_coupling(a, m, t) } else { 0.0 };

    for im in 0..m {
        let up = (im + 1) % m;
        let dn = (im + m - 1) % m;
        for i in 0..n as u32 {
            let mut delta = scale * problem.energy_delta_spins(&state.slices[im], i);
            if m > 1 {
                let here = f64::from(state.slices[im][i as usize]);
                let ring = f64::from(state.slices[up][i as usize])
                    + f64::from(state.slices[dn][i as usize]);
                delta += -2.0 * jt * here * ring;
            }
            let u: f64 = state.rng.gen();
            if delta <= 0.0 || u < (-delta / t).exp() {
                let spin = &mut state.slices[im][i as usize];
                *spin = -*spin;
            }
        }
    }

    // Timeline moves: flip one site across every slice; the ring bonds cancel
    // so only the classical terms contribute. These carry the dynamics when
    // the ring is locked (small A), e.g. tunneling of whole spins.
    if m > 1 {
        for i in 0..n as u32 {
            let delta: f64 = state
                .slices
                .iter()
                .map(|sl| scale * problem.energy_delta_spins(sl, i))
                .sum();
            let u: f64 = state.rng.gen();
            if delta <= 0.0 || u < (-delta / t).exp() {
                for sl in state.slices.iter_mut() {
                    sl[i as usize] = -sl[i as usize];
                }
            }
        }
    }
}

/// Run Monte Carlo sweeps over the trajectory span [t_start, t_end], reading
/// s(t) from the schedule's trajectory at each sweep's midpoint time.
pub fn run_segment(
    problem: &IsingProblem,
    schedule: &AnnealSchedule,
    state: &mut ReplicatedState,
    t_start: f64,
    t_end: f64,
    sweeps_per_unit_time: f64,
) -> Result<(), SsError> {
    if state.n() != problem.n() {
        return Err(SsError::ConfigLength {
            got: state.n(),
            want: problem.n(),
        });
    }
    if t_end < t_start {
        return Err(SsError::Problem(format!(
            "segment end {t_end} precedes start {t_start}"
        )));
    }
    if sweeps_per_unit_time <= 0.0 {
        return Err(SsError::Problem("sweeps_per_unit_time must be positive".into()));
    }
    let t = schedule.temperature();
    let duration = t_end - t_start;
    let n_sweeps = (duration * sweeps_per_unit_time).round() as usize;
    if n_sweeps > 0 {
        let dt = duration / n_sweeps as f64;
        for k in 0..n_sweeps {
            let tk = t_start + (k as f64 + 0.5) * dt;
            let s = schedule.trajectory().s_at(tk);
            let (a, b, _) = schedule.eval(s)?;
            sweep(problem, state, a, b, t);
        }
    }
    state.s = schedule.trajectory().s_at(t_end);
    Ok(())
}

/// One reverse anneal: start fully classical in `init`, follow the
/// schedule's trajectory (which must start and end at s = 1), and read out
/// one uniformly chosen slice with its classical (unscaled) energy.
pub fn reverse_anneal(
    problem: &IsingProblem,
    schedule: &AnnealSchedule,
    params: &EngineParams,
    init: &SpinConfig,
    seed: u64,
) -> Result<(SpinConfig, f64), SsError> {
    if init.len() != problem.n() {
        return Err(SsError::ConfigLength {
            got: init.len(),
            want: problem.n(),
        });
    }
    if !schedule.trajectory().is_reverse_anneal() {
        return Err(SsError::Problem(
            "reverse anneal needs a trajectory starting and ending at s = 1".into(),
        ));
    }
    let mut state = ReplicatedState::new(init, params.trotter_slices, seed)?;
    let total = schedule.trajectory().total_time();
    run_segment(
        problem,
        schedule,
        &mut state,
        0.0,
        total,
        params.sweeps_per_unit_time,
    )?;
    let pick = state.rng.gen_range(0..state.m());
    let out = state.slice_config(pick);
    let energy = problem.energy_spins(out.as_slice());
    Ok((out, energy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{exact_boltzmann_probs, ground_of_problem};
    use crate::lattice::{CouplingParams, SSLattice};
    use crate::schedule::Trajectory;

    /// Index of a slice in the 2^n state space (bit = 1 means spin -1,
    /// matching the exact module's convention).
    fn state_index(slice: &[i8]) -> usize {
        slice
            .iter()
            .enumerate()
            .fold(0usize, |acc, (i, &s)| acc | usize::from(s == -1) << i)
    }

    fn hold_schedule(s: f64, duration: f64, temperature: f64) -> AnnealSchedule {
        AnnealSchedule::linear(temperature, Trajectory::hold(s, duration).unwrap()).unwrap()
    }

    #[test]
    fn classical_limit_matches_boltzmann() {
        // A = 0, M = 1 is plain Metropolis; its stationary distribution must
        // match the exact Boltzmann weights on small problems.
        let problems = vec![
            IsingProblem::new(1, vec![-1.0], vec![]).unwrap(),
            IsingProblem::new(2, vec![0.3, -0.2], vec![(0, 1, -1.0)]).unwrap(),
            IsingProblem::new(
                3,
                vec![0.0, 0.1, -0.1],
                vec![(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)],
            )
            .unwrap(),
            IsingProblem::new(
                4,
                vec![0.2, -0.3, 0.4, 0.0],
                vec![(0, 1, 1.0), (1, 2, -0.7), (2, 3, 0.5), (0, 3, 0.9), (0, 2, -0.4)],
            )
            .unwrap(),
        ];
        let t = 0.7;
        let samples = 100_000;
        let thin = 2;
        for (pi, problem) in problems.iter().enumerate() {
            let probs = exact_boltzmann_probs(problem, t).unwrap();
            let sched = AnnealSchedule::classical(
                t,
                Trajectory::hold(1.0, (samples * thin) as f64).unwrap(),
            )
            .unwrap();
            let mut state =
                ReplicatedState::new(&SpinConfig::all_up(problem.n()), 1, 41 + pi as u64)
                    .unwrap();
            let mut counts = vec![0u64; probs.len()];
            for k in 0..samples {
                let t0 = (k * thin) as f64;
                run_segment(problem, &sched, &mut state, t0, t0 + thin as f64, 1.0).unwrap();
                counts[state_index(&state.slices()[0])] += 1;
            }
            let tv: f64 = counts
                .iter()
                .zip(&probs)
                .map(|(&c, &p)| (c as f64 / samples as f64 - p).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv < 0.02, "problem {pi}: total variation {tv}");
        }
    }

    #[test]
    fn single_spin_follows_field() {
        // One spin, field -1, long pause at s = 1, T = 0.1: the mean spin
        // must match the closed-form tanh(1/T). Starting all-down proves the
        // timeline move does the work (single-slice flips are locked out).
        let problem = IsingProblem::new(1, vec![-1.0], vec![]).unwrap();
        let t = 0.1;
        let sched = hold_schedule(1.0, 4000.0, t);
        let mut state = ReplicatedState::new(&SpinConfig::all_down(1), 16, 7).unwrap();
        run_segment(&problem, &sched, &mut state, 0.0, 1000.0, 1.0).unwrap();
        let mut acc = 0.0;
        let reads = 3000;
        for k in 0..reads {
            let t0 = 1000.0 + k as f64;
            run_segment(&problem, &sched, &mut state, t0, t0 + 1.0, 1.0).unwrap();
            acc += state.mean_spin();
        }
        let mean = acc / reads as f64;
        let target = (1.0f64 / t).tanh();
        assert!((mean - target).abs() <= 0.02, "mean {mean} vs {target}");
    }

    #[test]
    fn fixed_s_sampling_matches_trotter_action() {
        // At fixed s the sweeps must sample the Boltzmann distribution of
        // the effective replicated action. Enumerate all 2^(n*M) joint
        // states for a 2-spin, 3-slice system and compare frequencies.
        let problem = IsingProblem::new(2, vec![0.2, -0.4], vec![(0, 1, 0.8)]).unwrap();
        let t = 0.4;
        let m = 3;
        let s = 0.5;
        let sched = hold_schedule(s, 1e9, t);
        let (a, b, _) = sched.eval(s).unwrap();

        let joint = 1usize << (2 * m);
        let mut weights = vec![0.0f64; joint];
        let mut z = 0.0;
        for code in 0..joint {
            let slices: Vec<Vec<i8>> = (0..m)
                .map(|im| {
                    (0..2)
                        .map(|i| if code >> (im * 2 + i) & 1 == 1 { -1 } else { 1 })
                        .collect()
                })
                .collect();
            let e = effective_energy(&problem, &slices, a, b, t);
            let w = (-e / t).exp();
            weights[code] = w;
            z += w;
        }
        for w in weights.iter_mut() {
            *w /= z;
        }

        let mut state = ReplicatedState::new(&SpinConfig::all_up(2), m, 11).unwrap();
        let samples = 120_000;
        let thin = 5.0;
        let mut counts = vec![0u64; joint];
        for k in 0..samples {
            let t0 = k as f64 * thin;
            run_segment(&problem, &sched, &mut state, t0, t0 + thin, 1.0).unwrap();
            let mut code = 0usize;
            for (im, sl) in state.slices().iter().enumerate() {
                for (i, &v) in sl.iter().enumerate() {
                    if v == -1 {
                        code |= 1 << (im * 2 + i);
                    }
                }
            }
            counts[code] += 1;
        }
        let mut tv = 0.0;
        for (code, (&c, &p)) in counts.iter().zip(&weights).enumerate() {
            let f = c as f64 / samples as f64;
            tv += (f - p).abs();
            let sigma = (p * (1.0 - p) / samples as f64).sqrt();
            assert!(
                (f - p).abs() < 3.0 * sigma + 1e-4,
                "state {code}: frequency {f} vs weight {p} (3 sigma {})",
                3.0 * sigma
            );
        }
        tv /= 2.0;
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn degenerate_trajectory_is_identity() {
        let lat = SSLattice::periodic(1, 2).unwrap();
        let problem = IsingProblem::from_lattice(&lat, &CouplingParams::new(1.0, 1.0, 2.1));
        let sched = AnnealSchedule::linear(
            1e-6,
            Trajectory::reverse_anneal(0.0, 1.0, 0.0).unwrap(),
        )
        .unwrap();
        let init = SpinConfig::from_bits(16, 0b1011001110001101);
        let (out, e) = reverse_anneal(&problem, &sched, &EngineParams::default(), &init, 3).unwrap();
        assert_eq!(out.as_slice(), init.as_slice());
        assert_eq!(e, problem.energy_spins(init.as_slice()));
    }

    #[test]
    fn readout_never_below_ground() {
        let lat = SSLattice::periodic(1, 2).unwrap();
        let problem = IsingProblem::from_lattice(&lat, &CouplingParams::new(1.0, 1.0, 2.1));
        let ground = ground_of_problem(&problem).unwrap();
        let sched = AnnealSchedule::linear(
            default_temperature(&problem),
            Trajectory::reverse_anneal(1.0, 0.4, 2.0).unwrap(),
        )
        .unwrap();
        let params = EngineParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for k in 0..10 {
            let bits: u64 = rng.gen::<u64>() & 0xFFFF;
            let init = SpinConfig::from_bits(16, bits);
            let (_, e) = reverse_anneal(&problem, &sched, &params, &init, 100 + k).unwrap();
            assert!(e >= ground.energy - 1e-9, "sample energy {e} below ground");
        }
    }

    #[test]
    fn ground_state_survives_reverse_anneal() {
        // Starting in the exact ground state, a mid-depth excursion with a
        // short pause should return it most of the time. The measured rate
        // with these seeds is 20/20; at least half is required.
        let lat = SSLattice::periodic(1, 2).unwrap();
        let problem = IsingProblem::from_lattice(&lat, &CouplingParams::new(1.0, 1.0, 0.0));
        let ground = ground_of_problem(&problem).unwrap();
        let sched = AnnealSchedule::linear(
            default_temperature(&problem),
            Trajectory::reverse_anneal(1.0, 0.4, 1.0).unwrap(),
        )
        .unwrap();
        let params = EngineParams::default();
        let mut hits = 0;
        for k in 0..20 {
            let (_, e) = reverse_anneal(&problem, &sched, &params, &ground.configs[0], 500 + k)
                .unwrap();
            if (e - ground.energy).abs() < 1e-9 {
                hits += 1;
            }
        }
        assert!(hits >= 10, "ground recovered only {hits}/20 times");
    }

    #[test]
    fn same_seed_same_outcome() {
        let lat = SSLattice::periodic(1, 2).unwrap();
        let problem = IsingProblem::from_lattice(&lat, &CouplingParams::new(1.0, 1.0, 2.1));
        let sched = AnnealSchedule::linear(
            default_temperature(&problem),
            Trajectory::reverse_anneal(1.0, 0.5, 1.0).unwrap(),
        )
        .unwrap();
        let params = EngineParams::default();
        let init = SpinConfig::all_up(16);
        let (c1, e1) = reverse_anneal(&problem, &sched, &params, &init, 77).unwrap();
        let (c2, e2) = reverse_anneal(&problem, &sched, &params, &init, 77).unwrap();
        assert_eq!(c1.as_slice(), c2.as_slice());
        assert_eq!(e1, e2);
    }

    #[test]
    fn argument_validation() {
        let problem = IsingProblem::new(2, vec![0.0, 0.0], vec![(0, 1, 1.0)]).unwrap();
        let params = EngineParams::default();
        let hold = AnnealSchedule::linear(0.1, Trajectory::hold(0.5, 1.0).unwrap()).unwrap();
        // Reverse anneal rejects a trajectory that does not end at s = 1.
        assert!(reverse_anneal(&problem, &hold, &params, &SpinConfig::all_up(2), 0).is_err());
        // Size mismatch.
        let ra = AnnealSchedule::linear(0.1, Trajectory::reverse_anneal(1.0, 0.5, 0.0).unwrap())
            .unwrap();
        assert!(reverse_anneal(&problem, &ra, &params, &SpinConfig::all_up(3), 0).is_err());
        // Bad sweep rate and reversed segment.
        let mut state = ReplicatedState::new(&SpinConfig::all_up(2), 4, 0).unwrap();
        assert!(run_segment(&problem, &hold, &mut state, 0.0, 1.0, 0.0).is_err());
        assert!(run_segment(&problem, &hold, &mut state, 1.0, 0.0, 1.0).is_err());
        assert!(ReplicatedState::new(&SpinConfig::all_up(2), 0, 0).is_err());
    }
}
