//! Chained reverse anneals: each iteration re-programs the annealer with the
//! previous iteration's readout, building a Markov chain whose moves are
//! whole anneal cycles. The first `burn_in` iterations equilibrate the chain;
//! statistics use only the retained tail.

use std::collections::BTreeMap;

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;

use crate::chimera::{decode, expand_logical, Embedding, PhysicalProblem};
use crate::engine::{reverse_anneal, EngineParams};
use crate::error::SsError;
use crate::lattice::SpinConfig;
use crate::problem::IsingProblem;
use crate::schedule::{AnnealSchedule, Trajectory};

/// How iteration 0 of a chain is initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum InitPolicy {
    /// Ferromagnetic all-up start.
    AllUp,
    /// A caller-provided configuration.
    Given(SpinConfig),
    /// Uniform random spins drawn from the chain's master seed.
    Random,
}

/// Chain shape plus the per-iteration excursion (ramp time, pause depth,
/// pause duration) and engine knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct QemcConfig {
    pub chain_length: usize,
    pub burn_in: usize,
    pub init: InitPolicy,
    /// Ramp time from s = 1 down to the pause point (and back up).
    pub t_r: f64,
    /// Pause depth on the anneal schedule.
    pub s_p: f64,
    /// Pause duration.
    pub t_p: f64,
    pub engine: EngineParams,
}

impl Default for QemcConfig {
    fn default() -> Self {
        QemcConfig {
            chain_length: 100,
            burn_in: 50,
            init: InitPolicy::AllUp,
            t_r: 1.0,
            s_p: 0.4,
            t_p: 2.0,
            engine: EngineParams::default(),
        }
    }
}

impl QemcConfig {
    fn validate(&self) -> Result<(), SsError> {
        if self.chain_length == 0 || self.burn_in >= self.chain_length {
            return Err(SsError::Problem(format!(
                "need 0 <= burn_in < chain_length, got {} / {}",
                self.burn_in, self.chain_length
            )));
        }
        Ok(())
    }

    fn trajectory(&self) -> Result<Trajectory, SsError> {
        Trajectory::reverse_anneal(self.t_r, self.s_p, self.t_p)
    }
}

/// What the chain anneals on: the logical problem directly, or its compiled
/// hardware image with per-iteration chain decoding.
#[derive(Clone, Copy)]
pub enum AnnealTarget<'a> {
    Logical(&'a IsingProblem),
    Embedded {
        physical: &'a PhysicalProblem,
        embedding: &'a Embedding,
        /// Used for sample energies and as the space the chain state lives in.
        logical: &'a IsingProblem,
    },
}

impl<'a> AnnealTarget<'a> {
    fn logical_problem(&self) -> &'a IsingProblem {
        match self {
            AnnealTarget::Logical(p) => p,
            AnnealTarget::Embedded { logical, .. } => logical,
        }
    }
}

/// One chain iteration's readout.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub iteration: usize,
    /// False for burn-in samples; statistics skip those.
    pub retained: bool,
    pub energy: f64,
    pub config: SpinConfig,
}

/// A full chain of samples plus everything needed to reproduce or resume it.
/// Every iteration's configuration is kept, so any prefix acts as a crash
/// snapshot: `run_chain_from` continues a chain from sample k-1's config and
/// reproduces samples k.. exactly.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub samples: Vec<SampleRecord>,
    pub n_spins: usize,
    /// Live-site mask; magnetization is averaged over live sites only.
    pub live: Vec<bool>,
    pub seed: u64,
    pub temperature: f64,
    pub config: QemcConfig,
    /// Chains that needed majority/tie repair during decoding (embedded runs).
    pub broken_chains: usize,
}

impl Ensemble {
    pub fn retained(&self) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(|s| s.retained)
    }

    pub fn n_live(&self) -> usize {
        self.live.iter().filter(|&&v| v).count()
    }

    /// Mean retained energy.
    pub fn mean_energy(&self) -> f64 {
        let (mut acc, mut n) = (0.0, 0usize);
        for s in self.retained() {
            acc += s.energy;
            n += 1;
        }
        acc / n.max(1) as f64
    }

    /// Lowest energy observed anywhere in the chain, burn-in included.
    pub fn min_energy(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.energy)
            .fold(f64::INFINITY, f64::min)
    }

    /// The configuration attaining `min_energy`.
    pub fn best(&self) -> Option<&SampleRecord> {
        self.samples
            .iter()
            .min_by(|a, b| a.energy.total_cmp(&b.energy))
    }

    fn config_magnetization(&self, config: &SpinConfig) -> f64 {
        let total: i64 = self
            .live
            .iter()
            .enumerate()
            .filter(|&(_, &alive)| alive)
            .map(|(i, _)| i64::from(config.as_slice()[i]))
            .sum();
        total as f64 / self.n_live().max(1) as f64
    }

    /// Mean retained magnetization per live site.
    pub fn mean_magnetization(&self) -> f64 {
        let (mut acc, mut n) = (0.0, 0usize);
        for s in self.retained() {
            acc += self.config_magnetization(&s.config);
            n += 1;
        }
        acc / n.max(1) as f64
    }

    /// Per-site mean spin over retained samples (dead sites report the
    /// decoder's constant filler).
    pub fn site_means(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.n_spins];
        let mut n = 0usize;
        for s in self.retained() {
            for (i, &v) in s.config.as_slice().iter().enumerate() {
                acc[i] += f64::from(v);
            }
            n += 1;
        }
        for a in acc.iter_mut() {
            *a /= n.max(1) as f64;
        }
        acc
    }

    /// Concatenate two chains run at identical parameters under different
    /// seeds. Anything else is a statistics bug, so it is rejected.
    pub fn merged_with(&self, other: &Ensemble) -> Result<Ensemble, SsError> {
        if self.n_spins != other.n_spins
            || self.live != other.live
            || self.config != other.config
            || self.temperature != other.temperature
        {
            return Err(SsError::Problem(
                "ensembles are mergeable only across seeds at identical parameters".into(),
            ));
        }
        if self.seed == other.seed {
            return Err(SsError::Problem(
                "refusing to merge two chains with the same seed".into(),
            ));
        }
        let mut merged = self.clone();
        merged.samples.extend(other.samples.iter().cloned());
        merged.broken_chains += other.broken_chains;
        Ok(merged)
    }

    /// Text form: structured header, then one `iter flag energy spins` line
    /// per sample (flag 1 = retained).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# qemc-ensemble\n");
        out.push_str(&format!("# spins {}\n", self.n_spins));
        let mask: String = self
            .live
            .iter()
            .map(|&v| if v { '1' } else { '0' })
            .collect();
        out.push_str(&format!("# live {mask}\n"));
        out.push_str(&format!("# seed {}\n", self.seed));
        out.push_str(&format!("# temperature {}\n", self.temperature));
        out.push_str(&format!(
            "# chain {} burn {}\n",
            self.config.chain_length, self.config.burn_in
        ));
        out.push_str(&format!(
            "# pause t_r {} s_p {} t_p {}\n",
            self.config.t_r, self.config.s_p, self.config.t_p
        ));
        out.push_str(&format!(
            "# engine slices {} sweep-rate {}\n",
            self.config.engine.trotter_slices, self.config.engine.sweeps_per_unit_time
        ));
        out.push_str(&format!("# broken {}\n", self.broken_chains));
        match &self.config.init {
            InitPolicy::AllUp => out.push_str("# init all-up\n"),
            InitPolicy::Random => out.push_str("# init random\n"),
            InitPolicy::Given(c) => out.push_str(&format!("# init given {}\n", c.to_line())),
        }
        for s in &self.samples {
            out.push_str(&format!(
                "{} {} {} {}\n",
                s.iteration,
                u8::from(s.retained),
                s.energy,
                s.config.to_line()
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Ensemble, SsError> {
        let mut n_spins = None;
        let mut live = None;
        let mut seed = None;
        let mut temperature = None;
        let mut config = QemcConfig::default();
        let mut broken = 0usize;
        let mut samples = Vec::new();
        let bad = |what: &str| SsError::Parse(format!("ensemble text: bad {what}"));
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let fields: Vec<&str> = rest.split_whitespace().collect();
                match fields.first().copied() {
                    Some("spins") => {
                        n_spins = Some(
                            fields
                                .get(1)
                                .and_then(|v| v.parse::<usize>().ok())
                                .ok_or_else(|| bad("spins"))?,
                        )
                    }
                    Some("live") => {
                        let mask = fields.get(1).ok_or_else(|| bad("live"))?;
                        live = Some(
                            mask.chars()
                                .map(|c| match c {
                                    '1' => Ok(true),
                                    '0' => Ok(false),
                                    _ => Err(bad("live")),
                                })
                                .collect::<Result<Vec<bool>, _>>()?,
                        );
                    }
                    Some("seed") => {
                        seed = Some(
                            fields
                                .get(1)
                                .and_then(|v| v.parse::<u64>().ok())
                                .ok_or_else(|| bad("seed"))?,
                        )
                    }
                    Some("temperature") => {
                        temperature = Some(
                            fields
                                .get(1)
                                .and_then(|v| v.parse::<f64>().ok())
                                .ok_or_else(|| bad("temperature"))?,
                        )
                    }
                    Some("chain") => {
                        if fields.len() != 4 || fields[2] != "burn" {
                            return Err(bad("chain header"));
                        }
                        config.chain_length =
                            fields[1].parse().map_err(|_| bad("chain length"))?;
                        config.burn_in = fields[3].parse().map_err(|_| bad("burn-in"))?;
                    }
                    Some("pause") => {
                        if fields.len() != 7 {
                            return Err(bad("pause header"));
                        }
                        config.t_r = fields[2].parse().map_err(|_| bad("t_r"))?;
                        config.s_p = fields[4].parse().map_err(|_| bad("s_p"))?;
                        config.t_p = fields[6].parse().map_err(|_| bad("t_p"))?;
                    }
                    Some("engine") => {
                        if fields.len() != 5 {
                            return Err(bad("engine header"));
                        }
                        config.engine.trotter_slices =
                            fields[2].parse().map_err(|_| bad("slices"))?;
                        config.engine.sweeps_per_unit_time =
                            fields[4].parse().map_err(|_| bad("sweep rate"))?;
                    }
                    Some("broken") => {
                        broken = fields
                            .get(1)
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| bad("broken"))?;
                    }
                    Some("init") => {
                        config.init = match fields.get(1).copied() {
                            Some("all-up") => InitPolicy::AllUp,
                            Some("random") => InitPolicy::Random,
                            Some("given") => InitPolicy::Given(SpinConfig::parse_line(
                                fields.get(2).ok_or_else(|| bad("init config"))?,
                            )?),
                            _ => return Err(bad("init policy")),
                        };
                    }
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(bad("sample line"));
            }
            samples.push(SampleRecord {
                iteration: fields[0].parse().map_err(|_| bad("iteration"))?,
                retained: match fields[1] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad("retained flag")),
                },
                energy: fields[2].parse().map_err(|_| bad("energy"))?,
                config: SpinConfig::parse_line(fields[3])?,
            });
        }
        let n_spins = n_spins.ok_or_else(|| bad("missing spins header"))?;
        let live = live.unwrap_or_else(|| vec![true; n_spins]);
        if live.len() != n_spins {
            return Err(bad("live mask length"));
        }
        for s in &samples {
            if s.config.len() != n_spins {
                return Err(SsError::ConfigLength {
                    got: s.config.len(),
                    want: n_spins,
                });
            }
        }
        Ok(Ensemble {
            samples,
            n_spins,
            live,
            seed: seed.ok_or_else(|| bad("missing seed header"))?,
            temperature: temperature.ok_or_else(|| bad("missing temperature header"))?,
            config,
            broken_chains: broken,
        })
    }
}

/// Stateless per-stream seed derivation (splitmix-style), so that iteration
/// k's randomness depends only on the master seed and k. That is what makes
/// mid-chain replay reproduce the tail of a chain exactly.
pub fn mix_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const INIT_STREAM: u64 = 0x5EED_0000_0000_0001;
const TIE_STREAM: u64 = 0x7F4A;

fn live_mask_of_problem(problem: &IsingProblem) -> Vec<bool> {
    (0..problem.n())
        .map(|i| problem.h()[i] != 0.0 || !problem.neighbors(i as u32).is_empty())
        .collect()
}

fn initial_config(
    policy: &InitPolicy,
    n: usize,
    master_seed: u64,
) -> Result<SpinConfig, SsError> {
    match policy {
        InitPolicy::AllUp => Ok(SpinConfig::all_up(n)),
        InitPolicy::Given(c) => {
            if c.len() != n {
                return Err(SsError::ConfigLength {
                    got: c.len(),
                    want: n,
                });
            }
            Ok(c.clone())
        }
        InitPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(master_seed, INIT_STREAM));
            let spins: Vec<i8> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
            SpinConfig::new(spins)
        }
    }
}

/// One anneal cycle on the target: logical state in, logical state out, with
/// the logical energy of the readout.
fn anneal_once(
    target: &AnnealTarget,
    schedule: &AnnealSchedule,
    engine: &EngineParams,
    state: &SpinConfig,
    seed: u64,
    broken_chains: &mut usize,
) -> Result<(SpinConfig, f64), SsError> {
    match target {
        AnnealTarget::Logical(problem) => reverse_anneal(problem, schedule, engine, state, seed),
        AnnealTarget::Embedded {
            physical,
            embedding,
            logical,
        } => {
            let (dense, ids) = physical.to_ising()?;
            let expanded = expand_logical(embedding, state)?;
            let spins: Vec<i8> = ids
                .iter()
                .map(|id| expanded.get(id).copied().unwrap_or(1))
                .collect();
            let init = SpinConfig::new(spins)?;
            let (out, _) = reverse_anneal(&dense, schedule, engine, &init, seed)?;
            let sample: BTreeMap<u32, i8> = ids
                .iter()
                .zip(out.as_slice())
                .map(|(&id, &v)| (id, v))
                .collect();
            let (decoded, report) = decode(embedding, &sample, mix_seed(seed, TIE_STREAM))?;
            *broken_chains += report.broken.len();
            let energy = logical.energy_spins(decoded.as_slice());
            Ok((decoded, energy))
        }
    }
}

fn chain_core(
    target: &AnnealTarget,
    schedule: &AnnealSchedule,
    config: &QemcConfig,
    master_seed: u64,
    start_iter: usize,
    init: SpinConfig,
) -> Result<Ensemble, SsError> {
    config.validate()?;
    let logical = target.logical_problem();
    if init.len() != logical.n() {
        return Err(SsError::ConfigLength {
            got: init.len(),
            want: logical.n(),
        });
    }
    if start_iter >= config.chain_length {
        return Err(SsError::Problem(format!(
            "start iteration {start_iter} is past the chain length {}",
            config.chain_length
        )));
    }
    let sched = schedule.clone().with_trajectory(config.trajectory()?);
    let mut broken = 0usize;
    let mut state = init;
    let mut samples = Vec::with_capacity(config.chain_length - start_iter);
    for k in start_iter..config.chain_length {
        let seed_k = mix_seed(master_seed, k as u64);
        let (out, energy) =
            anneal_once(target, &sched, &config.engine, &state, seed_k, &mut broken)?;
        samples.push(SampleRecord {
            iteration: k,
            retained: k >= config.burn_in,
            energy,
            config: out.clone(),
        });
        state = out;
    }
    let live = match target {
        AnnealTarget::Logical(p) => live_mask_of_problem(p),
        AnnealTarget::Embedded { embedding, .. } => {
            let lat = embedding.logical_lattice();
            (0..lat.n_sites() as u32).map(|i| lat.is_alive(i)).collect()
        }
    };
    Ok(Ensemble {
        samples,
        n_spins: logical.n(),
        live,
        seed: master_seed,
        temperature: sched.temperature(),
        config: config.clone(),
        broken_chains: broken,
    })
}

/// Run a full chain: iteration 0 starts from the configured policy, every
/// later iteration from the previous readout. The schedule's trajectory is
/// replaced by the excursion described in `config`; its A/B table and
/// temperature are used as given.
pub fn run_chain(
    target: &AnnealTarget,
    schedule: &AnnealSchedule,
    config: &QemcConfig,
    master_seed: u64,
) -> Result<Ensemble, SsError> {
    let init = initial_config(&config.init, target.logical_problem().n(), master_seed)?;
    chain_core(target, schedule, config, master_seed, 0, init)
}

/// Resume a chain from a snapshot: `init` must be the readout of iteration
/// `start_iter - 1`. Produces samples for iterations `start_iter..` that are
/// bit-identical to an uninterrupted run under the same master seed.
pub fn run_chain_from(
    target: &AnnealTarget,
    schedule: &AnnealSchedule,
    config: &QemcConfig,
    master_seed: u64,
    start_iter: usize,
    init: &SpinConfig,
) -> Result<Ensemble, SsError> {
    chain_core(target, schedule, config, master_seed, start_iter, init.clone())
}

/// Per-iteration (energy, magnetization) series over the full chain,
/// burn-in included, for convergence diagnostics.
pub fn chain_trace(ensemble: &Ensemble) -> Vec<(f64, f64)> {
    ensemble
        .samples
        .iter()
        .map(|s| (s.energy, ensemble.config_magnetization(&s.config)))
        .collect()
}

/// One grid cell of a pause-parameter scan.
#[derive(Clone, Copy, Debug)]
pub struct PauseScanRow {
    pub s_p: f64,
    pub t_p: f64,
    /// Mean retained energy, shifted so the lowest energy observed anywhere
    /// in the scan sits at 0.
    pub mean_energy: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

/// Sweep (s_p, t_p) cells, running `repetitions` independent chains per cell
/// and pooling their retained samples. Energies are reported relative to the
/// lowest sample observed across the whole scan.
pub fn scan_pause_parameters(
    target: &AnnealTarget,
    schedule: &AnnealSchedule,
    base: &QemcConfig,
    grid: &[(f64, f64)],
    repetitions: usize,
    master_seed: u64,
) -> Result<Vec<PauseScanRow>, SsError> {
    if repetitions == 0 {
        return Err(SsError::Problem("need at least one repetition".into()));
    }
    let mut cells: Vec<(f64, f64, Vec<f64>)> = Vec::with_capacity(grid.len());
    let mut floor = f64::INFINITY;
    for (ci, &(s_p, t_p)) in grid.iter().enumerate() {
        let mut config = base.clone();
        config.s_p = s_p;
        config.t_p = t_p;
        let mut energies = Vec::new();
        for rep in 0..repetitions {
            let seed = mix_seed(master_seed, 1 + (ci * repetitions + rep) as u64);
            let ens = run_chain(target, schedule, &config, seed)?;
            floor = floor.min(ens.min_energy());
            energies.extend(ens.retained().map(|s| s.energy));
        }
        cells.push((s_p, t_p, energies));
    }
    Ok(cells
        .into_iter()
        .map(|(s_p, t_p, energies)| {
            let n = energies.len();
            let mean = energies.iter().sum::<f64>() / n.max(1) as f64;
            let var = energies
                .iter()
                .map(|e| (e - mean).powi(2))
                .sum::<f64>()
                / n.saturating_sub(1).max(1) as f64;
            PauseScanRow {
                s_p,
                t_p,
                mean_energy: mean - floor,
                stderr: (var / n.max(1) as f64).sqrt(),
                n_samples: n,
            }
        })
        .collect())
}
