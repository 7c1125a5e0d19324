//! Experiment driver: parameter sweeps, reverse-anneal chains, boundary
//! calibration, structure factors and exact checks, all emitting seeded,
//! byte-reproducible CSV artifacts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ssqa::boundary::{mfbc_optimize, BoundarySpec};
use ssqa::chimera::{build_chimera, compile_physical, half_cell_embed};
use ssqa::engine::{default_temperature, EngineParams};
use ssqa::exact::brute_force_ground;
use ssqa::lattice::{CouplingParams, SSLattice, SpinConfig};
use ssqa::observables::{
    detect_phase_boundary, dimer_afm_config, neel_configs, plateau_stripe_configs, sf_cut,
    structure_factor, MotifClassifier, PhaseDiagramGrid, PhasePoint, SFGrid,
    BOUNDARY_PROMINENCE,
};
use ssqa::problem::IsingProblem;
use ssqa::qemc::{
    chain_trace, mix_seed, run_chain, scan_pause_parameters, AnnealTarget, InitPolicy,
    QemcConfig,
};
use ssqa::schedule::{AnnealSchedule, Trajectory};
use ssqa::SsError;

const EXIT_CONFIG: u8 = 2;
const EXIT_EMBEDDING: u8 = 3;
const EXIT_NO_CONVERGENCE: u8 = 4;

/// Anything wrong with the requested run before any work starts.
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(anyhow!(ConfigError(msg.into())))
}

#[derive(Parser)]
#[command(name = "ssqa", about = "Annealing-study experiment driver", version)]
struct Cli {
    /// Structured-text config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; everything stochastic derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Phase-diagram sweep over (j2/j1, hz) cells via sampling chains.
    Sweep(SweepArgs),
    /// One reverse-anneal chain at fixed parameters.
    Qemc(QemcArgs),
    /// Static structure factor of sampled or analytic states.
    Sf(SfArgs),
    /// Brute-force ground manifold of a small lattice.
    Exact(ExactArgs),
    /// Compile the hardware image of an open lattice and report it.
    Embed(EmbedArgs),
    /// Mean-field boundary calibration on an open lattice.
    CalibrateBoundary(CalibrateArgs),
    /// Grid scan over pause parameters.
    ScanPause(ScanPauseArgs),
}

/// Overrides shared by every subcommand.
#[derive(Args, Clone, Default)]
struct CommonOverrides {
    /// Lattice cells along x.
    #[arg(long)]
    cells_x: Option<usize>,
    /// Lattice cells along y.
    #[arg(long)]
    cells_y: Option<usize>,
    /// Boundary kind: periodic | open.
    #[arg(long)]
    boundary: Option<String>,
    /// Dead logical site (repeatable).
    #[arg(long = "defect")]
    defects: Vec<u32>,
    #[arg(long, allow_hyphen_values = true)]
    j1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    j2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    hz: Option<f64>,
    /// Sampling temperature; defaults to a twentieth of the largest coupling.
    #[arg(long)]
    temperature: Option<f64>,
    /// Chain length (samples per chain).
    #[arg(long)]
    chain: Option<usize>,
    /// Burn-in samples discarded from retained statistics.
    #[arg(long)]
    burn: Option<usize>,
    /// Ramp time of each excursion.
    #[arg(long)]
    t_r: Option<f64>,
    /// Pause depth on the anneal schedule.
    #[arg(long)]
    s_p: Option<f64>,
    /// Pause duration.
    #[arg(long)]
    t_p: Option<f64>,
    /// Imaginary-time slices.
    #[arg(long)]
    slices: Option<usize>,
    /// Sweeps per unit schedule time.
    #[arg(long)]
    sweep_rate: Option<f64>,
    /// Chain initialization: all-up | random.
    #[arg(long)]
    init: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonOverrides,
    /// Comma-separated list of j2/j1 ratios.
    #[arg(long, value_delimiter = ',')]
    j2_list: Vec<f64>,
    #[arg(long, allow_hyphen_values = true)]
    hz_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    hz_max: Option<f64>,
    #[arg(long)]
    hz_steps: Option<usize>,
    /// Sweep lattice cells along x (sweeps default larger than oracle runs).
    #[arg(long)]
    sweep_cells_x: Option<usize>,
    #[arg(long)]
    sweep_cells_y: Option<usize>,
}

#[derive(Args)]
struct QemcArgs {
    #[command(flatten)]
    common: CommonOverrides,
    /// Anneal the compiled hardware image instead of the logical problem.
    #[arg(long)]
    embedded: bool,
}

#[derive(Args)]
struct SfArgs {
    #[command(flatten)]
    common: CommonOverrides,
    /// Sample source: qemc | neel | dimer-afm | stripe.
    #[arg(long, default_value = "qemc")]
    state: String,
    /// Fields to stack cuts over; defaults to the single configured hz.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    hz_list: Vec<f64>,
    /// Stations along the (0,0)->(pi,0)->(pi,pi) cut.
    #[arg(long, default_value_t = 64)]
    cut_points: usize,
}

#[derive(Args)]
struct ExactArgs {
    #[command(flatten)]
    common: CommonOverrides,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: CommonOverrides,
    /// Background susceptibility to pre-compensate.
    #[arg(long, allow_hyphen_values = true)]
    chi_b: Option<f64>,
    /// Hardware rows (defaults to what the lattice needs).
    #[arg(long)]
    rows: Option<usize>,
    /// Hardware columns (defaults to what the lattice needs).
    #[arg(long)]
    cols: Option<usize>,
    /// Dead qubit (repeatable).
    #[arg(long = "dead-qubit")]
    dead_qubits: Vec<u32>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: CommonOverrides,
    /// Per-iteration boundary-field step.
    #[arg(long)]
    delta_h: Option<f64>,
    /// Convergence tolerance on the boundary-bulk magnetization gap.
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Args)]
struct ScanPauseArgs {
    #[command(flatten)]
    common: CommonOverrides,
    /// Comma-separated pause depths.
    #[arg(long, value_delimiter = ',')]
    s_p_list: Vec<f64>,
    /// Comma-separated pause durations.
    #[arg(long, value_delimiter = ',')]
    t_p_list: Vec<f64>,
    /// Independent chains per grid cell.
    #[arg(long)]
    reps: Option<usize>,
}

// ---------------------------------------------------------------------------
// Run configuration: defaults, file layer, flag layer.

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    out: PathBuf,
    lattice: LatticeCfg,
    couplings: CouplingsCfg,
    schedule: ScheduleCfg,
    qemc: QemcCfg,
    sweep: SweepCfg,
    embed: EmbedCfg,
    boundary: BoundaryCfg,
    pause: PauseCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out: PathBuf::from("runs"),
            lattice: LatticeCfg::default(),
            couplings: CouplingsCfg::default(),
            schedule: ScheduleCfg::default(),
            qemc: QemcCfg::default(),
            sweep: SweepCfg::default(),
            embed: EmbedCfg::default(),
            boundary: BoundaryCfg::default(),
            pause: PauseCfg::default(),
        }
    }
}

/// Oracle-checked default scale: 2x2 cells, 32 spins.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LatticeCfg {
    cells_x: usize,
    cells_y: usize,
    boundary: String,
    defects: Vec<u32>,
}

impl Default for LatticeCfg {
    fn default() -> Self {
        LatticeCfg {
            cells_x: 2,
            cells_y: 2,
            boundary: "periodic".into(),
            defects: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CouplingsCfg {
    j1: f64,
    j2: f64,
    hz: f64,
}

impl Default for CouplingsCfg {
    fn default() -> Self {
        CouplingsCfg {
            j1: 1.0,
            j2: 1.0,
            hz: 3.5,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScheduleCfg {
    /// Resolved to the problem's default before any output is written.
    temperature: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct QemcCfg {
    chain_length: usize,
    burn_in: usize,
    t_r: f64,
    s_p: f64,
    t_p: f64,
    slices: usize,
    sweep_rate: f64,
    init: String,
}

impl Default for QemcCfg {
    fn default() -> Self {
        // Slow ramps with a medium pause read out plateau states cleanly.
        QemcCfg {
            chain_length: 60,
            burn_in: 30,
            t_r: 8.0,
            s_p: 0.4,
            t_p: 5.0,
            slices: 16,
            sweep_rate: 10.0,
            init: "all-up".into(),
        }
    }
}

/// Sweeps default to a larger 4x4-cell lattice (128 spins).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepCfg {
    cells_x: usize,
    cells_y: usize,
    j2_values: Vec<f64>,
    hz_min: f64,
    hz_max: f64,
    hz_steps: usize,
}

impl Default for SweepCfg {
    fn default() -> Self {
        SweepCfg {
            cells_x: 4,
            cells_y: 4,
            j2_values: vec![1.0],
            hz_min: 0.0,
            hz_max: 8.0,
            hz_steps: 17,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EmbedCfg {
    chi_b: f64,
    rows: Option<usize>,
    cols: Option<usize>,
    dead_qubits: Vec<u32>,
    dead_couplers: Vec<(u32, u32)>,
}

impl Default for EmbedCfg {
    fn default() -> Self {
        EmbedCfg {
            chi_b: -0.03,
            rows: None,
            cols: None,
            dead_qubits: Vec::new(),
            dead_couplers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BoundaryCfg {
    delta_h: f64,
    tol: f64,
    max_iter: usize,
}

impl Default for BoundaryCfg {
    fn default() -> Self {
        BoundaryCfg {
            delta_h: 0.05,
            tol: 0.03,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PauseCfg {
    s_p_values: Vec<f64>,
    t_p_values: Vec<f64>,
    repetitions: usize,
}

impl Default for PauseCfg {
    fn default() -> Self {
        PauseCfg {
            s_p_values: vec![0.4, 0.7, 0.9],
            t_p_values: vec![0.2, 2.0, 20.0],
            repetitions: 4,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return config_err(format!("cannot read {}: {e}", path.display())),
    };
    match toml::from_str(&text) {
        Ok(cfg) => Ok(cfg),
        Err(e) => config_err(format!("bad config {}: {e}", path.display())),
    }
}

impl CommonOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.cells_x {
            cfg.lattice.cells_x = v;
        }
        if let Some(v) = self.cells_y {
            cfg.lattice.cells_y = v;
        }
        if let Some(v) = &self.boundary {
            cfg.lattice.boundary = v.clone();
        }
        if !self.defects.is_empty() {
            cfg.lattice.defects = self.defects.clone();
        }
        if let Some(v) = self.j1 {
            cfg.couplings.j1 = v;
        }
        if let Some(v) = self.j2 {
            cfg.couplings.j2 = v;
        }
        if let Some(v) = self.hz {
            cfg.couplings.hz = v;
        }
        if let Some(v) = self.temperature {
            cfg.schedule.temperature = Some(v);
        }
        if let Some(v) = self.chain {
            cfg.qemc.chain_length = v;
        }
        if let Some(v) = self.burn {
            cfg.qemc.burn_in = v;
        }
        if let Some(v) = self.t_r {
            cfg.qemc.t_r = v;
        }
        if let Some(v) = self.s_p {
            cfg.qemc.s_p = v;
        }
        if let Some(v) = self.t_p {
            cfg.qemc.t_p = v;
        }
        if let Some(v) = self.slices {
            cfg.qemc.slices = v;
        }
        if let Some(v) = self.sweep_rate {
            cfg.qemc.sweep_rate = v;
        }
        if let Some(v) = &self.init {
            cfg.qemc.init = v.clone();
        }
    }
}

// ---------------------------------------------------------------------------
// Builders from the merged config.

fn build_lattice_from(
    cells_x: usize,
    cells_y: usize,
    boundary: &str,
    defects: &[u32],
) -> Result<SSLattice> {
    let base = match boundary {
        "periodic" => SSLattice::periodic(cells_x, cells_y),
        "open" => SSLattice::open(cells_x, cells_y),
        other => return config_err(format!("unknown boundary kind '{other}'")),
    };
    let base = base.map_err(|e| anyhow!(ConfigError(e.to_string())))?;
    if defects.is_empty() {
        Ok(base)
    } else {
        base.with_defects(defects)
            .map_err(|e| anyhow!(ConfigError(e.to_string())))
    }
}

fn build_lattice(cfg: &LatticeCfg) -> Result<SSLattice> {
    build_lattice_from(cfg.cells_x, cfg.cells_y, &cfg.boundary, &cfg.defects)
}

fn coupling_params(c: &CouplingsCfg) -> CouplingParams {
    CouplingParams {
        j1: c.j1,
        j2: c.j2,
        hz: c.hz,
    }
}

fn qemc_config(cfg: &RunConfig) -> Result<QemcConfig> {
    let init = match cfg.qemc.init.as_str() {
        "all-up" => InitPolicy::AllUp,
        "random" => InitPolicy::Random,
        other => return config_err(format!("unknown init policy '{other}'")),
    };
    Ok(QemcConfig {
        chain_length: cfg.qemc.chain_length,
        burn_in: cfg.qemc.burn_in,
        init,
        t_r: cfg.qemc.t_r,
        s_p: cfg.qemc.s_p,
        t_p: cfg.qemc.t_p,
        engine: EngineParams {
            trotter_slices: cfg.qemc.slices,
            sweeps_per_unit_time: cfg.qemc.sweep_rate,
        },
    })
}

/// Resolve the sampling temperature (writing it back so headers carry the
/// value actually used) and build the schedule.
fn make_schedule(problem: &IsingProblem, cfg: &mut RunConfig) -> Result<AnnealSchedule> {
    let t = cfg
        .schedule
        .temperature
        .unwrap_or_else(|| default_temperature(problem));
    cfg.schedule.temperature = Some(t);
    let traj = Trajectory::reverse_anneal(cfg.qemc.t_r, cfg.qemc.s_p, cfg.qemc.t_p)?;
    Ok(AnnealSchedule::linear(t, traj)?)
}

// ---------------------------------------------------------------------------
// Output plumbing: every file starts with the full merged config and seed.

struct OutputWriter {
    dir: PathBuf,
    header: String,
}

impl OutputWriter {
    fn new(kind: &str, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out)
            .with_context(|| format!("creating {}", cfg.out.display()))?;
        let serialized = toml::to_string_pretty(cfg).context("serializing config")?;
        let mut header = format!("# ssqa {kind}\n# config:\n");
        for line in serialized.lines() {
            header.push_str("#   ");
            header.push_str(line);
            header.push('\n');
        }
        header.push_str(&format!("# master-seed {}\n", cfg.seed));
        Ok(OutputWriter {
            dir: cfg.out.clone(),
            header,
        })
    }

    fn write(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, format!("{}{}", self.header, body))
            .with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(path)
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![a];
    }
    (0..n)
        .map(|k| a + (b - a) * k as f64 / (n - 1) as f64)
        .collect()
}

// ---------------------------------------------------------------------------
// Subcommands.

fn cmd_exact(cfg: RunConfig) -> Result<()> {
    let lattice = build_lattice(&cfg.lattice)?;
    let params = coupling_params(&cfg.couplings);
    let manifold = brute_force_ground(&lattice, &params)?;
    let writer = OutputWriter::new("exact", &cfg)?;
    let summary = format!(
        "energy,degeneracy,magnetization\n{},{},{}\n",
        manifold.energy, manifold.degeneracy, manifold.magnetization
    );
    writer.write("ground.csv", &summary)?;
    let mut states = String::new();
    for c in &manifold.configs {
        states.push_str(&c.to_line());
        states.push('\n');
    }
    writer.write("ground_states.txt", &states)?;
    println!(
        "ground energy {} (degeneracy {}, m {})",
        manifold.energy, manifold.degeneracy, manifold.magnetization
    );
    Ok(())
}

fn cmd_qemc(mut cfg: RunConfig, embedded: bool) -> Result<()> {
    let lattice = build_lattice(&cfg.lattice)?;
    let params = coupling_params(&cfg.couplings);
    let qemc = qemc_config(&cfg)?;

    let ensemble = if embedded {
        let (cx, cy) = lattice.cells();
        let rows = cfg.embed.rows.unwrap_or(2 * cy);
        let cols = cfg.embed.cols.unwrap_or(2 * cx);
        cfg.embed.rows = Some(rows);
        cfg.embed.cols = Some(cols);
        let graph = build_chimera(rows, cols, &cfg.embed.dead_qubits, &cfg.embed.dead_couplers)?;
        let emb = half_cell_embed(&lattice, &graph)?;
        let physical = compile_physical(&emb, &params, cfg.embed.chi_b)?;
        let logical = IsingProblem::from_lattice(emb.logical_lattice(), &params);
        let schedule = make_schedule(&logical, &mut cfg)?;
        let target = AnnealTarget::Embedded {
            physical: &physical,
            embedding: &emb,
            logical: &logical,
        };
        run_chain(&target, &schedule, &qemc, cfg.seed)?
    } else {
        let problem = IsingProblem::from_lattice(&lattice, &params);
        let schedule = make_schedule(&problem, &mut cfg)?;
        run_chain(&AnnealTarget::Logical(&problem), &schedule, &qemc, cfg.seed)?
    };

    let writer = OutputWriter::new("qemc", &cfg)?;
    writer.write("samples.txt", &ensemble.to_text())?;
    let mut trace = String::from("iteration,energy,magnetization\n");
    for (k, (e, m)) in chain_trace(&ensemble).into_iter().enumerate() {
        trace.push_str(&format!("{k},{e},{m}\n"));
    }
    writer.write("trace.csv", &trace)?;
    let summary = format!(
        "retained,mean_energy,min_energy,mean_magnetization,broken_chains\n{},{},{},{},{}\n",
        ensemble.retained().count(),
        ensemble.mean_energy(),
        ensemble.min_energy(),
        ensemble.mean_magnetization(),
        ensemble.broken_chains
    );
    writer.write("summary.csv", &summary)?;
    println!(
        "chain done: mean energy {}, m {}",
        ensemble.mean_energy(),
        ensemble.mean_magnetization()
    );
    Ok(())
}

struct CellOutcome {
    j2_over_j1: f64,
    hz: f64,
    result: std::result::Result<(f64, f64, String), String>,
}

fn cmd_sweep(mut cfg: RunConfig, args: &SweepArgs) -> Result<()> {
    if !args.j2_list.is_empty() {
        cfg.sweep.j2_values = args.j2_list.clone();
    }
    if let Some(v) = args.hz_min {
        cfg.sweep.hz_min = v;
    }
    if let Some(v) = args.hz_max {
        cfg.sweep.hz_max = v;
    }
    if let Some(v) = args.hz_steps {
        cfg.sweep.hz_steps = v;
    }
    if let Some(v) = args.sweep_cells_x {
        cfg.sweep.cells_x = v;
    }
    if let Some(v) = args.sweep_cells_y {
        cfg.sweep.cells_y = v;
    }
    if cfg.sweep.j2_values.is_empty() || cfg.sweep.hz_steps == 0 {
        return config_err("sweep grid is empty");
    }

    let lattice = build_lattice_from(
        cfg.sweep.cells_x,
        cfg.sweep.cells_y,
        &cfg.lattice.boundary,
        &cfg.lattice.defects,
    )?;
    let open = cfg.lattice.boundary == "open";
    let classifier = MotifClassifier::new(&lattice)
        .map_err(|e| anyhow!(ConfigError(format!("sweep lattice unclassifiable: {e}"))))?;
    let qemc = qemc_config(&cfg)?;
    let hz_values = linspace(cfg.sweep.hz_min, cfg.sweep.hz_max, cfg.sweep.hz_steps);
    let j1 = cfg.couplings.j1;
    let temperature = cfg.schedule.temperature;
    let master = cfg.seed;
    let boundary_cfg = cfg.boundary.clone();

    let cells: Vec<(usize, f64, f64)> = cfg
        .sweep
        .j2_values
        .iter()
        .flat_map(|&r| hz_values.iter().map(move |&h| (r, h)))
        .enumerate()
        .map(|(i, (r, h))| (i, r, h))
        .collect();

    // Bounded worker pool; results keep cell order, so output never depends
    // on scheduling.
    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|&(index, ratio, hz)| {
            let run = || -> std::result::Result<(f64, f64, String), SsError> {
                let params = CouplingParams {
                    j1,
                    j2: ratio * j1,
                    hz,
                };
                let seed = mix_seed(master, index as u64);
                let overrides = if open {
                    // Calibrate boundary fields before the production chain.
                    let spec = BoundarySpec::new(&lattice, hz, boundary_cfg.delta_h)?
                        .with_max_iter(boundary_cfg.max_iter);
                    let mut calls = 0u64;
                    let sampler = |s: &BoundarySpec| {
                        calls += 1;
                        let problem = IsingProblem::from_lattice_with_fields(
                            &lattice,
                            &params,
                            &s.field_overrides(),
                        );
                        let t = temperature.unwrap_or_else(|| default_temperature(&problem));
                        let schedule = AnnealSchedule::linear(
                            t,
                            Trajectory::reverse_anneal(qemc.t_r, qemc.s_p, qemc.t_p)?,
                        )?;
                        run_chain(
                            &AnnealTarget::Logical(&problem),
                            &schedule,
                            &qemc,
                            mix_seed(seed, calls),
                        )
                    };
                    let (tuned, _) = mfbc_optimize(sampler, &spec, boundary_cfg.tol)?;
                    tuned.field_overrides()
                } else {
                    Vec::new()
                };
                let problem =
                    IsingProblem::from_lattice_with_fields(&lattice, &params, &overrides);
                let t = temperature.unwrap_or_else(|| default_temperature(&problem));
                let schedule = AnnealSchedule::linear(
                    t,
                    Trajectory::reverse_anneal(qemc.t_r, qemc.s_p, qemc.t_p)?,
                )?;
                let ens = run_chain(&AnnealTarget::Logical(&problem), &schedule, &qemc, seed)?;
                let motif = match ens.best() {
                    Some(best) => classifier.classify(&best.config)?.to_string(),
                    None => "mixed".to_string(),
                };
                Ok((ens.mean_magnetization(), ens.mean_energy(), motif))
            };
            CellOutcome {
                j2_over_j1: ratio,
                hz,
                result: run().map_err(|e| e.to_string()),
            }
        })
        .collect();

    let mut grid = PhaseDiagramGrid::new();
    let mut failures = String::from("j2_over_j1,hz,error\n");
    for out in &outcomes {
        match &out.result {
            Ok((m, e, motif)) => grid.push(PhasePoint {
                j2_over_j1: out.j2_over_j1,
                hz: out.hz,
                m: *m,
                energy: *e,
                motif: motif
                    .parse()
                    .unwrap_or(ssqa::observables::Motif::Mixed),
            }),
            Err(msg) => failures.push_str(&format!(
                "{},{},{}\n",
                out.j2_over_j1,
                out.hz,
                msg.replace(',', ";")
            )),
        }
    }

    // Boundary estimates per ratio row, where enough cells survived.
    let mut boundaries = String::from("j2_over_j1,hz\n");
    for &ratio in &cfg.sweep.j2_values {
        let curve: Vec<(f64, f64)> = outcomes
            .iter()
            .filter(|o| o.j2_over_j1 == ratio)
            .filter_map(|o| o.result.as_ref().ok().map(|(m, _, _)| (o.hz, *m)))
            .collect();
        if curve.len() < 3 {
            continue;
        }
        for b in detect_phase_boundary(&curve, BOUNDARY_PROMINENCE)? {
            boundaries.push_str(&format!("{ratio},{b}\n"));
        }
    }

    let writer = OutputWriter::new("sweep", &cfg)?;
    writer.write("phase_grid.csv", &grid.to_csv())?;
    writer.write("boundaries.csv", &boundaries)?;
    writer.write("failures.csv", &failures)?;
    println!(
        "swept {} cells ({} failed)",
        outcomes.len(),
        outcomes.iter().filter(|o| o.result.is_err()).count()
    );
    Ok(())
}

fn cmd_sf(mut cfg: RunConfig, args: &SfArgs) -> Result<()> {
    let lattice = build_lattice(&cfg.lattice)?;
    let grid = SFGrid::for_lattice(&lattice)?;
    let hz_list = if args.hz_list.is_empty() {
        vec![cfg.couplings.hz]
    } else {
        args.hz_list.clone()
    };

    // Resolve the temperature once against the first field value.
    let base_params = CouplingParams {
        j1: cfg.couplings.j1,
        j2: cfg.couplings.j2,
        hz: hz_list[0],
    };
    let base_problem = IsingProblem::from_lattice(&lattice, &base_params);
    make_schedule(&base_problem, &mut cfg)?;
    let writer = OutputWriter::new("sf", &cfg)?;

    for (k, &hz) in hz_list.iter().enumerate() {
        let samples: Vec<SpinConfig> = match args.state.as_str() {
            "neel" => vec![neel_configs(&lattice)[0].clone()],
            "dimer-afm" => vec![dimer_afm_config(&lattice)],
            "stripe" => plateau_stripe_configs(&lattice)?,
            "qemc" => {
                let params = CouplingParams {
                    j1: cfg.couplings.j1,
                    j2: cfg.couplings.j2,
                    hz,
                };
                let problem = IsingProblem::from_lattice(&lattice, &params);
                let t = cfg
                    .schedule
                    .temperature
                    .unwrap_or_else(|| default_temperature(&problem));
                let schedule = AnnealSchedule::linear(
                    t,
                    Trajectory::reverse_anneal(cfg.qemc.t_r, cfg.qemc.s_p, cfg.qemc.t_p)?,
                )?;
                let qemc = qemc_config(&cfg)?;
                let ens = run_chain(
                    &AnnealTarget::Logical(&problem),
                    &schedule,
                    &qemc,
                    mix_seed(cfg.seed, 1000 + k as u64),
                )?;
                ens.retained().map(|s| s.config.clone()).collect()
            }
            other => return config_err(format!("unknown state source '{other}'")),
        };
        let values = structure_factor(&lattice, &grid, &samples)?;
        writer.write(&format!("sf_grid_hz{hz}.csv"), &grid.to_csv(&values)?)?;
        let mut cut = String::from("path,qx,qy,s\n");
        for p in sf_cut(&grid, &values, args.cut_points)? {
            cut.push_str(&format!("{},{},{},{}\n", p.path, p.qx, p.qy, p.s));
        }
        writer.write(&format!("sf_cut_hz{hz}.csv"), &cut)?;
    }
    Ok(())
}

fn cmd_embed(mut cfg: RunConfig, args: &EmbedArgs) -> Result<()> {
    if let Some(v) = args.chi_b {
        cfg.embed.chi_b = v;
    }
    if let Some(v) = args.rows {
        cfg.embed.rows = Some(v);
    }
    if let Some(v) = args.cols {
        cfg.embed.cols = Some(v);
    }
    if !args.dead_qubits.is_empty() {
        cfg.embed.dead_qubits = args.dead_qubits.clone();
    }
    let lattice = build_lattice(&cfg.lattice)?;
    let params = coupling_params(&cfg.couplings);
    let (cx, cy) = lattice.cells();
    let rows = cfg.embed.rows.unwrap_or(2 * cy);
    let cols = cfg.embed.cols.unwrap_or(2 * cx);
    cfg.embed.rows = Some(rows);
    cfg.embed.cols = Some(cols);
    let graph = build_chimera(rows, cols, &cfg.embed.dead_qubits, &cfg.embed.dead_couplers)?;
    let emb = half_cell_embed(&lattice, &graph)?;
    let physical = compile_physical(&emb, &params, cfg.embed.chi_b)?;

    let writer = OutputWriter::new("embed", &cfg)?;
    let mut chains = String::from("site,q0,q1,q2,q3\n");
    for site in 0..lattice.n_sites() as u32 {
        if let Some(c) = emb.chain(site) {
            chains.push_str(&format!("{site},{},{},{},{}\n", c[0], c[1], c[2], c[3]));
        }
    }
    writer.write("chains.csv", &chains)?;
    let mut fields = String::from("qubit,h\n");
    for (q, h) in &physical.h {
        fields.push_str(&format!("{q},{h}\n"));
    }
    writer.write("physical_h.csv", &fields)?;
    let mut couplers = String::from("a,b,j\n");
    for (&(a, b), j) in &physical.j {
        couplers.push_str(&format!("{a},{b},{j}\n"));
    }
    writer.write("physical_j.csv", &couplers)?;
    let summary = format!(
        "logical_sites,hardware_defects,qubits_used,couplers,chi_b,j3\n{},{},{},{},{},{}\n",
        emb.logical_lattice().n_live(),
        emb.hardware_defects().len(),
        emb.used_qubits().len(),
        physical.j.len(),
        cfg.embed.chi_b,
        emb.j3()
    );
    writer.write("summary.csv", &summary)?;
    println!(
        "embedded {} sites on {} qubits",
        emb.logical_lattice().n_live(),
        emb.used_qubits().len()
    );
    Ok(())
}

fn cmd_calibrate(mut cfg: RunConfig, args: &CalibrateArgs) -> Result<()> {
    if let Some(v) = args.delta_h {
        cfg.boundary.delta_h = v;
    }
    if let Some(v) = args.tol {
        cfg.boundary.tol = v;
    }
    if let Some(v) = args.max_iter {
        cfg.boundary.max_iter = v;
    }
    let lattice = build_lattice(&cfg.lattice)?;
    let params = coupling_params(&cfg.couplings);
    let qemc = qemc_config(&cfg)?;
    let base_problem = IsingProblem::from_lattice(&lattice, &params);
    let schedule = make_schedule(&base_problem, &mut cfg)?;
    let spec = BoundarySpec::new(&lattice, cfg.couplings.hz, cfg.boundary.delta_h)?
        .with_max_iter(cfg.boundary.max_iter);

    let master = cfg.seed;
    let mut calls = 0u64;
    let sampler = |s: &BoundarySpec| {
        calls += 1;
        let problem =
            IsingProblem::from_lattice_with_fields(&lattice, &params, &s.field_overrides());
        run_chain(
            &AnnealTarget::Logical(&problem),
            &schedule,
            &qemc,
            mix_seed(master, 500 + calls),
        )
    };
    let (tuned, report) = mfbc_optimize(sampler, &spec, cfg.boundary.tol)?;

    let writer = OutputWriter::new("calibrate-boundary", &cfg)?;
    let mut fields = String::from("site,h\n");
    for (site, h) in tuned.field_overrides() {
        fields.push_str(&format!("{site},{h}\n"));
    }
    writer.write("boundary_fields.csv", &fields)?;
    writer.write("gap_trace.csv", &report.gap_trace_csv())?;
    println!(
        "calibration {} after {} iterations (best gap {})",
        if report.converged { "converged" } else { "did not converge" },
        report.iterations,
        report.best_gap
    );
    if !report.converged {
        return Err(SsError::NoConvergence(format!(
            "boundary gap {} > {} after {} iterations",
            report.best_gap, cfg.boundary.tol, report.iterations
        ))
        .into());
    }
    Ok(())
}

fn cmd_scan_pause(mut cfg: RunConfig, args: &ScanPauseArgs) -> Result<()> {
    if !args.s_p_list.is_empty() {
        cfg.pause.s_p_values = args.s_p_list.clone();
    }
    if !args.t_p_list.is_empty() {
        cfg.pause.t_p_values = args.t_p_list.clone();
    }
    if let Some(v) = args.reps {
        cfg.pause.repetitions = v;
    }
    if cfg.pause.s_p_values.is_empty() || cfg.pause.t_p_values.is_empty() {
        return config_err("pause grid is empty");
    }
    let lattice = build_lattice(&cfg.lattice)?;
    let params = coupling_params(&cfg.couplings);
    let problem = IsingProblem::from_lattice(&lattice, &params);
    let schedule = make_schedule(&problem, &mut cfg)?;
    let base = qemc_config(&cfg)?;
    let grid: Vec<(f64, f64)> = cfg
        .pause
        .s_p_values
        .iter()
        .flat_map(|&s| cfg.pause.t_p_values.iter().map(move |&t| (s, t)))
        .collect();
    let rows = scan_pause_parameters(
        &AnnealTarget::Logical(&problem),
        &schedule,
        &base,
        &grid,
        cfg.pause.repetitions,
        cfg.seed,
    )?;
    let writer = OutputWriter::new("scan-pause", &cfg)?;
    let mut table = String::from("s_p,t_p,mean_energy,stderr,n_samples\n");
    for r in &rows {
        table.push_str(&format!(
            "{},{},{},{},{}\n",
            r.s_p, r.t_p, r.mean_energy, r.stderr, r.n_samples
        ));
    }
    writer.write("pause_scan.csv", &table)?;
    println!("scanned {} pause cells", rows.len());
    Ok(())
}

// ---------------------------------------------------------------------------

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.cmd {
        Cmd::Sweep(a) => {
            a.common.apply(&mut cfg);
            cmd_sweep(cfg, a)
        }
        Cmd::Qemc(a) => {
            a.common.apply(&mut cfg);
            cmd_qemc(cfg, a.embedded)
        }
        Cmd::Sf(a) => {
            a.common.apply(&mut cfg);
            cmd_sf(cfg, a)
        }
        Cmd::Exact(a) => {
            a.common.apply(&mut cfg);
            cmd_exact(cfg)
        }
        Cmd::Embed(a) => {
            a.common.apply(&mut cfg);
            cmd_embed(cfg, a)
        }
        Cmd::CalibrateBoundary(a) => {
            a.common.apply(&mut cfg);
            cmd_calibrate(cfg, a)
        }
        Cmd::ScanPause(a) => {
            a.common.apply(&mut cfg);
            cmd_scan_pause(cfg, a)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<SsError>() {
        Some(SsError::Embedding(_)) => EXIT_EMBEDDING,
        Some(SsError::NoConvergence(_)) => EXIT_NO_CONVERGENCE,
        Some(_) => EXIT_CONFIG,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
