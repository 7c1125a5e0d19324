//! Brute-force oracles: complete ground-state enumeration, exact thermal
//! expectations, and exact magnetization curves on small instances.
//!
//! Enumeration walks configurations in Gray-code order so each step flips a
//! single spin and updates the energy in O(degree). The space is partitioned
//! over workers by fixing high-order bits. Candidate ground states are
//! collected with a loose tolerance during the incremental walk and then
//! re-evaluated from scratch, so the final manifold is exact to 1e-9
//! regardless of floating-point drift along the walk.

use crate::error::SsError;
use crate::lattice::{CouplingParams, SSLattice, SpinConfig};
use crate::problem::IsingProblem;
use rayon::prelude::*;

/// Hard cap on enumerable (non-free) spins for ground-state searches.
pub const GROUND_SIZE_CAP: usize = 36;
/// Hard cap for exact thermal statistics (stores all 2^N energies).
pub const THERMAL_SIZE_CAP: usize = 20;

/// Loose collection tolerance along the incremental walk; absorbs
/// floating-point drift. Final membership is decided by re-evaluation.
const KEEP_TOL: f64 = 1e-6;
/// Two exactly re-evaluated energies within this bound count as degenerate.
const DEGENERACY_TOL: f64 = 1e-9;
/// Refuse to materialize absurdly large manifolds (e.g. all couplings zero).
const MANIFOLD_CAP: usize = 1 << 22;
/// Enumerate at most 2^LOW_BITS configurations per worker block.
const LOW_BITS: u32 = 20;

/// All ground states of a problem.
#[derive(Clone, Debug)]
pub struct GroundManifold {
    pub energy: f64,
    pub configs: Vec<SpinConfig>,
    /// Mean per-live-site magnetization over the manifold.
    pub magnetization: f64,
    pub degeneracy: usize,
}

#[derive(Clone, Debug)]
pub struct ThermalStats {
    pub mean_magnetization: f64,
    pub mean_energy: f64,
    /// Full pair-correlation matrix <s_i s_j> (diagonal = 1).
    pub corr: Vec<Vec<f64>>,
}

/// Exact ground-state magnetization versus field, with the exact critical
/// fields where the ground sector changes.
#[derive(Clone, Debug)]
pub struct MagnetizationCurve {
    /// (hz, ground-state m) at each requested field.
    pub points: Vec<(f64, f64)>,
    /// Exact fields (within the requested span) where the ground sector
    /// changes.
    pub critical_fields: Vec<f64>,
    /// Per magnetization sector (total spin sum), the minimal bond energy
    /// and one representative configuration.
    pub sectors: Vec<SectorMin>,
}

#[derive(Clone, Debug)]
pub struct SectorMin {
    /// Total spin sum of the sector (over enumerated sites).
    pub spin_sum: i64,
    /// Minimal j1/j2 bond energy within the sector (field excluded).
    pub bond_energy: f64,
    pub representative: SpinConfig,
}

struct BlockOut {
    min_e: f64,
    /// (bits, walk energy); re-evaluated by the caller.
    cands: Vec<(u64, f64)>,
    /// Per sector index: (walk min, argmin bits).
    sector: Vec<(f64, u64)>,
}

fn enumerate_block(prob: &IsingProblem, low: u32, prefix: u64) -> Result<BlockOut, SsError> {
    let n = prob.n();
    let mut spins: Vec<i8> = (0..n)
        .map(|i| if prefix >> i & 1 == 1 { -1 } else { 1 })
        .collect();
    let mut e = prob.energy_spins(&spins);
    let mut sum: i64 = spins.iter().map(|&s| s as i64).sum();
    let mut bits = prefix;

    let mut min_e = e;
    let mut cands: Vec<(u64, f64)> = vec![(bits, e)];
    let mut sector = vec![(f64::INFINITY, 0u64); n + 1];
    sector[((sum + n as i64) / 2) as usize] = (e, bits);

    for step in 1..(1u64 << low) {
        let i = step.trailing_zeros();
        e += prob.energy_delta_spins(&spins, i);
        let s = &mut spins[i as usize];
        sum -= 2 * *s as i64;
        *s = -*s;
        bits ^= 1u64 << i;

        let sec = ((sum + n as i64) / 2) as usize;
        if e < sector[sec].0 {
            sector[sec] = (e, bits);
        }
        if e < min_e {
            min_e = e;
        }
        if e <= min_e + KEEP_TOL {
            cands.push((bits, e));
            if cands.len() >= MANIFOLD_CAP {
                cands.retain(|c| c.1 <= min_e + KEEP_TOL);
                if cands.len() >= MANIFOLD_CAP {
                    return Err(SsError::Problem(
                        "ground manifold too large to enumerate".into(),
                    ));
                }
            }
        }
    }
    cands.retain(|c| c.1 <= min_e + KEEP_TOL);
    Ok(BlockOut {
        min_e,
        cands,
        sector,
    })
}

/// Exact minimum energy and the complete sorted list of ground-state bit
/// masks (bit i set means spin i = -1), plus exact per-sector minima.
fn enumerate_ground(prob: &IsingProblem) -> Result<(f64, Vec<u64>, Vec<(f64, u64)>), SsError> {
    let n = prob.n();
    if n == 0 {
        return Err(SsError::Problem("empty problem".into()));
    }
    if n > GROUND_SIZE_CAP {
        return Err(SsError::Problem(format!(
            "{n} spins exceeds the enumeration cap of {GROUND_SIZE_CAP}"
        )));
    }
    let low = (n as u32).min(LOW_BITS);
    let blocks = 1u64 << (n as u32 - low);
    let outs: Vec<BlockOut> = (0..blocks)
        .into_par_iter()
        .map(|b| enumerate_block(prob, low, b << low))
        .collect::<Result<_, _>>()?;

    let walk_min = outs.iter().map(|o| o.min_e).fold(f64::INFINITY, f64::min);

    // Exact re-evaluation of every candidate.
    let mut scored: Vec<(u64, f64)> = outs
        .iter()
        .flat_map(|o| o.cands.iter())
        .filter(|c| c.1 <= walk_min + KEEP_TOL)
        .map(|&(bits, _)| {
            let cfg = spins_of_bits(n, bits);
            (bits, prob.energy_spins(&cfg))
        })
        .collect();
    let true_min = scored
        .iter()
        .map(|c| c.1)
        .fold(f64::INFINITY, f64::min);
    scored.retain(|c| c.1 <= true_min + DEGENERACY_TOL);
    let mut masks: Vec<u64> = scored.into_iter().map(|c| c.0).collect();
    masks.sort_unstable();
    masks.dedup();

    // Merge sectors, re-evaluating representatives exactly.
    let mut sectors = vec![(f64::INFINITY, 0u64); n + 1];
    for o in &outs {
        for (idx, &(walk_e, bits)) in o.sector.iter().enumerate() {
            if walk_e.is_finite() {
                let exact = prob.energy_spins(&spins_of_bits(n, bits));
                if exact < sectors[idx].0 {
                    sectors[idx] = (exact, bits);
                }
            }
        }
    }
    Ok((true_min, masks, sectors))
}

fn spins_of_bits(n: usize, bits: u64) -> Vec<i8> {
    (0..n)
        .map(|i| if bits >> i & 1 == 1 { -1 } else { 1 })
        .collect()
}

/// Expand a configuration of the pruned problem back to full site indexing;
/// sites that were pruned away are fixed to +1.
fn expand(n_full: usize, keep: &[u32], bits: u64) -> SpinConfig {
    let mut spins = vec![1i8; n_full];
    for (pos, &site) in keep.iter().enumerate() {
        if bits >> pos & 1 == 1 {
            spins[site as usize] = -1;
        }
    }
    SpinConfig::new(spins).expect("expanded spins are +-1")
}

/// Complete ground manifold of an arbitrary problem. Sites with no couplers
/// and zero field are fixed to +1 (they cannot affect the energy).
pub fn ground_of_problem(problem: &IsingProblem) -> Result<GroundManifold, SsError> {
    let (pruned, keep) = problem.prune_free_sites();
    let (energy, masks, _) = enumerate_ground(&pruned)?;
    let n_full = problem.n();
    let configs: Vec<SpinConfig> = masks.iter().map(|&m| expand(n_full, &keep, m)).collect();
    let magnetization = configs
        .iter()
        .map(|c| c.as_slice().iter().map(|&s| s as f64).sum::<f64>() / n_full as f64)
        .sum::<f64>()
        / configs.len() as f64;
    Ok(GroundManifold {
        energy,
        degeneracy: configs.len(),
        magnetization,
        configs,
    })
}

/// Complete ground manifold of a lattice problem.
pub fn brute_force_ground(
    lattice: &SSLattice,
    params: &CouplingParams,
) -> Result<GroundManifold, SsError> {
    let full = IsingProblem::from_lattice(lattice, params);
    let (pruned, keep) = full.prune_free_sites();
    let (energy, masks, _) = enumerate_ground(&pruned)?;
    let configs: Vec<SpinConfig> = masks
        .iter()
        .map(|&m| expand(lattice.n_sites(), &keep, m))
        .collect();
    let magnetization = configs
        .iter()
        .map(|c| lattice.magnetization(c).expect("config built to size"))
        .sum::<f64>()
        / configs.len() as f64;
    Ok(GroundManifold {
        energy,
        degeneracy: configs.len(),
        magnetization,
        configs,
    })
}

/// Exact Boltzmann statistics of an arbitrary problem at temperature `t`.
pub fn exact_thermal_problem(problem: &IsingProblem, t: f64) -> Result<ThermalStats, SsError> {
    if t <= 0.0 {
        return Err(SsError::Problem("temperature must be positive".into()));
    }
    let (pruned, keep) = problem.prune_free_sites();
    let n = pruned.n();
    if n > THERMAL_SIZE_CAP {
        return Err(SsError::Problem(format!(
            "{n} spins exceeds the thermal enumeration cap of {THERMAL_SIZE_CAP}"
        )));
    }
    let total = 1u64 << n;

    // Pass 1: energies in Gray order.
    let mut energies = vec![0.0f64; total as usize];
    let mut spins = vec![1i8; n];
    let mut e = pruned.energy_spins(&spins);
    energies[0] = e;
    for step in 1..total {
        let i = step.trailing_zeros();
        e += pruned.energy_delta_spins(&spins, i);
        spins[i as usize] = -spins[i as usize];
        energies[step as usize] = e;
    }
    let e0 = energies.iter().copied().fold(f64::INFINITY, f64::min);

    // Pass 2: weighted accumulation along the same walk.
    let mut spins = vec![1i8; n];
    let mut z = 0.0;
    let mut m_acc = 0.0;
    let mut e_acc = 0.0;
    let mut corr = vec![vec![0.0f64; n]; n];
    let mut sum: i64 = n as i64;
    for step in 0..total {
        if step > 0 {
            let i = step.trailing_zeros() as usize;
            sum -= 2 * spins[i] as i64;
            spins[i] = -spins[i];
        }
        let ee = energies[step as usize];
        let w = (-(ee - e0) / t).exp();
        z += w;
        m_acc += w * sum as f64;
        e_acc += w * ee;
        for i in 0..n {
            let si = spins[i];
            for j in (i + 1)..n {
                corr[i][j] += w * (si * spins[j]) as f64;
            }
        }
    }

    // Expand to full indexing: pruned-away sites are free spins with
    // <s> = 0, <s s_j> = 0, <s s> = 1.
    let n_full = problem.n();
    let mut corr_full = vec![vec![0.0f64; n_full]; n_full];
    for i in 0..n_full {
        corr_full[i][i] = 1.0;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let v = corr[i][j] / z;
            let (a, b) = (keep[i] as usize, keep[j] as usize);
            corr_full[a][b] = v;
            corr_full[b][a] = v;
        }
    }
    Ok(ThermalStats {
        mean_magnetization: m_acc / z / n_full as f64,
        mean_energy: e_acc / z,
        corr: corr_full,
    })
}

/// Exact Boltzmann statistics of a lattice problem. The reported
/// magnetization is per live site.
pub fn exact_thermal(
    lattice: &SSLattice,
    params: &CouplingParams,
    t: f64,
) -> Result<ThermalStats, SsError> {
    let problem = IsingProblem::from_lattice(lattice, params);
    let mut stats = exact_thermal_problem(&problem, t)?;
    stats.mean_magnetization *= lattice.n_sites() as f64 / lattice.n_live() as f64;
    Ok(stats)
}

/// Exact Boltzmann probability of every configuration (indexed by bit mask,
/// bit i set meaning spin i = -1). No pruning, so indices match the caller's.
pub fn exact_boltzmann_probs(problem: &IsingProblem, t: f64) -> Result<Vec<f64>, SsError> {
    if t <= 0.0 {
        return Err(SsError::Problem("temperature must be positive".into()));
    }
    let n = problem.n();
    if n > THERMAL_SIZE_CAP {
        return Err(SsError::Problem(format!(
            "{n} spins exceeds the thermal enumeration cap of {THERMAL_SIZE_CAP}"
        )));
    }
    let total = 1usize << n;
    let mut energies = vec![0.0; total];
    for bits in 0..total {
        energies[bits] = problem.energy_spins(&spins_of_bits(n, bits as u64));
    }
    let e0 = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let mut probs: Vec<f64> = energies.iter().map(|&e| (-(e - e0) / t).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    Ok(probs)
}

/// Ground-state magnetization as a function of the longitudinal field, via
/// one field-free enumeration: the ground energy at field hz is
/// `min_sector (bond_min(sector) + hz * spin_sum(sector))`, so the curve and
/// its critical fields come from the lower envelope of one line per sector.
pub fn exact_magnetization_curve(
    lattice: &SSLattice,
    j1: f64,
    j2: f64,
    hz_values: &[f64],
) -> Result<MagnetizationCurve, SsError> {
    if hz_values.is_empty() {
        return Err(SsError::Problem("empty field grid".into()));
    }
    let bond_params = CouplingParams::new(j1, j2, 0.0);
    let full = IsingProblem::from_lattice(lattice, &bond_params);
    let (pruned, keep) = full.prune_free_sites();
    let n = pruned.n();
    if n > GROUND_SIZE_CAP {
        return Err(SsError::Problem(format!(
            "{n} spins exceeds the enumeration cap of {GROUND_SIZE_CAP}"
        )));
    }
    let (_, _, sector_raw) = enumerate_ground(&pruned)?;

    let mut sectors = Vec::new();
    for (idx, &(bond_energy, bits)) in sector_raw.iter().enumerate() {
        if bond_energy.is_finite() {
            sectors.push(SectorMin {
                spin_sum: 2 * idx as i64 - n as i64,
                bond_energy,
                representative: expand(lattice.n_sites(), &keep, bits),
            });
        }
    }

    let n_live = lattice.n_live() as f64;
    let mut points = Vec::with_capacity(hz_values.len());
    for &hz in hz_values {
        let mut best = f64::INFINITY;
        let mut best_sum = 0i64;
        for s in &sectors {
            let e = s.bond_energy + hz * s.spin_sum as f64;
            if e < best - 1e-12 || (e < best + 1e-12 && s.spin_sum < best_sum) {
                best = e.min(best);
                best_sum = s.spin_sum;
            }
        }
        points.push((hz, best_sum as f64 / n_live));
    }

    let lo = hz_values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = hz_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let critical_fields = envelope_breakpoints(&sectors, lo, hi);

    Ok(MagnetizationCurve {
        points,
        critical_fields,
        sectors,
    })
}

/// Breakpoints of the lower envelope of the sector lines within [lo, hi].
fn envelope_breakpoints(sectors: &[SectorMin], lo: f64, hi: f64) -> Vec<f64> {
    // One line per slope; same slope keeps the lower intercept.
    let mut lines: Vec<(f64, f64)> = Vec::new(); // (slope, intercept)
    let mut by_slope: Vec<&SectorMin> = sectors.iter().collect();
    by_slope.sort_by(|a, b| {
        (a.spin_sum, a.bond_energy)
            .partial_cmp(&(b.spin_sum, b.bond_energy))
            .unwrap()
    });
    for s in by_slope {
        match lines.last() {
            Some(&(slope, b)) if slope == s.spin_sum as f64 => {
                if s.bond_energy < b {
                    lines.pop();
                    lines.push((slope, s.bond_energy));
                }
            }
            _ => lines.push((s.spin_sum as f64, s.bond_energy)),
        }
    }
    // Active slopes decrease as hz increases: build the hull in descending
    // slope order.
    lines.reverse();
    let inter = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) / (a.0 - b.0);
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for l in lines {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            if inter(l, a) <= inter(b, a) {
                hull.pop();
            } else {
                break;
            }
        }
        if hull.len() == 1 {
            // Drop a first line that is dominated everywhere right of its
            // intersection if the new line already wins at -inf side; the
            // general while above handles len >= 2 only.
            let a = hull[0];
            if l.0 == a.0 {
                if l.1 < a.1 {
                    hull.pop();
                }
            }
        }
        hull.push(l);
    }
    let mut breaks: Vec<f64> = hull
        .windows(2)
        .map(|w| inter(w[1], w[0]))
        .filter(|x| *x >= lo - 1e-12 && *x <= hi + 1e-12)
        .collect();
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    breaks
}
