//! Mean-field boundary conditions: iteratively tune per-site longitudinal
//! fields on boundary sites (external perimeter and defect surroundings)
//! until the boundary magnetization matches the bulk, emulating an infinite
//! system on a finite open patch.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::SsError;
use crate::lattice::SSLattice;
use crate::qemc::Ensemble;

/// Largest allowed per-iteration field step.
pub const MAX_DELTA_H: f64 = 0.05;
/// Default boundary-bulk magnetization tolerance.
pub const DEFAULT_TOL: f64 = 0.03;
/// Default optimizer iteration cap.
pub const DEFAULT_MAX_ITER: usize = 500;

/// Partition the live sites: a site is boundary if it misses any of its four
/// square neighbors or its dimer partner (open perimeter or defect-adjacent);
/// everything else is bulk. A defect-free periodic lattice has no boundary.
pub fn identify_boundary(lattice: &SSLattice) -> (BTreeSet<u32>, BTreeSet<u32>) {
    let mut boundary = BTreeSet::new();
    let mut bulk = BTreeSet::new();
    for i in 0..lattice.n_sites() as u32 {
        if !lattice.is_alive(i) {
            continue;
        }
        let live_square = lattice
            .square_neighbors(i)
            .iter()
            .filter(|&&n| lattice.is_alive(n))
            .count();
        let dimer_ok = lattice.dimer_partner(i).is_some_and(|p| lattice.is_alive(p));
        if live_square < 4 || !dimer_ok {
            boundary.insert(i);
        } else {
            bulk.insert(i);
        }
    }
    (boundary, bulk)
}

/// The boundary-field optimization state: the site partition, the current
/// per-boundary-site fields, and the update-rule knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundarySpec {
    pub boundary_sites: BTreeSet<u32>,
    pub bulk_sites: BTreeSet<u32>,
    /// Current longitudinal field on each boundary site (bulk sites keep the
    /// uniform hz).
    pub h_boundary: BTreeMap<u32, f64>,
    /// Per-iteration step size, in [0, MAX_DELTA_H].
    pub delta_h: f64,
    pub max_iter: usize,
    /// When set and hz_bulk != 0, boundary fields may not flip sign against
    /// hz_bulk; updates that would are clamped to 0.
    pub sign_constraint: bool,
    pub hz_bulk: f64,
}

impl BoundarySpec {
    /// Build the spec for a lattice: boundary fields start at the bulk field.
    pub fn new(lattice: &SSLattice, hz_bulk: f64, delta_h: f64) -> Result<Self, SsError> {
        if !(0.0..=MAX_DELTA_H).contains(&delta_h) {
            return Err(SsError::Problem(format!(
                "delta_h must lie in [0, {MAX_DELTA_H}], got {delta_h}"
            )));
        }
        let (boundary_sites, bulk_sites) = identify_boundary(lattice);
        let h_boundary = boundary_sites.iter().map(|&i| (i, hz_bulk)).collect();
        Ok(BoundarySpec {
            boundary_sites,
            bulk_sites,
            h_boundary,
            delta_h,
            max_iter: DEFAULT_MAX_ITER,
            sign_constraint: true,
            hz_bulk,
        })
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_sign_constraint(mut self, on: bool) -> Self {
        self.sign_constraint = on;
        self
    }

    /// Field overrides in the shape the problem builder takes.
    pub fn field_overrides(&self) -> Vec<(u32, f64)> {
        self.h_boundary.iter().map(|(&i, &h)| (i, h)).collect()
    }

    /// Boundary fields as "site h" lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (&i, &h) in &self.h_boundary {
            out.push_str(&format!("{i} {h}\n"));
        }
        out
    }

    fn mean_over(&self, sites: &BTreeSet<u32>, site_means: &[f64]) -> f64 {
        let total: f64 = sites.iter().map(|&i| site_means[i as usize]).sum();
        total / sites.len().max(1) as f64
    }

    /// Boundary-bulk magnetization gap under an ensemble's site means.
    pub fn gap(&self, ensemble: &Ensemble) -> Result<f64, SsError> {
        let means = checked_site_means(self, ensemble)?;
        Ok((self.mean_over(&self.bulk_sites, &means)
            - self.mean_over(&self.boundary_sites, &means))
        .abs())
    }
}

fn checked_site_means(spec: &BoundarySpec, ensemble: &Ensemble) -> Result<Vec<f64>, SsError> {
    if ensemble.retained().next().is_none() {
        return Err(SsError::Problem("ensemble has no retained samples".into()));
    }
    let needed = spec
        .boundary_sites
        .iter()
        .chain(spec.bulk_sites.iter())
        .copied()
        .max()
        .map_or(0, |m| m as usize + 1);
    if ensemble.n_spins < needed {
        return Err(SsError::ConfigLength {
            got: ensemble.n_spins,
            want: needed,
        });
    }
    Ok(ensemble.site_means())
}

/// One field update: h_i += delta_h * (<sigma_i> - <m>_bulk) for every
/// boundary site, then the sign projection (clamp to 0 where the new field
/// would oppose hz_bulk while the constraint is active).
pub fn mfbc_step(spec: &BoundarySpec, ensemble: &Ensemble) -> Result<BoundarySpec, SsError> {
    let means = checked_site_means(spec, ensemble)?;
    let m_bulk = spec.mean_over(&spec.bulk_sites, &means);
    let mut next = spec.clone();
    for (&i, h) in next.h_boundary.iter_mut() {
        let mut updated = *h + spec.delta_h * (means[i as usize] - m_bulk);
        if spec.sign_constraint && spec.hz_bulk != 0.0 && updated * spec.hz_bulk < 0.0 {
            updated = 0.0;
        }
        *h = updated;
    }
    Ok(next)
}

/// Convergence record of an optimization run.
#[derive(Clone, Debug)]
pub struct MfbcReport {
    pub converged: bool,
    /// Sampler evaluations performed.
    pub iterations: usize,
    /// Boundary-bulk gap after each evaluation.
    pub gap_trace: Vec<f64>,
    pub best_gap: f64,
}

impl MfbcReport {
    /// Gap trace as a two-column CSV.
    pub fn gap_trace_csv(&self) -> String {
        let mut out = String::from("iteration,gap\n");
        for (k, g) in self.gap_trace.iter().enumerate() {
            out.push_str(&format!("{k},{g}\n"));
        }
        out
    }
}

/// Iterate sample -> update until the boundary magnetization matches the
/// bulk within `tol` or the iteration cap is hit. The sampler maps current
/// boundary fields to a QEMC ensemble. Non-convergence is flagged in the
/// report and the best-gap spec seen is returned.
pub fn mfbc_optimize<F>(
    mut sampler: F,
    spec: &BoundarySpec,
    tol: f64,
) -> Result<(BoundarySpec, MfbcReport), SsError>
where
    F: FnMut(&BoundarySpec) -> Result<Ensemble, SsError>,
{
    if tol <= 0.0 {
        return Err(SsError::Problem(format!("tolerance must be positive, got {tol}")));
    }
    if spec.boundary_sites.is_empty() {
        return Ok((
            spec.clone(),
            MfbcReport {
                converged: true,
                iterations: 0,
                gap_trace: Vec::new(),
                best_gap: 0.0,
            },
        ));
    }
    if spec.bulk_sites.is_empty() {
        return Err(SsError::Problem(
            "no bulk sites to match the boundary against".into(),
        ));
    }
    let mut current = spec.clone();
    let mut best = current.clone();
    let mut best_gap = f64::INFINITY;
    let mut gap_trace = Vec::new();
    for it in 1..=spec.max_iter {
        let ensemble = sampler(&current)?;
        let gap = current.gap(&ensemble)?;
        gap_trace.push(gap);
        if gap < best_gap {
            best_gap = gap;
            best = current.clone();
        }
        if gap <= tol {
            return Ok((
                current,
                MfbcReport {
                    converged: true,
                    iterations: it,
                    gap_trace,
                    best_gap,
                },
            ));
        }
        current = mfbc_step(&current, &ensemble)?;
    }
    Ok((
        best,
        MfbcReport {
            converged: false,
            iterations: spec.max_iter,
            gap_trace,
            best_gap,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::default_temperature;
    use crate::lattice::{CouplingParams, SSLattice, SpinConfig};
    use crate::problem::IsingProblem;
    use crate::qemc::{run_chain, AnnealTarget, QemcConfig, SampleRecord};
    use crate::schedule::{AnnealSchedule, Trajectory};
    use approx::assert_relative_eq;

    /// Hand-built ensemble whose retained site means are exactly `means`
    /// (each mean must be representable as k/len(samples) with k of the
    /// right parity; using 1.0/-1.0 and simple fractions keeps that exact).
    fn synthetic_ensemble(means: &[f64], samples: usize) -> Ensemble {
        let n = means.len();
        let mut records = Vec::new();
        for k in 0..samples {
            let spins: Vec<i8> = means
                .iter()
                .map(|&m| {
                    let ups = ((m + 1.0) / 2.0 * samples as f64).round() as usize;
                    if k < ups {
                        1
                    } else {
                        -1
                    }
                })
                .collect();
            records.push(SampleRecord {
                iteration: k,
                retained: true,
                energy: 0.0,
                config: SpinConfig::new(spins).unwrap(),
            });
        }
        Ensemble {
            samples: records,
            n_spins: n,
            live: vec![true; n],
            seed: 0,
            temperature: 1.0,
            config: QemcConfig::default(),
            broken_chains: 0,
        }
    }

    fn spec_with(
        boundary: &[u32],
        bulk: &[u32],
        h: f64,
        delta_h: f64,
        hz_bulk: f64,
    ) -> BoundarySpec {
        BoundarySpec {
            boundary_sites: boundary.iter().copied().collect(),
            bulk_sites: bulk.iter().copied().collect(),
            h_boundary: boundary.iter().map(|&i| (i, h)).collect(),
            delta_h,
            max_iter: DEFAULT_MAX_ITER,
            sign_constraint: true,
            hz_bulk,
        }
    }

    #[test]
    fn periodic_defect_free_has_no_boundary() {
        let lat = SSLattice::periodic(2, 2).unwrap();
        let (boundary, bulk) = identify_boundary(&lat);
        assert!(boundary.is_empty());
        assert_eq!(bulk.len(), 32);
        // Optimizing a boundary-free spec converges instantly, never sampling.
        let spec = BoundarySpec::new(&lat, 3.5, 0.05).unwrap();
        let (out, report) = mfbc_optimize(
            |_| -> Result<Ensemble, SsError> { panic!("sampler must not run") },
            &spec,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
        assert_eq!(out, spec);
    }

    #[test]
    fn open_perimeter_audit_by_coordinates() {
        // Independent audit: a live site is interior exactly when all four
        // unit-step neighbors and its dimer partner exist and are alive.
        let lat = SSLattice::open(3, 3).unwrap();
        let (boundary, bulk) = identify_boundary(&lat);
        assert!(!boundary.is_empty());
        assert!(!bulk.is_empty());
        let all: BTreeSet<u32> = boundary.union(&bulk).copied().collect();
        assert_eq!(all.len(), boundary.len() + bulk.len(), "disjoint partition");
        assert_eq!(all.len(), lat.n_live());
        for i in 0..lat.n_sites() as u32 {
            if !lat.is_alive(i) {
                continue;
            }
            let (x, y) = lat.coord(i);
            let interior = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .all(|&(dx, dy)| {
                    lat.site_at(x + dx, y + dy)
                        .is_some_and(|n| lat.is_alive(n))
                })
                && lat.dimer_partner(i).is_some_and(|p| lat.is_alive(p));
            assert_eq!(bulk.contains(&i), interior, "site {i} at ({x},{y})");
        }
    }

    #[test]
    fn defect_flags_exactly_its_neighborhood() {
        let clean = SSLattice::periodic(2, 2).unwrap();
        let victim = 13u32;
        let dimer = clean.dimer_partner(victim).unwrap();
        let lat = SSLattice::periodic(2, 2).unwrap().with_defects(&[victim]).unwrap();
        let (boundary, bulk) = identify_boundary(&lat);
        let mut expected: BTreeSet<u32> = clean
            .square_neighbors(victim)
            .iter()
            .copied()
            .collect();
        expected.insert(dimer);
        assert_eq!(boundary, expected);
        assert_eq!(bulk.len(), 32 - 1 - expected.len());
        // Locality: the partition changed only within distance 1 of the hole.
        let (b0, _) = identify_boundary(&clean);
        let delta: BTreeSet<u32> = boundary.symmetric_difference(&b0).copied().collect();
        assert!(delta.iter().all(|s| expected.contains(s)));
    }

    #[test]
    fn step_matches_hand_computed_update() {
        // h = 0.5, dh = 0.05, <sigma> = 0.8, m_bulk = 1/3 -> 0.52333...
        let spec = spec_with(&[0], &[1, 2, 3], 0.5, 0.05, 2.0);
        let ens = synthetic_ensemble(&[0.8, 1.0, 1.0, -1.0], 10);
        let next = mfbc_step(&spec, &ens).unwrap();
        assert_relative_eq!(
            next.h_boundary[&0],
            0.5 + 0.05 * (0.8 - 1.0 / 3.0),
            max_relative = 1e-12
        );
    }

    #[test]
    fn matched_magnetizations_are_a_fixed_point() {
        let spec = spec_with(&[0, 1], &[2, 3], 1.25, 0.05, 2.0);
        let ens = synthetic_ensemble(&[0.6, 0.6, 0.6, 0.6], 10);
        let next = mfbc_step(&spec, &ens).unwrap();
        assert_eq!(next.h_boundary, spec.h_boundary);
        assert_eq!(spec.gap(&ens).unwrap(), 0.0);
    }

    #[test]
    fn sign_projection_clamps_and_never_grows() {
        let spec = spec_with(&[0], &[1], 0.02, 0.05, 2.0);
        let ens = synthetic_ensemble(&[-1.0, 1.0], 10);
        // Unconstrained update: 0.02 + 0.05*(-2) = -0.08, flips sign -> 0.
        let next = mfbc_step(&spec, &ens).unwrap();
        assert_eq!(next.h_boundary[&0], 0.0);
        // Projection never exceeds the unconstrained magnitude.
        let raw: f64 = 0.02 + 0.05 * (-2.0);
        assert!(next.h_boundary[&0].abs() <= raw.abs());
        // Without the constraint the raw value survives.
        let free = mfbc_step(&spec.clone().with_sign_constraint(false), &ens).unwrap();
        assert_relative_eq!(free.h_boundary[&0], raw, max_relative = 1e-12);
        // hz_bulk = 0 makes the constraint vacuous.
        let neutral = spec_with(&[0], &[1], 0.02, 0.05, 0.0);
        let kept = mfbc_step(&neutral, &ens).unwrap();
        assert_relative_eq!(kept.h_boundary[&0], raw, max_relative = 1e-12);
    }

    #[test]
    fn spec_validation_and_error_paths() {
        let lat = SSLattice::open(2, 2).unwrap();
        assert!(BoundarySpec::new(&lat, 2.0, 0.06).is_err());
        assert!(BoundarySpec::new(&lat, 2.0, -0.01).is_err());
        let spec = BoundarySpec::new(&lat, 2.0, 0.05).unwrap();
        // Empty ensembles are rejected.
        let mut empty = synthetic_ensemble(&[0.0; 32], 4);
        for s in empty.samples.iter_mut() {
            s.retained = false;
        }
        assert!(mfbc_step(&spec, &empty).is_err());
        // Undersized ensembles are rejected.
        let small = synthetic_ensemble(&[0.0; 4], 4);
        assert!(mfbc_step(&spec, &small).is_err());
        assert!(mfbc_optimize(|_| Ok(small.clone()), &spec, 0.0).is_err());
    }

    #[test]
    fn optimizer_closes_the_gap_on_an_open_patch() {
        // Open 2x2-cell patch at mid-plateau field: perimeter sites miss
        // antiferromagnetic bonds, so they over-align with the field until
        // the optimizer relaxes their local fields.
        let lat = SSLattice::open(2, 2).unwrap();
        let params = CouplingParams::new(1.0, 1.0, 3.5);
        let spec = BoundarySpec::new(&lat, params.hz, 0.05).unwrap().with_max_iter(60);
        let base = IsingProblem::from_lattice(&lat, &params);
        let sched = AnnealSchedule::linear(
            default_temperature(&base),
            Trajectory::reverse_anneal(1.0, 0.4, 1.0).unwrap(),
        )
        .unwrap();
        let config = QemcConfig {
            chain_length: 16,
            burn_in: 8,
            t_r: 1.0,
            t_p: 1.0,
            ..QemcConfig::default()
        };
        let mut calls = 0u64;
        let sampler = |s: &BoundarySpec| {
            calls += 1;
            let problem =
                IsingProblem::from_lattice_with_fields(&lat, &params, &s.field_overrides());
            run_chain(
                &AnnealTarget::Logical(&problem),
                &sched,
                &config,
                1000 + calls,
            )
        };
        let (out, report) = mfbc_optimize(sampler, &spec, DEFAULT_TOL).unwrap();
        assert!(
            report.converged,
            "gap trace {:?}",
            report.gap_trace
        );
        assert!(*report.gap_trace.last().unwrap() <= DEFAULT_TOL);
        assert_eq!(report.gap_trace.len(), report.iterations);
        // Fields respected the sign constraint throughout.
        assert!(out.h_boundary.values().all(|&h| h >= 0.0));
        // The optimizer actually moved the perimeter fields.
        assert!(out.h_boundary.values().any(|&h| (h - params.hz).abs() > 1e-9));
        let csv = report.gap_trace_csv();
        assert!(csv.starts_with("iteration,gap\n"));
        assert_eq!(csv.lines().count(), report.iterations + 1);
    }
}
