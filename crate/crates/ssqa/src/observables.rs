//! Measurement and analysis helpers: static structure factors, magnetization
//! curve boundary detection, motif classification of sampled configurations
//! and phase-diagram bookkeeping.

use std::f64::consts::PI;
use std::fmt;

use rayon::prelude::*;

use crate::boundary::identify_boundary;
use crate::error::SsError;
use crate::lattice::{BoundaryKind, CouplingParams, DimerOrientation, SSLattice, SpinConfig};

const TAU: f64 = 2.0 * PI;

/// Least agreement (fraction of window sites matching a template) for a
/// classification to stick.
pub const MOTIF_AGREEMENT: f64 = 0.9;

/// Smallest usable classification window.
pub const MIN_WINDOW: usize = 8;

/// Default slope threshold for [`detect_phase_boundary`].
pub const BOUNDARY_PROMINENCE: f64 = 0.05;

/// Checkerboard coordinates of the dimer containing `site`. The dimers of the
/// orthogonal pattern sit on a contracted square lattice; one cell holds the
/// four dimers at (2ci, 2cj), (2ci+1, 2cj), (2ci+1, 2cj+1) and (2ci, 2cj+1).
fn dimer_cell_coords(lattice: &SSLattice, site: u32) -> (i64, i64) {
    let (cells_x, _) = lattice.cells();
    let cell = site as usize / 8;
    let d = (site as usize % 8) / 2;
    let (ci, cj) = ((cell % cells_x) as i64, (cell / cells_x) as i64);
    let p = 2 * ci + i64::from(d == 1 || d == 2);
    let q = 2 * cj + i64::from(d == 2 || d == 3);
    (p, q)
}

/// The two antiferromagnetic ground states of the dominant-square regime:
/// every dimer aligned, with the aligned sign alternating on the contracted
/// checkerboard so that all square bonds are satisfied.
pub fn neel_configs(lattice: &SSLattice) -> [SpinConfig; 2] {
    let n = lattice.n_sites();
    let mut spins = vec![1i8; n];
    for i in 0..n as u32 {
        let (p, q) = dimer_cell_coords(lattice, i);
        spins[i as usize] = if (p + q).rem_euclid(2) == 1 { 1 } else { -1 };
    }
    let a = SpinConfig::new(spins).expect("valid spins");
    let b = a.flipped_all();
    [a, b]
}

/// A configuration with every dimer anti-aligned (the even slot of each pair
/// up); with strong dimer couplings and no field this is one ground state,
/// and any choice of per-dimer orientation is another.
pub fn dimer_afm_config(lattice: &SSLattice) -> SpinConfig {
    let n = lattice.n_sites();
    let mut spins = vec![1i8; n];
    for i in 0..n as u32 {
        if let Some(p) = lattice.dimer_partner(i) {
            if p < i {
                spins[i as usize] = -1;
            }
        }
    }
    SpinConfig::new(spins).expect("valid spins")
}

/// The six diagonal-stripe configurations of the one-third plateau. On the
/// contracted checkerboard the dimers organize into diagonals of period
/// three: one diagonal in three fully aligned against the field, the other
/// two anti-aligned with opposite polarities. Each state carries m = -1/3 on
/// a torus (only the aligned diagonal contributes). Two diagonal directions
/// times three phases gives six states; along the `q+p` direction the
/// anti-dimer polarity additionally tracks the dimer orientation.
///
/// On a torus the stripes only close up when both cell counts are divisible
/// by three; open patches carry them unconditionally.
pub fn plateau_stripe_configs(lattice: &SSLattice) -> Result<Vec<SpinConfig>, SsError> {
    if lattice.boundary_kind() == BoundaryKind::Periodic {
        let (cx, cy) = lattice.cells();
        if cx % 3 != 0 || cy % 3 != 0 {
            return Err(SsError::Geometry(format!(
                "diagonal stripes need both cell counts divisible by three, got {cx}x{cy}"
            )));
        }
    }
    let n = lattice.n_sites();
    let mut out = Vec::with_capacity(6);
    for dir in [-1i64, 1] {
        for c in 0..3i64 {
            let mut spins = vec![1i8; n];
            for i in 0..n as u32 {
                let even_slot = i % 2 == 0;
                let (p, q) = dimer_cell_coords(lattice, i);
                let ne = lattice.dimer_orientation(i) == DimerOrientation::Ne;
                spins[i as usize] = match (q + dir * p - c).rem_euclid(3) {
                    // The sacrificed diagonal, aligned against the field.
                    2 => -1,
                    // Anti diagonals, opposite polarities; in the q+p
                    // direction the polarity follows the orientation.
                    0 => {
                        if even_slot == (dir < 0 || ne) {
                            1
                        } else {
                            -1
                        }
                    }
                    _ => {
                        if even_slot == !(dir < 0 || ne) {
                            1
                        } else {
                            -1
                        }
                    }
                };
            }
            out.push(SpinConfig::new(spins).expect("valid spins"));
        }
    }
    Ok(out)
}

/// Shift a set of energies so the smallest becomes zero.
pub fn rescale_energies(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return values.to_vec();
    }
    values.iter().map(|v| v - min).collect()
}

#[derive(Clone, Debug, PartialEq)]
enum GridKind {
    /// Exact dual grid of a torus; serialized in long form.
    Tilted,
    /// Rectangular grid enclosing an open patch; serialized as a matrix.
    Rect { kx: usize, ky: usize },
}

/// A set of wavevectors matched to a lattice: the exact reciprocal grid of a
/// torus (one point per site), or an even rectangular grid strictly larger
/// than an open patch so distinct sites never alias. Components are kept in
/// [0, 2*pi).
#[derive(Clone, Debug, PartialEq)]
pub struct SFGrid {
    points: Vec<(f64, f64)>,
    kind: GridKind,
    group_order: usize,
}

fn canon(x: f64) -> f64 {
    let y = x.rem_euclid(TAU);
    if y >= TAU - 1e-9 {
        0.0
    } else {
        y
    }
}

/// Smallest even integer strictly greater than `extent`.
fn even_above(extent: usize) -> usize {
    let k = extent + 1;
    if k % 2 == 0 {
        k
    } else {
        k + 1
    }
}

/// Distance on the 2*pi torus of wavevectors.
fn q_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let fold = |d: f64| {
        let d = d.rem_euclid(TAU);
        d.min(TAU - d)
    };
    let dx = fold(a.0 - b.0);
    let dy = fold(a.1 - b.1);
    (dx * dx + dy * dy).sqrt()
}

impl SFGrid {
    /// Build the grid matched to `lattice`.
    ///
    /// Periodic: with wrap vectors W1 = cx (2, -2) and W2 = cy (2, 2), the
    /// dual basis is b1 = pi/(2 cx) (1, -1), b2 = pi/(2 cy) (1, 1); the n1
    /// range 0..4cx with n2 range 0..2cy picks each of the n_sites distinct
    /// commensurate wavevectors exactly once.
    pub fn for_lattice(lattice: &SSLattice) -> Result<Self, SsError> {
        match lattice.boundary_kind() {
            BoundaryKind::Periodic => {
                let (cx, cy) = lattice.cells();
                let b1 = PI / (2.0 * cx as f64);
                let b2 = PI / (2.0 * cy as f64);
                let mut points = Vec::with_capacity(8 * cx * cy);
                for n1 in 0..4 * cx {
                    for n2 in 0..2 * cy {
                        let qx = n1 as f64 * b1 + n2 as f64 * b2;
                        let qy = -(n1 as f64) * b1 + n2 as f64 * b2;
                        points.push((canon(qx), canon(qy)));
                    }
                }
                let group_order = points.len();
                Ok(Self {
                    points,
                    kind: GridKind::Tilted,
                    group_order,
                })
            }
            BoundaryKind::Open => {
                let live: Vec<(i64, i64)> = (0..lattice.n_sites() as u32)
                    .filter(|&i| lattice.is_alive(i))
                    .map(|i| lattice.coord(i))
                    .collect();
                if live.is_empty() {
                    return Err(SsError::Geometry("no live sites".into()));
                }
                let xs: Vec<i64> = live.iter().map(|c| c.0).collect();
                let ys: Vec<i64> = live.iter().map(|c| c.1).collect();
                let ext_x = (xs.iter().max().unwrap() - xs.iter().min().unwrap()) as usize;
                let ext_y = (ys.iter().max().unwrap() - ys.iter().min().unwrap()) as usize;
                let kx = even_above(ext_x);
                let ky = even_above(ext_y);
                let mut points = Vec::with_capacity(kx * ky);
                for iy in 0..ky {
                    for ix in 0..kx {
                        points.push((TAU * ix as f64 / kx as f64, TAU * iy as f64 / ky as f64));
                    }
                }
                Ok(Self {
                    points,
                    kind: GridKind::Rect { kx, ky },
                    group_order: kx * ky,
                })
            }
        }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Order of the underlying translation group (the Parseval denominator):
    /// the number of sites for a torus grid, kx*ky for a rectangular one.
    pub fn group_order(&self) -> usize {
        self.group_order
    }

    /// Index of the grid point closest to `q` on the wavevector torus.
    pub fn nearest(&self, q: (f64, f64)) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, &p) in self.points.iter().enumerate() {
            let d = q_distance(p, q);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Serialize grid values: a qx-by-qy matrix for rectangular grids, long
    /// `qx,qy,s` rows for tilted ones.
    pub fn to_csv(&self, values: &[f64]) -> Result<String, SsError> {
        if values.len() != self.points.len() {
            return Err(SsError::Problem(format!(
                "{} values for {} grid points",
                values.len(),
                self.points.len()
            )));
        }
        let mut out = String::new();
        match self.kind {
            GridKind::Rect { kx, ky } => {
                out.push_str("qy\\qx");
                for ix in 0..kx {
                    out.push_str(&format!(",{}", self.points[ix].0));
                }
                out.push('\n');
                for iy in 0..ky {
                    out.push_str(&format!("{}", self.points[iy * kx].1));
                    for ix in 0..kx {
                        out.push_str(&format!(",{}", values[iy * kx + ix]));
                    }
                    out.push('\n');
                }
            }
            GridKind::Tilted => {
                out.push_str("qx,qy,s\n");
                for (k, &(qx, qy)) in self.points.iter().enumerate() {
                    out.push_str(&format!("{qx},{qy},{}\n", values[k]));
                }
            }
        }
        Ok(out)
    }
}

fn live_positions(lattice: &SSLattice) -> Vec<(usize, f64, f64)> {
    (0..lattice.n_sites() as u32)
        .filter(|&i| lattice.is_alive(i))
        .map(|i| {
            let (x, y) = lattice.coord(i);
            (i as usize, x as f64, y as f64)
        })
        .collect()
}

fn check_samples(lattice: &SSLattice, samples: &[SpinConfig]) -> Result<(), SsError> {
    if samples.is_empty() {
        return Err(SsError::Problem(
            "structure factor needs at least one sample".into(),
        ));
    }
    for s in samples {
        if s.len() != lattice.n_sites() {
            return Err(SsError::ConfigLength {
                got: s.len(),
                want: lattice.n_sites(),
            });
        }
    }
    Ok(())
}

/// Static structure factor per live site, averaged over `samples`:
/// S(q) = < |sum_i s_i exp(i q.r_i)|^2 > / n_live, dead sites excluded.
pub fn structure_factor(
    lattice: &SSLattice,
    grid: &SFGrid,
    samples: &[SpinConfig],
) -> Result<Vec<f64>, SsError> {
    check_samples(lattice, samples)?;
    let live = live_positions(lattice);
    let n_live = live.len() as f64;
    let values = grid
        .points()
        .par_iter()
        .map(|&(qx, qy)| {
            let mut acc = 0.0;
            for cfg in samples {
                let s = cfg.as_slice();
                let (mut re, mut im) = (0.0, 0.0);
                for &(i, x, y) in &live {
                    let phase = qx * x + qy * y;
                    let v = s[i] as f64;
                    re += v * phase.cos();
                    im += v * phase.sin();
                }
                acc += (re * re + im * im) / n_live;
            }
            acc / samples.len() as f64
        })
        .collect();
    Ok(values)
}

/// The same quantity evaluated the slow way, as the position-space double sum
/// S(q) = (1/n_live) sum_ij <s_i s_j> cos(q.(r_i - r_j)). Kept as an
/// independent cross-check of the accumulator in [`structure_factor`].
pub fn structure_factor_naive(
    lattice: &SSLattice,
    grid: &SFGrid,
    samples: &[SpinConfig],
) -> Result<Vec<f64>, SsError> {
    check_samples(lattice, samples)?;
    let live = live_positions(lattice);
    let n_live = live.len();
    // Pair correlations averaged over the samples.
    let mut corr = vec![0.0f64; n_live * n_live];
    for cfg in samples {
        let s = cfg.as_slice();
        for (a, &(i, _, _)) in live.iter().enumerate() {
            for (b, &(j, _, _)) in live.iter().enumerate() {
                corr[a * n_live + b] += (s[i] * s[j]) as f64;
            }
        }
    }
    for v in corr.iter_mut() {
        *v /= samples.len() as f64;
    }
    let values = grid
        .points()
        .par_iter()
        .map(|&(qx, qy)| {
            let mut sum = 0.0;
            for (a, &(_, xa, ya)) in live.iter().enumerate() {
                for (b, &(_, xb, yb)) in live.iter().enumerate() {
                    let phase = qx * (xa - xb) + qy * (ya - yb);
                    sum += corr[a * n_live + b] * phase.cos();
                }
            }
            sum / n_live as f64
        })
        .collect();
    Ok(values)
}

/// Parseval total `sum_q S(q) * n_live / |G|`; character orthogonality makes
/// this exactly `n_live` whenever distinct live sites never alias on the
/// grid, which both constructions guarantee.
pub fn sum_rule_total(grid: &SFGrid, values: &[f64], n_live: usize) -> f64 {
    values.iter().sum::<f64>() * n_live as f64 / grid.group_order() as f64
}

/// One station of a structure-factor cut.
#[derive(Clone, Copy, Debug)]
pub struct CutPoint {
    /// Distance walked along the cut.
    pub path: f64,
    /// Snapped grid wavevector.
    pub qx: f64,
    pub qy: f64,
    pub s: f64,
}

/// Sample S(q) along the standard cut (0,0) -> (pi,0) -> (pi,pi) at `n`
/// evenly spaced stations, snapping each station to the nearest grid point.
pub fn sf_cut(grid: &SFGrid, values: &[f64], n: usize) -> Result<Vec<CutPoint>, SsError> {
    if values.len() != grid.len() {
        return Err(SsError::Problem(format!(
            "{} values for {} grid points",
            values.len(),
            grid.len()
        )));
    }
    if n < 2 {
        return Err(SsError::Problem("a cut needs at least two stations".into()));
    }
    let total = 2.0 * PI;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let t = total * k as f64 / (n - 1) as f64;
        let q = if t <= PI { (t, 0.0) } else { (PI, t - PI) };
        let idx = grid.nearest(q);
        let (qx, qy) = grid.points()[idx];
        out.push(CutPoint {
            path: t,
            qx,
            qy,
            s: values[idx],
        });
    }
    Ok(out)
}

/// Estimate phase boundaries from a magnetization curve given as (field, m)
/// points. The curve is sorted by field, finite-difference slopes are taken
/// on each interval, and the midpoint of every interval whose |slope| is a
/// local maximum standing at least `prominence` above its flanking slope
/// minima is reported.
pub fn detect_phase_boundary(
    curve: &[(f64, f64)],
    prominence: f64,
) -> Result<Vec<f64>, SsError> {
    if curve.len() < 3 {
        return Err(SsError::Problem(
            "boundary detection needs at least three curve points".into(),
        ));
    }
    let mut pts = curve.to_vec();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite fields"));
    for w in pts.windows(2) {
        if w[1].0 - w[0].0 <= 0.0 {
            return Err(SsError::Problem(format!(
                "duplicate field value {}",
                w[0].0
            )));
        }
    }
    let slopes: Vec<f64> = pts
        .windows(2)
        .map(|w| ((w[1].1 - w[0].1) / (w[1].0 - w[0].0)).abs())
        .collect();
    let mids: Vec<f64> = pts.windows(2).map(|w| 0.5 * (w[0].0 + w[1].0)).collect();

    // Minimum slope walking away from k, stopping at anything taller than
    // slopes[k]; an exhausted side counts as flat ground.
    let base = |k: usize, step: i64| -> f64 {
        let mut best: f64 = 0.0;
        let mut first = true;
        let mut i = k as i64 + step;
        while i >= 0 && (i as usize) < slopes.len() {
            let v = slopes[i as usize];
            if v > slopes[k] {
                break;
            }
            if first {
                best = v;
                first = false;
            } else {
                best = best.min(v);
            }
            i += step;
        }
        if first {
            0.0
        } else {
            best
        }
    };

    let mut out = Vec::new();
    for k in 0..slopes.len() {
        let left = if k > 0 { slopes[k - 1] } else { f64::NEG_INFINITY };
        let right = if k + 1 < slopes.len() {
            slopes[k + 1]
        } else {
            f64::NEG_INFINITY
        };
        if slopes[k] < left || slopes[k] < right {
            continue;
        }
        // A flat-topped maximum reports once, at its left edge.
        if k > 0 && slopes[k] == slopes[k - 1] {
            continue;
        }
        if slopes[k] - base(k, -1).max(base(k, 1)) >= prominence {
            out.push(mids[k]);
        }
    }
    Ok(out)
}

/// Ground-state orders recognizable from a single configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motif {
    /// All live spins aligned.
    Fm,
    /// Aligned dimers, sign alternating on the contracted checkerboard.
    Neel,
    /// Every dimer anti-aligned.
    DimerAfm,
    /// Diagonal stripe order; the payload indexes the matching stripe.
    Plateau(usize),
    /// Nothing reached the agreement threshold.
    Mixed,
}

impl fmt::Display for Motif {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Motif::Fm => write!(f, "fm"),
            Motif::Neel => write!(f, "neel"),
            Motif::DimerAfm => write!(f, "dimer-afm"),
            Motif::Plateau(k) => write!(f, "plateau-{k}"),
            Motif::Mixed => write!(f, "mixed"),
        }
    }
}

/// Classifies configurations against the recognized motifs over an interior
/// window (sites holding their full bond complement), requiring at least
/// [`MOTIF_AGREEMENT`] site agreement. Global spin flips of a motif match it.
#[derive(Clone, Debug)]
pub struct MotifClassifier {
    n_sites: usize,
    window: Vec<u32>,
    neel: [SpinConfig; 2],
    stripes: Vec<SpinConfig>,
    partner: Vec<Option<u32>>,
}

impl MotifClassifier {
    pub fn new(lattice: &SSLattice) -> Result<Self, SsError> {
        let (_, bulk) = identify_boundary(lattice);
        let window: Vec<u32> = bulk.into_iter().collect();
        if window.len() < MIN_WINDOW {
            return Err(SsError::Geometry(format!(
                "classification window has {} interior sites, need at least {MIN_WINDOW}",
                window.len()
            )));
        }
        // Stripe templates exist only when the geometry admits them.
        let stripes = plateau_stripe_configs(lattice).unwrap_or_default();
        Ok(Self {
            n_sites: lattice.n_sites(),
            window,
            neel: neel_configs(lattice),
            stripes,
            partner: (0..lattice.n_sites() as u32)
                .map(|i| lattice.dimer_partner(i))
                .collect(),
        })
    }

    pub fn window(&self) -> &[u32] {
        &self.window
    }

    fn template_agreement(&self, config: &SpinConfig, template: &SpinConfig) -> f64 {
        let hits = self
            .window
            .iter()
            .filter(|&&i| config.get(i) == template.get(i))
            .count();
        hits as f64 / self.window.len() as f64
    }

    fn both_ways(&self, config: &SpinConfig, template: &SpinConfig) -> f64 {
        self.template_agreement(config, template)
            .max(self.template_agreement(&config.flipped_all(), template))
    }

    fn fm_agreement(&self, config: &SpinConfig) -> f64 {
        let ups = self
            .window
            .iter()
            .filter(|&&i| config.get(i) == 1)
            .count() as f64;
        let n = self.window.len() as f64;
        (ups / n).max(1.0 - ups / n)
    }

    fn dimer_afm_agreement(&self, config: &SpinConfig) -> f64 {
        let hits = self
            .window
            .iter()
            .filter(|&&i| {
                self.partner[i as usize]
                    .is_some_and(|p| config.get(i) != config.get(p))
            })
            .count();
        hits as f64 / self.window.len() as f64
    }

    /// Best-matching motif, or [`Motif::Mixed`] when nothing reaches the
    /// agreement threshold. Ties go to the earlier candidate in the order
    /// ferromagnet, checkerboard, dimer antiferromagnet, stripes.
    pub fn classify(&self, config: &SpinConfig) -> Result<Motif, SsError> {
        if config.len() != self.n_sites {
            return Err(SsError::ConfigLength {
                got: config.len(),
                want: self.n_sites,
            });
        }
        let mut candidates: Vec<(Motif, f64)> = vec![
            (Motif::Fm, self.fm_agreement(config)),
            (
                Motif::Neel,
                self.neel
                    .iter()
                    .map(|t| self.template_agreement(config, t))
                    .fold(0.0, f64::max),
            ),
            (Motif::DimerAfm, self.dimer_afm_agreement(config)),
        ];
        for (k, stripe) in self.stripes.iter().enumerate() {
            candidates.push((Motif::Plateau(k), self.both_ways(config, stripe)));
        }
        let mut best = (Motif::Mixed, f64::NEG_INFINITY);
        for (motif, score) in candidates {
            if score > best.1 {
                best = (motif, score);
            }
        }
        if best.1 >= MOTIF_AGREEMENT {
            Ok(best.0)
        } else {
            Ok(Motif::Mixed)
        }
    }
}

/// One sampled point of a coupling-ratio / field phase diagram.
#[derive(Clone, Debug)]
pub struct PhasePoint {
    pub j2_over_j1: f64,
    pub hz: f64,
    pub m: f64,
    pub energy: f64,
    pub motif: Motif,
}

/// Accumulates sampled phase-diagram points and serializes them.
#[derive(Clone, Debug, Default)]
pub struct PhaseDiagramGrid {
    points: Vec<PhasePoint>,
}

impl PhaseDiagramGrid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, point: PhasePoint) {
        self.points.push(point);
    }

    pub fn points(&self) -> &[PhasePoint] {
        &self.points
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("j2_over_j1,hz,m,energy,dominant_motif\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.j2_over_j1, p.hz, p.m, p.energy, p.motif
            ));
        }
        out
    }
}

/// Convenience: magnetization curve of exact ground states along a field
/// scan, as (field, m) points ready for [`detect_phase_boundary`].
pub fn ground_magnetization_curve(
    lattice: &SSLattice,
    j1: f64,
    j2: f64,
    fields: &[f64],
) -> Result<Vec<(f64, f64)>, SsError> {
    let mut out = Vec::with_capacity(fields.len());
    for &hz in fields {
        let params = CouplingParams { j1, j2, hz };
        let manifold = crate::exact::brute_force_ground(lattice, &params)?;
        out.push((hz, manifold.magnetization));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::brute_force_ground;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn random_config(n: usize, seed: u64) -> SpinConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpinConfig::new((0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect())
            .unwrap()
    }

    #[test]
    fn torus_grid_is_the_exact_dual() {
        let lat = SSLattice::periodic(1, 3).unwrap();
        let grid = SFGrid::for_lattice(&lat).unwrap();
        assert_eq!(grid.len(), lat.n_sites());
        assert_eq!(grid.group_order(), lat.n_sites());

        // All points distinct on the wavevector torus.
        for (a, &pa) in grid.points().iter().enumerate() {
            for &pb in grid.points().iter().skip(a + 1) {
                assert!(q_distance(pa, pb) > 1e-6, "{pa:?} ~ {pb:?}");
            }
        }

        // Every point is commensurate with both wrap vectors.
        let (w1, w2) = lat.wrap_vectors().unwrap();
        for &(qx, qy) in grid.points() {
            for w in [w1, w2] {
                let dot = qx * w.0 as f64 + qy * w.1 as f64;
                let frac = dot / TAU - (dot / TAU).round();
                assert!(frac.abs() < 1e-9, "q=({qx},{qy}) misses wrap {w:?}");
            }
        }

        // The high-symmetry stations are on the grid.
        for station in [(0.0, 0.0), (PI, 0.0), (PI, PI)] {
            let idx = grid.nearest(station);
            assert!(
                q_distance(grid.points()[idx], station) < 1e-9,
                "station {station:?} missing"
            );
        }
    }

    #[test]
    fn open_grid_covers_the_patch() {
        let lat = SSLattice::open(2, 1).unwrap();
        let grid = SFGrid::for_lattice(&lat).unwrap();
        let (kx, ky) = match grid.kind {
            GridKind::Rect { kx, ky } => (kx, ky),
            _ => panic!("open lattice must get a rectangular grid"),
        };
        assert_eq!(kx % 2, 0);
        assert_eq!(ky % 2, 0);
        assert_eq!(grid.group_order(), kx * ky);
        assert_eq!(grid.len(), kx * ky);

        let coords: Vec<(i64, i64)> = (0..lat.n_sites() as u32).map(|i| lat.coord(i)).collect();
        let ext_x = coords.iter().map(|c| c.0).max().unwrap()
            - coords.iter().map(|c| c.0).min().unwrap();
        let ext_y = coords.iter().map(|c| c.1).max().unwrap()
            - coords.iter().map(|c| c.1).min().unwrap();
        assert!(kx as i64 > ext_x);
        assert!(ky as i64 > ext_y);

        let idx = grid.nearest((PI, PI));
        assert!(q_distance(grid.points()[idx], (PI, PI)) < 1e-9);
    }

    #[test]
    fn sum_rule_is_exact_on_random_samples() {
        let torus = SSLattice::periodic(1, 3).unwrap();
        let grid = SFGrid::for_lattice(&torus).unwrap();
        let samples: Vec<SpinConfig> =
            (0..3).map(|k| random_config(torus.n_sites(), 100 + k)).collect();
        let s = structure_factor(&torus, &grid, &samples).unwrap();
        let total = sum_rule_total(&grid, &s, torus.n_live());
        assert!((total - torus.n_live() as f64).abs() < 1e-9, "total {total}");

        // Same story on an open patch with a dead site.
        let open = SSLattice::open(2, 1).unwrap().with_defects(&[5]).unwrap();
        let grid = SFGrid::for_lattice(&open).unwrap();
        let samples = vec![random_config(open.n_sites(), 7)];
        let s = structure_factor(&open, &grid, &samples).unwrap();
        let total = sum_rule_total(&grid, &s, open.n_live());
        assert_eq!(open.n_live(), 15);
        assert!((total - 15.0).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn fast_and_naive_paths_agree() {
        let lat = SSLattice::periodic(1, 2).unwrap();
        let grid = SFGrid::for_lattice(&lat).unwrap();
        let samples: Vec<SpinConfig> =
            (0..3).map(|k| random_config(lat.n_sites(), 40 + k)).collect();
        let fast = structure_factor(&lat, &grid, &samples).unwrap();
        let slow = structure_factor_naive(&lat, &grid, &samples).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn neel_matches_brute_force_and_peaks_at_pi_pi() {
        // The analytic checkerboard states are exactly the brute-force ground
        // manifold of the square-dominated regime.
        let small = SSLattice::periodic(1, 2).unwrap();
        let params = CouplingParams { j1: 1.0, j2: 1.0, hz: 2.1 };
        let manifold = brute_force_ground(&small, &params).unwrap();
        assert_eq!(manifold.degeneracy, 2);
        let expect: BTreeSet<Vec<i8>> = neel_configs(&small)
            .iter()
            .map(|c| c.as_slice().to_vec())
            .collect();
        let got: BTreeSet<Vec<i8>> = manifold
            .configs
            .iter()
            .map(|c| c.as_slice().to_vec())
            .collect();
        assert_eq!(expect, got);

        // Its structure factor concentrates everything at (pi, pi).
        let lat = SSLattice::periodic(1, 3).unwrap();
        let grid = SFGrid::for_lattice(&lat).unwrap();
        let [neel, _] = neel_configs(&lat);
        let s = structure_factor(&lat, &grid, &[neel]).unwrap();
        let peak = grid.nearest((PI, PI));
        let n = lat.n_live() as f64;
        assert!((s[peak] - n).abs() < 1e-9, "S(pi,pi) = {}", s[peak]);
        for (k, &v) in s.iter().enumerate() {
            if k != peak {
                assert!(v < 1e-9, "weight leaked to {:?}", grid.points()[k]);
            }
        }
    }

    #[test]
    fn stripe_configs_check_out_on_the_smallest_torus() {
        let lat = SSLattice::periodic(3, 3).unwrap();
        let n = lat.n_sites() as f64;
        let stripes = plateau_stripe_configs(&lat).unwrap();
        assert_eq!(stripes.len(), 6);

        let distinct: BTreeSet<Vec<i8>> =
            stripes.iter().map(|c| c.as_slice().to_vec()).collect();
        assert_eq!(distinct.len(), 6);

        let zero_field = CouplingParams { j1: 1.0, j2: 1.0, hz: 0.0 };
        let at_field = CouplingParams { j1: 1.0, j2: 1.0, hz: 4.0 };
        for cfg in &stripes {
            let m = lat.magnetization(cfg).unwrap();
            assert!((m + 1.0 / 3.0).abs() < 1e-12, "m = {m}");
            let e0 = lat.energy(&zero_field, cfg).unwrap();
            assert!((e0 - (-5.0 * n / 6.0)).abs() < 1e-9, "bond energy {e0}");
            let e4 = lat.energy(&at_field, cfg).unwrap();
            assert!((e4 - (-5.0 * n / 6.0 - 4.0 * n / 3.0)).abs() < 1e-9);
            // Locally stable: every single flip costs energy.
            for i in 0..lat.n_sites() as u32 {
                let d = lat.energy_delta(&at_field, cfg, i).unwrap();
                assert!(d > 0.0, "flip of {i} gives {d}");
            }
        }

        // The stripes beat the checkerboard once the field is worth the
        // sacrificed bonds.
        let [neel, _] = neel_configs(&lat);
        let e_neel = lat.energy(&at_field, &neel).unwrap();
        assert!((e_neel - (-1.5 * n)).abs() < 1e-9);
        let e_stripe = lat.energy(&at_field, &stripes[0]).unwrap();
        assert!(e_stripe < e_neel);

        // Geometry guards: incommensurate tori refuse, open patches accept.
        assert!(plateau_stripe_configs(&SSLattice::periodic(1, 3).unwrap()).is_err());
        let open = SSLattice::open(1, 1).unwrap();
        let open_stripes = plateau_stripe_configs(&open).unwrap();
        assert_eq!(open_stripes.len(), 6);
        assert!(open_stripes.iter().all(|c| c.len() == open.n_sites()));
    }

    #[test]
    fn classifier_recognizes_the_textbook_orders() {
        let lat = SSLattice::periodic(3, 3).unwrap();
        let clf = MotifClassifier::new(&lat).unwrap();
        assert_eq!(clf.window().len(), lat.n_live());

        let n = lat.n_sites();
        assert_eq!(clf.classify(&SpinConfig::all_up(n)).unwrap(), Motif::Fm);
        assert_eq!(clf.classify(&SpinConfig::all_down(n)).unwrap(), Motif::Fm);

        for neel in neel_configs(&lat) {
            assert_eq!(clf.classify(&neel).unwrap(), Motif::Neel);
        }

        let afm = dimer_afm_config(&lat);
        assert_eq!(clf.classify(&afm).unwrap(), Motif::DimerAfm);

        let stripes = plateau_stripe_configs(&lat).unwrap();
        for (k, stripe) in stripes.iter().enumerate() {
            assert_eq!(clf.classify(stripe).unwrap(), Motif::Plateau(k));
            assert_eq!(
                clf.classify(&stripe.flipped_all()).unwrap(),
                Motif::Plateau(k)
            );
        }

        assert_eq!(
            clf.classify(&random_config(n, 9000)).unwrap(),
            Motif::Mixed
        );

        // Wrong length errors; a window too small to mean anything errors.
        assert!(clf.classify(&SpinConfig::all_up(n + 8)).is_err());
        assert!(MotifClassifier::new(&SSLattice::open(1, 1).unwrap()).is_err());
    }

    #[test]
    fn classifier_tolerates_sparse_damage() {
        let lat = SSLattice::periodic(3, 3).unwrap();
        let clf = MotifClassifier::new(&lat).unwrap();
        let [neel, _] = neel_configs(&lat);

        // 4 of 72 sites flipped: still within the 10% budget.
        let mut dinged = neel.clone();
        for i in [0u32, 8, 16, 24] {
            dinged.flip(i);
        }
        assert_eq!(clf.classify(&dinged).unwrap(), Motif::Neel);

        // 10 flips on distinct dimers: below threshold for everything.
        let mut wrecked = neel.clone();
        for k in 0..10u32 {
            wrecked.flip(k * 2);
        }
        assert_eq!(clf.classify(&wrecked).unwrap(), Motif::Mixed);
    }

    #[test]
    fn boundary_detector_pins_the_toy_staircase() {
        let step = vec![
            (1.7, 0.0),
            (1.8, 0.0),
            (1.9, 0.0),
            (2.0, 0.5),
            (2.1, 0.5),
            (2.2, 0.5),
        ];
        let found = detect_phase_boundary(&step, BOUNDARY_PROMINENCE).unwrap();
        assert_eq!(found.len(), 1);
        assert!((found[0] - 1.95).abs() < 1e-12);

        // Sign flips and input order do not matter.
        let flipped: Vec<(f64, f64)> = step.iter().map(|&(h, m)| (h, -m)).collect();
        assert_eq!(detect_phase_boundary(&flipped, BOUNDARY_PROMINENCE).unwrap(), found);
        let mut shuffled = step.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 5);
        assert_eq!(detect_phase_boundary(&shuffled, BOUNDARY_PROMINENCE).unwrap(), found);

        // A two-step staircase reports both risers in order.
        let two = vec![
            (1.7, 0.0),
            (1.9, 0.0),
            (2.0, 0.5),
            (3.9, 0.5),
            (4.2, 1.0),
            (4.4, 1.0),
        ];
        let found = detect_phase_boundary(&two, BOUNDARY_PROMINENCE).unwrap();
        assert_eq!(found.len(), 2);
        assert!((found[0] - 1.95).abs() < 1e-12);
        assert!((found[1] - 4.05).abs() < 1e-12);

        // Noise below the prominence threshold stays quiet.
        let wiggle = vec![(1.0, 0.000), (1.1, 0.002), (1.2, 0.000), (1.3, 0.003)];
        assert!(detect_phase_boundary(&wiggle, BOUNDARY_PROMINENCE)
            .unwrap()
            .is_empty());

        // Degenerate inputs error.
        assert!(detect_phase_boundary(&step[..2], BOUNDARY_PROMINENCE).is_err());
        let dup = vec![(1.0, 0.0), (1.0, 0.1), (2.0, 0.2)];
        assert!(detect_phase_boundary(&dup, BOUNDARY_PROMINENCE).is_err());
    }

    #[test]
    fn cut_walks_the_high_symmetry_path() {
        let lat = SSLattice::periodic(1, 3).unwrap();
        let grid = SFGrid::for_lattice(&lat).unwrap();
        let [neel, _] = neel_configs(&lat);
        let s = structure_factor(&lat, &grid, &[neel]).unwrap();
        let cut = sf_cut(&grid, &s, 64).unwrap();
        assert_eq!(cut.len(), 64);
        for w in cut.windows(2) {
            assert!(w[1].path > w[0].path);
        }
        assert!(cut[0].s.abs() < 1e-9, "S(0,0) of a zero-m state");
        let last = cut.last().unwrap();
        assert!(q_distance((last.qx, last.qy), (PI, PI)) < 1e-9);
        assert!((last.s - lat.n_live() as f64).abs() < 1e-9);
        for p in &cut {
            let idx = grid.nearest((p.qx, p.qy));
            assert!(q_distance(grid.points()[idx], (p.qx, p.qy)) < 1e-9);
        }
        assert!(sf_cut(&grid, &s, 1).is_err());
        assert!(sf_cut(&grid, &s[..3], 64).is_err());
    }

    #[test]
    fn serialization_shapes_hold() {
        // Rectangular grids serialize as a matrix with axis headers.
        let open = SSLattice::open(2, 1).unwrap();
        let grid = SFGrid::for_lattice(&open).unwrap();
        let (kx, ky) = match grid.kind {
            GridKind::Rect { kx, ky } => (kx, ky),
            _ => unreachable!(),
        };
        let values: Vec<f64> = (0..grid.len()).map(|k| k as f64).collect();
        let csv = grid.to_csv(&values).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), ky + 1);
        assert!(lines[0].starts_with("qy\\qx,"));
        assert_eq!(lines[0].split(',').count(), kx + 1);

        // Tilted grids serialize in long form.
        let torus = SSLattice::periodic(1, 2).unwrap();
        let tg = SFGrid::for_lattice(&torus).unwrap();
        let tv: Vec<f64> = vec![0.5; tg.len()];
        let tcsv = tg.to_csv(&tv).unwrap();
        let tlines: Vec<&str> = tcsv.lines().collect();
        assert_eq!(tlines[0], "qx,qy,s");
        assert_eq!(tlines.len(), tg.len() + 1);
        assert!(grid.to_csv(&values[..2]).is_err());

        // Phase-diagram rows carry the motif names.
        let mut pd = PhaseDiagramGrid::new();
        pd.push(PhasePoint {
            j2_over_j1: 1.0,
            hz: 3.5,
            m: -1.0 / 3.0,
            energy: -60.0,
            motif: Motif::Plateau(2),
        });
        pd.push(PhasePoint {
            j2_over_j1: 0.5,
            hz: 0.1,
            m: 0.0,
            energy: -36.0,
            motif: Motif::Neel,
        });
        let csv = pd.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "j2_over_j1,hz,m,energy,dominant_motif");
        assert!(lines[1].ends_with(",plateau-2"));
        assert!(lines[2].ends_with(",neel"));

        // Energy rescaling anchors the minimum at zero.
        assert_eq!(rescale_energies(&[3.0, 1.0, 4.0]), vec![2.0, 0.0, 3.0]);
        assert!(rescale_energies(&[]).is_empty());
    }

    #[test]
    fn ground_curve_feeds_the_detector() {
        // On the 16-spin torus the checkerboard survives until saturation;
        // the exact curve has a single riser.
        let lat = SSLattice::periodic(1, 2).unwrap();
        let fields: Vec<f64> = (0..8).map(|k| 4.0 + 0.5 * k as f64).collect();
        let curve = ground_magnetization_curve(&lat, 1.0, 1.0, &fields).unwrap();
        let found = detect_phase_boundary(&curve, BOUNDARY_PROMINENCE).unwrap();
        assert!(!found.is_empty());
        for b in &found {
            assert!(*b > 4.0 && *b < 7.5, "boundary at {b}");
        }
    }
}
