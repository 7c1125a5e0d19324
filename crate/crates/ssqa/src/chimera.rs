//! Chimera hardware graph, the half-cell embedding, chi compensation,
//! disorder injection, flux-offset calibration, and sample decoding.
//!
//! Geometry conventions, fixed once and used everywhere:
//! - Qubit id: `((r*cols + c)*2 + u)*4 + k` for cell `(r, c)`, shore
//!   `u in {0, 1}` and shore index `k in 0..4`.
//! - Shore 0 couples vertically (row to row), shore 1 horizontally.
//! - Each Chimera cell hosts one logical dimer as two 4-qubit cyclic chains.
//!   Within cell `(r, c)` the shore-0 qubits are split by the partition
//!   `PART[r % 2]` and the shore-1 qubits by `PART[c % 2]`; chain 0 takes the
//!   first class of each, chain 1 the second. Alternating the partitions by
//!   cell parity guarantees that the chains of adjacent cells share exactly
//!   one shore index, which is where a square bond's single external coupler
//!   lives.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution as _;

use crate::error::SsError;
use crate::lattice::{BoundaryKind, CouplingParams, SSLattice, SpinConfig};
use crate::problem::IsingProblem;

/// Shore size of the Chimera cell (K4,4).
pub const SHORE: u32 = 4;
/// Default ferromagnetic chain coupling.
pub const DEFAULT_J3: f64 = -1.0;
/// Default device limit for |h|.
pub const DEFAULT_H_RANGE: f64 = 2.0;
/// Default device limit for |J|.
pub const DEFAULT_J_RANGE: f64 = 1.0;
/// Calibration declares a qubit balanced when |<sigma>| is at most this.
pub const CALIBRATION_TOL: f64 = 0.05;

/// Shore-index partitions; the active one alternates with cell parity.
const PART: [[[u32; 2]; 2]; 2] = [[[0, 1], [2, 3]], [[0, 2], [1, 3]]];

fn canon(a: u32, b: u32) -> (u32, u32) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Coupler classification on the ideal graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplerKind {
    /// Within one cell (K4,4 edge).
    Internal,
    /// Between like-indexed shore qubits of adjacent cells.
    External,
}

/// Chimera hardware graph: a `rows x cols` grid of K4,4 cells, with optional
/// dead qubits and dead couplers.
#[derive(Clone, Debug)]
pub struct ChimeraGraph {
    rows: usize,
    cols: usize,
    dead_qubits: BTreeSet<u32>,
    dead_couplers: BTreeSet<(u32, u32)>,
}

/// Build a Chimera graph, validating that the dead sets lie inside the ideal
/// graph.
pub fn build_chimera(
    rows: usize,
    cols: usize,
    dead_qubits: &[u32],
    dead_couplers: &[(u32, u32)],
) -> Result<ChimeraGraph, SsError> {
    if rows == 0 || cols == 0 {
        return Err(SsError::Geometry("chimera grid must be non-empty".into()));
    }
    let g = ChimeraGraph {
        rows,
        cols,
        dead_qubits: BTreeSet::new(),
        dead_couplers: BTreeSet::new(),
    };
    let mut dq = BTreeSet::new();
    for &q in dead_qubits {
        if q as usize >= g.n_qubits() {
            return Err(SsError::Geometry(format!(
                "dead qubit {q} outside the {rows}x{cols} graph"
            )));
        }
        dq.insert(q);
    }
    let mut dc = BTreeSet::new();
    for &(a, b) in dead_couplers {
        if !g.is_ideal_coupler(a, b) {
            return Err(SsError::Geometry(format!(
                "dead coupler ({a}, {b}) is not a coupler of the ideal graph"
            )));
        }
        dc.insert(canon(a, b));
    }
    Ok(ChimeraGraph {
        dead_qubits: dq,
        dead_couplers: dc,
        ..g
    })
}

impl ChimeraGraph {
    /// Ideal (defect-free) graph.
    pub fn new(rows: usize, cols: usize) -> Result<Self, SsError> {
        build_chimera(rows, cols, &[], &[])
    }

    /// Parse a defect list (one entry per line: a single id for a dead qubit,
    /// a pair for a dead coupler; `#` starts a comment) and build the graph.
    pub fn from_defect_text(rows: usize, cols: usize, text: &str) -> Result<Self, SsError> {
        let mut qubits = Vec::new();
        let mut couplers = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<u32>()
                    .map_err(|_| SsError::Parse(format!("defect line {}: bad id {s:?}", ln + 1)))
            };
            match fields.as_slice() {
                [q] => qubits.push(parse(q)?),
                [a, b] => couplers.push((parse(a)?, parse(b)?)),
                _ => {
                    return Err(SsError::Parse(format!(
                        "defect line {}: expected one or two ids",
                        ln + 1
                    )))
                }
            }
        }
        build_chimera(rows, cols, &qubits, &couplers)
    }

    /// Defect list in the format accepted by `from_defect_text`.
    pub fn to_defect_text(&self) -> String {
        let mut out = String::new();
        for q in &self.dead_qubits {
            out.push_str(&format!("{q}\n"));
        }
        for (a, b) in &self.dead_couplers {
            out.push_str(&format!("{a} {b}\n"));
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Ideal qubit count (dead qubits included).
    pub fn n_qubits(&self) -> usize {
        self.rows * self.cols * 8
    }

    pub fn n_live_qubits(&self) -> usize {
        self.n_qubits() - self.dead_qubits.len()
    }

    pub fn dead_qubits(&self) -> &BTreeSet<u32> {
        &self.dead_qubits
    }

    pub fn dead_couplers(&self) -> &BTreeSet<(u32, u32)> {
        &self.dead_couplers
    }

    /// Qubit id for cell `(r, c)`, shore `u`, shore index `k`.
    pub fn qubit(&self, r: usize, c: usize, u: u32, k: u32) -> u32 {
        assert!(r < self.rows && c < self.cols && u < 2 && k < SHORE);
        (((r * self.cols + c) * 2 + u as usize) * 4 + k as usize) as u32
    }

    /// Inverse of `qubit`: `(row, col, shore, index)`.
    pub fn coords(&self, q: u32) -> (usize, usize, u32, u32) {
        assert!((q as usize) < self.n_qubits());
        let k = q % 4;
        let cu = q / 4;
        let u = cu % 2;
        let cell = (cu / 2) as usize;
        (cell / self.cols, cell % self.cols, u, k)
    }

    pub fn is_live_qubit(&self, q: u32) -> bool {
        (q as usize) < self.n_qubits() && !self.dead_qubits.contains(&q)
    }

    /// Whether `(a, b)` is an edge of the ideal graph.
    pub fn is_ideal_coupler(&self, a: u32, b: u32) -> bool {
        if a == b || a as usize >= self.n_qubits() || b as usize >= self.n_qubits() {
            return false;
        }
        let (ra, ca, ua, ka) = self.coords(a);
        let (rb, cb, ub, kb) = self.coords(b);
        if ra == rb && ca == cb {
            return ua != ub;
        }
        if ua != ub || ka != kb {
            return false;
        }
        match ua {
            0 => ca == cb && ra.abs_diff(rb) == 1,
            _ => ra == rb && ca.abs_diff(cb) == 1,
        }
    }

    /// Whether `(a, b)` is usable: an ideal coupler, not dead, with both
    /// endpoints alive.
    pub fn is_live_coupler(&self, a: u32, b: u32) -> bool {
        self.is_ideal_coupler(a, b)
            && self.is_live_qubit(a)
            && self.is_live_qubit(b)
            && !self.dead_couplers.contains(&canon(a, b))
    }

    pub fn coupler_kind(&self, a: u32, b: u32) -> Option<CouplerKind> {
        if !self.is_ideal_coupler(a, b) {
            return None;
        }
        let (ra, ca, ..) = self.coords(a);
        let (rb, cb, ..) = self.coords(b);
        if ra == rb && ca == cb {
            Some(CouplerKind::Internal)
        } else {
            Some(CouplerKind::External)
        }
    }

    /// All live couplers, canonically ordered.
    pub fn live_couplers(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                for ka in 0..SHORE {
                    let a = self.qubit(r, c, 0, ka);
                    for kb in 0..SHORE {
                        let b = self.qubit(r, c, 1, kb);
                        if self.is_live_coupler(a, b) {
                            out.push(canon(a, b));
                        }
                    }
                }
                for k in 0..SHORE {
                    if r + 1 < self.rows {
                        let a = self.qubit(r, c, 0, k);
                        let b = self.qubit(r + 1, c, 0, k);
                        if self.is_live_coupler(a, b) {
                            out.push(canon(a, b));
                        }
                    }
                    if c + 1 < self.cols {
                        let a = self.qubit(r, c, 1, k);
                        let b = self.qubit(r, c + 1, 1, k);
                        if self.is_live_coupler(a, b) {
                            out.push(canon(a, b));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn n_internal_couplers(&self) -> usize {
        self.live_couplers()
            .iter()
            .filter(|&&(a, b)| self.coupler_kind(a, b) == Some(CouplerKind::Internal))
            .count()
    }

    pub fn n_external_couplers(&self) -> usize {
        self.live_couplers()
            .iter()
            .filter(|&&(a, b)| self.coupler_kind(a, b) == Some(CouplerKind::External))
            .count()
    }
}

/// Half-cell embedding of a logical lattice into a Chimera graph.
///
/// Each logical site owns an ordered 4-qubit cyclic chain; each logical dimer
/// bond owns the 8 internal couplers between its two chains; each logical
/// square bond owns exactly 1 external coupler.
#[derive(Clone, Debug)]
pub struct Embedding {
    graph: ChimeraGraph,
    /// Logical lattice with hardware-induced defects merged in.
    logical: SSLattice,
    /// Logical sites excised because their chains touched dead hardware.
    hardware_defects: Vec<u32>,
    chain_map: Vec<Option<[u32; 4]>>,
    bond_map: BTreeMap<(u32, u32), Vec<(u32, u32)>>,
    j3: f64,
}

/// Contracted checkerboard coordinates of a logical site's dimer, plus the
/// site's side within the dimer (0 for the even slot, 1 for the odd slot).
fn dimer_coords(lattice: &SSLattice, site: u32) -> (usize, usize, usize) {
    let (cells_x, _) = lattice.cells();
    let cell = site as usize / 8;
    let slot = site as usize % 8;
    let d = slot / 2;
    let (ci, cj) = (cell % cells_x, cell / cells_x);
    let p = 2 * ci + usize::from(d == 1 || d == 2);
    let q = 2 * cj + usize::from(d == 2 || d == 3);
    (p, q, slot % 2)
}

/// The 4-qubit cyclic chain for a logical site, given its dimer's Chimera
/// cell `(r, c)` and its side within the dimer.
fn chain_qubits(graph: &ChimeraGraph, r: usize, c: usize, side: usize) -> [u32; 4] {
    let lp = PART[r % 2][side];
    let rp = PART[c % 2][side];
    [
        graph.qubit(r, c, 0, lp[0]),
        graph.qubit(r, c, 1, rp[0]),
        graph.qubit(r, c, 0, lp[1]),
        graph.qubit(r, c, 1, rp[1]),
    ]
}

fn chain_couplers(chain: &[u32; 4]) -> [(u32, u32); 4] {
    [
        canon(chain[0], chain[1]),
        canon(chain[1], chain[2]),
        canon(chain[2], chain[3]),
        canon(chain[3], chain[0]),
    ]
}

/// Map a logical lattice onto Chimera hardware, one dimer per cell.
///
/// Logical sites whose chains touch dead qubits or dead chain couplers are
/// excised as hardware defects. A dead coupler under a bond mapping excises
/// both endpoint sites (conservative: the remaining embedding stays exact).
/// Periodic lattices are rejected: their wrap bonds have no hardware
/// counterpart on the open Chimera grid.
pub fn half_cell_embed(lattice: &SSLattice, graph: &ChimeraGraph) -> Result<Embedding, SsError> {
    if lattice.boundary_kind() != BoundaryKind::Open {
        return Err(SsError::Embedding(
            "periodic lattices need wrap couplers the hardware grid does not have".into(),
        ));
    }
    let (cx, cy) = lattice.cells();
    if graph.cols < 2 * cx || graph.rows < 2 * cy {
        return Err(SsError::Embedding(format!(
            "insufficient hardware area: {cx}x{cy} cells need a {}x{} chimera, got {}x{}",
            2 * cy,
            2 * cx,
            graph.rows,
            graph.cols
        )));
    }

    let n = lattice.n_sites();
    let place = |site: u32| {
        let (p, q, side) = dimer_coords(lattice, site);
        (chain_qubits(graph, q, p, side), q, p)
    };

    // Pass 1: chains, and defects induced by dead qubits or chain couplers.
    let mut defects: BTreeSet<u32> = lattice.defects().iter().copied().collect();
    for site in 0..n as u32 {
        if !lattice.is_alive(site) {
            continue;
        }
        let (chain, _, _) = place(site);
        let chain_ok = chain.iter().all(|&q| graph.is_live_qubit(q))
            && chain_couplers(&chain)
                .iter()
                .all(|&(a, b)| graph.is_live_coupler(a, b));
        if !chain_ok {
            defects.insert(site);
        }
    }

    // Pass 2: dead couplers under bond mappings excise both endpoints.
    for &(a, b, kind_dimer) in lattice
        .square_bonds()
        .iter()
        .map(|&(a, b)| (a, b, false))
        .chain(lattice.dimer_bonds().iter().map(|&(a, b)| (a, b, true)))
        .collect::<Vec<_>>()
        .iter()
    {
        if defects.contains(&a) || defects.contains(&b) {
            continue;
        }
        let (ca, ..) = place(a);
        let (cb, ..) = place(b);
        let couplers = if kind_dimer {
            dimer_couplers(&ca, &cb)
        } else {
            vec![square_coupler(lattice, graph, a, b)?]
        };
        if couplers.iter().any(|&(x, y)| !graph.is_live_coupler(x, y)) {
            defects.insert(a);
            defects.insert(b);
        }
    }

    let all_defects: Vec<u32> = defects.iter().copied().collect();
    let hardware_defects: Vec<u32> = all_defects
        .iter()
        .copied()
        .filter(|d| !lattice.defects().contains(d))
        .collect();
    let (bx, by) = lattice.cells();
    let logical = SSLattice::build(bx, by, BoundaryKind::Open, &all_defects)?;

    // Pass 3: final chain and bond maps over the merged lattice, with a
    // global audit that no physical coupler is claimed twice.
    let mut chain_map = vec![None; n];
    let mut used: BTreeSet<(u32, u32)> = BTreeSet::new();
    let claim = |set: &mut BTreeSet<(u32, u32)>, cp: (u32, u32)| -> Result<(), SsError> {
        if !set.insert(cp) {
            return Err(SsError::Embedding(format!(
                "coupler ({}, {}) claimed twice by the embedding",
                cp.0, cp.1
            )));
        }
        Ok(())
    };
    for site in 0..n as u32 {
        if !logical.is_alive(site) {
            continue;
        }
        let (chain, _, _) = place(site);
        for cp in chain_couplers(&chain) {
            claim(&mut used, cp)?;
        }
        chain_map[site as usize] = Some(chain);
    }
    let mut bond_map = BTreeMap::new();
    for &(a, b) in logical.dimer_bonds() {
        let ca = chain_map[a as usize].unwrap();
        let cb = chain_map[b as usize].unwrap();
        let couplers = dimer_couplers(&ca, &cb);
        debug_assert_eq!(couplers.len(), 8);
        for &cp in &couplers {
            claim(&mut used, cp)?;
        }
        bond_map.insert(canon(a, b), couplers);
    }
    for &(a, b) in logical.square_bonds() {
        let cp = square_coupler(&logical, graph, a, b)?;
        claim(&mut used, cp)?;
        bond_map.insert(canon(a, b), vec![cp]);
    }
    debug_assert_eq!(
        used.len(),
        4 * logical.n_live() + 8 * logical.n_dimer_bonds() + logical.n_square_bonds()
    );

    Ok(Embedding {
        graph: graph.clone(),
        logical,
        hardware_defects,
        chain_map,
        bond_map,
        j3: DEFAULT_J3,
    })
}

/// The 8 internal couplers between the two chains of one cell.
fn dimer_couplers(ca: &[u32; 4], cb: &[u32; 4]) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(8);
    for &x in ca {
        for &y in cb {
            // Opposite shores couple; chain order alternates shores, so
            // parity of the position would work too, but the id encodes it.
            let ux = (x / 4) % 2;
            let uy = (y / 4) % 2;
            if ux != uy {
                out.push(canon(x, y));
            }
        }
    }
    out
}

/// The unique external coupler carrying a logical square bond.
fn square_coupler(
    lattice: &SSLattice,
    graph: &ChimeraGraph,
    a: u32,
    b: u32,
) -> Result<(u32, u32), SsError> {
    let (pa, qa, sa) = dimer_coords(lattice, a);
    let (pb, qb, sb) = dimer_coords(lattice, b);
    let (dp, dq) = (pa.abs_diff(pb), qa.abs_diff(qb));
    assert!(
        dp + dq == 1,
        "square bond ({a}, {b}) joins non-adjacent dimers ({pa},{qa}) and ({pb},{qb})"
    );
    // Horizontal adjacency rides shore 1, vertical rides shore 0.
    let (shore, ka, kb) = if dp == 1 {
        (1, PART[pa % 2][sa], PART[pb % 2][sb])
    } else {
        (0, PART[qa % 2][sa], PART[qb % 2][sb])
    };
    let shared: Vec<u32> = ka.iter().copied().filter(|k| kb.contains(k)).collect();
    assert!(
        shared.len() == 1,
        "square bond ({a}, {b}) has no unique shared shore index"
    );
    let k = shared[0];
    let qa_aim = graph.qubit(qa, pa, shore, k);
    let qb_aim = graph.qubit(qb, pb, shore, k);
    Ok(canon(qa_aim, qb_aim))
}

impl Embedding {
    /// Logical lattice after hardware defects were merged in.
    pub fn logical_lattice(&self) -> &SSLattice {
        &self.logical
    }

    pub fn graph(&self) -> &ChimeraGraph {
        &self.graph
    }

    /// Logical sites excised because of dead hardware (input defects not
    /// included).
    pub fn hardware_defects(&self) -> &[u32] {
        &self.hardware_defects
    }

    pub fn chain(&self, site: u32) -> Option<&[u32; 4]> {
        self.chain_map.get(site as usize).and_then(|c| c.as_ref())
    }

    /// Physical couplers carrying a logical bond (8 for a dimer, 1 for a
    /// square bond).
    pub fn bond_couplers(&self, a: u32, b: u32) -> Option<&[(u32, u32)]> {
        self.bond_map.get(&canon(a, b)).map(|v| v.as_slice())
    }

    pub fn j3(&self) -> f64 {
        self.j3
    }

    pub fn with_j3(mut self, j3: f64) -> Self {
        self.j3 = j3;
        self
    }

    /// All qubits used by live chains.
    pub fn used_qubits(&self) -> BTreeSet<u32> {
        self.chain_map
            .iter()
            .flatten()
            .flat_map(|c| c.iter().copied())
            .collect()
    }

    /// Chain-to-qubit dump, one `site: q1 q2 q3 q4` line per live site,
    /// defects as comments.
    pub fn to_text(&self) -> String {
        let (cx, cy) = self.logical.cells();
        let mut out = format!(
            "# half-cell embedding of {cx}x{cy} open lattice into {}x{} chimera, j3 {}\n",
            self.graph.rows, self.graph.cols, self.j3
        );
        for site in 0..self.logical.n_sites() as u32 {
            match self.chain(site) {
                Some(c) => out.push_str(&format!("{site}: {} {} {} {}\n", c[0], c[1], c[2], c[3])),
                None => out.push_str(&format!("# defect {site}\n")),
            }
        }
        out
    }

    /// Map qubit id to the logical site whose chain contains it.
    pub fn site_of_qubit(&self) -> BTreeMap<u32, u32> {
        let mut out = BTreeMap::new();
        for (site, chain) in self.chain_map.iter().enumerate() {
            if let Some(c) = chain {
                for &q in c {
                    out.insert(q, site as u32);
                }
            }
        }
        out
    }
}

/// A fully specified problem on the hardware graph.
#[derive(Clone, Debug)]
pub struct PhysicalProblem {
    graph: ChimeraGraph,
    pub h: BTreeMap<u32, f64>,
    pub j: BTreeMap<(u32, u32), f64>,
    pub chi_b: f64,
    h_range: f64,
    j_range: f64,
}

impl PhysicalProblem {
    pub fn new(graph: ChimeraGraph, chi_b: f64) -> Self {
        PhysicalProblem {
            graph,
            h: BTreeMap::new(),
            j: BTreeMap::new(),
            chi_b,
            h_range: DEFAULT_H_RANGE,
            j_range: DEFAULT_J_RANGE,
        }
    }

    pub fn graph(&self) -> &ChimeraGraph {
        &self.graph
    }

    pub fn with_ranges(mut self, h_range: f64, j_range: f64) -> Self {
        self.h_range = h_range;
        self.j_range = j_range;
        self
    }

    pub fn ranges(&self) -> (f64, f64) {
        (self.h_range, self.j_range)
    }

    /// Error if any programmed value exceeds the device range.
    pub fn check_ranges(&self) -> Result<(), SsError> {
        for (&q, &v) in &self.h {
            if v.abs() > self.h_range + 1e-12 {
                return Err(SsError::DeviceRange(format!(
                    "h[{q}] = {v} exceeds |h| <= {}",
                    self.h_range
                )));
            }
        }
        for (&(a, b), &v) in &self.j {
            if v.abs() > self.j_range + 1e-12 {
                return Err(SsError::DeviceRange(format!(
                    "j[{a},{b}] = {v} exceeds |j| <= {}",
                    self.j_range
                )));
            }
        }
        Ok(())
    }

    /// Dense Ising view: (problem, qubit id per dense index).
    pub fn to_ising(&self) -> Result<(IsingProblem, Vec<u32>), SsError> {
        let mut ids: BTreeSet<u32> = self.h.keys().copied().collect();
        for &(a, b) in self.j.keys() {
            ids.insert(a);
            ids.insert(b);
        }
        let ids: Vec<u32> = ids.into_iter().collect();
        let index: BTreeMap<u32, u32> = ids
            .iter()
            .enumerate()
            .map(|(i, &q)| (q, i as u32))
            .collect();
        let h = ids.iter().map(|q| *self.h.get(q).unwrap_or(&0.0)).collect();
        let couplers = self
            .j
            .iter()
            .map(|(&(a, b), &v)| (index[&a], index[&b], v))
            .collect();
        Ok((IsingProblem::new(ids.len(), h, couplers)?, ids))
    }

    /// Three-section text form: metadata, per-qubit fields, couplers.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# physical-problem chimera {} {} chi_b {} ranges {} {}\n",
            self.graph.rows, self.graph.cols, self.chi_b, self.h_range, self.j_range
        );
        for q in &self.graph.dead_qubits {
            out.push_str(&format!("# dead-qubit {q}\n"));
        }
        for (a, b) in &self.graph.dead_couplers {
            out.push_str(&format!("# dead-coupler {a} {b}\n"));
        }
        out.push_str("[qubits]\n");
        for (q, v) in &self.h {
            out.push_str(&format!("{q} {v}\n"));
        }
        out.push_str("[couplers]\n");
        for ((a, b), v) in &self.j {
            out.push_str(&format!("{a} {b} {v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SsError> {
        let mut lines = text.lines();
        let head = lines
            .next()
            .ok_or_else(|| SsError::Parse("empty physical-problem text".into()))?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() != 10 || fields[0] != "#" || fields[1] != "physical-problem" {
            return Err(SsError::Parse("bad physical-problem header".into()));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| SsError::Parse(format!("bad number {s:?}")))
        };
        let rows = num(fields[3])? as usize;
        let cols = num(fields[4])? as usize;
        let chi_b = num(fields[6])?;
        let (h_range, j_range) = (num(fields[8])?, num(fields[9])?);
        let mut dead_q = Vec::new();
        let mut dead_c = Vec::new();
        let mut h = BTreeMap::new();
        let mut j = BTreeMap::new();
        let mut section = "";
        for raw in lines {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# dead-qubit ") {
                dead_q.push(
                    rest.trim()
                        .parse::<u32>()
                        .map_err(|_| SsError::Parse("bad dead-qubit id".into()))?,
                );
                continue;
            }
            if let Some(rest) = line.strip_prefix("# dead-coupler ") {
                let ids: Vec<&str> = rest.split_whitespace().collect();
                if ids.len() != 2 {
                    return Err(SsError::Parse("bad dead-coupler line".into()));
                }
                dead_c.push((
                    ids[0]
                        .parse::<u32>()
                        .map_err(|_| SsError::Parse("bad dead-coupler id".into()))?,
                    ids[1]
                        .parse::<u32>()
                        .map_err(|_| SsError::Parse("bad dead-coupler id".into()))?,
                ));
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            if line == "[qubits]" || line == "[couplers]" {
                section = if line == "[qubits]" { "q" } else { "c" };
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match section {
                "q" if parts.len() == 2 => {
                    h.insert(
                        parts[0]
                            .parse::<u32>()
                            .map_err(|_| SsError::Parse("bad qubit id".into()))?,
                        num(parts[1])?,
                    );
                }
                "c" if parts.len() == 3 => {
                    let a = parts[0]
                        .parse::<u32>()
                        .map_err(|_| SsError::Parse("bad qubit id".into()))?;
                    let b = parts[1]
                        .parse::<u32>()
                        .map_err(|_| SsError::Parse("bad qubit id".into()))?;
                    j.insert(canon(a, b), num(parts[2])?);
                }
                _ => return Err(SsError::Parse(format!("unexpected line {line:?}"))),
            }
        }
        let graph = build_chimera(rows, cols, &dead_q, &dead_c)?;
        Ok(PhysicalProblem {
            graph,
            h,
            j,
            chi_b,
            h_range,
            j_range,
        })
    }
}

/// Exact logical chi multipliers for the half-cell geometry. The forward
/// direction maps per-coupler programmed values to the effective logical
/// problem seen after chain contraction; `compile_physical` inverts it.
///
/// With chain coupling J3, per-coupler dimer value c2, per-bond square values
/// c1 and per-chain raw fields u:
///   dimer bond:  L = 8 c2 (1 + 4 chi J3)
///   square bond: L_b = (1 + 4 chi J3) c1_b + 2 chi c2 * sum(partner c1)
///   field:       L_A = u_A (1 + 2 chi J3) + 2 chi c2 u_partner(A)
///                      + (chi/4) * sum over square bonds at A of c1_b u_other
struct ChiModel<'a> {
    emb: &'a Embedding,
    chi: f64,
    c2: f64,
}

impl<'a> ChiModel<'a> {
    /// Square bonds whose coupler leaks into bond `(a, b)`: the bonds from
    /// each endpoint's dimer partner to the opposite endpoint.
    fn partner_bonds(&self, a: u32, b: u32) -> Vec<(u32, u32)> {
        let lat = &self.emb.logical;
        let mut out = Vec::new();
        let squares: &BTreeMap<(u32, u32), Vec<(u32, u32)>> = &self.emb.bond_map;
        // A partner's pairing with the opposite endpoint can only be a square
        // bond (its dimer partner is already taken), so the map lookup is
        // unambiguous.
        if let Some(pa) = lat.dimer_partner(a) {
            let key = canon(pa, b);
            if squares.contains_key(&key) {
                out.push(key);
            }
        }
        if let Some(pb) = lat.dimer_partner(b) {
            let key = canon(a, pb);
            if squares.contains_key(&key) {
                out.push(key);
            }
        }
        out
    }

    /// Solve for per-bond square couplers that contract to `j1` everywhere.
    fn solve_c1(&self, j1: f64, j3: f64) -> BTreeMap<(u32, u32), f64> {
        let lat = &self.emb.logical;
        let diag = 1.0 + 4.0 * self.chi * j3;
        let mut c1: BTreeMap<(u32, u32), f64> = lat
            .square_bonds()
            .iter()
            .map(|&(a, b)| (canon(a, b), j1 / diag))
            .collect();
        for _ in 0..200 {
            let mut max_delta = 0.0f64;
            let keys: Vec<(u32, u32)> = c1.keys().copied().collect();
            for key in keys {
                let leak: f64 = self
                    .partner_bonds(key.0, key.1)
                    .iter()
                    .map(|p| c1[p])
                    .sum();
                let next = (j1 - 2.0 * self.chi * self.c2 * leak) / diag;
                let prev = c1.insert(key, next).unwrap();
                max_delta = max_delta.max((next - prev).abs());
            }
            if max_delta < 1e-15 {
                break;
            }
        }
        c1
    }

    /// Solve for per-chain raw fields that contract to `hz` everywhere.
    fn solve_u(
        &self,
        hz: f64,
        j3: f64,
        c1: &BTreeMap<(u32, u32), f64>,
    ) -> BTreeMap<u32, f64> {
        let lat = &self.emb.logical;
        let diag = 1.0 + 2.0 * self.chi * j3;
        let live: Vec<u32> = (0..lat.n_sites() as u32)
            .filter(|&s| lat.is_alive(s))
            .collect();
        let mut u: BTreeMap<u32, f64> = live.iter().map(|&s| (s, hz / diag)).collect();
        for _ in 0..200 {
            let mut max_delta = 0.0f64;
            for &s in &live {
                let partner_term = match lat.dimer_partner(s) {
                    Some(p) => 2.0 * self.chi * self.c2 * u[&p],
                    None => 0.0,
                };
                let mut square_term = 0.0;
                for &nb in lat.square_neighbors(s) {
                    let key = canon(s, nb);
                    square_term += self.chi / 4.0 * c1[&key] * u[&nb];
                }
                let next = (hz - partner_term - square_term) / diag;
                let prev = u.insert(s, next).unwrap();
                max_delta = max_delta.max((next - prev).abs());
            }
            if max_delta < 1e-15 {
                break;
            }
        }
        u
    }
}

fn place_values(
    emb: &Embedding,
    c1: &BTreeMap<(u32, u32), f64>,
    c2: f64,
    u: &BTreeMap<u32, f64>,
    chi_b: f64,
) -> PhysicalProblem {
    let mut out = PhysicalProblem::new(emb.graph.clone(), chi_b);
    let lat = &emb.logical;
    for site in 0..lat.n_sites() as u32 {
        if let Some(chain) = emb.chain(site) {
            let hq = u[&site] / 4.0;
            for &q in chain {
                out.h.insert(q, hq);
            }
            for cp in chain_couplers(chain) {
                out.j.insert(cp, emb.j3);
            }
        }
    }
    for &(a, b) in lat.dimer_bonds() {
        for &cp in emb.bond_couplers(a, b).unwrap() {
            out.j.insert(cp, c2);
        }
    }
    for &(a, b) in lat.square_bonds() {
        let cp = emb.bond_couplers(a, b).unwrap()[0];
        out.j.insert(cp, c1[&canon(a, b)]);
    }
    out
}

/// Compile a logical problem to hardware with chi pre-correction: programmed
/// values are chosen so the chain-contracted problem seen after background
/// leakage equals the requested couplings at the embedding's conventional
/// scale (square j1 and field hz as given; dimer bonds at 8x the per-coupler
/// input, the half-cell multiplicity).
pub fn compile_physical(
    emb: &Embedding,
    params: &CouplingParams,
    chi_b: f64,
) -> Result<PhysicalProblem, SsError> {
    if chi_b.abs() >= 0.1 {
        return Err(SsError::Problem(format!(
            "chi_b = {chi_b} is outside the first-order regime (|chi_b| < 0.1)"
        )));
    }
    let c2 = params.j2 / (1.0 + 4.0 * chi_b * emb.j3);
    let model = ChiModel {
        emb,
        chi: chi_b,
        c2,
    };
    let c1 = model.solve_c1(params.j1, emb.j3);
    let u = model.solve_u(params.hz, emb.j3, &c1);
    let out = place_values(emb, &c1, c2, &u, chi_b);
    out.check_ranges()?;
    Ok(out)
}

/// Compile without pre-correction: raw placement of the inputs (square
/// couplers j1, every dimer coupler j2, chain couplers j3, hz/4 per qubit).
pub fn compile_physical_uncorrected(
    emb: &Embedding,
    params: &CouplingParams,
    chi_b: f64,
) -> Result<PhysicalProblem, SsError> {
    if chi_b.abs() >= 0.1 {
        return Err(SsError::Problem(format!(
            "chi_b = {chi_b} is outside the first-order regime (|chi_b| < 0.1)"
        )));
    }
    let lat = &emb.logical;
    let c1: BTreeMap<(u32, u32), f64> = lat
        .square_bonds()
        .iter()
        .map(|&(a, b)| (canon(a, b), params.j1))
        .collect();
    let u: BTreeMap<u32, f64> = (0..lat.n_sites() as u32)
        .filter(|&s| lat.is_alive(s))
        .map(|s| (s, params.hz))
        .collect();
    let out = place_values(emb, &c1, params.j2, &u, chi_b);
    out.check_ranges()?;
    Ok(out)
}

/// The device-perceived problem: couplings gain next-neighbor leakage
/// `J'_ik = J_ik + chi * sum_j J_ij J_jk` (including induced couplings
/// between previously uncoupled qubits) and fields gain
/// `h'_i = h_i + chi * sum_j J_ij h_j`.
///
/// The output describes effective physics rather than programmed values, so
/// it is exempt from the device range check.
pub fn apply_physical_chi(problem: &PhysicalProblem) -> PhysicalProblem {
    let chi = problem.chi_b;
    let mut adj: BTreeMap<u32, Vec<(u32, f64)>> = BTreeMap::new();
    for (&(a, b), &v) in &problem.j {
        adj.entry(a).or_default().push((b, v));
        adj.entry(b).or_default().push((a, v));
    }
    let mut h = problem.h.clone();
    for (&i, nbrs) in &adj {
        let gain: f64 = nbrs
            .iter()
            .map(|&(jq, v)| v * problem.h.get(&jq).copied().unwrap_or(0.0))
            .sum();
        if gain != 0.0 {
            *h.entry(i).or_insert(0.0) += chi * gain;
        }
    }
    let mut j = problem.j.clone();
    for nbrs in adj.values() {
        for (xi, &(x, vx)) in nbrs.iter().enumerate() {
            for &(y, vy) in nbrs.iter().skip(xi + 1) {
                let leak = chi * vx * vy;
                if leak != 0.0 {
                    *j.entry(canon(x, y)).or_insert(0.0) += leak;
                }
            }
        }
    }
    PhysicalProblem {
        graph: problem.graph.clone(),
        h,
        j,
        chi_b: chi,
        h_range: problem.h_range,
        j_range: problem.j_range,
    }
}

/// Chain-contract a physical problem back to logical couplings and fields.
/// Couplings between chains are summed qubit-pair-wise; entries between
/// logically unbonded chains (induced by leakage) appear in the map too.
pub fn contract_logical(
    emb: &Embedding,
    problem: &PhysicalProblem,
) -> (BTreeMap<(u32, u32), f64>, BTreeMap<u32, f64>) {
    let site_of = emb.site_of_qubit();
    let mut couplings: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for (&(a, b), &v) in &problem.j {
        let (sa, sb) = match (site_of.get(&a), site_of.get(&b)) {
            (Some(&x), Some(&y)) => (x, y),
            _ => continue,
        };
        if sa == sb {
            continue;
        }
        *couplings.entry(canon(sa, sb)).or_insert(0.0) += v;
    }
    let mut fields: BTreeMap<u32, f64> = BTreeMap::new();
    for (&q, &v) in &problem.h {
        if let Some(&s) = site_of.get(&q) {
            *fields.entry(s).or_insert(0.0) += v;
        }
    }
    (couplings, fields)
}

/// Add independent Gaussian perturbations to every field and coupler.
/// Deterministic for a given seed: fields are perturbed in ascending qubit
/// order, then couplers in ascending pair order.
pub fn inject_disorder(
    problem: &PhysicalProblem,
    seed: u64,
    sigma_h: f64,
    sigma_j: f64,
) -> Result<PhysicalProblem, SsError> {
    if sigma_h < 0.0 || sigma_j < 0.0 {
        return Err(SsError::Problem("disorder widths must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = problem.clone();
    if sigma_h > 0.0 {
        let dist = rand_distr::Normal::new(0.0, sigma_h)
            .map_err(|e| SsError::Problem(format!("bad disorder width: {e}")))?;
        for v in out.h.values_mut() {
            *v += dist.sample(&mut rng);
        }
    }
    if sigma_j > 0.0 {
        let dist = rand_distr::Normal::new(0.0, sigma_j)
            .map_err(|e| SsError::Problem(format!("bad disorder width: {e}")))?;
        for v in out.j.values_mut() {
            *v += dist.sample(&mut rng);
        }
    }
    Ok(out)
}

/// Result of flux-offset calibration.
#[derive(Clone, Debug)]
pub struct FluxCalibration {
    /// Per-qubit field offsets to add to the programmed problem.
    pub offsets: BTreeMap<u32, f64>,
    /// Largest |per-qubit mean magnetization| at the returned offsets.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Iteratively adjust per-qubit field offsets until every qubit's mean
/// magnetization under the sampler is within `CALIBRATION_TOL` of zero
/// (descent update `offset -= eta * <sigma>`). Non-convergence is reported in
/// the result, not as an error.
pub fn calibrate_flux_offsets<F>(
    mut sampler: F,
    problem: &PhysicalProblem,
    max_iter: usize,
) -> Result<FluxCalibration, SsError>
where
    F: FnMut(&PhysicalProblem) -> Result<Vec<BTreeMap<u32, i8>>, SsError>,
{
    const ETA: f64 = 0.5;
    let mut offsets: BTreeMap<u32, f64> = problem.h.keys().map(|&q| (q, 0.0)).collect();
    let mut iterations = 0;
    loop {
        let mut shifted = problem.clone();
        for (q, v) in shifted.h.iter_mut() {
            *v += offsets[q];
        }
        let samples = sampler(&shifted)?;
        if samples.is_empty() {
            return Err(SsError::Problem("sampler returned no samples".into()));
        }
        let mut residual = 0.0f64;
        let mut means: BTreeMap<u32, f64> = BTreeMap::new();
        for (&q, _) in &problem.h {
            let mut acc = 0.0;
            for s in &samples {
                let v = s.get(&q).copied().ok_or_else(|| {
                    SsError::Problem(format!("sample missing qubit {q}"))
                })?;
                acc += f64::from(v);
            }
            let m = acc / samples.len() as f64;
            residual = residual.max(m.abs());
            means.insert(q, m);
        }
        if residual <= CALIBRATION_TOL || iterations >= max_iter {
            return Ok(FluxCalibration {
                offsets,
                residual,
                iterations,
                converged: residual <= CALIBRATION_TOL,
            });
        }
        for (q, o) in offsets.iter_mut() {
            *o -= ETA * means[q];
        }
        iterations += 1;
    }
}

/// Chains that were not unanimous in a decoded sample.
#[derive(Clone, Debug, Default)]
pub struct BrokenChainReport {
    /// Logical sites whose chains disagreed internally.
    pub broken: Vec<u32>,
    /// How many of those were exact ties resolved by coin flip.
    pub ties: usize,
}

/// Majority-vote a physical sample down to a logical configuration. Ties are
/// broken by a seeded uniform choice; every non-unanimous chain is reported.
/// Dead logical sites read +1, matching the lattice convention that dead
/// spins never contribute.
pub fn decode(
    emb: &Embedding,
    sample: &BTreeMap<u32, i8>,
    seed: u64,
) -> Result<(SpinConfig, BrokenChainReport), SsError> {
    let n = emb.logical.n_sites();
    let mut spins = vec![1i8; n];
    let mut report = BrokenChainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for site in 0..n as u32 {
        let chain = match emb.chain(site) {
            Some(c) => c,
            None => continue,
        };
        let mut sum = 0i32;
        for &q in chain {
            let v = *sample
                .get(&q)
                .ok_or_else(|| SsError::Problem(format!("sample missing qubit {q}")))?;
            if v != 1 && v != -1 {
                return Err(SsError::Problem(format!("qubit {q} has non-spin value {v}")));
            }
            sum += i32::from(v);
        }
        let logical = match sum.signum() {
            1 => 1,
            -1 => -1,
            _ => {
                report.ties += 1;
                if rng.gen::<bool>() {
                    1
                } else {
                    -1
                }
            }
        };
        if sum.abs() != 4 {
            report.broken.push(site);
        }
        spins[site as usize] = logical;
    }
    Ok((SpinConfig::new(spins)?, report))
}

/// Expand a logical configuration to a physical sample with unanimous chains.
pub fn expand_logical(emb: &Embedding, config: &SpinConfig) -> Result<BTreeMap<u32, i8>, SsError> {
    if config.len() != emb.logical.n_sites() {
        return Err(SsError::ConfigLength {
            got: config.len(),
            want: emb.logical.n_sites(),
        });
    }
    let mut out = BTreeMap::new();
    for site in 0..emb.logical.n_sites() as u32 {
        if let Some(chain) = emb.chain(site) {
            for &q in chain {
                out.insert(q, config.get(site));
            }
        }
    }
    Ok(out)
}
