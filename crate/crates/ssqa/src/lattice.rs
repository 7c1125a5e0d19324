//! The Shastry-Sutherland (orthogonal-dimer) lattice and its classical Ising
//! energy.
//!
//! Sites live on the integer square grid. Every nearest-neighbor pair on the
//! grid carries a `Square` (J1) bond. On top of that, alternating plaquettes
//! carry one diagonal `Dimer` (J2) bond each: plaquettes whose lower-left
//! corner is even-even get the bond along +(1,1), plaquettes with odd-odd
//! lower-left corner get the bond along (-1,1). Every site then belongs to
//! exactly one dimer.
//!
//! The repeating unit compatible with this decoration is an 8-site cell (4
//! dimers) spanned by the translations (2,-2) and (2,2). A `cells_x x cells_y`
//! lattice tiles that cell; periodic boundaries identify sites modulo the two
//! wrap vectors `cells_x*(2,-2)` and `cells_y*(2,2)` (a tilted torus).
//!
//! The classical energy is
//!
//! ```text
//! E = j1 * sum_{square bonds} s_a s_b
//!   + j2 * sum_{dimer bonds}  s_a s_b
//!   + hz * sum_i s_i
//! ```
//!
//! with `s = ±1`. Note the sign of the field term: positive `hz` favors
//! spin -1.

use crate::error::SsError;
use std::collections::BTreeSet;
use std::fmt::Write as _;

pub const SITES_PER_CELL: usize = 8;

/// Intra-cell site offsets from the cell origin, in site-index order.
/// Slots 2d and 2d+1 form dimer d of the cell; dimers 0 and 2 run along
/// +(1,1), dimers 1 and 3 along (-1,1).
const CELL_OFFSETS: [(i64, i64); 8] = [
    (0, 0),
    (1, 1), // dimer 0
    (2, -1),
    (1, 0), // dimer 1
    (2, 0),
    (3, 1), // dimer 2
    (2, 1),
    (1, 2), // dimer 3
];

/// Slot lookup keyed by ((x+y) mod 4, (x-y) mod 4). The eight offsets fall in
/// eight distinct residue classes; the remaining eight classes (mixed parity)
/// cannot occur for integer (x, y).
const SLOT_OF_CLASS: [[i8; 4]; 4] = [
    // v = 0   1   2   3        u = (x+y) mod 4, v = (x-y) mod 4
    [0, -1, 5, -1],  // u = 0
    [-1, 3, -1, 2],  // u = 1
    [1, -1, 4, -1],  // u = 2
    [-1, 6, -1, 7],  // u = 3
];

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BoundaryKind {
    Open,
    Periodic,
}

impl BoundaryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BoundaryKind::Open => "open",
            BoundaryKind::Periodic => "periodic",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SsError> {
        match s {
            "open" => Ok(BoundaryKind::Open),
            "periodic" => Ok(BoundaryKind::Periodic),
            other => Err(SsError::Parse(format!("unknown boundary kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BondKind {
    Square,
    Dimer,
}

/// Direction of a dimer bond in the plane.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DimerOrientation {
    /// Along +(1,1) (cell dimers 0 and 2).
    Ne,
    /// Along (-1,1) (cell dimers 1 and 3).
    Nw,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingParams {
    pub j1: f64,
    pub j2: f64,
    pub hz: f64,
}

impl CouplingParams {
    pub fn new(j1: f64, j2: f64, hz: f64) -> Self {
        Self { j1, j2, hz }
    }
}

/// A spin configuration: one value in {-1,+1} per lattice site.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct SpinConfig {
    spins: Vec<i8>,
}

impl SpinConfig {
    pub fn new(spins: Vec<i8>) -> Result<Self, SsError> {
        if spins.iter().any(|&s| s != 1 && s != -1) {
            return Err(SsError::Parse("spin values must be +1 or -1".into()));
        }
        Ok(Self { spins })
    }

    pub fn all_up(n: usize) -> Self {
        Self { spins: vec![1; n] }
    }

    pub fn all_down(n: usize) -> Self {
        Self { spins: vec![-1; n] }
    }

    /// Build from a bit mask; bit i set means spin i is -1.
    pub fn from_bits(n: usize, bits: u64) -> Self {
        assert!(n <= 64);
        let spins = (0..n)
            .map(|i| if bits >> i & 1 == 1 { -1 } else { 1 })
            .collect();
        Self { spins }
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn get(&self, i: u32) -> i8 {
        self.spins[i as usize]
    }

    pub fn flip(&mut self, i: u32) {
        self.spins[i as usize] = -self.spins[i as usize];
    }

    pub fn flipped_all(&self) -> Self {
        Self {
            spins: self.spins.iter().map(|s| -s).collect(),
        }
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.spins
    }

    /// One '+'/'-' character per site.
    pub fn to_line(&self) -> String {
        self.spins
            .iter()
            .map(|&s| if s > 0 { '+' } else { '-' })
            .collect()
    }

    pub fn parse_line(line: &str) -> Result<Self, SsError> {
        let spins = line
            .trim()
            .chars()
            .map(|c| match c {
                '+' => Ok(1),
                '-' => Ok(-1),
                other => Err(SsError::Parse(format!("bad spin character `{other}`"))),
            })
            .collect::<Result<Vec<i8>, _>>()?;
        Ok(Self { spins })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub a: u32,
    pub b: u32,
    pub kind: BondKind,
}

/// The Shastry-Sutherland lattice, possibly with excised (defective) sites.
///
/// Site indices are stable under defect excision: a dead site keeps its index
/// and coordinates but carries no bonds and no field, and is skipped by every
/// observable. Indexing is row-major by cell, fixed slot order within a cell:
/// `site = (cj * cells_x + ci) * 8 + slot`.
#[derive(Clone, Debug)]
pub struct SSLattice {
    cells_x: usize,
    cells_y: usize,
    boundary: BoundaryKind,
    coords: Vec<(i64, i64)>,
    alive: Vec<bool>,
    n_live: usize,
    defects: Vec<u32>,
    square_bonds: Vec<(u32, u32)>,
    dimer_bonds: Vec<(u32, u32)>,
    /// CSR adjacency over live square bonds.
    sq_off: Vec<u32>,
    sq_nbr: Vec<u32>,
    /// Live dimer partner, if any.
    partner: Vec<Option<u32>>,
}

/// Build a defect-free lattice. Periodic construction is accepted whenever
/// the wrap produces a sound bond list (no duplicate or self-adjacent bonds
/// and full square degree) and spans at least two cells; the single-cell
/// torus is rejected because its dimer adjacencies degenerate.
pub fn build_lattice(
    cells_x: usize,
    cells_y: usize,
    boundary: BoundaryKind,
) -> Result<SSLattice, SsError> {
    SSLattice::build(cells_x, cells_y, boundary, &[])
}

impl SSLattice {
    pub fn open(cells_x: usize, cells_y: usize) -> Result<Self, SsError> {
        Self::build(cells_x, cells_y, BoundaryKind::Open, &[])
    }

    pub fn periodic(cells_x: usize, cells_y: usize) -> Result<Self, SsError> {
        Self::build(cells_x, cells_y, BoundaryKind::Periodic, &[])
    }

    pub fn build(
        cells_x: usize,
        cells_y: usize,
        boundary: BoundaryKind,
        defects: &[u32],
    ) -> Result<Self, SsError> {
        if cells_x == 0 || cells_y == 0 {
            return Err(SsError::Geometry("cell counts must be positive".into()));
        }
        if boundary == BoundaryKind::Periodic && cells_x * cells_y < 2 {
            // A single wrapped cell folds every dimer adjacency onto only two
            // distinct neighbor dimers (quadruple parallel bonds both ways),
            // destroying the local bond structure the model relies on.
            return Err(SsError::Geometry(
                "periodic construction needs at least two cells".into(),
            ));
        }
        let n = cells_x * cells_y * SITES_PER_CELL;
        if n > u32::MAX as usize / 2 {
            return Err(SsError::Geometry("lattice too large".into()));
        }

        let mut coords = Vec::with_capacity(n);
        for cj in 0..cells_y {
            for ci in 0..cells_x {
                let ox = 2 * (ci as i64 + cj as i64);
                let oy = 2 * (cj as i64 - ci as i64);
                for &(dx, dy) in &CELL_OFFSETS {
                    coords.push((ox + dx, oy + dy));
                }
            }
        }

        let mut alive = vec![true; n];
        let mut defect_list: Vec<u32> = defects.to_vec();
        defect_list.sort_unstable();
        defect_list.dedup();
        for &d in &defect_list {
            if d as usize >= n {
                return Err(SsError::Geometry(format!(
                    "defect site {d} out of range (lattice has {n} sites)"
                )));
            }
            alive[d as usize] = false;
        }
        let n_live = alive.iter().filter(|a| **a).count();

        let mut proto = Self {
            cells_x,
            cells_y,
            boundary,
            coords,
            alive,
            n_live,
            defects: defect_list,
            square_bonds: Vec::new(),
            dimer_bonds: Vec::new(),
            sq_off: Vec::new(),
            sq_nbr: Vec::new(),
            partner: Vec::new(),
        };

        // Square bonds: generated once per site via the +x and +y
        // displacements. On a torus any duplicate unordered pair means the
        // wrap is too tight for a sound simple graph; reject the geometry.
        let mut seen = BTreeSet::new();
        let mut square_all: Vec<(u32, u32)> = Vec::with_capacity(2 * n);
        for s in 0..n as u32 {
            let (x, y) = proto.coords[s as usize];
            for (dx, dy) in [(1, 0), (0, 1)] {
                if let Some(t) = proto.site_at(x + dx, y + dy) {
                    if s == t {
                        return Err(SsError::Geometry(format!(
                            "periodic {cells_x}x{cells_y} wraps a square bond onto itself"
                        )));
                    }
                    let pair = (s.min(t), s.max(t));
                    if !seen.insert(pair) {
                        return Err(SsError::Geometry(format!(
                            "periodic {cells_x}x{cells_y} duplicates square bond \
                             {}-{} (torus too small)",
                            pair.0, pair.1
                        )));
                    }
                    square_all.push(pair);
                }
            }
        }
        square_all.sort_unstable();

        if boundary == BoundaryKind::Periodic {
            // Degree audit: exactly 4 distinct square neighbors everywhere.
            let mut deg = vec![0u32; n];
            for &(a, b) in &square_all {
                deg[a as usize] += 1;
                deg[b as usize] += 1;
            }
            if deg.iter().any(|&d| d != 4) {
                return Err(SsError::Geometry(format!(
                    "periodic {cells_x}x{cells_y} fails the square-degree audit"
                )));
            }
        }

        let mut dimer_all: Vec<(u32, u32)> = Vec::with_capacity(n / 2);
        for c in 0..(n / SITES_PER_CELL) as u32 {
            for d in 0..4 {
                let a = c * 8 + 2 * d;
                dimer_all.push((a, a + 1));
            }
        }

        // Filter to live bonds.
        proto.square_bonds = square_all
            .into_iter()
            .filter(|&(a, b)| proto.alive[a as usize] && proto.alive[b as usize])
            .collect();
        proto.dimer_bonds = dimer_all
            .into_iter()
            .filter(|&(a, b)| proto.alive[a as usize] && proto.alive[b as usize])
            .collect();

        // Adjacency structures.
        let mut deg = vec![0u32; n];
        for &(a, b) in &proto.square_bonds {
            deg[a as usize] += 1;
            deg[b as usize] += 1;
        }
        let mut off = Vec::with_capacity(n + 1);
        off.push(0u32);
        for s in 0..n {
            off.push(off[s] + deg[s]);
        }
        let mut nbr = vec![0u32; off[n] as usize];
        let mut cursor: Vec<u32> = off[..n].to_vec();
        for &(a, b) in &proto.square_bonds {
            nbr[cursor[a as usize] as usize] = b;
            cursor[a as usize] += 1;
            nbr[cursor[b as usize] as usize] = a;
            cursor[b as usize] += 1;
        }
        proto.sq_off = off;
        proto.sq_nbr = nbr;

        proto.partner = vec![None; n];
        for &(a, b) in &proto.dimer_bonds {
            proto.partner[a as usize] = Some(b);
            proto.partner[b as usize] = Some(a);
        }

        Ok(proto)
    }

    /// A copy of this lattice with additional sites excised.
    pub fn with_defects(&self, defects: &[u32]) -> Result<Self, SsError> {
        let mut all: Vec<u32> = self.defects.clone();
        all.extend_from_slice(defects);
        Self::build(self.cells_x, self.cells_y, self.boundary, &all)
    }

    pub fn cells(&self) -> (usize, usize) {
        (self.cells_x, self.cells_y)
    }

    pub fn boundary_kind(&self) -> BoundaryKind {
        self.boundary
    }

    pub fn n_sites(&self) -> usize {
        self.coords.len()
    }

    pub fn n_live(&self) -> usize {
        self.n_live
    }

    pub fn defects(&self) -> &[u32] {
        &self.defects
    }

    pub fn is_alive(&self, s: u32) -> bool {
        self.alive[s as usize]
    }

    pub fn coord(&self, s: u32) -> (i64, i64) {
        self.coords[s as usize]
    }

    pub fn site_index(&self, ci: usize, cj: usize, slot: usize) -> u32 {
        debug_assert!(ci < self.cells_x && cj < self.cells_y && slot < SITES_PER_CELL);
        ((cj * self.cells_x + ci) * SITES_PER_CELL + slot) as u32
    }

    /// Cell coordinates and intra-cell slot of a site.
    pub fn site_cell(&self, s: u32) -> (usize, usize, usize) {
        let s = s as usize;
        let cell = s / SITES_PER_CELL;
        (cell % self.cells_x, cell / self.cells_x, s % SITES_PER_CELL)
    }

    /// Site at planar coordinate (x, y). On periodic lattices arbitrary
    /// coordinates are reduced modulo the wrap vectors; on open lattices
    /// coordinates outside the built region give None. Defective sites are
    /// still addressable (check `is_alive`).
    pub fn site_at(&self, x: i64, y: i64) -> Option<u32> {
        let u = (x + y).rem_euclid(4) as usize;
        let v = (x - y).rem_euclid(4) as usize;
        let slot = SLOT_OF_CLASS[u][v];
        debug_assert!(slot >= 0, "integer coordinates always hit a slot class");
        let slot = slot as usize;
        let (dx, dy) = CELL_OFFSETS[slot];
        let (xp, yp) = (x - dx, y - dy);
        debug_assert_eq!((xp - yp).rem_euclid(4), 0);
        debug_assert_eq!((xp + yp).rem_euclid(4), 0);
        let ci = (xp - yp) / 4;
        let cj = (xp + yp) / 4;
        match self.boundary {
            BoundaryKind::Periodic => {
                let ci = ci.rem_euclid(self.cells_x as i64) as usize;
                let cj = cj.rem_euclid(self.cells_y as i64) as usize;
                Some(self.site_index(ci, cj, slot))
            }
            BoundaryKind::Open => {
                if ci >= 0 && (ci as usize) < self.cells_x && cj >= 0 && (cj as usize) < self.cells_y
                {
                    Some(self.site_index(ci as usize, cj as usize, slot))
                } else {
                    None
                }
            }
        }
    }

    pub fn n_square_bonds(&self) -> usize {
        self.square_bonds.len()
    }

    pub fn n_dimer_bonds(&self) -> usize {
        self.dimer_bonds.len()
    }

    pub fn square_bonds(&self) -> &[(u32, u32)] {
        &self.square_bonds
    }

    pub fn dimer_bonds(&self) -> &[(u32, u32)] {
        &self.dimer_bonds
    }

    pub fn bonds(&self) -> impl Iterator<Item = Bond> + '_ {
        let sq = self.square_bonds.iter().map(|&(a, b)| Bond {
            a,
            b,
            kind: BondKind::Square,
        });
        let di = self.dimer_bonds.iter().map(|&(a, b)| Bond {
            a,
            b,
            kind: BondKind::Dimer,
        });
        sq.chain(di)
    }

    /// Live square neighbors of a site.
    pub fn square_neighbors(&self, s: u32) -> &[u32] {
        let s = s as usize;
        &self.sq_nbr[self.sq_off[s] as usize..self.sq_off[s + 1] as usize]
    }

    /// Live dimer partner of a site, if both ends are alive.
    pub fn dimer_partner(&self, s: u32) -> Option<u32> {
        self.partner[s as usize]
    }

    /// Orientation of the dimer that site `s` belongs to (by construction,
    /// independent of defects).
    pub fn dimer_orientation(&self, s: u32) -> DimerOrientation {
        match (s as usize % SITES_PER_CELL) / 2 {
            0 | 2 => DimerOrientation::Ne,
            _ => DimerOrientation::Nw,
        }
    }

    /// Wrap vectors of the periodic lattice, None when open.
    pub fn wrap_vectors(&self) -> Option<((i64, i64), (i64, i64))> {
        match self.boundary {
            BoundaryKind::Periodic => Some((
                (2 * self.cells_x as i64, -2 * (self.cells_x as i64)),
                (2 * self.cells_y as i64, 2 * self.cells_y as i64),
            )),
            BoundaryKind::Open => None,
        }
    }

    fn check_len(&self, config: &SpinConfig) -> Result<(), SsError> {
        if config.len() != self.n_sites() {
            return Err(SsError::ConfigLength {
                got: config.len(),
                want: self.n_sites(),
            });
        }
        Ok(())
    }

    /// Classical energy. Bond and field sums are accumulated in integers, so
    /// the result is exact up to the final three multiplications.
    pub fn energy(&self, params: &CouplingParams, config: &SpinConfig) -> Result<f64, SsError> {
        self.check_len(config)?;
        let s = config.as_slice();
        let mut sq_sum: i64 = 0;
        for &(a, b) in &self.square_bonds {
            sq_sum += (s[a as usize] * s[b as usize]) as i64;
        }
        let mut di_sum: i64 = 0;
        for &(a, b) in &self.dimer_bonds {
            di_sum += (s[a as usize] * s[b as usize]) as i64;
        }
        let mut m_sum: i64 = 0;
        for i in 0..s.len() {
            if self.alive[i] {
                m_sum += s[i] as i64;
            }
        }
        Ok(params.j1 * sq_sum as f64 + params.j2 * di_sum as f64 + params.hz * m_sum as f64)
    }

    /// Energy change if `site` were flipped; O(degree). Flipping a dead site
    /// changes nothing and returns 0.
    pub fn energy_delta(
        &self,
        params: &CouplingParams,
        config: &SpinConfig,
        site: u32,
    ) -> Result<f64, SsError> {
        self.check_len(config)?;
        if site as usize >= self.n_sites() {
            return Err(SsError::Problem(format!("site {site} out of range")));
        }
        if !self.alive[site as usize] {
            return Ok(0.0);
        }
        let s = config.as_slice();
        let si = s[site as usize] as f64;
        let mut nb: i64 = 0;
        for &t in self.square_neighbors(site) {
            nb += s[t as usize] as i64;
        }
        let mut local = params.j1 * nb as f64;
        if let Some(p) = self.partner[site as usize] {
            local += params.j2 * s[p as usize] as f64;
        }
        Ok(-2.0 * si * (local + params.hz))
    }

    /// Mean spin over live sites.
    pub fn magnetization(&self, config: &SpinConfig) -> Result<f64, SsError> {
        self.check_len(config)?;
        let mut m: i64 = 0;
        for (i, &v) in config.as_slice().iter().enumerate() {
            if self.alive[i] {
                m += v as i64;
            }
        }
        Ok(m as f64 / self.n_live as f64)
    }

    /// Configuration translated by whole cells (periodic lattices only):
    /// the spin at cell (ci, cj) moves to cell (ci + dci, cj + dcj).
    pub fn translated(
        &self,
        config: &SpinConfig,
        dci: i64,
        dcj: i64,
    ) -> Result<SpinConfig, SsError> {
        self.check_len(config)?;
        if self.boundary != BoundaryKind::Periodic {
            return Err(SsError::Geometry(
                "translation requires a periodic lattice".into(),
            ));
        }
        let mut out = vec![0i8; self.n_sites()];
        for cj in 0..self.cells_y as i64 {
            for ci in 0..self.cells_x as i64 {
                let src_ci = (ci - dci).rem_euclid(self.cells_x as i64) as usize;
                let src_cj = (cj - dcj).rem_euclid(self.cells_y as i64) as usize;
                for slot in 0..SITES_PER_CELL {
                    let dst = self.site_index(ci as usize, cj as usize, slot);
                    let src = self.site_index(src_ci, src_cj, slot);
                    out[dst as usize] = config.get(src);
                }
            }
        }
        SpinConfig::new(out)
    }

    /// Line-oriented dump: a header line, one defect line when present, then
    /// one bond per line ("a b square|dimer").
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "ss-lattice {} {} {}",
            self.cells_x,
            self.cells_y,
            self.boundary.as_str()
        );
        if !self.defects.is_empty() {
            let ids: Vec<String> = self.defects.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "defects {}", ids.join(" "));
        }
        for b in self.bonds() {
            let kind = match b.kind {
                BondKind::Square => "square",
                BondKind::Dimer => "dimer",
            };
            let _ = writeln!(out, "{} {} {}", b.a, b.b, kind);
        }
        out
    }

    /// Rebuild a lattice from `to_text` output, verifying the bond list.
    pub fn from_text(text: &str) -> Result<Self, SsError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| SsError::Parse("empty lattice text".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("ss-lattice") {
            return Err(SsError::Parse("missing ss-lattice header".into()));
        }
        let cx: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| SsError::Parse("bad cells_x".into()))?;
        let cy: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| SsError::Parse("bad cells_y".into()))?;
        let boundary = BoundaryKind::parse(
            parts
                .next()
                .ok_or_else(|| SsError::Parse("missing boundary kind".into()))?,
        )?;

        let mut rest: Vec<&str> = lines.collect();
        let mut defects: Vec<u32> = Vec::new();
        if let Some(first) = rest.first() {
            if let Some(ids) = first.strip_prefix("defects ") {
                defects = ids
                    .split_whitespace()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| SsError::Parse(format!("bad defect id `{t}`")))
                    })
                    .collect::<Result<_, _>>()?;
                rest.remove(0);
            }
        }

        let lat = Self::build(cx, cy, boundary, &defects)?;
        let expect: Vec<String> = lat
            .to_text()
            .lines()
            .skip(if defects.is_empty() { 1 } else { 2 })
            .map(str::to_owned)
            .collect();
        if rest.len() != expect.len() || rest.iter().zip(&expect).any(|(a, b)| a.trim() != b) {
            return Err(SsError::Parse(
                "bond list does not match the declared geometry".into(),
            ));
        }
        Ok(lat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn p(j1: f64, j2: f64, hz: f64) -> CouplingParams {
        CouplingParams::new(j1, j2, hz)
    }

    #[test]
    fn open_single_cell_counts() {
        let lat = SSLattice::open(1, 1).unwrap();
        assert_eq!(lat.n_sites(), 8);
        assert_eq!(lat.n_dimer_bonds(), 4);
        assert_eq!(lat.n_square_bonds(), 8);
    }

    #[test]
    fn periodic_2x2_counts_and_degrees() {
        let lat = SSLattice::periodic(2, 2).unwrap();
        assert_eq!(lat.n_sites(), 32);
        assert_eq!(lat.n_dimer_bonds(), 16);
        assert_eq!(lat.n_square_bonds(), 64);
        for s in 0..32 {
            assert_eq!(lat.square_neighbors(s).len(), 4, "site {s}");
            assert!(lat.dimer_partner(s).is_some());
        }
    }

    #[test]
    fn periodic_1x1_rejected() {
        assert!(SSLattice::periodic(1, 1).is_err());
    }

    #[test]
    fn thin_periodic_tori_pass_the_audit() {
        // Tori with one dimension of a single cell are sound as long as the
        // bond audit passes; they are needed for field-commensurate sizes.
        for (cx, cy) in [(1, 2), (2, 1), (1, 3), (3, 1), (2, 2), (2, 3)] {
            let lat = SSLattice::periodic(cx, cy).unwrap();
            assert_eq!(lat.n_square_bonds(), 2 * lat.n_sites());
            assert_eq!(lat.n_dimer_bonds(), lat.n_sites() / 2);
            for s in 0..lat.n_sites() as u32 {
                assert_eq!(lat.square_neighbors(s).len(), 4);
            }
        }
    }

    #[test]
    fn every_site_in_exactly_one_dimer() {
        for lat in [
            SSLattice::open(3, 2).unwrap(),
            SSLattice::periodic(2, 2).unwrap(),
        ] {
            let mut count = vec![0u32; lat.n_sites()];
            for &(a, b) in lat.dimer_bonds() {
                count[a as usize] += 1;
                count[b as usize] += 1;
            }
            assert!(count.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn dimer_geometry_is_diagonal_and_alternating() {
        let lat = SSLattice::periodic(3, 2).unwrap();
        for &(a, b) in lat.dimer_bonds() {
            let (xa, ya) = lat.coord(a);
            let (xb, yb) = lat.coord(b);
            let d = ((xb - xa).abs(), (yb - ya).abs());
            assert_eq!(d, (1, 1), "dimer {a}-{b} must be a plaquette diagonal");
            match lat.dimer_orientation(a) {
                DimerOrientation::Ne => assert_eq!(xb - xa, yb - ya),
                DimerOrientation::Nw => assert_eq!(xb - xa, -(yb - ya)),
            }
        }
    }

    #[test]
    fn square_bonds_are_grid_neighbors() {
        let lat = SSLattice::periodic(2, 3).unwrap();
        let (w1, w2) = lat.wrap_vectors().unwrap();
        for &(a, b) in lat.square_bonds() {
            let (xa, ya) = lat.coord(a);
            let (xb, yb) = lat.coord(b);
            // Difference must be a unit step modulo the wrap lattice.
            let mut ok = false;
            for (ex, ey) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                for m1 in -1..=1i64 {
                    for m2 in -1..=1i64 {
                        if xb - xa == ex + m1 * w1.0 + m2 * w2.0
                            && yb - ya == ey + m1 * w1.1 + m2 * w2.1
                        {
                            ok = true;
                        }
                    }
                }
            }
            assert!(ok, "bond {a}-{b} is not a grid neighbor pair");
        }
    }

    #[test]
    fn site_at_round_trip() {
        let lat = SSLattice::periodic(3, 2).unwrap();
        for s in 0..lat.n_sites() as u32 {
            let (x, y) = lat.coord(s);
            assert_eq!(lat.site_at(x, y), Some(s));
            let (w1, w2) = lat.wrap_vectors().unwrap();
            assert_eq!(lat.site_at(x + w1.0, y + w1.1), Some(s));
            assert_eq!(lat.site_at(x - w2.0, y - w2.1), Some(s));
        }
        let open = SSLattice::open(2, 2).unwrap();
        for s in 0..open.n_sites() as u32 {
            let (x, y) = open.coord(s);
            assert_eq!(open.site_at(x, y), Some(s));
        }
        assert_eq!(open.site_at(100, 100), None);
    }

    #[test]
    fn energy_frozen_values() {
        let lat = SSLattice::periodic(2, 2).unwrap();
        let up = SpinConfig::all_up(32);
        assert_eq!(lat.energy(&p(1.0, 1.0, 0.0), &up).unwrap(), 80.0);
        assert_eq!(lat.energy(&p(1.0, 1.0, -8.0), &up).unwrap(), -176.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let any = SpinConfig::new((0..32).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect())
            .unwrap();
        assert_eq!(lat.energy(&p(0.0, 0.0, 0.0), &any).unwrap(), 0.0);
    }

    #[test]
    fn energy_delta_frozen_values() {
        let lat = SSLattice::periodic(2, 2).unwrap();
        let up = SpinConfig::all_up(32);
        // Field-only flip of a +1 spin.
        assert_eq!(lat.energy_delta(&p(0.0, 0.0, 1.0), &up, 3).unwrap(), -2.0);
        // Square-bond-only flip in the fully aligned state.
        for s in [0u32, 9, 17, 31] {
            assert_eq!(lat.energy_delta(&p(1.0, 0.0, 0.0), &up, s).unwrap(), -8.0);
        }
    }

    #[test]
    fn energy_length_mismatch_rejected() {
        let lat = SSLattice::periodic(2, 2).unwrap();
        let cfg = SpinConfig::all_up(8);
        assert!(lat.energy(&p(1.0, 1.0, 0.0), &cfg).is_err());
    }

    #[test]
    fn translation_invariance_of_energy() {
        let lat = SSLattice::periodic(3, 2).unwrap();
        let params = p(1.0, 0.7, -1.3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let cfg = SpinConfig::new(
                (0..lat.n_sites())
                    .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
                    .collect(),
            )
            .unwrap();
            let e = lat.energy(&params, &cfg).unwrap();
            for (dci, dcj) in [(1, 0), (0, 1), (2, 1)] {
                let t = lat.translated(&cfg, dci, dcj).unwrap();
                let et = lat.energy(&params, &t).unwrap();
                assert!((e - et).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn defect_excision_drops_bonds_and_field() {
        let lat = SSLattice::periodic(2, 2).unwrap();
        let cut = lat.with_defects(&[5]).unwrap();
        assert_eq!(cut.n_sites(), 32);
        assert_eq!(cut.n_live(), 31);
        assert!(!cut.is_alive(5));
        assert_eq!(cut.n_square_bonds(), 60);
        assert_eq!(cut.n_dimer_bonds(), 15);
        assert!(cut.dimer_partner(5).is_none());
        assert!(cut.dimer_partner(4).is_none());
        // The dead site's spin value is irrelevant to the energy.
        let mut a = SpinConfig::all_up(32);
        let e0 = cut.energy(&p(1.0, 1.0, 2.0), &a).unwrap();
        a.flip(5);
        let e1 = cut.energy(&p(1.0, 1.0, 2.0), &a).unwrap();
        assert_eq!(e0, e1);
        assert_eq!(cut.energy_delta(&p(1.0, 1.0, 2.0), &a, 5).unwrap(), 0.0);
    }

    #[test]
    fn text_round_trip() {
        for lat in [
            SSLattice::open(2, 1).unwrap(),
            SSLattice::periodic(2, 2).unwrap().with_defects(&[3, 17]).unwrap(),
        ] {
            let text = lat.to_text();
            let back = SSLattice::from_text(&text).unwrap();
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn spin_config_text_round_trip() {
        let cfg = SpinConfig::new(vec![1, -1, -1, 1, 1]).unwrap();
        assert_eq!(cfg.to_line(), "+--++");
        assert_eq!(SpinConfig::parse_line("+--++").unwrap(), cfg);
        assert!(SpinConfig::parse_line("+-x").is_err());
        assert!(SpinConfig::new(vec![1, 0]).is_err());
    }

    proptest! {
        #[test]
        fn delta_matches_full_recomputation(seed in 0u64..500) {
            let lat = SSLattice::periodic(2, 2).unwrap();
            let params = p(1.0, 1.3, -2.1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cfg = SpinConfig::new(
                (0..32).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect()
            ).unwrap();
            let site = rng.gen_range(0..32u32);
            let before = lat.energy(&params, &cfg).unwrap();
            let delta = lat.energy_delta(&params, &cfg, site).unwrap();
            cfg.flip(site);
            let after = lat.energy(&params, &cfg).unwrap();
            prop_assert!((after - before - delta).abs() < 1e-12);
        }

        #[test]
        fn spin_flip_symmetry_at_zero_field(seed in 0u64..200) {
            let lat = SSLattice::open(2, 2).unwrap();
            let params = p(0.8, 1.7, 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = SpinConfig::new(
                (0..32).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect()
            ).unwrap();
            let e = lat.energy(&params, &cfg).unwrap();
            let ef = lat.energy(&params, &cfg.flipped_all()).unwrap();
            prop_assert!((e - ef).abs() < 1e-12);
        }
    }
}
