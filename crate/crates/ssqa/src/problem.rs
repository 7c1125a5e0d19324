//! A generic Ising problem over an arbitrary coupling graph:
//!
//! ```text
//! E(s) = sum_{(a,b)} J_ab s_a s_b + sum_i h_i s_i
//! ```
//!
//! This is the common currency between the lattice (logical problems), the
//! hardware compiler (physical problems), the Monte Carlo engine, and the
//! brute-force oracle.

use crate::error::SsError;
use crate::lattice::{CouplingParams, SSLattice, SpinConfig};

#[derive(Clone, Debug)]
pub struct IsingProblem {
    h: Vec<f64>,
    couplers: Vec<(u32, u32, f64)>,
    /// CSR adjacency: for site i, (neighbor, J) pairs.
    adj_off: Vec<u32>,
    adj: Vec<(u32, f64)>,
    max_abs_j: f64,
}

impl IsingProblem {
    pub fn new(n: usize, h: Vec<f64>, mut couplers: Vec<(u32, u32, f64)>) -> Result<Self, SsError> {
        if h.len() != n {
            return Err(SsError::Problem(format!(
                "field vector length {} != size {n}",
                h.len()
            )));
        }
        for c in couplers.iter_mut() {
            if c.0 as usize >= n || c.1 as usize >= n {
                return Err(SsError::Problem(format!(
                    "coupler ({}, {}) out of range",
                    c.0, c.1
                )));
            }
            if c.0 == c.1 {
                return Err(SsError::Problem(format!("self-coupler on site {}", c.0)));
            }
            if c.0 > c.1 {
                *c = (c.1, c.0, c.2);
            }
        }
        couplers.sort_unstable_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        if couplers.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(SsError::Problem("duplicate coupler".into()));
        }

        let mut deg = vec![0u32; n];
        for &(a, b, _) in &couplers {
            deg[a as usize] += 1;
            deg[b as usize] += 1;
        }
        let mut adj_off = Vec::with_capacity(n + 1);
        adj_off.push(0u32);
        for d in &deg {
            let last = *adj_off.last().unwrap();
            adj_off.push(last + d);
        }
        let mut adj = vec![(0u32, 0.0); *adj_off.last().unwrap() as usize];
        let mut cursor: Vec<u32> = adj_off[..n].to_vec();
        for &(a, b, j) in &couplers {
            adj[cursor[a as usize] as usize] = (b, j);
            cursor[a as usize] += 1;
            adj[cursor[b as usize] as usize] = (a, j);
            cursor[b as usize] += 1;
        }

        let max_abs_j = couplers
            .iter()
            .map(|c| c.2.abs())
            .chain(h.iter().map(|v| v.abs()))
            .fold(0.0, f64::max);

        Ok(Self {
            h,
            couplers,
            adj_off,
            adj,
            max_abs_j,
        })
    }

    /// The logical problem of a lattice at given couplings. Dead sites get
    /// zero field and no couplers (their index is preserved).
    pub fn from_lattice(lattice: &SSLattice, params: &CouplingParams) -> Self {
        Self::from_lattice_with_fields(lattice, params, &[])
    }

    /// Same, with per-site longitudinal-field overrides (site, h) applied on
    /// top of the uniform `hz`. Used for boundary-conditioned problems.
    pub fn from_lattice_with_fields(
        lattice: &SSLattice,
        params: &CouplingParams,
        overrides: &[(u32, f64)],
    ) -> Self {
        let n = lattice.n_sites();
        let mut h = vec![0.0; n];
        for i in 0..n as u32 {
            if lattice.is_alive(i) {
                h[i as usize] = params.hz;
            }
        }
        for &(i, v) in overrides {
            if lattice.is_alive(i) {
                h[i as usize] = v;
            }
        }
        let mut couplers = Vec::with_capacity(lattice.n_square_bonds() + lattice.n_dimer_bonds());
        for &(a, b) in lattice.square_bonds() {
            couplers.push((a, b, params.j1));
        }
        for &(a, b) in lattice.dimer_bonds() {
            couplers.push((a, b, params.j2));
        }
        Self::new(n, h, couplers).expect("lattice bonds are always a valid coupler list")
    }

    pub fn n(&self) -> usize {
        self.h.len()
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn couplers(&self) -> &[(u32, u32, f64)] {
        &self.couplers
    }

    pub fn neighbors(&self, i: u32) -> &[(u32, f64)] {
        let i = i as usize;
        &self.adj[self.adj_off[i] as usize..self.adj_off[i + 1] as usize]
    }

    /// Largest coupling or field magnitude; the engine's default temperature
    /// scale.
    pub fn max_abs_j(&self) -> f64 {
        self.max_abs_j
    }

    pub fn energy_spins(&self, s: &[i8]) -> f64 {
        debug_assert_eq!(s.len(), self.n());
        let mut e = 0.0;
        for &(a, b, j) in &self.couplers {
            e += j * (s[a as usize] * s[b as usize]) as f64;
        }
        for (i, &hi) in self.h.iter().enumerate() {
            e += hi * s[i] as f64;
        }
        e
    }

    pub fn energy(&self, config: &SpinConfig) -> Result<f64, SsError> {
        if config.len() != self.n() {
            return Err(SsError::ConfigLength {
                got: config.len(),
                want: self.n(),
            });
        }
        Ok(self.energy_spins(config.as_slice()))
    }

    /// Energy change if spin `i` were flipped; O(degree).
    #[inline]
    pub fn energy_delta_spins(&self, s: &[i8], i: u32) -> f64 {
        let mut local = self.h[i as usize];
        for &(t, j) in self.neighbors(i) {
            local += j * s[t as usize] as f64;
        }
        -2.0 * s[i as usize] as f64 * local
    }

    /// Split off sites that cannot affect the energy (no couplers, zero
    /// field). Returns the compacted problem and the kept site indices in
    /// order. Free sites are fixed to +1 on reconstruction.
    pub fn prune_free_sites(&self) -> (IsingProblem, Vec<u32>) {
        let n = self.n();
        let keep: Vec<u32> = (0..n as u32)
            .filter(|&i| self.h[i as usize] != 0.0 || !self.neighbors(i).is_empty())
            .collect();
        let mut remap = vec![u32::MAX; n];
        for (new, &old) in keep.iter().enumerate() {
            remap[old as usize] = new as u32;
        }
        let h = keep.iter().map(|&i| self.h[i as usize]).collect();
        let couplers = self
            .couplers
            .iter()
            .map(|&(a, b, j)| (remap[a as usize], remap[b as usize], j))
            .collect();
        let pruned = IsingProblem::new(keep.len(), h, couplers)
            .expect("pruning preserves coupler validity");
        (pruned, keep)
    }
}
