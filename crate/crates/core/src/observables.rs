//! Pair distribution function and static structure factor.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cell::{ParticleConfiguration, SimulationCell};
use crate::error::{Error, Result};
use crate::stats::BlockSeries;

pub const DEFAULT_G2_BINS: usize = 100;
pub const DEFAULT_K_MAX_INDEX: i32 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservablesConfig {
    pub g2_bins: usize,
    /// Largest `|n|` of the k-grid `k = 2π n / L`.
    pub k_max_index: i32,
    /// Report `⟨|ρ_k|²⟩/N` instead of the variance form.
    pub raw_structure_factor: bool,
    pub n_samples: usize,
}

impl Default for ObservablesConfig {
    fn default() -> Self {
        Self {
            g2_bins: DEFAULT_G2_BINS,
            k_max_index: DEFAULT_K_MAX_INDEX,
            raw_structure_factor: false,
            n_samples: 100,
        }
    }
}

impl ObservablesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g2_bins == 0 || self.k_max_index < 1 {
            return Err(Error::Config("observables.g2_bins and observables.k_max_index must be positive".into()));
        }
        Ok(())
    }
}

/// One row of a binned observable with its blocking error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedValue {
    pub x: f64,
    pub value: f64,
    pub error: f64,
}

/// Spin-averaged pair histogram on `[0, L/2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramAccumulator {
    n_particles: usize,
    side: f64,
    edges: Vec<f64>,
    counts: Vec<u64>,
    n_samples: u64,
    /// Per-sample normalized g in each bin.
    series: Vec<BlockSeries>,
}

impl HistogramAccumulator {
    pub fn new(cell: &SimulationCell, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::InvalidInput("histogram needs at least one bin".into()));
        }
        let r_max = 0.5 * cell.side();
        let edges = (0..=bins).map(|b| r_max * b as f64 / bins as f64).collect();
        Ok(Self {
            n_particles: cell.n_particles(),
            side: cell.side(),
            edges,
            counts: vec![0; bins],
            n_samples: 0,
            series: vec![BlockSeries::default(); bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    /// Ideal-gas pair count expected in bin `b` for one sample: pairs times
    /// the exact spherical-shell volume over the cell volume.
    fn ideal_count(&self, b: usize) -> f64 {
        let n = self.n_particles as f64;
        let (r0, r1) = (self.edges[b], self.edges[b + 1]);
        let shell = 4.0 / 3.0 * PI * (r1.powi(3) - r0.powi(3));
        0.5 * n * (n - 1.0) * shell / self.side.powi(3)
    }

    pub fn accumulate(&mut self, config: &ParticleConfiguration, cell: &SimulationCell) {
        let bins = self.bins();
        let r_max = 0.5 * self.side;
        let mut sample = vec![0u64; bins];
        let n = config.n_particles();
        for i in 0..n {
            for j in i + 1..n {
                let d = config.displacement(i, j, cell);
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if r <= r_max {
                    let b = ((r / r_max * bins as f64) as usize).min(bins - 1);
                    sample[b] += 1;
                }
            }
        }
        for b in 0..bins {
            self.counts[b] += sample[b];
            let ideal = self.ideal_count(b);
            self.series[b].push(sample[b] as f64 / ideal);
        }
        self.n_samples += 1;
    }

    pub fn merge(&mut self, other: &HistogramAccumulator) -> Result<()> {
        if other.edges != self.edges || other.n_particles != self.n_particles {
            return Err(Error::InvalidInput("histograms have different binning".into()));
        }
        for b in 0..self.bins() {
            self.counts[b] += other.counts[b];
            self.series[b].merge(&other.series[b]);
        }
        self.n_samples += other.n_samples;
        Ok(())
    }

    /// `g(r)` at bin centres with blocking errors.
    pub fn normalize(&self) -> Result<Vec<BinnedValue>> {
        if self.n_samples == 0 {
            return Err(Error::InvalidState("no samples accumulated for g(r)".into()));
        }
        Ok((0..self.bins())
            .map(|b| BinnedValue {
                x: 0.5 * (self.edges[b] + self.edges[b + 1]),
                value: self.counts[b] as f64 / (self.n_samples as f64 * self.ideal_count(b)),
                error: self.series[b].analyse().error,
            })
            .collect())
    }
}

/// Collective density modes on the reciprocal grid `k = 2π n / L`,
/// `0 < |n| ≤ k_max_index`, grouped into shells of equal `|n|²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureFactorAccumulator {
    n_particles: usize,
    side: f64,
    k_max_index: i32,
    indices: Vec<[i32; 3]>,
    /// Shell `|n|²` and the member index range into `indices`.
    shells: Vec<(i32, std::ops::Range<usize>)>,
    sum_rho: Vec<Complex64>,
    sum_rho2: Vec<f64>,
    n_samples: u64,
    /// Per-sample shell average of `|ρ_k|²/N`.
    series: Vec<BlockSeries>,
    raw: bool,
}

impl StructureFactorAccumulator {
    pub fn new(cell: &SimulationCell, k_max_index: i32, raw: bool) -> Result<Self> {
        if k_max_index < 1 {
            return Err(Error::InvalidInput("k_max_index must be positive".into()));
        }
        let m = k_max_index;
        let mut by_shell: BTreeMap<i32, Vec<[i32; 3]>> = BTreeMap::new();
        for a in -m..=m {
            for b in -m..=m {
                for c in -m..=m {
                    let n2 = a * a + b * b + c * c;
                    if n2 > 0 && n2 <= m * m {
                        by_shell.entry(n2).or_default().push([a, b, c]);
                    }
                }
            }
        }
        let mut indices = Vec::new();
        let mut shells = Vec::new();
        for (n2, ks) in by_shell {
            let start = indices.len();
            indices.extend(ks);
            shells.push((n2, start..indices.len()));
        }
        let nk = indices.len();
        let ns = shells.len();
        Ok(Self {
            n_particles: cell.n_particles(),
            side: cell.side(),
            k_max_index,
            indices,
            shells,
            sum_rho: vec![Complex64::new(0.0, 0.0); nk],
            sum_rho2: vec![0.0; nk],
            n_samples: 0,
            series: vec![BlockSeries::default(); ns],
            raw,
        })
    }

    pub fn k_indices(&self) -> &[[i32; 3]] {
        &self.indices
    }

    pub fn n_samples(&self) -> u64 {
        self.n_samples
    }

    /// `ρ_k = Σ_i exp(i k·r_i)` for every grid vector.
    pub fn density_modes(&self, config: &ParticleConfiguration) -> Vec<Complex64> {
        let m = self.k_max_index as usize;
        let g = 2.0 * PI / self.side;
        let mut rho = vec![Complex64::new(0.0, 0.0); self.indices.len()];
        // phases[d][m + n] = exp(i g n x_d)
        let mut phases = [vec![Complex64::new(0.0, 0.0); 2 * m + 1], vec![Complex64::new(0.0, 0.0); 2 * m + 1], vec![Complex64::new(0.0, 0.0); 2 * m + 1]];
        for r in config.positions() {
            for d in 0..3 {
                let base = Complex64::from_polar(1.0, g * r[d]);
                let p = &mut phases[d];
                p[m] = Complex64::new(1.0, 0.0);
                for n in 1..=m {
                    p[m + n] = p[m + n - 1] * base;
                    p[m - n] = p[m + n].conj();
                }
            }
            for (acc, n) in rho.iter_mut().zip(&self.indices) {
                *acc += phases[0][(n[0] + m as i32) as usize] * phases[1][(n[1] + m as i32) as usize] * phases[2][(n[2] + m as i32) as usize];
            }
        }
        rho
    }

    pub fn accumulate(&mut self, config: &ParticleConfiguration) {
        let rho = self.density_modes(config);
        let n = self.n_particles as f64;
        for (k, r) in rho.iter().enumerate() {
            self.sum_rho[k] += r;
            self.sum_rho2[k] += r.norm_sqr();
        }
        for (s, (_, range)) in self.shells.iter().enumerate() {
            let avg = rho[range.clone()].iter().map(|r| r.norm_sqr()).sum::<f64>() / (range.len() as f64 * n);
            self.series[s].push(avg);
        }
        self.n_samples += 1;
    }

    pub fn merge(&mut self, other: &StructureFactorAccumulator) -> Result<()> {
        if other.indices != self.indices || other.n_particles != self.n_particles {
            return Err(Error::InvalidInput("structure factors use different k-grids".into()));
        }
        for k in 0..self.indices.len() {
            self.sum_rho[k] += other.sum_rho[k];
            self.sum_rho2[k] += other.sum_rho2[k];
        }
        for (a, b) in self.series.iter_mut().zip(&other.series) {
            a.merge(b);
        }
        self.n_samples += other.n_samples;
        Ok(())
    }

    /// `S` for each grid vector.
    pub fn per_k(&self) -> Result<Vec<f64>> {
        if self.n_samples == 0 {
            return Err(Error::InvalidState("no samples accumulated for S(k)".into()));
        }
        let ns = self.n_samples as f64;
        let n = self.n_particles as f64;
        Ok((0..self.indices.len())
            .map(|k| {
                let m2 = self.sum_rho2[k] / ns;
                if self.raw {
                    m2 / n
                } else {
                    (m2 - (self.sum_rho[k] / ns).norm_sqr()) / n
                }
            })
            .collect())
    }

    /// Shell-averaged `S(|k|)` with blocking errors.
    pub fn finalize(&self) -> Result<Vec<BinnedValue>> {
        let per_k = self.per_k()?;
        let g = 2.0 * PI / self.side;
        Ok(self
            .shells
            .iter()
            .zip(&self.series)
            .map(|((n2, range), series)| BinnedValue {
                x: g * (*n2 as f64).sqrt(),
                value: per_k[range.clone()].iter().sum::<f64>() / range.len() as f64,
                error: series.analyse().error,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orbitals::bcc_sites;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_particles_fill_one_bin() {
        let cell = SimulationCell::new(1, 1, 1.0).unwrap();
        let mut h = HistogramAccumulator::new(&cell, 10).unwrap();
        let d = 0.23 * cell.side();
        let c = ParticleConfiguration::new(vec![[0.1, 0.1, 0.1], [0.1 + d, 0.1, 0.1]], &cell).unwrap();
        for _ in 0..3 {
            h.accumulate(&c, &cell);
        }
        let bin = (d / (0.5 * cell.side()) * 10.0) as usize;
        assert_eq!(h.counts()[bin], 3);
        assert_eq!(h.counts().iter().sum::<u64>(), 3);
    }

    #[test]
    fn empty_accumulators_are_invalid_state() {
        let cell = SimulationCell::new(2, 2, 1.0).unwrap();
        assert!(matches!(HistogramAccumulator::new(&cell, 5).unwrap().normalize(), Err(Error::InvalidState(_))));
        assert!(matches!(StructureFactorAccumulator::new(&cell, 2, false).unwrap().finalize(), Err(Error::InvalidState(_))));
    }

    /// Uniform independent positions: g = 1 and S = 1 exactly in expectation.
    #[test]
    fn ideal_gas_oracle() {
        let cell = SimulationCell::new(7, 7, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut h = HistogramAccumulator::new(&cell, 20).unwrap();
        let mut s = StructureFactorAccumulator::new(&cell, 3, false).unwrap();
        for _ in 0..4000 {
            let c = ParticleConfiguration::random(&cell, &mut rng);
            assert!(h.counts().iter().sum::<u64>() <= h.n_samples() * 91);
            h.accumulate(&c, &cell);
            s.accumulate(&c);
        }
        let g = h.normalize().unwrap();
        let bad = g.iter().filter(|b| (b.value - 1.0).abs() > 3.0 * b.error).count();
        assert!(bad <= 1, "{g:?}");
        assert!(g.iter().all(|b| b.value >= 0.0));
        let sk = s.finalize().unwrap();
        let bad = sk.iter().filter(|b| (b.value - 1.0).abs() > 3.0 * b.error.max(1e-3)).count();
        assert!(bad <= 1, "{sk:?}");
    }

    #[test]
    fn perfect_bcc_gives_bragg_peaks() {
        let cell = SimulationCell::new(8, 8, 1.0).unwrap();
        let sites = bcc_sites(&cell).unwrap();
        let c = ParticleConfiguration::new(sites, &cell).unwrap();
        let mut s = StructureFactorAccumulator::new(&cell, 4, true).unwrap();
        s.accumulate(&c);
        let per_k = s.per_k().unwrap();
        // m = 2 conventional cells per side: Bragg vectors are n = 2(h,k,l), h+k+l even
        for (n, v) in s.k_indices().iter().zip(&per_k) {
            let bragg = n.iter().all(|x| x % 2 == 0) && (n[0] + n[1] + n[2]) / 2 % 2 == 0;
            let expect = if bragg { 16.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-9, "{n:?}: {v}");
        }
    }

    #[test]
    fn one_particle_identity() {
        let cell = SimulationCell::new(1, 0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut raw = StructureFactorAccumulator::new(&cell, 2, true).unwrap();
        let mut var = StructureFactorAccumulator::new(&cell, 2, false).unwrap();
        for _ in 0..50 {
            let c = ParticleConfiguration::random(&cell, &mut rng);
            raw.accumulate(&c);
            var.accumulate(&c);
        }
        assert!(raw.per_k().unwrap().iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(var.per_k().unwrap().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn merge_equals_sequential() {
        let cell = SimulationCell::new(3, 3, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cs: Vec<_> = (0..20).map(|_| ParticleConfiguration::random(&cell, &mut rng)).collect();
        let mut h_all = HistogramAccumulator::new(&cell, 8).unwrap();
        let mut h_a = h_all.clone();
        let mut h_b = h_all.clone();
        let mut s_all = StructureFactorAccumulator::new(&cell, 2, false).unwrap();
        let mut s_a = s_all.clone();
        let mut s_b = s_all.clone();
        for (k, c) in cs.iter().enumerate() {
            h_all.accumulate(c, &cell);
            s_all.accumulate(c);
            if k < 9 {
                h_a.accumulate(c, &cell);
                s_a.accumulate(c);
            } else {
                h_b.accumulate(c, &cell);
                s_b.accumulate(c);
            }
        }
        h_a.merge(&h_b).unwrap();
        s_a.merge(&s_b).unwrap();
        assert_eq!(h_a.counts(), h_all.counts());
        for (x, y) in s_a.per_k().unwrap().iter().zip(s_all.per_k().unwrap()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn estimators_are_translation_invariant(seed in 0u64..1000, t in prop::array::uniform3(-5.0f64..5.0)) {
            let cell = SimulationCell::new(3, 2, 1.5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut h0 = HistogramAccumulator::new(&cell, 16).unwrap();
            let mut h1 = h0.clone();
            let mut s0 = StructureFactorAccumulator::new(&cell, 2, false).unwrap();
            let mut s1 = s0.clone();
            for _ in 0..4 {
                let c = ParticleConfiguration::random(&cell, &mut rng);
                let ct = c.translated(t, &cell);
                h0.accumulate(&c, &cell);
                s0.accumulate(&c);
                h1.accumulate(&ct, &cell);
                s1.accumulate(&ct);
            }
            prop_assert_eq!(h0.counts(), h1.counts());
            for (a, b) in s0.per_k().unwrap().iter().zip(s1.per_k().unwrap()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
