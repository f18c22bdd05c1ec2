//! Ewald summation of the periodic Coulomb energy of electrons in a uniform
//! neutralizing background.
//!
//! The pair potential is split into a short-ranged `erfc` part summed in real
//! space and a smooth part summed over reciprocal lattice vectors. The
//! `k = 0` component is dropped (background neutrality), and the constant
//! self/background term is `N ξ / 2` with `ξ` the Madelung constant of the
//! simulation cell.

use std::f64::consts::PI;

use num_complex::Complex64;
use libm::erfc;

use crate::cell::{ParticleConfiguration, SimulationCell};
use crate::error::{Error, Result};

/// Upper bound on the number of stored half-space reciprocal vectors.
const MAX_KVECS: usize = 2_000_000;

/// Precomputed splitting parameter, cutoffs and reciprocal weights for a cell.
#[derive(Clone, Debug)]
pub struct EwaldContext {
    alpha: f64,
    r_cut: f64,
    k_cut: f64,
    side: f64,
    /// Lattice translations (in units of L) that can bring a minimum-image
    /// vector within the real-space cutoff.
    images: Vec<[f64; 3]>,
    /// Half-space reciprocal vectors as integer triples with their weights
    /// `2 · (4π/V) exp(-k²/4α²)/k²` (the factor 2 accounts for `-k`).
    kvecs: Vec<([i32; 3], f64)>,
    n_max: i32,
    madelung: f64,
}

fn bisect(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> bool) -> f64 {
    // f(lo) false, f(hi) true; returns the smallest x with f(x) true
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

impl EwaldContext {
    /// Picks `α` for a real-space cutoff of `L/2` and a reciprocal cutoff so
    /// that the neglected contribution of a single pair stays below
    /// `tolerance`.
    pub fn new(cell: &SimulationCell, tolerance: f64) -> Result<Self> {
        Self::check_tolerance(tolerance)?;
        let r_cut = 0.5 * cell.side();
        // a handful of images sit just beyond the cutoff; keep a margin of 4
        let alpha = bisect(1e-6 / r_cut, 1e3 / r_cut, |a| 4.0 * erfc(a * r_cut) / r_cut <= tolerance);
        Self::build(cell, alpha, r_cut, tolerance)
    }

    /// Uses a caller-supplied splitting parameter and derives both cutoffs.
    pub fn with_alpha(cell: &SimulationCell, alpha: f64, tolerance: f64) -> Result<Self> {
        Self::check_tolerance(tolerance)?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("Ewald alpha must be positive, got {alpha}")));
        }
        let r_cut = bisect(1e-9, 1e4 * cell.side(), |r| 4.0 * erfc(alpha * r) / r <= tolerance);
        Self::build(cell, alpha, r_cut, tolerance)
    }

    fn check_tolerance(tolerance: f64) -> Result<()> {
        if !(tolerance > 0.0 && tolerance <= 1e-4) {
            return Err(Error::Config(format!(
                "Ewald tolerance must lie in (0, 1e-4], got {tolerance}"
            )));
        }
        if tolerance < 1e-15 {
            return Err(Error::Config(format!(
                "Ewald tolerance {tolerance} is below double-precision resolution"
            )));
        }
        Ok(())
    }

    fn build(cell: &SimulationCell, alpha: f64, r_cut: f64, tolerance: f64) -> Result<Self> {
        let l = cell.side();
        let v = cell.volume();
        let four_pi_v = 4.0 * PI / v;
        let weight = |k2: f64| four_pi_v * (-k2 / (4.0 * alpha * alpha)).exp() / k2;
        // integrated tail of the reciprocal sum beyond k_cut: (2α/√π) erfc(k_cut/2α)
        let k_cut = bisect(1e-9, 1e4 * alpha, |k| {
            2.0 * alpha / PI.sqrt() * erfc(k / (2.0 * alpha)) <= tolerance
        });
        let kunit = 2.0 * PI / l;
        let n_max = (k_cut / kunit).floor() as i32;
        let approx_count = 4.0 / 3.0 * PI * (n_max as f64 + 1.0).powi(3) / 2.0;
        if approx_count > MAX_KVECS as f64 {
            return Err(Error::Config(format!(
                "Ewald tolerance {tolerance} needs ~{approx_count:.0} reciprocal vectors (limit {MAX_KVECS})"
            )));
        }

        let mut kvecs = Vec::new();
        for nx in 0..=n_max {
            for ny in -n_max..=n_max {
                for nz in -n_max..=n_max {
                    // half space: first non-zero component positive
                    let positive = nx > 0 || (nx == 0 && (ny > 0 || (ny == 0 && nz > 0)));
                    if !positive {
                        continue;
                    }
                    let n2 = (nx * nx + ny * ny + nz * nz) as f64;
                    let k2 = n2 * kunit * kunit;
                    if k2 > k_cut * k_cut {
                        continue;
                    }
                    kvecs.push(([nx, ny, nz], 2.0 * weight(k2)));
                }
            }
        }

        // any image whose distance can drop below r_cut from a min-image vector
        let reach = r_cut + 0.5 * 3f64.sqrt() * l;
        let m = (reach / l).ceil() as i32;
        let mut images = Vec::new();
        for a in -m..=m {
            for b in -m..=m {
                for c in -m..=m {
                    let n = [a as f64, b as f64, c as f64];
                    let len = l * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                    if len <= reach {
                        images.push(n);
                    }
                }
            }
        }

        let mut ctx = Self {
            alpha,
            r_cut,
            k_cut,
            side: l,
            images,
            kvecs,
            n_max,
            madelung: 0.0,
        };
        ctx.madelung = ctx.compute_madelung(v);
        Ok(ctx)
    }

    fn compute_madelung(&self, volume: f64) -> f64 {
        let l = self.side;
        let a = self.alpha;
        let real: f64 = self
            .images
            .iter()
            .map(|n| l * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt())
            .filter(|&d| d > 0.0 && d <= self.r_cut)
            .map(|d| erfc(a * d) / d)
            .sum();
        let recip: f64 = self.kvecs.iter().map(|(_, w)| w).sum();
        real + recip - PI / (a * a * volume) - 2.0 * a / PI.sqrt()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn real_cutoff(&self) -> f64 {
        self.r_cut
    }

    pub fn reciprocal_cutoff(&self) -> f64 {
        self.k_cut
    }

    pub fn n_kvecs(&self) -> usize {
        self.kvecs.len()
    }

    /// Madelung constant `ξ` (scaled units, before the `1/r_s` prefactor).
    pub fn madelung(&self) -> f64 {
        self.madelung
    }

    /// Real-space `erfc` part of the pair potential for a minimum-image vector.
    fn real_space_pair(&self, d: [f64; 3]) -> f64 {
        let l = self.side;
        let rc2 = self.r_cut * self.r_cut;
        let mut sum = 0.0;
        for n in &self.images {
            let x = d[0] + n[0] * l;
            let y = d[1] + n[1] * l;
            let z = d[2] + n[2] * l;
            let r2 = x * x + y * y + z * z;
            if r2 <= rc2 {
                let r = r2.sqrt();
                sum += erfc(self.alpha * r) / r;
            }
        }
        sum
    }

    /// Total Ewald pair sum `Σ_{i<j} ψ(r_ij)` in scaled units, without the
    /// Madelung term and without the `1/r_s` prefactor.
    fn pair_sum(&self, positions: &[[f64; 3]], cell: &SimulationCell) -> Result<f64> {
        let n = positions.len();
        let mut real = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = [
                    cell.min_image_component(positions[i][0] - positions[j][0]),
                    cell.min_image_component(positions[i][1] - positions[j][1]),
                    cell.min_image_component(positions[i][2] - positions[j][2]),
                ];
                let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                if r2 < 1e-24 {
                    return Err(Error::Divergence(i, j));
                }
                real += self.real_space_pair(d);
            }
        }

        let recip = self.structure_factor_sum(positions);
        let npairs = (n * n.saturating_sub(1)) as f64 / 2.0;
        let background = npairs * PI / (self.alpha * self.alpha * cell.volume());
        Ok(real + recip - background)
    }

    /// `½ Σ_{k≠0} w_k (|ρ_k|² − N)` evaluated over the stored half space.
    fn structure_factor_sum(&self, positions: &[[f64; 3]]) -> f64 {
        let n = positions.len();
        let nm = self.n_max as usize;
        let width = 2 * nm + 1;
        let kunit = 2.0 * PI / self.side;
        // phase tables e^{i m kunit x} for m in -n_max..=n_max
        let mut tables = vec![Complex64::new(0.0, 0.0); n * 3 * width];
        for (i, r) in positions.iter().enumerate() {
            for a in 0..3 {
                let base = (i * 3 + a) * width;
                let step = Complex64::from_polar(1.0, kunit * r[a]);
                tables[base + nm] = Complex64::new(1.0, 0.0);
                for m in 1..=nm {
                    let p = tables[base + nm + m - 1] * step;
                    tables[base + nm + m] = p;
                    tables[base + nm - m] = p.conj();
                }
            }
        }
        let mut sum = 0.0;
        for (nv, w) in &self.kvecs {
            let ix = (nv[0] + self.n_max) as usize;
            let iy = (nv[1] + self.n_max) as usize;
            let iz = (nv[2] + self.n_max) as usize;
            let mut rho = Complex64::new(0.0, 0.0);
            for i in 0..n {
                let t = &tables[i * 3 * width..(i + 1) * 3 * width];
                rho += t[ix] * t[width + iy] * t[2 * width + iz];
            }
            sum += 0.5 * w * (rho.norm_sqr() - n as f64);
        }
        sum
    }

    /// Periodic Coulomb energy in Hartree: `(1/r_s)[Σ_{i<j} ψ(r_ij) + N ξ/2]`.
    pub fn potential_energy(&self, config: &ParticleConfiguration, cell: &SimulationCell) -> Result<f64> {
        self.potential_energy_of(config.positions(), cell)
    }

    pub fn potential_energy_of(&self, positions: &[[f64; 3]], cell: &SimulationCell) -> Result<f64> {
        let pair = self.pair_sum(positions, cell)?;
        let n = positions.len() as f64;
        Ok((pair + 0.5 * n * self.madelung) / cell.r_s())
    }

    /// Periodic pair potential `ψ(r)` with zero cell average (scaled units).
    pub fn pair_potential(&self, d: [f64; 3], cell: &SimulationCell) -> f64 {
        let d = [
            cell.min_image_component(d[0]),
            cell.min_image_component(d[1]),
            cell.min_image_component(d[2]),
        ];
        let kunit = 2.0 * PI / self.side;
        let recip: f64 = self
            .kvecs
            .iter()
            .map(|(nv, w)| {
                let phase = kunit * (nv[0] as f64 * d[0] + nv[1] as f64 * d[1] + nv[2] as f64 * d[2]);
                w * phase.cos()
            })
            .sum();
        self.real_space_pair(d) + recip - PI / (self.alpha * self.alpha * cell.volume())
    }
}

/// Madelung constant of the cell from a built context.
pub fn madelung_constant(ctx: &EwaldContext, _cell: &SimulationCell) -> f64 {
    ctx.madelung()
}
