//! Spin-wave (collective) modes: quasi-momenta, rates, truncation.
//!
//! Momenta live on a grid of N1D values per axis. Internally each
//! momentum is addressed by a *label*, the mixed-radix number built from
//! its components reduced mod N1D; arithmetic on labels is arithmetic on
//! momenta modulo the zone.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::couplings::CouplingMatrices;
use crate::error::{Error, Result};
use crate::lattice::EmitterArray;
use crate::C64;

/// Quasi-momentum with components in the zone
/// {−⌊(N1D−1)/2⌋, …, ⌈(N1D−1)/2⌉}. Unused axes are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MomentumIndex(pub [i64; 3]);

impl fmt::Display for MomentumIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.0[0], self.0[1], self.0[2])
    }
}

/// Reduces every component of `v` mod `n1d` into the zone.
pub fn wrap_momentum(v: &[i64], n1d: usize) -> MomentumIndex {
    let mut out = [0i64; 3];
    for (o, &x) in out.iter_mut().zip(v) {
        *o = wrap_scalar(x, n1d);
    }
    MomentumIndex(out)
}

fn wrap_scalar(x: i64, n1d: usize) -> i64 {
    let n = n1d as i64;
    let r = x.rem_euclid(n);
    if r > n / 2 {
        r - n
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentumGrid {
    pub dims: usize,
    pub n1d: usize,
}

impl MomentumGrid {
    pub fn new(dims: usize, n1d: usize) -> Self {
        assert!((1..=3).contains(&dims) && n1d >= 1);
        MomentumGrid { dims, n1d }
    }

    pub fn size(&self) -> usize {
        self.n1d.pow(self.dims as u32)
    }

    pub fn wrap(&self, v: &[i64]) -> MomentumIndex {
        let mut m = wrap_momentum(v, self.n1d);
        for c in m.0.iter_mut().skip(self.dims) {
            *c = 0;
        }
        m
    }

    pub fn label(&self, m: &MomentumIndex) -> usize {
        let n = self.n1d as i64;
        let mut lab = 0usize;
        for ax in (0..self.dims).rev() {
            lab = lab * self.n1d + m.0[ax].rem_euclid(n) as usize;
        }
        lab
    }

    pub fn momentum(&self, label: usize) -> MomentumIndex {
        let mut out = [0i64; 3];
        let mut rest = label;
        for o in out.iter_mut().take(self.dims) {
            *o = wrap_scalar((rest % self.n1d) as i64, self.n1d);
            rest /= self.n1d;
        }
        MomentumIndex(out)
    }

    #[inline]
    pub fn add(&self, a: usize, b: usize) -> usize {
        if self.dims == 1 {
            let s = a + b;
            return if s >= self.n1d { s - self.n1d } else { s };
        }
        self.combine(a, b, |x, y, n| (x + y) % n)
    }

    #[inline]
    pub fn sub(&self, a: usize, b: usize) -> usize {
        if self.dims == 1 {
            return if a >= b { a - b } else { a + self.n1d - b };
        }
        self.combine(a, b, |x, y, n| (x + n - y) % n)
    }

    #[inline]
    pub fn neg(&self, a: usize) -> usize {
        self.sub(0, a)
    }

    fn combine(
        &self,
        mut a: usize,
        mut b: usize,
        f: impl Fn(usize, usize, usize) -> usize,
    ) -> usize {
        let n = self.n1d;
        let mut out = 0;
        let mut place = 1;
        for _ in 0..self.dims {
            out += f(a % n, b % n, n) * place;
            a /= n;
            b /= n;
            place *= n;
        }
        out
    }

    /// exp(i·2π·μ·s/N1D) for lattice site `s`.
    pub fn phase(&self, label: usize, site: &[i64; 3]) -> C64 {
        let m = self.momentum(label);
        let mut dot = 0i64;
        for ax in 0..self.dims {
            dot += m.0[ax] * site[ax];
        }
        let k = dot.rem_euclid(self.n1d as i64) as f64;
        C64::from_polar(1.0, 2.0 * std::f64::consts::PI * k / self.n1d as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeSet {
    pub grid: MomentumGrid,
    pub n_emitters: usize,
    pub gamma0: f64,
    /// Γ_μ by label.
    pub gamma_mu: Vec<f64>,
    /// J_μ by label.
    pub j_mu: Vec<f64>,
    /// g_μ = Γ_μ + 2iJ_μ by label.
    pub g_mu: Vec<C64>,
    pub kept: Vec<bool>,
    pub threshold: f64,
    /// Lattice sites of the emitters, for the mode phases.
    pub sites: Vec<[i64; 3]>,
}

impl ModeSet {
    pub fn len(&self) -> usize {
        self.gamma_mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma_mu.is_empty()
    }

    pub fn momenta(&self) -> Vec<MomentumIndex> {
        (0..self.len()).map(|l| self.grid.momentum(l)).collect()
    }

    pub fn label_of(&self, m: &MomentumIndex) -> Result<usize> {
        let w = self.grid.wrap(&m.0);
        if w != *m {
            return Err(Error::UnknownMomentum(m.0[..self.grid.dims].to_vec()));
        }
        Ok(self.grid.label(m))
    }

    pub fn kept_labels(&self) -> Vec<usize> {
        (0..self.len()).filter(|&l| self.kept[l]).collect()
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    /// Default truncation threshold γ₀/N.
    pub fn default_threshold(&self) -> f64 {
        self.gamma0 / self.n_emitters as f64
    }

    /// Phase table e^{iμ·s_n} indexed `[label][site]`.
    pub fn phase_table(&self) -> Vec<Vec<C64>> {
        (0..self.len())
            .map(|l| self.sites.iter().map(|s| self.grid.phase(l, s)).collect())
            .collect()
    }

    /// CSV with momentum components, Γ_μ, J_μ, kept flag.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let axes = ["mu_x", "mu_y", "mu_z"];
        let head: Vec<&str> = axes[..self.grid.dims].to_vec();
        writeln!(w, "{},gamma_mu,j_mu,kept", head.join(","))?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&l| {
            let m = self.grid.momentum(l);
            let mut key = m.0;
            key.reverse();
            key
        });
        for l in order {
            let m = self.grid.momentum(l);
            let comps: Vec<String> = m.0[..self.grid.dims]
                .iter()
                .map(|c| c.to_string())
                .collect();
            writeln!(
                w,
                "{},{:.16e},{:.16e},{}",
                comps.join(","),
                self.gamma_mu[l],
                self.j_mu[l],
                self.kept[l] as u8
            )?;
        }
        Ok(())
    }
}

/// Collective rates and shifts from the double sum over emitter pairs with
/// lattice-periodic phases. Exact for rings, approximate for open arrays.
pub fn spin_wave_modes(couplings: &CouplingMatrices, array: &EmitterArray) -> Result<ModeSet> {
    let n = array.len();
    if couplings.len() != n {
        return Err(Error::Dimension(format!(
            "{} couplings for {} emitters",
            couplings.len(),
            n
        )));
    }
    let grid = MomentumGrid::new(array.dims(), array.n1d);
    debug_assert_eq!(grid.size(), n);
    let sites = array.sites.clone();
    let sums: Vec<(f64, f64)> = (0..grid.size())
        .into_par_iter()
        .map(|l| {
            let p: Vec<C64> = sites.iter().map(|s| grid.phase(l, s)).collect();
            let mut gsum = C64::new(0.0, 0.0);
            let mut jsum = C64::new(0.0, 0.0);
            for a in 0..n {
                let mut gr = C64::new(0.0, 0.0);
                let mut jr = C64::new(0.0, 0.0);
                for b in 0..n {
                    let pc = p[b].conj();
                    gr += pc * couplings.gamma[(a, b)];
                    jr += pc * couplings.j[(a, b)];
                }
                gsum += p[a] * gr;
                jsum += p[a] * jr;
            }
            (gsum.re / n as f64, jsum.re / n as f64)
        })
        .collect();
    let gamma_mu: Vec<f64> = sums.iter().map(|s| s.0).collect();
    let j_mu: Vec<f64> = sums.iter().map(|s| s.1).collect();
    let g_mu = gamma_mu
        .iter()
        .zip(&j_mu)
        .map(|(&g, &j)| C64::new(g, 2.0 * j))
        .collect();
    Ok(ModeSet {
        grid,
        n_emitters: n,
        gamma0: couplings.gamma0,
        kept: vec![true; gamma_mu.len()],
        gamma_mu,
        j_mu,
        g_mu,
        threshold: 0.0,
        sites,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralModeBasis {
    /// Row μ holds α_{μ,n}, normalised so N⁻¹Σ_n |α_{μ,n}|² = 1.
    pub alpha: DMatrix<C64>,
    /// Eigenvalues of Γ, ascending.
    pub rates: Vec<f64>,
}

pub fn exact_decay_spectrum(couplings: &CouplingMatrices) -> GeneralModeBasis {
    let n = couplings.len();
    let eig = SymmetricEigen::new(couplings.gamma.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let scale = (n as f64).sqrt();
    let alpha = DMatrix::from_fn(n, n, |mu, site| {
        C64::new(scale * eig.eigenvectors[(site, order[mu])], 0.0)
    });
    let rates = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    GeneralModeBasis { alpha, rates }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Truncation {
    None,
    /// Keep modes with Γ_μ > value.
    Threshold(f64),
    /// Drop the k modes with the smallest Γ_μ.
    DropK(usize),
    /// Threshold γ₀/N.
    Default,
    /// Keep momenta inside the light cone, |μ| ≤ a·N1D.
    LightCone,
}

impl fmt::Display for Truncation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Truncation::None => f.write_str("none"),
            Truncation::Threshold(v) => write!(f, "threshold:{v}"),
            Truncation::DropK(k) => write!(f, "drop_k:{k}"),
            Truncation::Default => f.write_str("default"),
            Truncation::LightCone => f.write_str("light_cone"),
        }
    }
}

impl std::str::FromStr for Truncation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || {
            Error::Config(format!(
                "bad truncation `{s}` (none | default | light_cone | threshold:<v> | drop_k:<k>)"
            ))
        };
        match s {
            "none" => return Ok(Truncation::None),
            "default" => return Ok(Truncation::Default),
            "light_cone" | "lightcone" => return Ok(Truncation::LightCone),
            _ => {}
        }
        let (kind, val) = s
            .split_once(':')
            .or_else(|| s.split_once('='))
            .ok_or_else(bad)?;
        match kind.trim() {
            "threshold" => {
                let v: f64 = val.trim().parse().map_err(|_| bad())?;
                if !(v >= 0.0) {
                    return Err(bad());
                }
                Ok(Truncation::Threshold(v))
            }
            "drop_k" | "drop" => Ok(Truncation::DropK(val.trim().parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

/// Keeps modes with Γ_μ > threshold. A threshold of exactly 0 keeps every
/// mode, including numerically-zero dark ones.
pub fn truncate_modes(modes: &ModeSet, threshold: f64) -> Result<ModeSet> {
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!(
            "threshold must be non-negative, got {threshold}"
        )));
    }
    let mut out = modes.clone();
    out.threshold = threshold;
    for l in 0..out.len() {
        out.kept[l] = threshold == 0.0 || out.gamma_mu[l] > threshold;
    }
    if out.kept_count() == 0 {
        return Err(Error::EmptyModeSet);
    }
    Ok(out)
}

/// Drops the `k` smallest-Γ_μ modes, ties broken by momentum.
pub fn truncate_most_subradiant(modes: &ModeSet, k: usize) -> Result<ModeSet> {
    let mut order: Vec<usize> = (0..modes.len()).collect();
    order.sort_by(|&a, &b| {
        modes.gamma_mu[a]
            .total_cmp(&modes.gamma_mu[b])
            .then_with(|| modes.grid.momentum(a).cmp(&modes.grid.momentum(b)))
    });
    let mut out = modes.clone();
    out.kept = vec![true; modes.len()];
    for &l in order.iter().take(k) {
        out.kept[l] = false;
    }
    out.threshold = 0.0;
    if out.kept_count() == 0 {
        return Err(Error::EmptyModeSet);
    }
    Ok(out)
}

/// Keeps momenta with |μ| ≤ a·N1D, i.e. wave vectors 2πμ/(N1D·a) inside
/// the free-space light cone.
pub fn truncate_light_cone(modes: &ModeSet, spacing: f64) -> Result<ModeSet> {
    let radius = spacing * modes.grid.n1d as f64;
    let mut out = modes.clone();
    for l in 0..out.len() {
        let m = modes.grid.momentum(l);
        let r2: i64 = m.0.iter().map(|c| c * c).sum();
        out.kept[l] = (r2 as f64) <= radius * radius * (1.0 + 1e-12);
    }
    out.threshold = 0.0;
    if out.kept_count() == 0 {
        return Err(Error::EmptyModeSet);
    }
    Ok(out)
}

/// `spacing` is only read by [`Truncation::LightCone`].
pub fn apply_truncation(modes: &ModeSet, t: Truncation, spacing: f64) -> Result<ModeSet> {
    match t {
        Truncation::None => truncate_modes(modes, 0.0),
        Truncation::Threshold(v) => truncate_modes(modes, v),
        Truncation::Default => truncate_modes(modes, modes.default_threshold()),
        Truncation::DropK(k) => truncate_most_subradiant(modes, k),
        Truncation::LightCone => truncate_light_cone(modes, spacing),
    }
}

/// Share of spin-wave rates above γ₀/N.
pub fn radiant_fraction(modes: &ModeSet) -> f64 {
    let th = modes.default_threshold();
    modes.gamma_mu.iter().filter(|&&g| g > th).count() as f64 / modes.len() as f64
}

/// Share of eigenvalues of Γ above γ₀/N. For open arrays the spin-wave
/// rates pick up boundary tails of order 1/N that push many dark modes over
/// the threshold, so the eigenvalue count is the meaningful one there.
pub fn radiant_fraction_exact(couplings: &CouplingMatrices) -> f64 {
    let n = couplings.len();
    let th = couplings.gamma0 / n as f64;
    let spectrum = exact_decay_spectrum(couplings);
    spectrum.rates.iter().filter(|&&g| g > th).count() as f64 / n as f64
}

/// Large-array limit of the radiant fraction: 2a (1D), πa² (2D), a² (3D).
pub fn asymptotic_fraction(a: f64, dims: usize) -> f64 {
    match dims {
        1 => 2.0 * a,
        2 => std::f64::consts::PI * a * a,
        _ => a * a,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::couplings::{coupling_matrices, Environment};
    use crate::lattice::{build_array, Geometry, Polarization};
    use proptest::prelude::*;

    fn modes(kind: Geometry, n1d: usize, a: f64, env: Environment) -> ModeSet {
        let arr = build_array(kind, n1d, a, Polarization::Circular.vector()).unwrap();
        let c = coupling_matrices(&arr, env).unwrap();
        spin_wave_modes(&c, &arr).unwrap()
    }

    #[test]
    fn wrap_examples() {
        assert_eq!(wrap_momentum(&[3], 5).0[0], -2);
        assert_eq!(wrap_momentum(&[-2], 4).0[0], 2);
        assert_eq!(wrap_momentum(&[0], 4).0[0], 0);
        assert_eq!(wrap_momentum(&[7, -9], 4).0, [-1, -1, 0]);
    }

    proptest! {
        #[test]
        fn wrap_properties(v in -1000i64..1000, n1d in 1usize..40) {
            let w = wrap_momentum(&[v], n1d).0[0];
            prop_assert_eq!(wrap_momentum(&[w], n1d).0[0], w);
            let lo = -(((n1d - 1) / 2) as i64);
            let hi = (n1d / 2) as i64;
            prop_assert!(lo <= w && w <= hi);
            prop_assert_eq!((w - v).rem_euclid(n1d as i64), 0);
            let m = wrap_momentum(&[-v], n1d).0[0];
            prop_assert_eq!((w + m).rem_euclid(n1d as i64), 0);
        }

        #[test]
        fn label_arithmetic(dims in 1usize..4, n1d in 1usize..7, a in 0usize..343, b in 0usize..343) {
            let g = MomentumGrid::new(dims, n1d);
            let (a, b) = (a % g.size(), b % g.size());
            let (ma, mb) = (g.momentum(a), g.momentum(b));
            let sum: Vec<i64> = (0..3).map(|i| ma.0[i] + mb.0[i]).collect();
            prop_assert_eq!(g.label(&g.wrap(&sum)), g.add(a, b));
            let diff: Vec<i64> = (0..3).map(|i| ma.0[i] - mb.0[i]).collect();
            prop_assert_eq!(g.label(&g.wrap(&diff)), g.sub(a, b));
            prop_assert_eq!(g.add(g.neg(a), a), 0);
            prop_assert_eq!(g.label(&ma), a);
        }
    }

    #[test]
    fn dicke_and_independent_rates() {
        let m = modes(Geometry::Chain, 10, 0.1, Environment::Dicke);
        for l in 0..10 {
            let want = if l == 0 { 10.0 } else { 0.0 };
            assert!((m.gamma_mu[l] - want).abs() < 1e-12);
        }
        let m = modes(Geometry::Square, 3, 0.1, Environment::Independent);
        assert!(m.gamma_mu.iter().all(|g| (g - 1.0).abs() < 1e-12));
        let t = truncate_modes(&modes(Geometry::Ring, 10, 0.1, Environment::Dicke), 0.1).unwrap();
        assert_eq!(t.kept_labels(), vec![0]);
    }

    #[test]
    fn ring_rates_are_the_eigenvalues() {
        let arr = build_array(Geometry::Ring, 3, 0.15, Polarization::Circular.vector()).unwrap();
        let c = coupling_matrices(&arr, Environment::FreeSpace).unwrap();
        let m = spin_wave_modes(&c, &arr).unwrap();
        let mut sw = m.gamma_mu.clone();
        sw.sort_by(f64::total_cmp);
        let ex = exact_decay_spectrum(&c);
        for (a, b) in sw.iter().zip(&ex.rates) {
            assert!((a - b).abs() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn spectrum_basics() {
        let arr = build_array(Geometry::Chain, 1, 0.15, Polarization::Circular.vector()).unwrap();
        let c = coupling_matrices(&arr, Environment::FreeSpace).unwrap();
        assert_eq!(exact_decay_spectrum(&c).rates, vec![1.0]);

        let arr = build_array(Geometry::Chain, 20, 0.15, Polarization::Circular.vector()).unwrap();
        let c = coupling_matrices(&arr, Environment::FreeSpace).unwrap();
        let ex = exact_decay_spectrum(&c);
        assert!((ex.rates.iter().sum::<f64>() - 20.0).abs() < 1e-10);
        assert!(ex.rates.windows(2).all(|w| w[0] <= w[1]));
        // orthonormality
        let n = 20.0;
        let prod = &ex.alpha * ex.alpha.adjoint() / C64::new(n, 0.0);
        for i in 0..20 {
            for j in 0..20 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).norm() < 1e-10);
            }
        }
        let m = spin_wave_modes(&c, &arr).unwrap();
        let top_sw = m.gamma_mu.iter().cloned().fold(f64::MIN, f64::max);
        let top_ex = *ex.rates.last().unwrap();
        assert!(
            (top_sw - top_ex).abs() / top_ex < 0.10,
            "{top_sw} vs {top_ex}"
        );
    }

    #[test]
    fn truncation_selectors() {
        let m = modes(Geometry::Ring, 12, 0.15, Environment::FreeSpace);
        assert_eq!(truncate_modes(&m, 0.0).unwrap().kept_count(), 12);
        let d = truncate_most_subradiant(&m, 7).unwrap();
        assert_eq!(d.kept_count(), 5);
        let dropped_max = (0..12)
            .filter(|&l| !d.kept[l])
            .map(|l| m.gamma_mu[l])
            .fold(f64::MIN, f64::max);
        let kept_min = (0..12)
            .filter(|&l| d.kept[l])
            .map(|l| m.gamma_mu[l])
            .fold(f64::MAX, f64::min);
        assert!(dropped_max <= kept_min);
        assert!(matches!(
            truncate_most_subradiant(&m, 12),
            Err(Error::EmptyModeSet)
        ));
        assert!(matches!(truncate_modes(&m, 1e9), Err(Error::EmptyModeSet)));
        assert!(d.kept[0]);
        assert_eq!(
            "drop_k:3".parse::<Truncation>().unwrap(),
            Truncation::DropK(3)
        );
        assert_eq!(
            "threshold:0.5".parse::<Truncation>().unwrap(),
            Truncation::Threshold(0.5)
        );
        assert!("threshold:-1".parse::<Truncation>().is_err());
    }

    #[test]
    fn ring_100_fraction() {
        // finite-size excess over 2a: the ring keeps 37 of 100 modes
        let m = modes(Geometry::Ring, 100, 0.15, Environment::FreeSpace);
        let f = radiant_fraction(&m);
        assert!((f - 0.3).abs() <= 0.08, "{f}");
        let lc = truncate_light_cone(&m, 0.15).unwrap();
        assert_eq!(lc.kept_count(), 31);
        assert!((asymptotic_fraction(0.15, 1) - 0.3).abs() < 1e-15);
        assert!((asymptotic_fraction(0.15, 2) - 0.0706858).abs() < 1e-6);
    }

    #[test]
    fn waveguide_fraction_at_most_half() {
        for (n, a) in [(20, 0.15), (31, 0.3), (16, 0.45), (40, 0.5)] {
            let arr =
                build_array(Geometry::WaveguideChain, n, a, Polarization::Z.vector()).unwrap();
            let c = coupling_matrices(&arr, Environment::Waveguide1d).unwrap();
            assert!(radiant_fraction_exact(&c) <= 0.5 + 1.0 / n as f64);
        }
        // spin-wave rates agree when N·a is a whole number of wavelengths
        let m = modes(Geometry::WaveguideChain, 20, 0.15, Environment::Waveguide1d);
        assert!(radiant_fraction(&m) <= 0.55);
    }

    #[test]
    fn light_cone_square() {
        let m = modes(Geometry::Square, 20, 0.15, Environment::Independent);
        let lc = truncate_light_cone(&m, 0.15).unwrap();
        // integer points with |μ| ≤ 3
        assert_eq!(lc.kept_count(), 29);
        assert!(lc.kept[0]);
    }

    #[test]
    fn csv_dump() {
        let m = modes(Geometry::Square, 3, 0.15, Environment::FreeSpace);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("mu_x,mu_y,gamma_mu,j_mu,kept\n-1,-1,"));
        assert_eq!(s.lines().count(), 10);
    }

    fn geometry() -> impl Strategy<Value = (Geometry, usize)> {
        prop_oneof![
            (2usize..30).prop_map(|n| (Geometry::Chain, n)),
            (3usize..30).prop_map(|n| (Geometry::Ring, n)),
            (2usize..6).prop_map(|n| (Geometry::Square, n)),
            (2usize..4).prop_map(|n| (Geometry::Cube, n)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn sum_rule_and_inversion((kind, n1d) in geometry(), a in 0.05f64..0.45) {
            let m = modes(kind, n1d, a, Environment::FreeSpace);
            let n = m.n_emitters as f64;
            let total: f64 = m.gamma_mu.iter().sum();
            prop_assert!((total - n).abs() <= 1e-10 * n);
            for l in 0..m.len() {
                let r = m.grid.neg(l);
                prop_assert!((m.gamma_mu[l] - m.gamma_mu[r]).abs() < 1e-10);
                prop_assert!((m.j_mu[l] - m.j_mu[r]).abs() < 1e-10);
                prop_assert!(m.gamma_mu[l] >= -1e-10 * n);
            }
            // the uniform mode survives default truncation below half-wavelength spacing
            let t = apply_truncation(&m, Truncation::Default, a).unwrap();
            prop_assert!(t.kept[0]);
        }
    }
}
