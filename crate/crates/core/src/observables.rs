//! Physical outputs: excitation, emission rate, g²(0), emission pattern.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::collective::CollectiveState;
use crate::couplings::green_tensor;
use crate::error::Result;
use crate::lattice::EmitterArray;
use crate::modes::ModeSet;
use crate::C64;

/// g² samples with p_out below this fraction of Nγ₀ are flagged.
pub const G2_RELIABLE_FRACTION: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableSample {
    pub t: f64,
    pub p_exc: f64,
    pub p_out: f64,
    pub g2: Option<f64>,
    pub g2_reliable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct G2 {
    pub value: f64,
    pub reliable: bool,
}

pub fn p_exc(state: &CollectiveState) -> f64 {
    state.layout.n_emitters as f64 * state.see0().re
}

pub fn p_out(state: &CollectiveState, modes: &ModeSet) -> f64 {
    state
        .layout
        .kept
        .iter()
        .map(|&l| modes.gamma_mu[l] * state.n(l).re)
        .sum()
}

/// Σ Γ_μΓ_ν Re q4[μ,ν,ν] / p_out².
pub fn g2_zero(state: &CollectiveState, modes: &ModeSet) -> G2 {
    let kept = &state.layout.kept;
    let mut num = 0.0;
    for &m in kept {
        for &v in kept {
            num += modes.gamma_mu[m] * modes.gamma_mu[v] * state.q4(m, v, v).re;
        }
    }
    let den = p_out(state, modes);
    let n = state.layout.n_emitters as f64;
    G2 {
        value: num / (den * den),
        reliable: den >= G2_RELIABLE_FRACTION * n * modes.gamma0,
    }
}

/// dg²/dt at t = 0 from the untruncated rates:
/// (2/N²)ΣΓ³ − (4/N²)ΣΓ² − (2/N³)(ΣΓ²)² + 4/N.
pub fn g2_slope_t0(modes: &ModeSet) -> f64 {
    let n = modes.n_emitters as f64;
    let s2: f64 = modes.gamma_mu.iter().map(|g| g * g).sum();
    let s3: f64 = modes.gamma_mu.iter().map(|g| g * g * g).sum();
    2.0 * s3 / (n * n) - 4.0 * s2 / (n * n) - 2.0 * s2 * s2 / (n * n * n) + 4.0 / n
}

/// g²(0) of the fully inverted state, 1 − 2/N + ΣΓ²/N².
pub fn g2_initial(modes: &ModeSet) -> f64 {
    let n = modes.n_emitters as f64;
    let kept = modes.kept_labels();
    let s1: f64 = kept.iter().map(|&l| modes.gamma_mu[l]).sum();
    let s2: f64 = kept.iter().map(|&l| modes.gamma_mu[l].powi(2)).sum();
    // numerator Σ_{μν}Γ_μΓ_ν(−2/N + 1 + δ_μν) over kept modes
    ((1.0 - 2.0 / n) * s1 * s1 + s2) / (s1 * s1)
}

/// Field amplitude of mode μ at `r`: N^{-1/2} Σ_n e^{−iμ·n} G(r − r_n)·d.
pub fn mode_field(
    modes: &ModeSet,
    array: &EmitterArray,
    label: usize,
    r: &Vector3<f64>,
) -> Result<[C64; 3]> {
    let n = array.len();
    let d = array.polarization;
    let mut out = [C64::new(0.0, 0.0); 3];
    for (site, pos) in array.sites.iter().zip(&array.positions) {
        let g = green_tensor(&(r - pos))?;
        let ph = modes.grid.phase(label, site).conj();
        for i in 0..3 {
            for j in 0..3 {
                out[i] += ph * g[(i, j)] * d[j];
            }
        }
    }
    let s = 1.0 / (n as f64).sqrt();
    Ok(out.map(|v| v * s))
}

/// Σ_kept |G̃_μ(r)|² Re n[μ], overall prefactor set to one.
pub fn directional_intensity(
    state: &CollectiveState,
    modes: &ModeSet,
    array: &EmitterArray,
    r: &Vector3<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for &l in &state.layout.kept {
        let f = mode_field(modes, array, l, r)?;
        let w: f64 = f.iter().map(|c| c.norm_sqr()).sum();
        total += w * state.n(l).re;
    }
    Ok(total)
}

/// ⟨σ^ee_n⟩ in the mode-diagonal approximation, (1/N)Σ_μ Re n[μ]. Only
/// the mode occupations are tracked, so the result is the same for every
/// site; the site index is accepted for interface symmetry.
pub fn site_population(state: &CollectiveState, _site: usize) -> f64 {
    let n = state.layout.n_emitters as f64;
    state
        .layout
        .kept
        .iter()
        .map(|&l| state.n(l).re)
        .sum::<f64>()
        / n
}

pub fn sample(t: f64, state: &CollectiveState, modes: &ModeSet) -> ObservableSample {
    let g2 = g2_zero(state, modes);
    ObservableSample {
        t,
        p_exc: p_exc(state),
        p_out: p_out(state, modes),
        g2: Some(g2.value),
        g2_reliable: g2.reliable,
    }
}

/// Marks g² after the emission peak as unreliable.
pub fn flag_post_peak(samples: &mut [ObservableSample]) {
    if let Some(ip) = peak_index(samples) {
        for s in samples.iter_mut().skip(ip + 1) {
            s.g2_reliable = false;
        }
    }
}

pub fn peak_index(samples: &[ObservableSample]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in samples.iter().enumerate() {
        if best.map_or(true, |b| s.p_out > samples[b].p_out) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub t: f64,
    pub p_out: f64,
    pub g2: Option<f64>,
}

pub fn peak(samples: &[ObservableSample]) -> Option<Peak> {
    peak_index(samples).map(|i| Peak {
        t: samples[i].t,
        p_out: samples[i].p_out,
        g2: samples[i].g2,
    })
}
