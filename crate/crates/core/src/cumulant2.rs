//! Second-order cumulant expansion in the individual emitter basis.
//!
//! Tracks ⟨σ^ee_i⟩, ⟨σ†_iσ_j⟩ and ⟨σ^ee_iσ^ee_j⟩ (i ≠ j). ⟨σ_i⟩ and
//! ⟨σ_iσ^ee_j⟩ vanish from full inversion onward and are not stored.

use nalgebra::DMatrix;

use crate::couplings::CouplingMatrices;
use crate::error::{Error, Result};
use crate::observables::{self, ObservableSample};
use crate::odeint::{self, IntegratorConfig, Stats};
use crate::C64;

#[derive(Clone, Debug, PartialEq)]
pub struct IndividualState {
    pub ee: Vec<f64>,
    /// ⟨σ†_iσ_j⟩; the diagonal is kept at zero.
    pub coh: DMatrix<C64>,
    /// ⟨σ^ee_iσ^ee_j⟩; the diagonal is kept at zero.
    pub eecorr: DMatrix<f64>,
}

impl IndividualState {
    pub fn len(&self) -> usize {
        self.ee.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ee.is_empty()
    }

    /// Number of real unknowns: N + 2N² + N².
    pub fn flat_len(n: usize) -> usize {
        n + 3 * n * n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let n = self.len();
        let mut y = Vec::with_capacity(Self::flat_len(n));
        y.extend_from_slice(&self.ee);
        for c in self.coh.iter() {
            y.push(c.re);
            y.push(c.im);
        }
        y.extend(self.eecorr.iter());
        y
    }

    pub fn from_flat(n: usize, y: &[f64]) -> Result<Self> {
        if y.len() != Self::flat_len(n) {
            return Err(Error::Dimension(format!("{} values for N = {n}", y.len())));
        }
        let ee = y[..n].to_vec();
        let c = &y[n..n + 2 * n * n];
        let coh = DMatrix::from_iterator(n, n, c.chunks_exact(2).map(|p| C64::new(p[0], p[1])));
        let eecorr = DMatrix::from_column_slice(n, n, &y[n + 2 * n * n..]);
        Ok(IndividualState { ee, coh, eecorr })
    }

    pub fn check_invariants(&self, tol: f64) -> std::result::Result<(), String> {
        let n = self.len();
        for (i, &e) in self.ee.iter().enumerate() {
            if !(-tol..=1.0 + 1e-6).contains(&e) {
                return Err(format!("ee[{i}] = {e}"));
            }
        }
        for i in 0..n {
            for j in 0..n {
                let dc = (self.coh[(i, j)] - self.coh[(j, i)].conj()).norm();
                if dc > tol {
                    return Err(format!("coh not hermitian at ({i},{j}): {dc:e}"));
                }
                let de = (self.eecorr[(i, j)] - self.eecorr[(j, i)]).abs();
                if de > tol {
                    return Err(format!("eecorr not symmetric at ({i},{j}): {de:e}"));
                }
            }
        }
        Ok(())
    }
}

/// Full inversion: ee = 1, coh = 0, eecorr = 1 off the diagonal.
pub fn init_individual(n: usize) -> IndividualState {
    IndividualState {
        ee: vec![1.0; n],
        coh: DMatrix::zeros(n, n),
        eecorr: DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 }),
    }
}

/// Precomputed coupling matrices for the right-hand side.
pub struct IndividualSystem {
    n: usize,
    gamma0: f64,
    gamma: DMatrix<f64>,
    j: DMatrix<f64>,
    /// iJ − Γ/2 with zero diagonal
    a: DMatrix<C64>,
    /// iJ + Γ/2 with zero diagonal
    b: DMatrix<C64>,
}

impl IndividualSystem {
    pub fn new(couplings: &CouplingMatrices) -> Self {
        let n = couplings.len();
        let off = |i: usize, j: usize, v: C64| if i == j { C64::new(0.0, 0.0) } else { v };
        let a = DMatrix::from_fn(n, n, |i, j| {
            off(
                i,
                j,
                C64::new(-0.5 * couplings.gamma[(i, j)], couplings.j[(i, j)]),
            )
        });
        let b = DMatrix::from_fn(n, n, |i, j| {
            off(
                i,
                j,
                C64::new(0.5 * couplings.gamma[(i, j)], couplings.j[(i, j)]),
            )
        });
        IndividualSystem {
            n,
            gamma0: couplings.gamma0,
            gamma: couplings.gamma.clone(),
            j: couplings.j.clone(),
            a,
            b,
        }
    }

    pub fn rhs(&self, s: &IndividualState) -> IndividualState {
        let n = self.n;
        let g0 = self.gamma0;
        let (a, b) = (&self.a, &self.b);
        let i_unit = C64::new(0.0, 1.0);

        // col[j] = Σ_{n≠j} (iJ_nj − Γ_nj/2) ⟨σ†_nσ_j⟩
        let col: Vec<C64> = (0..n)
            .map(|j| (0..n).map(|m| a[(m, j)] * s.coh[(m, j)]).sum())
            .collect();
        let ee: Vec<f64> = (0..n).map(|i| -g0 * s.ee[i] + 2.0 * col[i].re).collect();

        // Σ_n (iJ_jn + Γ_jn/2) coh[i,n] = (coh·Bᵀ)[i,j]; Σ_n (−iJ_in + Γ_in/2) coh[n,j] = −(A·coh)[i,j].
        // Zero diagonals of coh, A and B drop n = i and n = j automatically.
        let m1 = &s.coh * b.transpose();
        let m2 = a * &s.coh;
        let coh = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                return C64::new(0.0, 0.0);
            }
            -g0 * s.coh[(i, j)]
                + 0.5 * self.gamma[(i, j)] * (4.0 * s.eecorr[(i, j)] - s.ee[i] - s.ee[j])
                + i_unit * self.j[(j, i)] * (s.ee[j] - s.ee[i])
                + m1[(i, j)] * (2.0 * s.ee[j] - 1.0)
                - m2[(i, j)] * (2.0 * s.ee[i] - 1.0)
        });

        let eecorr = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                return 0.0;
            }
            let sj = col[j] - a[(i, j)] * s.coh[(i, j)];
            let si = col[i] - a[(j, i)] * s.coh[(j, i)];
            -2.0 * g0 * s.eecorr[(i, j)] + 2.0 * s.ee[i] * sj.re + 2.0 * s.ee[j] * si.re
        });

        IndividualState { ee, coh, eecorr }
    }
}

pub fn individual_rhs(
    state: &IndividualState,
    couplings: &CouplingMatrices,
) -> Result<IndividualState> {
    if state.len() != couplings.len() {
        return Err(Error::Dimension(format!(
            "{} couplings for {} emitters",
            couplings.len(),
            state.len()
        )));
    }
    Ok(IndividualSystem::new(couplings).rhs(state))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndividualObservables {
    pub p_exc: f64,
    pub p_out: f64,
}

pub fn individual_observables(
    state: &IndividualState,
    couplings: &CouplingMatrices,
) -> IndividualObservables {
    let n = state.len();
    let mut p_out = C64::new(couplings.gamma0 * state.ee.iter().sum::<f64>(), 0.0);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p_out += couplings.gamma[(i, j)] * state.coh[(i, j)];
            }
        }
    }
    debug_assert!(
        p_out.im.abs() < 1e-8 * (1.0 + p_out.re.abs()),
        "p_out residue {}",
        p_out.im
    );
    IndividualObservables {
        p_exc: state.ee.iter().sum(),
        p_out: p_out.re,
    }
}

#[derive(Clone, Debug)]
pub struct IndividualRun {
    pub samples: Vec<ObservableSample>,
    pub final_state: IndividualState,
    pub stats: Stats,
}

/// Integrates from full inversion; g² is not available from this method.
pub fn evolve_individual(
    couplings: &CouplingMatrices,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<IndividualRun> {
    let n = couplings.len();
    if n == 0 {
        return Err(Error::Dimension("no emitters".into()));
    }
    if t_grid.first().copied() != Some(0.0) {
        return Err(Error::TimeGrid("evolution starts at t = 0".into()));
    }
    let sys = IndividualSystem::new(couplings);
    let y0 = init_individual(n).to_flat();
    let mut samples = Vec::with_capacity(t_grid.len());
    let mut last = y0.clone();
    let stats = odeint::integrate_with(
        |_, y, dy| {
            let s = IndividualState::from_flat(n, y).expect("state length fixed");
            dy.copy_from_slice(&sys.rhs(&s).to_flat());
        },
        &y0,
        t_grid,
        cfg,
        |_, t, y| {
            let s = IndividualState::from_flat(n, y)?;
            let o = individual_observables(&s, couplings);
            samples.push(ObservableSample {
                t,
                p_exc: o.p_exc,
                p_out: o.p_out,
                g2: None,
                g2_reliable: false,
            });
            last.copy_from_slice(y);
            Ok(())
        },
    )?;
    observables::flag_post_peak(&mut samples);
    Ok(IndividualRun {
        samples,
        final_state: IndividualState::from_flat(n, &last)?,
        stats,
    })
}
