//! Cumulant equations in the spin-wave basis.
//!
//! Notation: A_μ = S†_μ, B_μ = S_μ, E_q = S^ee_q = N⁻¹Σ_n e^{−iq·n}σ^ee_n.
//! Tracked moments
//!
//! ```text
//! see0      = ⟨E_0⟩
//! n[μ]      = ⟨A_μ B_μ⟩
//! ee2[α]    = ⟨E_α E_{−α}⟩
//! t3[μ,ν]   = ⟨A_μ B_ν E_{ν−μ}⟩
//! q4[μ,ν,ξ] = ⟨A_μ A_ν B_ξ B_η⟩,  η = μ + ν − ξ
//! ```
//!
//! with every momentum restricted to the kept set. Five-operator moments
//! are closed by setting their joint cumulant to zero. Internal momentum
//! sums run over kept modes only; any moment whose index tuple is not
//! tracked reads as zero.
//!
//! With g_μ = Γ_μ + 2iJ_μ the adjoint generator is
//! L†O = Σ_μ [−(g*_μ/2) A_μ[B_μ, O] + (g_μ/2) [A_μ, O] B_μ].

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::modes::{ModeSet, MomentumGrid, MomentumIndex};
use crate::observables::{self, ObservableSample};
use crate::odeint::{self, IntegratorConfig, Stats};
use crate::C64;

const NONE: u32 = u32::MAX;
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Index bookkeeping for the tracked moments of one mode set.
#[derive(Debug)]
pub struct TrackedLayout {
    pub grid: MomentumGrid,
    pub n_emitters: usize,
    /// Kept labels, ascending.
    pub kept: Vec<usize>,
    slot: Vec<u32>,
    /// Canonical (a, b, c) slot triples: a ≤ b and c ≤ d.
    q4_keys: Vec<[u32; 3]>,
    q4_lookup: Vec<u32>,
}

impl TrackedLayout {
    pub fn new(modes: &ModeSet) -> Result<Self> {
        let kept = modes.kept_labels();
        if kept.is_empty() {
            return Err(Error::EmptyModeSet);
        }
        let grid = modes.grid;
        let k = kept.len();
        let mut slot = vec![NONE; modes.len()];
        for (s, &l) in kept.iter().enumerate() {
            slot[l] = s as u32;
        }
        let mut q4_keys = Vec::new();
        let mut q4_lookup = vec![NONE; k * k * k];
        let mut seen: HashMap<[u32; 3], u32> = HashMap::new();
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    let dl = grid.sub(grid.add(kept[a], kept[b]), kept[c]);
                    let d = slot[dl];
                    if d == NONE {
                        continue;
                    }
                    let key = [a.min(b) as u32, a.max(b) as u32, (c as u32).min(d)];
                    let id = *seen.entry(key).or_insert_with(|| {
                        q4_keys.push(key);
                        (q4_keys.len() - 1) as u32
                    });
                    q4_lookup[(a * k + b) * k + c] = id;
                }
            }
        }
        Ok(TrackedLayout {
            grid,
            n_emitters: modes.n_emitters,
            kept,
            slot,
            q4_keys,
            q4_lookup,
        })
    }

    pub fn kept_count(&self) -> usize {
        self.kept.len()
    }

    pub fn q4_count(&self) -> usize {
        self.q4_keys.len()
    }

    /// Number of complex tracked moments.
    pub fn len(&self) -> usize {
        let k = self.kept.len();
        1 + 2 * k + k * k + self.q4_keys.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    fn off_n(&self) -> usize {
        1
    }
    #[inline]
    fn off_ee2(&self) -> usize {
        1 + self.kept.len()
    }
    #[inline]
    fn off_t3(&self) -> usize {
        1 + 2 * self.kept.len()
    }
    #[inline]
    fn off_q4(&self) -> usize {
        let k = self.kept.len();
        1 + 2 * k + k * k
    }

    #[inline]
    pub fn slot(&self, label: usize) -> Option<usize> {
        let s = self.slot[label];
        (s != NONE).then_some(s as usize)
    }

    #[inline]
    fn q4_index(&self, la: usize, lb: usize, lc: usize) -> Option<usize> {
        let (a, b, c) = (self.slot[la], self.slot[lb], self.slot[lc]);
        if a == NONE || b == NONE || c == NONE {
            return None;
        }
        let k = self.kept.len();
        let id = self.q4_lookup[(a as usize * k + b as usize) * k + c as usize];
        (id != NONE).then_some(id as usize)
    }

    /// Labels (μ, ν, ξ) of the i-th stored q4 moment.
    pub fn q4_labels(&self, i: usize) -> (usize, usize, usize) {
        let [a, b, c] = self.q4_keys[i];
        (
            self.kept[a as usize],
            self.kept[b as usize],
            self.kept[c as usize],
        )
    }

    /// Every stored moment in storage order.
    pub fn manifest(&self) -> Vec<Tracked> {
        let m = |l: usize| self.grid.momentum(l);
        let mut out = vec![Tracked::Excited0];
        out.extend(self.kept.iter().map(|&l| Tracked::Occupation(m(l))));
        out.extend(self.kept.iter().map(|&l| Tracked::ExcitedPair(m(l))));
        for &a in &self.kept {
            for &b in &self.kept {
                out.push(Tracked::Triple(m(a), m(b)));
            }
        }
        for i in 0..self.q4_keys.len() {
            let (a, b, c) = self.q4_labels(i);
            out.push(Tracked::Quad(m(a), m(b), m(c)));
        }
        out
    }

    /// Writes the tuple manifest as CSV: index,kind,mu,nu,xi.
    pub fn write_manifest<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,kind,mu,nu,xi")?;
        for (i, t) in self.manifest().iter().enumerate() {
            let (kind, ids) = t.parts();
            let f: Vec<String> = ids
                .iter()
                .map(|m| fmt_momentum(m, self.grid.dims))
                .collect();
            let get = |j: usize| f.get(j).cloned().unwrap_or_default();
            writeln!(w, "{i},{kind},{},{},{}", get(0), get(1), get(2))?;
        }
        Ok(())
    }
}

fn fmt_momentum(m: &MomentumIndex, dims: usize) -> String {
    let c: Vec<String> = m.0[..dims].iter().map(|x| x.to_string()).collect();
    c.join(" ")
}

/// A tracked moment, addressed by momenta.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tracked {
    Excited0,
    Occupation(MomentumIndex),
    ExcitedPair(MomentumIndex),
    Triple(MomentumIndex, MomentumIndex),
    Quad(MomentumIndex, MomentumIndex, MomentumIndex),
}

impl Tracked {
    fn parts(&self) -> (&'static str, Vec<MomentumIndex>) {
        match *self {
            Tracked::Excited0 => ("see0", vec![]),
            Tracked::Occupation(a) => ("n", vec![a]),
            Tracked::ExcitedPair(a) => ("ee2", vec![a]),
            Tracked::Triple(a, b) => ("t3", vec![a, b]),
            Tracked::Quad(a, b, c) => ("q4", vec![a, b, c]),
        }
    }
}

/// The closure terms, each a momentum sum over a five- or four-operator
/// moment. Index meaning, with η = μ + ν − ξ:
///
/// ```text
/// TripleRaised(μ,ν)        Σ_ξ g*_ξ ⟨A_ξ B_ν E_{μ−ξ} E_{ν−μ}⟩
/// TripleLowered(μ,ν)       Σ_ξ g_ξ  ⟨A_μ B_ξ E_{ξ−ν} E_{ν−μ}⟩
/// QuadRaisedFirst(μ,ν,ξ)   Σ_o g*_o ⟨A_o A_ν B_ξ B_η E_{μ−o}⟩
/// QuadRaisedSecond(μ,ν,ξ)  Σ_o g*_o ⟨A_o A_μ B_ξ B_η E_{ν−o}⟩
/// QuadLoweredFirst(μ,ν,ξ)  Σ_o g_o  ⟨A_μ A_ν B_η B_o E_{o−ξ}⟩
/// QuadLoweredSecond(μ,ν,ξ) Σ_o g_o  ⟨A_μ A_ν B_ξ B_o E_{o−η}⟩
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClosureTerm {
    TripleRaised,
    TripleLowered,
    QuadRaisedFirst,
    QuadRaisedSecond,
    QuadLoweredFirst,
    QuadLoweredSecond,
}

impl ClosureTerm {
    pub const ALL: [ClosureTerm; 6] = [
        ClosureTerm::TripleRaised,
        ClosureTerm::TripleLowered,
        ClosureTerm::QuadRaisedFirst,
        ClosureTerm::QuadRaisedSecond,
        ClosureTerm::QuadLoweredFirst,
        ClosureTerm::QuadLoweredSecond,
    ];
}

/// Supplies the closure terms to the right-hand side. Indices are labels;
/// the third is ignored for the two triple terms.
pub trait ClosureSource: Sync {
    fn closure(&self, term: ClosureTerm, mu: usize, nu: usize, xi: usize) -> C64;
}

/// Snapshot of all tracked moments for one mode set.
#[derive(Clone, Debug)]
pub struct CollectiveState {
    pub layout: Arc<TrackedLayout>,
    pub values: Vec<C64>,
}

impl CollectiveState {
    pub fn zeros(layout: Arc<TrackedLayout>) -> Self {
        let n = layout.len();
        CollectiveState {
            layout,
            values: vec![ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn see0(&self) -> C64 {
        self.values[0]
    }

    #[inline]
    pub fn n(&self, l: usize) -> C64 {
        match self.layout.slot(l) {
            Some(s) => self.values[self.layout.off_n() + s],
            None => ZERO,
        }
    }

    #[inline]
    pub fn ee2(&self, l: usize) -> C64 {
        match self.layout.slot(l) {
            Some(s) => self.values[self.layout.off_ee2() + s],
            None => ZERO,
        }
    }

    #[inline]
    pub fn t3(&self, la: usize, lb: usize) -> C64 {
        match (self.layout.slot(la), self.layout.slot(lb)) {
            (Some(a), Some(b)) => {
                self.values[self.layout.off_t3() + a * self.layout.kept.len() + b]
            }
            _ => ZERO,
        }
    }

    #[inline]
    pub fn q4(&self, la: usize, lb: usize, lc: usize) -> C64 {
        match self.layout.q4_index(la, lb, lc) {
            Some(i) => self.values[self.layout.off_q4() + i],
            None => ZERO,
        }
    }

    /// Value of a tracked moment by momenta; `None` if not tracked.
    pub fn get(&self, t: &Tracked) -> Option<C64> {
        let g = &self.layout.grid;
        let lab = |m: &MomentumIndex| -> Option<usize> {
            let l = g.label(m);
            (g.wrap(&m.0) == *m).then_some(l)
        };
        let lay = &self.layout;
        match t {
            Tracked::Excited0 => Some(self.see0()),
            Tracked::Occupation(a) => lay.slot(lab(a)?).map(|s| self.values[lay.off_n() + s]),
            Tracked::ExcitedPair(a) => lay.slot(lab(a)?).map(|s| self.values[lay.off_ee2() + s]),
            Tracked::Triple(a, b) => {
                let (sa, sb) = (lay.slot(lab(a)?)?, lay.slot(lab(b)?)?);
                Some(self.values[lay.off_t3() + sa * lay.kept.len() + sb])
            }
            Tracked::Quad(a, b, c) => {
                let i = lay.q4_index(lab(a)?, lab(b)?, lab(c)?)?;
                Some(self.values[lay.off_q4() + i])
            }
        }
    }

    /// Writes every moment as CSV: index,kind,mu,nu,xi,re,im.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,kind,mu,nu,xi,re,im")?;
        let dims = self.layout.grid.dims;
        for (i, (t, v)) in self.layout.manifest().iter().zip(&self.values).enumerate() {
            let (kind, ids) = t.parts();
            let f: Vec<String> = ids.iter().map(|m| fmt_momentum(m, dims)).collect();
            let get = |j: usize| f.get(j).cloned().unwrap_or_default();
            writeln!(
                w,
                "{i},{kind},{},{},{},{:.16e},{:.16e}",
                get(0),
                get(1),
                get(2),
                v.re,
                v.im
            )?;
        }
        Ok(())
    }

    /// Checks the reality and range conditions on see0 and n.
    pub fn check_invariants(&self, tol: f64) -> std::result::Result<(), String> {
        let s = self.see0();
        if s.im.abs() > tol || s.re < -tol || s.re > 1.0 + tol {
            return Err(format!("see0 = {s}"));
        }
        for &l in &self.layout.kept {
            let v = self.n(l);
            if v.im.abs() > tol || v.re < -tol {
                return Err(format!("n[{}] = {v}", self.layout.grid.momentum(l)));
            }
        }
        Ok(())
    }
}

/// Fully inverted initial state.
pub fn init_collective(modes: &ModeSet) -> Result<CollectiveState> {
    Ok(CollectiveSystem::new(modes)?.init())
}

/// The closed equations for one mode set.
pub struct CollectiveSystem {
    pub layout: Arc<TrackedLayout>,
    g: Vec<C64>,
    gamma: Vec<f64>,
    n: f64,
    gsum: C64,
}

impl CollectiveSystem {
    pub fn new(modes: &ModeSet) -> Result<Self> {
        let layout = Arc::new(TrackedLayout::new(modes)?);
        Ok(Self::with_layout(modes, layout))
    }

    pub fn with_layout(modes: &ModeSet, layout: Arc<TrackedLayout>) -> Self {
        let gsum = layout.kept.iter().map(|&l| modes.g_mu[l]).sum();
        CollectiveSystem {
            g: modes.g_mu.clone(),
            gamma: modes.gamma_mu.clone(),
            n: modes.n_emitters as f64,
            gsum,
            layout,
        }
    }

    /// Fully inverted state.
    pub fn init(&self) -> CollectiveState {
        let lay = self.layout.clone();
        let mut st = CollectiveState::zeros(lay.clone());
        let k = lay.kept.len();
        st.values[0] = C64::new(1.0, 0.0);
        for s in 0..k {
            st.values[lay.off_n() + s] = C64::new(1.0, 0.0);
            let l = lay.kept[s];
            st.values[lay.off_ee2() + s] = C64::new(if l == 0 { 1.0 } else { 0.0 }, 0.0);
            st.values[lay.off_t3() + s * k + s] = C64::new(1.0, 0.0);
        }
        for i in 0..lay.q4_count() {
            let (a, b, c) = lay.q4_labels(i);
            let v = -2.0 / self.n + (a == c) as u8 as f64 + (b == c) as u8 as f64;
            st.values[lay.off_q4() + i] = C64::new(v, 0.0);
        }
        st
    }

    /// Derivative with the cumulant closures.
    pub fn rhs(&self, state: &CollectiveState) -> CollectiveState {
        let mut out = CollectiveState::zeros(self.layout.clone());
        self.rhs_into(&state.values, &mut out.values);
        out
    }

    pub fn rhs_into(&self, y: &[C64], dy: &mut [C64]) {
        let st = StateView {
            lay: &self.layout,
            y,
        };
        let cl = CumulantClosure::new(self, st);
        self.rhs_core(st, &cl, dy);
    }

    /// Derivative with caller-supplied closure terms.
    pub fn rhs_with<C: ClosureSource>(
        &self,
        state: &CollectiveState,
        closures: &C,
    ) -> CollectiveState {
        let mut out = CollectiveState::zeros(self.layout.clone());
        let st = StateView {
            lay: &self.layout,
            y: &state.values,
        };
        self.rhs_core(st, closures, &mut out.values);
        out
    }

    /// Closure term evaluated from the tracked moments.
    pub fn closure(
        &self,
        state: &CollectiveState,
        term: ClosureTerm,
        mu: usize,
        nu: usize,
        xi: usize,
    ) -> C64 {
        let st = StateView {
            lay: &self.layout,
            y: &state.values,
        };
        CumulantClosure::new(self, st).closure(term, mu, nu, xi)
    }

    fn rhs_core<C: ClosureSource>(&self, st: StateView<'_>, cl: &C, dy: &mut [C64]) {
        let lay = &*self.layout;
        let grid = &lay.grid;
        let kept = &lay.kept;
        let k = kept.len();
        let nn = self.n;
        let g = &self.g;
        let gsum = self.gsum;

        let tg_row: Vec<C64> = kept
            .iter()
            .map(|&m| kept.iter().map(|&o| g[o] * st.t3(m, o)).sum())
            .collect();
        let tgc_col: Vec<C64> = kept
            .iter()
            .map(|&m| kept.iter().map(|&o| g[o].conj() * st.t3(o, m)).sum())
            .collect();

        let (head, rest) = dy.split_at_mut(lay.off_t3());
        let (dt3, dq4) = rest.split_at_mut(k * k);

        // see0
        head[0] = -kept.iter().map(|&m| self.gamma[m] * st.n(m)).sum::<C64>() / nn;

        // n
        let gcn: C64 = kept.iter().map(|&o| g[o].conj() * st.n(o)).sum();
        for (s, &m) in kept.iter().enumerate() {
            head[lay.off_n() + s] =
                -(self.gamma[m] + gsum / nn) * st.n(m) - gcn / nn + tg_row[s] + tgc_col[s];
        }

        // ee2
        for (s, &al) in kept.iter().enumerate() {
            let mut a = ZERO;
            let mut b = ZERO;
            for &v in kept {
                let (vp, vm) = (grid.add(v, al), grid.sub(v, al));
                a += g[v] * (st.n(vp) + st.n(vm)) + (g[v].conj() - g[v]) * st.n(v);
                b += g[v].conj() * (st.t3(v, vm) + st.t3(v, vp))
                    + g[v] * (st.t3(vp, v) + st.t3(vm, v));
            }
            head[lay.off_ee2() + s] = a / (2.0 * nn * nn) - b / (2.0 * nn);
        }

        // q4 by slot triple; zero where the fourth momentum is untracked
        let kk = k * k;
        let off_q4 = lay.off_q4();
        let mut qf = vec![ZERO; kk * k];
        qf.par_chunks_mut(kk).enumerate().for_each(|(a, blk)| {
            for (bc, out) in blk.iter_mut().enumerate() {
                let id = lay.q4_lookup[a * kk + bc];
                if id != NONE {
                    *out = st.y[off_q4 + id as usize];
                }
            }
        });
        let qs = |a: usize, b: u32, c: u32| -> C64 {
            if b == NONE || c == NONE {
                ZERO
            } else {
                qf[a * kk + b as usize * k + c as usize]
            }
        };
        let slot = |l: usize| lay.slot[l];
        let size = grid.size();
        let gk: Vec<C64> = kept.iter().map(|&o| g[o]).collect();

        // Contractions over the summed momentum o, each depending on two indices:
        // pt[s, ξ]  = Σ_o g*_o q4(o, s−o, ξ)
        // rt[μ, δ]  = Σ_o g*_o q4(o, μ, δ+o)
        // ut[μ, ξ]  = Σ_o g*_o q4(o, μ, ξ)
        // wt[μ, ν]  = Σ_o g_o q4(μ, ν, μ+ν−o)
        let mut pt = vec![ZERO; size * k];
        pt.par_chunks_mut(k).enumerate().for_each(|(sl, row)| {
            for (so, &o) in kept.iter().enumerate() {
                let b = slot(grid.sub(sl, o));
                if b == NONE {
                    continue;
                }
                let w = gk[so].conj();
                let base = so * kk + b as usize * k;
                for (x, out) in row.iter_mut().enumerate() {
                    *out += w * qf[base + x];
                }
            }
        });
        let mut rt = vec![ZERO; k * size];
        rt.par_chunks_mut(size).enumerate().for_each(|(sm, row)| {
            for (d, out) in row.iter_mut().enumerate() {
                let mut acc = ZERO;
                for (so, &o) in kept.iter().enumerate() {
                    acc += gk[so].conj() * qs(so, sm as u32, slot(grid.add(d, o)));
                }
                *out = acc;
            }
        });
        let mut ut = vec![ZERO; kk];
        ut.par_chunks_mut(k).enumerate().for_each(|(sm, row)| {
            for so in 0..k {
                let w = gk[so].conj();
                let base = so * kk + sm * k;
                for (x, out) in row.iter_mut().enumerate() {
                    *out += w * qf[base + x];
                }
            }
        });
        let mut wt = vec![ZERO; kk];
        wt.par_chunks_mut(k).enumerate().for_each(|(sm, row)| {
            for (sv, out) in row.iter_mut().enumerate() {
                let mv = grid.add(kept[sm], kept[sv]);
                let mut acc = ZERO;
                for (so, &o) in kept.iter().enumerate() {
                    acc += gk[so] * qs(sm, sv as u32, slot(grid.sub(mv, o)));
                }
                *out = acc;
            }
        });

        // t3
        dt3.par_chunks_mut(k).enumerate().for_each(|(sm, row)| {
            let m = kept[sm];
            for (sv, out) in row.iter_mut().enumerate() {
                let v = kept[sv];
                let mut quad = ut[sm * k + sv];
                let mut tri = ZERO;
                for (sx, &x) in kept.iter().enumerate() {
                    quad += gk[sx] * qs(sm, slot(grid.sub(grid.add(x, v), m)), sv as u32);
                    tri += gk[sx] * st.t3(m, x)
                        - gk[sx].conj() * st.t3(x, grid.sub(grid.add(x, v), m))
                        - gk[sx] * st.t3(m, grid.sub(grid.add(x, m), v));
                }
                *out = -quad / (2.0 * nn) + (g[v] - g[m]) / (2.0 * nn) * st.n(m) + tri / nn
                    - (g[m].conj() / 2.0 + g[v] / 2.0 + gsum / nn) * st.t3(m, v)
                    + cl.closure(ClosureTerm::TripleRaised, m, v, 0)
                    + cl.closure(ClosureTerm::TripleLowered, m, v, 0);
            }
        });

        // q4
        dq4.par_iter_mut().enumerate().for_each(|(i, out)| {
            let [sm, sv, sx] = lay.q4_keys[i].map(|s| s as usize);
            let (m, v, x) = (kept[sm], kept[sv], kept[sx]);
            let mv = grid.add(m, v);
            let e = grid.sub(mv, x);
            let q = st.y[off_q4 + i];
            let s1 = pt[mv * k + sx]
                - rt[sm * size + grid.sub(x, v)]
                - ut[sm * k + sx]
                - rt[sv * size + grid.sub(x, m)]
                - ut[sv * k + sx];
            let s2 = wt[sm * k + sv];
            *out = -(2.0 * gsum / nn + 0.5 * (g[m].conj() + g[v].conj() + g[x] + g[e])) * q
                + s1 / nn
                - s2 / nn
                + cl.closure(ClosureTerm::QuadRaisedFirst, m, v, x)
                + cl.closure(ClosureTerm::QuadRaisedSecond, m, v, x)
                + cl.closure(ClosureTerm::QuadLoweredFirst, m, v, x)
                + cl.closure(ClosureTerm::QuadLoweredSecond, m, v, x);
        });
    }
}

/// Label-addressed read access to a flat state vector.
#[derive(Clone, Copy)]
struct StateView<'a> {
    lay: &'a TrackedLayout,
    y: &'a [C64],
}

impl StateView<'_> {
    #[inline]
    fn see0(&self) -> C64 {
        self.y[0]
    }
    #[inline]
    fn n(&self, l: usize) -> C64 {
        match self.lay.slot(l) {
            Some(s) => self.y[self.lay.off_n() + s],
            None => ZERO,
        }
    }
    #[inline]
    fn ee2(&self, l: usize) -> C64 {
        match self.lay.slot(l) {
            Some(s) => self.y[self.lay.off_ee2() + s],
            None => ZERO,
        }
    }
    #[inline]
    fn t3(&self, a: usize, b: usize) -> C64 {
        match (self.lay.slot(a), self.lay.slot(b)) {
            (Some(a), Some(b)) => self.y[self.lay.off_t3() + a * self.lay.kept.len() + b],
            _ => ZERO,
        }
    }
    #[inline]
    fn q4(&self, a: usize, b: usize, c: usize) -> C64 {
        match self.lay.q4_index(a, b, c) {
            Some(i) => self.y[self.lay.off_q4() + i],
            None => ZERO,
        }
    }
}

struct CumulantClosure<'a> {
    sys: &'a CollectiveSystem,
    st: StateView<'a>,
    /// Σ_o g_o t3[μ,o] and Σ_o g*_o t3[o,μ], by label.
    tg_row: Vec<C64>,
    tgc_col: Vec<C64>,
}

impl<'a> CumulantClosure<'a> {
    fn new(sys: &'a CollectiveSystem, st: StateView<'a>) -> Self {
        let kept = &sys.layout.kept;
        let size = sys.g.len();
        let mut tg_row = vec![ZERO; size];
        let mut tgc_col = vec![ZERO; size];
        for &m in kept {
            tg_row[m] = kept.iter().map(|&o| sys.g[o] * st.t3(m, o)).sum();
            tgc_col[m] = kept.iter().map(|&o| sys.g[o].conj() * st.t3(o, m)).sum();
        }
        CumulantClosure {
            sys,
            st,
            tg_row,
            tgc_col,
        }
    }

    // Σ_o g*_o ⟨A_o A_ν B_ξ B_η E_{μ−o}⟩
    fn quad_raised(&self, m: usize, v: usize, x: usize) -> C64 {
        let g = &self.sys.g;
        let st = &self.st;
        let grid = &self.sys.layout.grid;
        let e = grid.sub(grid.add(m, v), x);
        let s0 = st.see0();
        let dd = ((m == x) as u8 + (v == x) as u8) as f64;
        g[m].conj() * s0 * st.q4(m, v, x) - 2.0 * g[m].conj() * dd * st.n(m) * st.n(v) * s0
            + dd * st.n(v) * self.tgc_col[m]
            + g[x].conj() * st.n(x) * st.t3(v, e)
            + g[e].conj() * st.n(e) * st.t3(v, x)
    }

    // Σ_o g_o ⟨A_μ A_ν B_ξ B_o E_{o−η}⟩
    fn quad_lowered(&self, m: usize, v: usize, x: usize) -> C64 {
        let g = &self.sys.g;
        let st = &self.st;
        let grid = &self.sys.layout.grid;
        let e = grid.sub(grid.add(m, v), x);
        let s0 = st.see0();
        let dd = ((m == x) as u8 + (v == x) as u8) as f64;
        let mut out = g[e] * s0 * st.q4(m, v, x) - 2.0 * g[e] * dd * st.n(m) * st.n(v) * s0
            + g[m] * st.n(m) * st.t3(v, x)
            + g[v] * st.n(v) * st.t3(m, x);
        if v == e {
            out += st.n(m) * self.tg_row[v];
        }
        if m == e {
            out += st.n(v) * self.tg_row[m];
        }
        out
    }
}

impl ClosureSource for CumulantClosure<'_> {
    fn closure(&self, term: ClosureTerm, m: usize, v: usize, x: usize) -> C64 {
        let g = &self.sys.g;
        let st = &self.st;
        let grid = &self.sys.layout.grid;
        match term {
            ClosureTerm::TripleRaised => {
                let s0 = st.see0();
                let mut out =
                    g[m].conj() * s0 * st.t3(m, v) + g[v].conj() * st.n(v) * st.ee2(grid.sub(m, v));
                if m == v {
                    out += s0 * self.tgc_col[m] - 2.0 * g[m].conj() * s0 * s0 * st.n(m);
                }
                out
            }
            ClosureTerm::TripleLowered => {
                let s0 = st.see0();
                let mut out = g[v] * s0 * st.t3(m, v) + g[m] * st.n(m) * st.ee2(grid.sub(m, v));
                if m == v {
                    out += s0 * self.tg_row[m] - 2.0 * g[m] * s0 * s0 * st.n(m);
                }
                out
            }
            ClosureTerm::QuadRaisedFirst => self.quad_raised(m, v, x),
            ClosureTerm::QuadRaisedSecond => self.quad_raised(v, m, x),
            ClosureTerm::QuadLoweredFirst => {
                let e = grid.sub(grid.add(m, v), x);
                self.quad_lowered(m, v, e)
            }
            ClosureTerm::QuadLoweredSecond => self.quad_lowered(m, v, x),
        }
    }
}

/// Closure term from the tracked moments of `state`, addressed by momenta.
pub fn cumulant_closures(
    state: &CollectiveState,
    modes: &ModeSet,
    term: ClosureTerm,
    idx: &[MomentumIndex],
) -> Result<C64> {
    let sys = CollectiveSystem::with_layout(modes, state.layout.clone());
    let mut labels = [0usize; 3];
    for (o, m) in labels.iter_mut().zip(idx) {
        *o = modes.label_of(m)?;
    }
    Ok(sys.closure(state, term, labels[0], labels[1], labels[2]))
}

/// Joint cumulant of an ordered product of `n` operators from the moments
/// of its sub-products. `values` maps each nonempty index subset (kept in
/// ascending order, so each entry is an ordered sub-product) to its
/// expectation. Missing subsets read as zero.
pub fn joint_cumulant(n: usize, values: &BTreeMap<Vec<usize>, C64>) -> C64 {
    let mut total = ZERO;
    let items: Vec<usize> = (0..n).collect();
    for_each_partition(&items, &mut Vec::new(), &mut |blocks| {
        let p = blocks.len();
        let mut term = C64::new(factorial(p - 1) * if p % 2 == 1 { 1.0 } else { -1.0 }, 0.0);
        for b in blocks {
            term *= values.get(b).copied().unwrap_or(ZERO);
        }
        total += term;
    });
    total
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|x| x as f64).product()
}

fn for_each_partition(
    items: &[usize],
    acc: &mut Vec<Vec<usize>>,
    f: &mut dyn FnMut(&[Vec<usize>]),
) {
    let Some((&first, rest)) = items.split_first() else {
        f(acc);
        return;
    };
    for i in 0..acc.len() {
        acc[i].push(first);
        for_each_partition(rest, acc, f);
        acc[i].pop();
    }
    acc.push(vec![first]);
    for_each_partition(rest, acc, f);
    acc.pop();
}

/// Result of [`evolve_collective`].
#[derive(Clone, Debug)]
pub struct CollectiveRun {
    pub samples: Vec<ObservableSample>,
    pub final_state: CollectiveState,
    pub tracked: usize,
    pub kept: usize,
    pub stats: Stats,
}

/// Integrates from full inversion and samples the observables on `t_grid`.
pub fn evolve_collective(
    modes: &ModeSet,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<CollectiveRun> {
    let sys = CollectiveSystem::new(modes)?;
    let init = sys.init();
    let y0: Vec<f64> = bytemuck::cast_slice::<C64, f64>(&init.values).to_vec();
    let mut samples = Vec::with_capacity(t_grid.len());
    let mut last = init.clone();
    let stats = odeint::integrate_with(
        |_, y, dy| {
            sys.rhs_into(bytemuck::cast_slice(y), bytemuck::cast_slice_mut(dy));
        },
        &y0,
        t_grid,
        cfg,
        |_, t, y| {
            last.values.copy_from_slice(bytemuck::cast_slice(y));
            samples.push(observables::sample(t, &last, modes));
            Ok(())
        },
    )?;
    observables::flag_post_peak(&mut samples);
    Ok(CollectiveRun {
        samples,
        final_state: last,
        tracked: sys.layout.len(),
        kept: sys.layout.kept_count(),
        stats,
    })
}
