//! Symmetric rank-one convexification by lamination search.
//!
//! `R_{k+1} f(ξ) = inf { t R_k f(ξ₁) + (1−t) R_k f(ξ₂) }` over splits with
//! `t ξ₁ + (1−t) ξ₂ = ξ` and `ξ₁ − ξ₂ = α η⊗η`. The infimum is discretized on
//! a `(θ, t, α)` grid, augmented by "snap" amplitudes that make a child
//! rank-deficient or exactly zero, and then refined by golden-section search
//! around the best candidate. Snaps matter because the nonconvexity of the
//! compliance density sits on a single point (the zero matrix), which no
//! uniform amplitude grid hits.

use std::f64::consts::{FRAC_PI_2, PI};

use dashmap::DashMap;
use rayon::prelude::*;

use crate::density::{qc_envelope, EnergyParams};
use crate::error::{Error, Result};
use crate::sym2::Sym2;

/// One laminate split `ξ = t ξ₁ + (1−t) ξ₂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitCandidate {
    pub t: f64,
    pub alpha: f64,
    pub eta_angle: f64,
    pub value: f64,
}

impl SplitCandidate {
    /// `(ξ₁, ξ₂) = (ξ + (1−t)α η⊗η, ξ − tα η⊗η)`.
    pub fn children(&self, xi: Sym2) -> (Sym2, Sym2) {
        let nn = Sym2::outer_dir(self.eta_angle);
        (
            xi + ((1.0 - self.t) * self.alpha) * nn,
            xi - (self.t * self.alpha) * nn,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaminationGrid {
    pub n_t: usize,
    pub n_alpha: usize,
    pub alpha_max: f64,
    pub n_theta: usize,
    /// Golden-section iterations per refinement pass.
    pub refine_iters: usize,
    /// Memoization quantum for child keys.
    pub quantum: f64,
}

impl LaminationGrid {
    pub fn new(n_t: usize, n_alpha: usize, alpha_max: f64, n_theta: usize) -> Result<Self> {
        if n_t < 2 || n_alpha < 2 || n_theta < 2 {
            return Err(Error::InvalidParameter(
                "lamination grid counts must be >= 2".into(),
            ));
        }
        if !(alpha_max > 0.0) {
            return Err(Error::InvalidParameter("alpha_max must be positive".into()));
        }
        Ok(Self {
            n_t,
            n_alpha,
            alpha_max,
            n_theta,
            refine_iters: 40,
            quantum: 1e-9,
        })
    }

    /// Default grid for densities with weight `λ`: amplitudes up to `4√λ`,
    /// cache quantum `1e-6·√λ`.
    pub fn for_lambda(lambda: f64) -> Self {
        let sl = lambda.sqrt();
        Self {
            n_t: 9,
            n_alpha: 6,
            alpha_max: 4.0 * sl,
            n_theta: 8,
            refine_iters: 40,
            quantum: 1e-6 * sl,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Amp {
    Fixed(f64),
    /// Amplitude chosen so that one child becomes rank-deficient.
    Rank,
    /// `ξ` is rank-deficient: split into `ξ/t` and the zero matrix.
    Zero,
}

#[derive(Clone, Copy, Debug)]
struct Split {
    t: f64,
    theta: f64,
    alpha: f64,
    xi1: Sym2,
    xi2: Sym2,
}

const RANK_TOL: f64 = 1e-10;

fn is_rank_deficient(xi: Sym2) -> bool {
    xi.det().abs() <= RANK_TOL * xi.norm_sq()
}

/// Builds the split for `(θ, t, amplitude rule)`, or `None` when the rule
/// does not apply.
fn make_split(xi: Sym2, theta: f64, t: f64, amp: Amp) -> Option<Split> {
    if !(t > 0.0 && t < 1.0) {
        return None;
    }
    let nn = Sym2::outer_dir(theta);
    let alpha = match amp {
        Amp::Fixed(a) => a,
        Amp::Rank => {
            // det(ξ − s η⊗η) = det ξ − s ηᵀ cof(ξ) η
            let denom = nn.dot(&xi.cof());
            if denom.abs() <= 1e-14 * xi.norm_sq().max(1e-300) {
                return None;
            }
            // ξ₂ = ξ − s η⊗η when s > 0, ξ₁ = ξ − s η⊗η when s < 0
            let s = xi.det() / denom;
            if s > 0.0 {
                s / t
            } else if s < 0.0 {
                -s / (1.0 - t)
            } else {
                return None;
            }
        }
        Amp::Zero => {
            if xi.is_zero() || !is_rank_deficient(xi) {
                return None;
            }
            return Some(Split {
                t,
                theta: xi.principal_angle() + if xi.trace() >= 0.0 { 0.0 } else { FRAC_PI_2 },
                alpha: xi.trace() / t,
                xi1: (1.0 / t) * xi,
                xi2: Sym2::ZERO,
            });
        }
    };
    let mut xi1 = xi + ((1.0 - t) * alpha) * nn;
    let mut xi2 = xi - (t * alpha) * nn;
    // negative amplitude: swap roles so the reported amplitude is nonnegative
    if alpha < 0.0 {
        std::mem::swap(&mut xi1, &mut xi2);
        return Some(Split {
            t: 1.0 - t,
            theta,
            alpha: -alpha,
            xi1,
            xi2,
        });
    }
    Some(Split {
        t,
        theta,
        alpha,
        xi1,
        xi2,
    })
}

type Key = (u8, bool, i64, i64, i64);

/// Memoized lamination search for one density.
pub struct RsymSearch<F> {
    f: F,
    grid: LaminationGrid,
    cache: DashMap<Key, f64>,
    capacity: usize,
}

impl<F> RsymSearch<F>
where
    F: Fn(Sym2) -> f64 + Sync,
{
    pub fn new(f: F, grid: LaminationGrid) -> Self {
        Self {
            f,
            grid,
            cache: DashMap::new(),
            capacity: 2_000_000,
        }
    }

    fn key(&self, level: usize, xi: Sym2) -> Key {
        let q = |v: f64| (v / self.grid.quantum).round() as i64;
        (level as u8, xi.is_zero(), q(xi.a), q(xi.b), q(xi.d))
    }

    /// `R_level f(ξ)`.
    pub fn value(&self, xi: Sym2, level: usize) -> f64 {
        if level == 0 {
            return (self.f)(xi);
        }
        let key = self.key(level, xi);
        if let Some(v) = self.cache.get(&key) {
            return *v;
        }
        let v = self
            .best_split(xi, level)
            .map_or_else(|| self.value(xi, level - 1), |c| c.value);
        if self.cache.len() >= self.capacity {
            self.cache.clear();
        }
        self.cache.insert(key, v);
        v
    }

    fn split_value(&self, s: &Split, level: usize) -> f64 {
        s.t * self.value(s.xi1, level - 1) + (1.0 - s.t) * self.value(s.xi2, level - 1)
    }

    fn eval(&self, xi: Sym2, theta: f64, t: f64, amp: Amp, level: usize) -> Option<(f64, Split)> {
        make_split(xi, theta, t, amp).map(|s| (self.split_value(&s, level), s))
    }

    /// Best split found at `level` (children evaluated at `level − 1`),
    /// including the trivial split `α = 0`. Returns `None` only if the
    /// trivial split wins.
    pub fn best_split(&self, xi: Sym2, level: usize) -> Option<SplitCandidate> {
        assert!(level >= 1);
        let g = &self.grid;
        let mut thetas: Vec<f64> = (0..g.n_theta)
            .map(|j| PI * j as f64 / g.n_theta as f64)
            .collect();
        let pa = xi.principal_angle();
        thetas.push(pa);
        thetas.push(pa + FRAC_PI_2);
        let ts: Vec<f64> = (1..=g.n_t).map(|i| i as f64 / (g.n_t + 1) as f64).collect();
        let mut amps: Vec<Amp> = (1..=g.n_alpha)
            .map(|j| Amp::Fixed(g.alpha_max * j as f64 / g.n_alpha as f64))
            .collect();
        amps.push(Amp::Rank);

        let mut jobs: Vec<(f64, f64, Amp)> = Vec::new();
        for &th in &thetas {
            for &t in &ts {
                for &a in &amps {
                    jobs.push((th, t, a));
                }
            }
        }
        for &t in &ts {
            jobs.push((0.0, t, Amp::Zero));
        }

        let best = jobs
            .par_iter()
            .enumerate()
            .filter_map(|(i, &(th, t, a))| self.eval(xi, th, t, a, level).map(|(v, _)| (v, i)))
            .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));

        let trivial = self.value(xi, level - 1);
        let (mut best_v, idx) = match best {
            // ties within roundoff keep the trivial split
            Some(b) if b.0 < trivial - 1e-13 * trivial.abs() => b,
            _ => return None,
        };
        let (th, mut t, amp) = jobs[idx];
        let mut amp = amp;

        // refine: t with the amplitude rule fixed, then α for fixed amplitudes
        let dt = 1.0 / (g.n_t + 1) as f64;
        for _ in 0..2 {
            let lo = (t - dt).max(1e-9);
            let hi = (t + dt).min(1.0 - 1e-9);
            let f = |tt: f64| {
                self.eval(xi, th, tt, amp, level)
                    .map_or(f64::INFINITY, |(v, _)| v)
            };
            let (tt, v) = golden_min(f, lo, hi, g.refine_iters);
            if v < best_v {
                best_v = v;
                t = tt;
            }
            if let Amp::Fixed(a) = amp {
                let da = g.alpha_max / g.n_alpha as f64;
                let f = |aa: f64| {
                    self.eval(xi, th, t, Amp::Fixed(aa), level)
                        .map_or(f64::INFINITY, |(v, _)| v)
                };
                let (aa, v) = golden_min(f, (a - da).max(0.0), a + da, g.refine_iters);
                if v < best_v {
                    best_v = v;
                    amp = Amp::Fixed(aa);
                }
            }
        }
        let (v, s) = self.eval(xi, th, t, amp, level)?;
        debug_assert!((v - best_v).abs() <= 1e-12 * v.abs().max(1.0));
        Some(SplitCandidate {
            t: s.t,
            alpha: s.alpha,
            eta_angle: s.theta,
            value: v,
        })
    }
}

/// Golden-section minimization on `[lo, hi]`; returns the best point seen.
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut best = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
            if f1 < best.1 {
                best = (x1, f1);
            }
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
            if f2 < best.1 {
                best = (x2, f2);
            }
        }
    }
    best
}

/// One lamination step applied directly to `f`.
pub fn rsym_step<F: Fn(Sym2) -> f64 + Sync>(f: F, xi: Sym2, grid: &LaminationGrid) -> f64 {
    RsymSearch::new(f, *grid).value(xi, 1)
}

/// `k` nested lamination steps.
pub fn rsym_iterate<F: Fn(Sym2) -> f64 + Sync>(
    f: F,
    xi: Sym2,
    k: usize,
    grid: &LaminationGrid,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    Ok(RsymSearch::new(f, *grid).value(xi, k))
}

/// Explicit two-level laminate for a diagonal `ξ = diag(x, y)` on the low
/// branch: `ξ = β ξ₃ + (1−β)(α ξ₂ + (1−α)·0)` with `ξ₂ = diag(x/α, 0)`,
/// `ξ₃ = diag(x, y/β)`, `α = |x|/√λ`, `β = |y|/(√λ − |x|)`.
///
/// Returns the laminate value and the splits, outer first.
pub fn rsgl_split(xi: Sym2, lambda: f64) -> Result<(f64, Vec<SplitCandidate>)> {
    let p = EnergyParams::new(lambda)?;
    if xi.b.abs() > 1e-12 * xi.norm() {
        return Err(Error::InvalidParameter(
            "rsgl_split needs a diagonal matrix".into(),
        ));
    }
    let (x, y) = (xi.a, xi.d);
    let sl = lambda.sqrt();
    let rho = x.abs() + y.abs();
    if !(rho > 0.0) || rho >= sl {
        return Err(Error::InvalidParameter(format!(
            "rsgl_split needs 0 < rho0 < sqrt(lambda), got rho0 = {rho}"
        )));
    }
    let f = |m: Sym2| crate::density::f_lambda(m, &p);
    let mut splits = Vec::with_capacity(2);

    let mid_value = if x != 0.0 {
        let alpha = x.abs() / sl;
        let xi2 = Sym2::diag(x / alpha, 0.0);
        let v = alpha * f(xi2) + (1.0 - alpha) * f(Sym2::ZERO);
        splits.push(SplitCandidate {
            t: alpha,
            alpha: x / alpha,
            eta_angle: 0.0,
            value: v,
        });
        v
    } else {
        0.0
    };

    let value = if y != 0.0 {
        let beta = y.abs() / (sl - x.abs());
        let xi3 = Sym2::diag(x, y / beta);
        let v = beta * f(xi3) + (1.0 - beta) * mid_value;
        splits.insert(
            0,
            SplitCandidate {
                t: beta,
                alpha: y / beta,
                eta_angle: FRAC_PI_2,
                value: v,
            },
        );
        v
    } else {
        mid_value
    };
    debug_assert!((value - qc_envelope(xi, &p)).abs() <= 1e-9 * value.max(1.0));
    Ok((value, splits))
}
