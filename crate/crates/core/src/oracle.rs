//! Exact enumeration over fully binary structural models: true θ, true
//! nuisances, efficiency bounds, mean-zero checks of the influence function,
//! formula-variant adjudication and second-order remainder checks.
//!
//! Everything here is a finite sum over the 128 atoms of
//! `(W1, W2, W3, A, Z, M, Y)`, and the influence-function weights come from
//! [`crate::estimator::eif_weights`], so the oracle checks the same code the
//! estimator runs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ObservedRecord;
use crate::estimator::{eif_contribution, eif_weights, EifOptions, EstimandSpec, HWeights, HyVariant, NuisanceRow, Z_PAIRS};
use crate::learners::{expit, logit};

pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("node {node:?} depends on {parent:?}, which is not an ancestor")]
    NotAncestor { node: Var, parent: Var },
    #[error("node {node:?} has a non-finite coefficient")]
    NonFinite { node: Var },
    #[error("atom masses sum to {sum}, not 1")]
    MassSum { sum: f64 },
    #[error("no formula variant passed adjudication ({0})")]
    Adjudication(String),
}

/// Variables in topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Var {
    W1,
    W2,
    W3,
    A,
    Z,
    M,
    Y,
}

impl Var {
    pub const ALL: [Var; 7] = [Var::W1, Var::W2, Var::W3, Var::A, Var::Z, Var::M, Var::Y];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    /// `expit(intercept + Σ coef·parent)`.
    Logistic,
    /// `clamp(intercept + Σ coef·parent, 0, 1)`.
    LinearClamped,
}

/// Structural equation `P(node = 1 | parents)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub response: Response,
    pub intercept: f64,
    #[serde(default)]
    pub coefs: Vec<(Var, f64)>,
}

impl Node {
    pub fn constant(p: f64) -> Self {
        Self {
            response: Response::LinearClamped,
            intercept: p,
            coefs: Vec::new(),
        }
    }

    pub fn logistic(intercept: f64, coefs: &[(Var, f64)]) -> Self {
        Self {
            response: Response::Logistic,
            intercept,
            coefs: coefs.to_vec(),
        }
    }

    pub fn linear(intercept: f64, coefs: &[(Var, f64)]) -> Self {
        Self {
            response: Response::LinearClamped,
            intercept,
            coefs: coefs.to_vec(),
        }
    }

    /// `P(node = 1)` given values for (at least) its parents.
    pub fn p1(&self, x: &[u8; 7]) -> f64 {
        let lin = self.intercept + self.coefs.iter().map(|(v, c)| c * x[v.index()] as f64).sum::<f64>();
        match self.response {
            Response::Logistic => expit(lin),
            Response::LinearClamped => lin.clamp(0.0, 1.0),
        }
    }
}

/// A fully binary structural model `W → A → Z → M → Y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgmSpec {
    pub name: String,
    pub w1: Node,
    pub w2: Node,
    pub w3: Node,
    pub a: Node,
    pub z: Node,
    pub m: Node,
    pub y: Node,
}

impl DgmSpec {
    /// The simulation model: randomized `A`, binary take-up `Z`, no direct
    /// `A` terms in the `M` or `Y` equations.
    pub fn benchmark() -> Self {
        let l13 = -(1.3f64).ln() / 3.0;
        let wsum = [(Var::W1, l13), (Var::W2, l13), (Var::W3, l13)];
        Self {
            name: "benchmark".into(),
            w1: Node::constant(0.6),
            w2: Node::constant(0.3),
            w3: Node::linear(0.2, &[(Var::W1, 0.33), (Var::W2, 0.33)]),
            a: Node::constant(0.5),
            z: Node::logistic(-1.0, &[wsum[0], wsum[1], wsum[2], (Var::A, 2.0)]),
            m: Node::logistic(-0.9, &[(Var::W3, -(1.1f64).ln()), (Var::Z, 2.0)]),
            y: Node::logistic(0.0, &[wsum[0], wsum[1], wsum[2], (Var::Z, 1.0), (Var::M, 1.0)]),
        }
    }

    /// The simulation model with confounded treatment and direct `A` effects
    /// on `M` and `Y`; separates the two `H_{Y,0,0}` variants.
    pub fn confounded() -> Self {
        let mut d = Self::benchmark();
        d.name = "confounded".into();
        d.a = Node::logistic(0.0, &[(Var::W1, 0.4), (Var::W2, -0.4)]);
        d.m.coefs.push((Var::A, 0.5));
        d.y.coefs.push((Var::A, 0.3));
        d
    }

    /// Every structural probability equal to 0.5.
    pub fn uniform() -> Self {
        let h = Node::constant(0.5);
        Self {
            name: "uniform".into(),
            w1: h.clone(),
            w2: h.clone(),
            w3: h.clone(),
            a: h.clone(),
            z: h.clone(),
            m: h.clone(),
            y: h,
        }
    }

    pub fn nodes(&self) -> [(Var, &Node); 7] {
        [
            (Var::W1, &self.w1),
            (Var::W2, &self.w2),
            (Var::W3, &self.w3),
            (Var::A, &self.a),
            (Var::Z, &self.z),
            (Var::M, &self.m),
            (Var::Y, &self.y),
        ]
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        for (var, node) in self.nodes() {
            if !node.intercept.is_finite() {
                return Err(OracleError::NonFinite { node: var });
            }
            for &(parent, c) in &node.coefs {
                if parent >= var {
                    return Err(OracleError::NotAncestor { node: var, parent });
                }
                if !c.is_finite() {
                    return Err(OracleError::NonFinite { node: var });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    /// `(w1, w2, w3, a, z, m, y)`.
    pub x: [u8; 7],
    pub mass: f64,
}

impl Atom {
    pub fn w_index(&self) -> usize {
        w_index(self.x[0], self.x[1], self.x[2])
    }

    pub fn record(&self) -> ObservedRecord {
        let x = self.x;
        ObservedRecord {
            w: vec![x[0] as f64, x[1] as f64, x[2] as f64],
            a: x[3],
            z: x[4],
            m: vec![x[5] as f64],
            y: x[6] as f64,
        }
    }
}

fn w_index(w1: u8, w2: u8, w3: u8) -> usize {
    (w1 as usize) << 2 | (w2 as usize) << 1 | w3 as usize
}

fn w_bits(w: usize) -> [u8; 3] {
    [(w >> 2 & 1) as u8, (w >> 1 & 1) as u8, (w & 1) as u8]
}

/// Joint masses by the chain rule, in lexicographic order of
/// `(w1, w2, w3, a, z, m, y)`.
pub fn enumerate_atoms(dgm: &DgmSpec) -> Result<Vec<Atom>, OracleError> {
    dgm.validate()?;
    let nodes = dgm.nodes();
    let mut atoms = Vec::with_capacity(128);
    for bits in 0..128usize {
        let mut x = [0u8; 7];
        for (k, v) in x.iter_mut().enumerate() {
            *v = (bits >> (6 - k) & 1) as u8;
        }
        let mass = nodes
            .iter()
            .map(|(v, node)| {
                let p = node.p1(&x);
                if x[v.index()] == 1 {
                    p
                } else {
                    1.0 - p
                }
            })
            .product();
        atoms.push(Atom { x, mass });
    }
    let sum: f64 = atoms.iter().map(|a| a.mass).sum();
    if (sum - 1.0).abs() > MASS_TOLERANCE {
        return Err(OracleError::MassSum { sum });
    }
    Ok(atoms)
}

/// Exact nuisances, indexed by `w = 4·w1 + 2·w2 + w3`. Conditionals on
/// zero-probability events are NaN and counted in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eta {
    pub p_w: [f64; 8],
    /// `P(A=1|w)`.
    pub g1: [f64; 8],
    /// `P(Z=1|a,w)`.
    pub q1: [[f64; 8]; 2],
    /// `P(M=1|a,z,w)`.
    pub pm1: [[[f64; 8]; 2]; 2],
    /// `E(Y|a,z,m,w)`.
    pub mu: [[[[f64; 8]; 2]; 2]; 2],
    /// `P(A=1|m,z,w)`.
    pub e1: [[[f64; 8]; 2]; 2],
    /// `P(Z=1|m,a,w)`.
    pub r1: [[[f64; 8]; 2]; 2],
    pub undefined: usize,
}

struct Joint<'a>(&'a [Atom]);

impl Joint<'_> {
    fn mass(&self, fixed: &[(Var, u8)]) -> f64 {
        self.0
            .iter()
            .filter(|a| fixed.iter().all(|(v, x)| a.x[v.index()] == *x))
            .map(|a| a.mass)
            .sum()
    }

    fn cond(&self, event: (Var, u8), given: &[(Var, u8)], undefined: &mut usize) -> f64 {
        let den = self.mass(given);
        if den <= 0.0 {
            *undefined += 1;
            return f64::NAN;
        }
        let mut both = given.to_vec();
        both.push(event);
        self.mass(&both) / den
    }
}

fn w_fixed(w: usize) -> [(Var, u8); 3] {
    let b = w_bits(w);
    [(Var::W1, b[0]), (Var::W2, b[1]), (Var::W3, b[2])]
}

/// Conditionals computed from the enumerated joint.
pub fn true_nuisances(atoms: &[Atom]) -> Eta {
    let j = Joint(atoms);
    let mut u = 0;
    let mut eta = Eta {
        p_w: [0.0; 8],
        g1: [0.0; 8],
        q1: [[0.0; 8]; 2],
        pm1: [[[0.0; 8]; 2]; 2],
        mu: [[[[0.0; 8]; 2]; 2]; 2],
        e1: [[[0.0; 8]; 2]; 2],
        r1: [[[0.0; 8]; 2]; 2],
        undefined: 0,
    };
    for w in 0..8 {
        let wf = w_fixed(w);
        let with = |extra: &[(Var, u8)]| [&wf[..], extra].concat();
        eta.p_w[w] = j.mass(&wf);
        eta.g1[w] = j.cond((Var::A, 1), &wf, &mut u);
        for x in 0..2u8 {
            let xi = x as usize;
            eta.q1[xi][w] = j.cond((Var::Z, 1), &with(&[(Var::A, x)]), &mut u);
            for y in 0..2u8 {
                let yi = y as usize;
                eta.pm1[xi][yi][w] = j.cond((Var::M, 1), &with(&[(Var::A, x), (Var::Z, y)]), &mut u);
                // e1[z][m], r1[a][m]
                eta.e1[xi][yi][w] = j.cond((Var::A, 1), &with(&[(Var::Z, x), (Var::M, y)]), &mut u);
                eta.r1[xi][yi][w] = j.cond((Var::Z, 1), &with(&[(Var::A, x), (Var::M, y)]), &mut u);
                for m in 0..2u8 {
                    eta.mu[xi][yi][m as usize][w] =
                        j.cond((Var::Y, 1), &with(&[(Var::A, x), (Var::Z, y), (Var::M, m)]), &mut u);
                }
            }
        }
    }
    eta.undefined = u;
    eta
}

impl Eta {
    fn pm(&self, m: usize, a: usize, z: usize, w: usize) -> f64 {
        let p = self.pm1[a][z][w];
        if m == 1 {
            p
        } else {
            1.0 - p
        }
    }

    /// `ρ(w) = Σ_m μ(a,m,z,w) P(m|a',z',w)`.
    pub fn rho(&self, a: u8, z: u8, a_prime: u8, z_prime: u8, w: usize) -> f64 {
        (0..2)
            .map(|m| self.mu[a as usize][z as usize][m][w] * self.pm(m, a_prime as usize, z_prime as usize, w))
            .sum()
    }

    /// The `Z`-weight of term `(z,z')`: `q(1|a',w)`, `q(1|a,w) − q(1|a',w)`, `q(0|a,w)`.
    fn z_weight(&self, k: usize, est: EstimandSpec, w: usize) -> f64 {
        let (a, ap) = (est.a as usize, est.a_prime as usize);
        match k {
            0 => self.q1[ap][w],
            1 => self.q1[a][w] - self.q1[ap][w],
            _ => 1.0 - self.q1[a][w],
        }
    }

    pub fn row(&self, atom: &Atom, est: EstimandSpec) -> NuisanceRow {
        let w = atom.w_index();
        let (obs_a, obs_z, m) = (atom.x[3] as usize, atom.x[4] as usize, atom.x[5] as usize);
        let (a, ap) = (est.a as usize, est.a_prime as usize);
        let g = |x: usize| if x == 1 { self.g1[w] } else { 1.0 - self.g1[w] };
        let e = |x: usize, z: usize| {
            let p = self.e1[z][m][w];
            if x == 1 {
                p
            } else {
                1.0 - p
            }
        };
        NuisanceRow {
            g_a: g(a),
            g_ap: g(ap),
            q1_a: self.q1[a][w],
            q1_ap: self.q1[ap][w],
            q1_obs: self.q1[obs_a][w],
            e_a_z1: e(a, 1),
            e_ap_z1: e(ap, 1),
            e_a_z0: e(a, 0),
            e_ap_z0: e(ap, 0),
            r1_ap: self.r1[ap][m][w],
            mu_a_z1: self.mu[a][1][m][w],
            mu_a_z0: self.mu[a][0][m][w],
            mu_obs: self.mu[obs_a][obs_z][m][w],
            rho11: self.rho(est.a, 1, est.a_prime, 1, w),
            rho10: self.rho(est.a, 1, est.a_prime, 0, w),
            rho00: self.rho(est.a, 0, est.a_prime, 0, w),
        }
    }

    /// Plug-in `[θ_{1,1}, θ_{1,0}, θ_{0,0}]`.
    pub fn theta_terms(&self, est: EstimandSpec) -> [f64; 3] {
        let mut t = [0.0; 3];
        for w in 0..8 {
            if self.p_w[w] == 0.0 {
                continue;
            }
            for (k, &(z, zp)) in Z_PAIRS.iter().enumerate() {
                t[k] += self.p_w[w] * self.z_weight(k, est, w) * self.rho(est.a, z, est.a_prime, zp, w);
            }
        }
        t
    }

    /// Perturbation along the fixed direction field: probability slots move
    /// by `ε·(−1)^{w1+z}` on the logit scale (`z` the conditioning `Z`, or 0
    /// when `Z` is not conditioned on) and `μ` by `ε·(−1)^{w1}`.
    pub fn perturbed(&self, eps: f64) -> Eta {
        let sign = |w: usize, z: usize| if (w_bits(w)[0] as usize + z) % 2 == 0 { 1.0 } else { -1.0 };
        let shift = |p: f64, s: f64| expit(logit(p) + eps * s);
        let mut t = self.clone();
        for w in 0..8 {
            t.g1[w] = shift(self.g1[w], sign(w, 0));
            for x in 0..2 {
                t.q1[x][w] = shift(self.q1[x][w], sign(w, 0));
                for y in 0..2 {
                    t.pm1[x][y][w] = shift(self.pm1[x][y][w], sign(w, y));
                    t.e1[x][y][w] = shift(self.e1[x][y][w], sign(w, x));
                    t.r1[x][y][w] = shift(self.r1[x][y][w], sign(w, 0));
                    for m in 0..2 {
                        t.mu[x][y][m][w] = self.mu[x][y][m][w] + eps * sign(w, 0);
                    }
                }
            }
        }
        t
    }
}

/// `θ(a,a')` and its three terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueTheta {
    pub terms: [f64; 3],
    pub total: f64,
}

pub fn true_theta(dgm: &DgmSpec, est: EstimandSpec) -> Result<TrueTheta, OracleError> {
    let eta = true_nuisances(&enumerate_atoms(dgm)?);
    let terms = eta.theta_terms(est);
    Ok(TrueTheta {
        terms,
        total: terms.iter().sum(),
    })
}

/// `E[Y_a]` by evaluating the structural equations with `A` set to `a`.
pub fn interventional_mean(dgm: &DgmSpec, a: u8) -> f64 {
    let mut total = 0.0;
    for bits in 0..64usize {
        let mut x = [0u8; 7];
        for k in 0..6 {
            x[k] = (bits >> (5 - k) & 1) as u8;
        }
        if x[3] != a {
            continue;
        }
        let mut mass = 1.0;
        for (v, node) in dgm.nodes().iter().take(6) {
            if *v == Var::A {
                continue;
            }
            let p = node.p1(&x);
            mass *= if x[v.index()] == 1 { p } else { 1.0 - p };
        }
        total += mass * dgm.y.p1(&x);
    }
    total
}

/// The NDE, NIE and ATE truths with the underlying `θ` values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectTruths {
    pub theta11: f64,
    pub theta10: f64,
    pub theta00: f64,
    pub nde: f64,
    pub nie: f64,
    pub ate: f64,
}

pub fn effect_truths(dgm: &DgmSpec) -> Result<EffectTruths, OracleError> {
    let t = |a, ap| true_theta(dgm, EstimandSpec::new(a, ap)).map(|t| t.total);
    let (theta11, theta10, theta00) = (t(1, 1)?, t(1, 0)?, t(0, 0)?);
    Ok(EffectTruths {
        theta11,
        theta10,
        theta00,
        nde: theta10 - theta00,
        nie: theta11 - theta10,
        ate: theta11 - theta00,
    })
}

fn opts(variant: HyVariant) -> EifOptions {
    EifOptions {
        variant,
        clip_q_diff: false,
    }
}

/// `Σ_atoms mass · f(atom, row(η), H(η))`, skipping zero-mass atoms.
fn expect<F: Fn(&Atom, &NuisanceRow, &HWeights) -> f64>(
    atoms: &[Atom],
    eta: &Eta,
    est: EstimandSpec,
    variant: HyVariant,
    f: F,
) -> f64 {
    atoms
        .iter()
        .filter(|a| a.mass > 0.0)
        .map(|atom| {
            let row = eta.row(atom, est);
            let h = eif_weights(&atom.record(), &row, est, opts(variant));
            atom.mass * f(atom, &row, &h)
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanZeroRow {
    pub a: u8,
    pub a_prime: u8,
    pub z: u8,
    pub z_prime: u8,
    pub expected_d: f64,
    pub theta: f64,
    pub residual: f64,
}

/// `|E[D_{z,z'}] − θ_{z,z'}|` at the true nuisances for each term.
pub fn verify_eif_mean_zero(dgm: &DgmSpec, est: EstimandSpec, variant: HyVariant) -> Result<Vec<MeanZeroRow>, OracleError> {
    let atoms = enumerate_atoms(dgm)?;
    let eta = true_nuisances(&atoms);
    let theta = eta.theta_terms(est);
    Ok(Z_PAIRS
        .iter()
        .enumerate()
        .map(|(k, &(z, zp))| {
            let ed = expect(&atoms, &eta, est, variant, |atom, row, h| eif_contribution(&atom.record(), row, h).d[k]);
            MeanZeroRow {
                a: est.a,
                a_prime: est.a_prime,
                z,
                z_prime: zp,
                expected_d: ed,
                theta: theta[k],
                residual: (ed - theta[k]).abs(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    Nde,
    Nie,
    Ate,
}

impl Contrast {
    /// `(minuend, subtrahend)`.
    pub fn pair(self) -> (EstimandSpec, EstimandSpec) {
        let e = EstimandSpec::new;
        match self {
            Contrast::Nde => (e(1, 0), e(0, 0)),
            Contrast::Nie => (e(1, 1), e(1, 0)),
            Contrast::Ate => (e(1, 1), e(0, 0)),
        }
    }
}

/// Exact variance of the contrast's influence function at the truth.
pub fn efficiency_bound(dgm: &DgmSpec, contrast: Contrast, variant: HyVariant) -> Result<f64, OracleError> {
    let atoms = enumerate_atoms(dgm)?;
    let eta = true_nuisances(&atoms);
    let (p, m) = contrast.pair();
    let d = |atom: &Atom, est: EstimandSpec| {
        let row = eta.row(atom, est);
        let h = eif_weights(&atom.record(), &row, est, opts(variant));
        eif_contribution(&atom.record(), &row, &h).total
    };
    let vals: Vec<(f64, f64)> = atoms
        .iter()
        .filter(|a| a.mass > 0.0)
        .map(|a| (a.mass, d(a, p) - d(a, m)))
        .collect();
    let mean: f64 = vals.iter().map(|(w, v)| w * v).sum();
    Ok(vals.iter().map(|(w, v)| w * (v - mean).powi(2)).sum())
}

/// How to read the `Z`-probability factors of the `(0,0)` term of `R*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RStarReading {
    /// `[P(Z=1|a',w) − P̃(Z=0|a',w)]` then `[P(Z=0|a',w) − P̃(Z=0|a',w)]`.
    MixedAPrime,
    /// `[P(Z=0|a',w) − P̃(Z=0|a',w)]` in both places.
    ZeroAPrime,
    /// `[P(Z=0|a,w) − P̃(Z=0|a,w)]` in both places, matching the `(0,0)`
    /// term's own `Z`-weight.
    ZeroA,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemainderRow {
    pub a: u8,
    pub a_prime: u8,
    pub z: u8,
    pub z_prime: u8,
    pub eps: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_diff: f64,
}

/// `lhs = θ(η̃) − θ(η) + E[D̄(O; η̃)] = E[D(O; η̃)] − θ(η)` against the
/// second-order remainder `R(η, η̃)`, per term, with `η̃ = η.perturbed(ε)`.
/// `P̃(m|a',z',w)` is perturbed too and `ρ̃ = Σ_m μ̃ P̃`.
pub fn remainder_check(
    dgm: &DgmSpec,
    est: EstimandSpec,
    eps: f64,
    variant: HyVariant,
    reading: RStarReading,
) -> Result<Vec<RemainderRow>, OracleError> {
    let atoms = enumerate_atoms(dgm)?;
    let eta = true_nuisances(&atoms);
    let tilde = eta.perturbed(eps);
    let theta = eta.theta_terms(est);
    let (a, ap) = (est.a as usize, est.a_prime as usize);

    let mut rows = Vec::with_capacity(3);
    for (k, &(z, zp)) in Z_PAIRS.iter().enumerate() {
        let mut lhs = -theta[k];
        let mut rhs = 0.0;
        for atom in atoms.iter().filter(|a| a.mass > 0.0) {
            let rec = atom.record();
            let w = atom.w_index();
            let (obs_a, obs_z, m) = (atom.x[3] as usize, atom.x[4] as usize, atom.x[5] as usize);
            let row = eta.row(atom, est);
            let row_t = tilde.row(atom, est);
            let h = eif_weights(&rec, &row, est, opts(variant));
            let h_t = eif_weights(&rec, &row_t, est, opts(variant));
            lhs += atom.mass * eif_contribution(&rec, &row_t, &h_t).d[k];

            let mu_gap = eta.mu[obs_a][obs_z][m][w] - tilde.mu[obs_a][obs_z][m][w];
            // ∫ μ̃(a,m,z,w) [dP − dP̃](m|a',z',w)
            let rho_star: f64 = (0..2)
                .map(|mm| tilde.mu[a][z as usize][mm][w] * eta.pm(mm, ap, zp as usize, w))
                .sum();
            let m_gap = rho_star - tilde.rho(est.a, z, est.a_prime, zp, w);
            let q_gap = eta.q1[obs_a][w] - tilde.q1[obs_a][w];
            rhs += atom.mass * ((h_t.y[k] - h.y[k]) * mu_gap + (h_t.m[k] - h.m[k]) * m_gap + (h_t.z[k] - h.z[k]) * q_gap);
        }
        rhs += r_star(&eta, &tilde, est, k, reading);
        rows.push(RemainderRow {
            a: est.a,
            a_prime: est.a_prime,
            z,
            z_prime: zp,
            eps,
            lhs,
            rhs,
            abs_diff: (lhs - rhs).abs(),
        });
    }
    Ok(rows)
}

fn r_star(eta: &Eta, tilde: &Eta, est: EstimandSpec, k: usize, reading: RStarReading) -> f64 {
    let (a, ap) = (est.a as usize, est.a_prime as usize);
    let (z, zp) = Z_PAIRS[k];
    let (z, zp) = (z as usize, zp as usize);
    let mut total = 0.0;
    for w in 0..8 {
        if eta.p_w[w] == 0.0 {
            continue;
        }
        let (f1, f2) = match (k, reading) {
            (2, RStarReading::MixedAPrime) => (eta.q1[ap][w] - (1.0 - tilde.q1[ap][w]), tilde.q1[ap][w] - eta.q1[ap][w]),
            (2, RStarReading::ZeroAPrime) => {
                let f = tilde.q1[ap][w] - eta.q1[ap][w];
                (f, f)
            }
            _ => {
                let f = eta.z_weight(k, est, w) - tilde.z_weight(k, est, w);
                (f, f)
            }
        };
        let mut s = 0.0;
        for m in 0..2 {
            let p_t = tilde.pm(m, ap, zp, w);
            let p = eta.pm(m, ap, zp, w);
            s += (eta.mu[a][z][m][w] - tilde.mu[a][z][m][w]) * f1 * p_t;
            s += eta.mu[a][z][m][w] * f2 * (p - p_t);
        }
        total += eta.p_w[w] * s;
    }
    total
}

/// Successive `|lhs(ε_k)| / |lhs(ε_{k+1})|` for each term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemainderSweep {
    pub rows: Vec<RemainderRow>,
    /// `ratios[k][i]` for term `k` and halving `i`.
    pub ratios: [Vec<f64>; 3],
}

pub fn remainder_sweep(
    dgm: &DgmSpec,
    est: EstimandSpec,
    eps: &[f64],
    variant: HyVariant,
    reading: RStarReading,
) -> Result<RemainderSweep, OracleError> {
    let per_eps: Vec<Vec<RemainderRow>> = eps
        .iter()
        .map(|&e| remainder_check(dgm, est, e, variant, reading))
        .collect::<Result<_, _>>()?;
    let ratios = [0, 1, 2].map(|k| per_eps.windows(2).map(|p| p[0][k].lhs.abs() / p[1][k].lhs.abs()).collect());
    Ok(RemainderSweep {
        rows: per_eps.into_iter().flatten().collect(),
        ratios,
    })
}

pub const SWEEP_EPS: [f64; 3] = [0.1, 0.05, 0.025];
pub const IDENTITY_TOL: f64 = 1e-8;
pub const RATIO_BAND: (f64, f64) = (3.5, 4.5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: HyVariant,
    pub max_mean_zero_residual: f64,
    pub max_identity_gap: f64,
    /// Halving ratios for the `(0,0)` term at `(a, a') = (1, 0)`.
    pub ratios_00: Vec<f64>,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAdjudication {
    pub dgm: String,
    pub results: Vec<VariantResult>,
    pub chosen: Option<HyVariant>,
}

/// Decides between the two `H_{Y,0,0}` forms on a model where they differ.
///
/// Both forms are mean-zero at the truth (the `Y` residual has conditional
/// mean zero whatever weight multiplies it), so the decision rests on the
/// remainder: the correct form leaves `E[D(η̃)] − θ(η)` second order in the
/// perturbation and equal to the remainder display; the other is first order.
pub fn verify_eif_variant(dgm: &DgmSpec) -> Result<VariantAdjudication, OracleError> {
    let mut results = Vec::new();
    for variant in [HyVariant::InverseGA, HyVariant::InverseGAPrime] {
        let mut max_mz: f64 = 0.0;
        let mut max_gap: f64 = 0.0;
        for est in EstimandSpec::CONTRASTS.into_iter().chain([EstimandSpec::new(0, 1)]) {
            for r in verify_eif_mean_zero(dgm, est, variant)? {
                max_mz = max_mz.max(r.residual);
            }
            for r in remainder_check(dgm, est, SWEEP_EPS[0], variant, RStarReading::ZeroA)? {
                max_gap = max_gap.max(r.abs_diff);
            }
        }
        let sweep = remainder_sweep(dgm, EstimandSpec::new(1, 0), &SWEEP_EPS, variant, RStarReading::ZeroA)?;
        let ratios_00 = sweep.ratios[2].clone();
        let passes = max_mz < 1e-10
            && max_gap < IDENTITY_TOL
            && ratios_00.iter().all(|r| (RATIO_BAND.0..=RATIO_BAND.1).contains(r));
        results.push(VariantResult {
            variant,
            max_mean_zero_residual: max_mz,
            max_identity_gap: max_gap,
            ratios_00,
            passes,
        });
    }
    let passing: Vec<HyVariant> = results.iter().filter(|r| r.passes).map(|r| r.variant).collect();
    let chosen = match passing.as_slice() {
        [one] => Some(*one),
        _ => None,
    };
    Ok(VariantAdjudication {
        dgm: dgm.name.clone(),
        results,
        chosen,
    })
}

/// Everything `oracle-check` reports for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub dgm: String,
    pub variant: HyVariant,
    pub truths: EffectTruths,
    pub bound_nde: f64,
    pub bound_nie: f64,
    pub mean_zero: Vec<MeanZeroRow>,
    pub adjudication: VariantAdjudication,
    pub remainder: Vec<RemainderRow>,
    /// Halving ratios per term at `(a, a') = (1, 0)`.
    pub remainder_ratios: [Vec<f64>; 3],
}

pub fn oracle_report(dgm: &DgmSpec, adjudicate_on: &DgmSpec, variant: HyVariant, eps: &[f64]) -> Result<OracleReport, OracleError> {
    let truths = effect_truths(dgm)?;
    let mut mean_zero = Vec::new();
    for est in EstimandSpec::CONTRASTS {
        mean_zero.extend(verify_eif_mean_zero(dgm, est, variant)?);
    }
    let sweep = remainder_sweep(dgm, EstimandSpec::new(1, 0), eps, variant, RStarReading::ZeroA)?;
    Ok(OracleReport {
        dgm: dgm.name.clone(),
        variant,
        truths,
        bound_nde: efficiency_bound(dgm, Contrast::Nde, variant)?,
        bound_nie: efficiency_bound(dgm, Contrast::Nie, variant)?,
        mean_zero,
        adjudication: verify_eif_variant(adjudicate_on)?,
        remainder: sweep.rows,
        remainder_ratios: sweep.ratios,
    })
}
