//! Simulation designs: the staggered envelope with three shock laws, the
//! two-arm placebo design and the covariate-confounded adoption design.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Cohort, Panel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    Mc81Dgp1,
    Mc81Dgp2,
    Mc81Dgp3,
    Mc84Small,
    Mc85Confounded,
}

impl Design {
    pub fn label(self) -> &'static str {
        match self {
            Design::Mc81Dgp1 => "mc81-dgp1",
            Design::Mc81Dgp2 => "mc81-dgp2",
            Design::Mc81Dgp3 => "mc81-dgp3",
            Design::Mc84Small => "mc84-small",
            Design::Mc85Confounded => "mc85-confounded",
        }
    }

    pub fn parse(s: &str) -> Result<Design> {
        [Design::Mc81Dgp1, Design::Mc81Dgp2, Design::Mc81Dgp3, Design::Mc84Small, Design::Mc85Confounded]
            .into_iter()
            .find(|d| d.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnsupportedSpec(format!("unknown design '{s}'")))
    }

    pub fn is_mc81(self) -> bool {
        matches!(self, Design::Mc81Dgp1 | Design::Mc81Dgp2 | Design::Mc81Dgp3)
    }
}

/// Violation cell `(Δ(R), B, Γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Violation {
    pub delta_r: f64,
    pub b: f64,
    pub gamma: f64,
}

impl Violation {
    pub fn new(delta_r: f64, b: f64, gamma: f64) -> Self {
        Self { delta_r, b, gamma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mc81Params {
    /// Adoption periods of the treated cohorts.
    pub adoption: Vec<u32>,
    /// Shares of the treated cohorts followed by the never-treated share.
    pub shares: Vec<f64>,
    pub h: Vec<f64>,
    /// Effect profile at event times 0, 1 and 2+.
    pub m: [f64; 3],
    pub signs: Vec<f64>,
    pub rho_x: f64,
    pub beta: f64,
    pub sigma_alpha: f64,
    pub sigma_lambda: f64,
    pub phi: f64,
    pub nu: f64,
    pub eta: [f64; 3],
}

impl Default for Mc81Params {
    fn default() -> Self {
        Self {
            adoption: vec![4, 6, 8, 10],
            shares: vec![0.2; 5],
            h: vec![0.8, 1.0, 1.2, 1.4],
            m: [0.5, 0.75, 1.0],
            signs: vec![1.0, -1.0, 1.0, -1.0],
            rho_x: 0.5,
            beta: 1.0,
            sigma_alpha: 1.0,
            sigma_lambda: 0.5,
            phi: 0.5,
            nu: 5.0,
            eta: [1.25, -0.35, -0.10],
        }
    }
}

impl Mc81Params {
    pub fn effect(&self, j: usize, ell: i64) -> f64 {
        let m = match ell {
            l if l < 0 => 0.0,
            0 => self.m[0],
            1 => self.m[1],
            _ => self.m[2],
        };
        self.h[j] * m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mc84Params {
    pub t0: u32,
    pub tau: f64,
}

impl Default for Mc84Params {
    fn default() -> Self {
        Self { t0: 5, tau: 1.0 }
    }
}

/// Free constants of the confounded-adoption design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mc85Params {
    pub cohorts: Vec<u32>,
    /// Per-cohort multinomial-logit coefficients `(intercept, slopes..)`;
    /// the never-treated class is the zero reference.
    pub gamma: Vec<Vec<f64>>,
    pub sigma_x: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub kappa: Vec<f64>,
    pub rho: f64,
    pub sigma_mu: f64,
    pub sigma_lambda: f64,
    pub sigma_eta: f64,
    /// `(a0, a1, a2, a3)` of the effect profile.
    pub a: [f64; 4],
    pub ell: f64,
    pub big_k: f64,
    /// Gauss-Hermite nodes per covariate dimension for the cohort shares.
    pub quadrature_nodes: usize,
}

impl Default for Mc85Params {
    fn default() -> Self {
        Self {
            cohorts: vec![3, 4, 5, 6, 7],
            gamma: vec![
                vec![-0.2, 0.8, 0.0],
                vec![-0.2, 0.4, 0.4],
                vec![-0.2, 0.0, 0.8],
                vec![-0.2, -0.4, 0.4],
                vec![-0.2, -0.8, 0.0],
            ],
            sigma_x: vec![vec![1.0, 0.3], vec![0.3, 1.0]],
            beta: vec![1.0, -0.5],
            kappa: vec![0.3, -0.2],
            rho: 0.1,
            sigma_mu: 1.0,
            sigma_lambda: 0.5,
            sigma_eta: 1.0,
            a: [0.5, 0.5, 1.0, 0.2],
            ell: 2.0,
            big_k: 4.0,
            quadrature_nodes: 24,
        }
    }
}

impl Mc85Params {
    pub fn d_x(&self) -> usize {
        self.sigma_x.len()
    }

    pub fn effect(&self, g: u32, k: i64, periods: u32) -> f64 {
        if k < 0 {
            return 0.0;
        }
        let [a0, a1, a2, a3] = self.a;
        let k = k as f64;
        a0 + a1 * g as f64 / periods as f64
            + a2 * (1.0 - (-k / self.ell).exp())
            + a3 * (2.0 * std::f64::consts::PI * k / self.big_k).sin()
    }

    /// Cohort probabilities given `x`, cohorts first and never-treated last.
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .gamma
            .iter()
            .map(|c| c[0] + c[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        s.push(0.0);
        let mx = s.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let tot: f64 = e.iter().sum();
        e.into_iter().map(|v| v / tot).collect()
    }

    fn validate(&self, periods: u32) -> Result<()> {
        let d = self.d_x();
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.gamma.len() != self.cohorts.len() || self.gamma.iter().any(|g| g.len() != d + 1) {
            return bad("mc85 gamma needs one (intercept, slopes) row per cohort");
        }
        if self.sigma_x.iter().any(|r| r.len() != d) || self.beta.len() != d || self.kappa.len() != d {
            return bad("mc85 covariate dimensions disagree");
        }
        if self.cohorts.iter().any(|&g| g < 2 || g > periods) {
            return bad("mc85 cohorts must lie in 2..=T");
        }
        if self.ell <= 0.0 || self.big_k <= 0.0 || self.quadrature_nodes == 0 {
            return bad("mc85 needs positive ell, K and quadrature nodes");
        }
        Ok(())
    }

    fn chol(&self) -> Result<DMatrix<f64>> {
        let d = self.d_x();
        let s = DMatrix::from_fn(d, d, |i, j| self.sigma_x[i][j]);
        s.cholesky().map(|c| c.l()).ok_or_else(|| Error::ConfigInvalid("mc85 sigma_x is not positive definite".into()))
    }

    /// Population cohort shares `E[P(G=g|X)]` by Gauss-Hermite quadrature,
    /// cohorts first and never-treated last.
    pub fn shares(&self) -> Result<Vec<f64>> {
        let l = self.chol()?;
        let d = self.d_x();
        let (nodes, weights) = gauss_hermite(self.quadrature_nodes);
        let total = self.quadrature_nodes.checked_pow(d as u32).filter(|&c| c <= 1_000_000);
        let total = total.ok_or_else(|| Error::ConfigInvalid("quadrature grid too large".into()))?;
        let mut out = vec![0.0; self.cohorts.len() + 1];
        let mut z = vec![0.0; d];
        for idx in 0..total {
            let mut rem = idx;
            let mut w = 1.0;
            for zj in z.iter_mut() {
                let q = rem % self.quadrature_nodes;
                rem /= self.quadrature_nodes;
                *zj = nodes[q];
                w *= weights[q];
            }
            let x: Vec<f64> = (0..d).map(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum()).collect();
            for (o, p) in out.iter_mut().zip(self.probabilities(&x)) {
                *o += w * p;
            }
        }
        Ok(out)
    }
}

/// Nodes and weights for `E[f(Z)]`, `Z` standard normal, by the
/// Golub-Welsch eigenvalue method.
pub fn gauss_hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
    let jac = DMatrix::from_fn(m, m, |i, j| if i + 1 == j || j + 1 == i { ((i.max(j)) as f64 / 2.0).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| (eig.eigenvalues[i] * std::f64::consts::SQRT_2, eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// A fully specified simulation design. `seed` drives every draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub design: Design,
    pub n: usize,
    pub periods: u32,
    #[serde(default)]
    pub violation: Violation,
    /// Zeroes every stochastic outcome component (and the covariate trend
    /// of the confounded design), leaving cohort assignment random.
    #[serde(default)]
    pub noiseless: bool,
    #[serde(default)]
    pub mc81: Mc81Params,
    #[serde(default)]
    pub mc84: Mc84Params,
    #[serde(default)]
    pub mc85: Mc85Params,
    #[serde(default)]
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(design: Design) -> Self {
        let (n, periods) = match design {
            Design::Mc84Small => (2000, 8),
            Design::Mc85Confounded => (2000, 8),
            _ => (5000, 12),
        };
        Self {
            design,
            n,
            periods,
            violation: Violation::default(),
            noiseless: false,
            mc81: Mc81Params::default(),
            mc84: Mc84Params::default(),
            mc85: Mc85Params::default(),
            seed: 0,
        }
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_violation(mut self, v: Violation) -> Self {
        self.violation = v;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn noiseless(mut self) -> Self {
        self.noiseless = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.n < 2 || self.periods < 2 {
            return bad("designs need n >= 2 and T >= 2".into());
        }
        let v = self.violation;
        if [v.delta_r, v.b, v.gamma].iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return bad("violation indices must be finite and nonnegative".into());
        }
        match self.design {
            d if d.is_mc81() => {
                let p = &self.mc81;
                let g = p.adoption.len();
                if p.shares.len() != g + 1 || p.h.len() != g || p.signs.len() != g {
                    return bad("mc81 shares need one entry per cohort plus never-treated; h and signs one per cohort".into());
                }
                if p.shares.iter().any(|s| *s < 0.0) || (p.shares.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("mc81 shares must be nonnegative and sum to 1".into());
                }
                if p.adoption.windows(2).any(|w| w[0] >= w[1]) || p.adoption.iter().any(|&a| a < 2 || a > self.periods) {
                    return bad("mc81 adoption periods must increase within 2..=T".into());
                }
                if d == Design::Mc81Dgp3 && p.nu <= 0.0 {
                    return bad("mc81 t degrees of freedom must be positive".into());
                }
                Ok(())
            }
            Design::Mc84Small => {
                if self.mc84.t0 < 5 || self.mc84.t0 > self.periods || self.n % 2 != 0 {
                    return bad("mc84 needs an even n and 5 <= t0 <= T".into());
                }
                Ok(())
            }
            _ => self.mc85.validate(self.periods),
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = xs.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    s / c as f64
}

/// Violation `v_it` of the staggered envelope for a unit adopting at
/// `adoption` (cohort index `j`), zero for never-treated units.
pub fn violation_term(p: &Mc81Params, periods: u32, v: &Violation, cohort: Option<(usize, u32)>, t: u32) -> f64 {
    let Some((j, a)) = cohort else { return 0.0 };
    let tm1 = (periods - 1) as f64;
    let (t, af) = (t as f64, a as f64);
    let part = if t < af {
        let pre = mean((1..a).map(|s| (s - 1) as f64 / tm1));
        v.delta_r * v.b * ((t - 1.0) / tm1 - pre)
    } else {
        let post = mean((a..=periods).map(|s| (s - a) as f64 / tm1));
        v.gamma * ((t - af) / tm1 - post)
    };
    p.signs[j] * part
}

fn draw_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    probs.len() - 1
}

fn simulate_mc81(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> Result<Panel> {
    let p = &spec.mc81;
    let (n, tl) = (spec.n, spec.periods as usize);
    let g = p.adoption.len();
    let on = if spec.noiseless { 0.0 } else { 1.0 };
    let assign: Vec<usize> = (0..n).map(|_| draw_index(rng, &p.shares)).collect();
    let lambda: Vec<f64> = (0..tl).map(|_| on * p.sigma_lambda * normal(rng)).collect();
    let t_dist = StudentT::new(p.nu).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    let mut y = vec![0.0; n * tl];
    let mut x = vec![0.0; n * tl];
    let mut observed = vec![true; n * tl];
    for i in 0..n {
        let cohort = (assign[i] < g).then(|| (assign[i], p.adoption[assign[i]]));
        let alpha = on * p.sigma_alpha * normal(rng);
        let (mut xi, mut u, mut prev_y) = (0.0, 0.0, 0.0);
        for t in 1..=spec.periods {
            let idx = i * tl + t as usize - 1;
            xi = if t == 1 { normal(rng) } else { p.rho_x * xi + normal(rng) };
            u = match spec.design {
                Design::Mc81Dgp2 if t > 1 => p.phi * u + (1.0 - p.phi * p.phi).sqrt() * normal(rng),
                Design::Mc81Dgp3 => t_dist.sample(rng),
                _ => normal(rng),
            };
            let d = cohort.is_some_and(|(_, a)| t >= a);
            let tau = cohort.map_or(0.0, |(j, a)| if d { p.effect(j, t as i64 - a as i64) } else { 0.0 });
            let xo = on * xi;
            let yit = alpha + lambda[t as usize - 1] + p.beta * xo + tau + on * u
                + violation_term(p, spec.periods, &spec.violation, cohort, t);
            x[idx] = xo;
            y[idx] = yit;
            if spec.design == Design::Mc81Dgp3 {
                let [e0, e1, e2] = p.eta;
                let z = e0 + e1 * d as u8 as f64 + e2 * prev_y;
                let keep = rng.random::<f64>() < 1.0 / (1.0 + (-z).exp());
                observed[idx] = keep;
                if !keep {
                    y[idx] = f64::NAN;
                }
            }
            prev_y = yit;
        }
    }
    let cohorts = assign.iter().map(|&j| if j < g { Cohort::At(p.adoption[j]) } else { Cohort::Never }).collect();
    let mask = (spec.design == Design::Mc81Dgp3).then_some(observed);
    Panel::from_arrays(spec.periods, cohorts, y, 1, x, None, mask)
}

fn simulate_mc84(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> Result<Panel> {
    let (n, tl) = (spec.n, spec.periods as usize);
    let p = &spec.mc84;
    let on = if spec.noiseless { 0.0 } else { 1.0 };
    let slope = spec.violation.delta_r * spec.violation.gamma;
    let mut y = vec![0.0; n * tl];
    let mut cohorts = Vec::with_capacity(n);
    for i in 0..n {
        let treated = i < n / 2;
        cohorts.push(if treated { Cohort::At(p.t0) } else { Cohort::Never });
        let alpha = on * normal(rng);
        for t in 1..=spec.periods {
            let mut v = alpha + on * normal(rng);
            if treated {
                v += slope * t as f64;
                if t >= p.t0 {
                    v += p.tau;
                }
            }
            y[i * tl + t as usize - 1] = v;
        }
    }
    Panel::from_arrays(spec.periods, cohorts, y, 0, vec![], None, None)
}

fn simulate_mc85(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> Result<Panel> {
    let p = &spec.mc85;
    let (n, tl, d) = (spec.n, spec.periods as usize, p.d_x());
    let l = p.chol()?;
    let on = if spec.noiseless { 0.0 } else { 1.0 };
    let lambda: Vec<f64> = (0..tl).map(|_| on * p.sigma_lambda * normal(rng)).collect();
    let mut y = vec![0.0; n * tl];
    let mut x = vec![0.0; n * tl * d];
    let mut cohorts = Vec::with_capacity(n);
    for i in 0..n {
        let z: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let xi: Vec<f64> = (0..d).map(|a| (0..=a).map(|b| l[(a, b)] * z[b]).sum()).collect();
        let j = draw_index(rng, &p.probabilities(&xi));
        let cohort = p.cohorts.get(j).copied();
        cohorts.push(cohort.map_or(Cohort::Never, Cohort::At));
        let mu = on * p.sigma_mu * normal(rng);
        let level: f64 = xi.iter().zip(&p.beta).map(|(a, b)| a * b).sum();
        let trend: f64 = on * xi.iter().zip(&p.kappa).map(|(a, b)| a * b).sum::<f64>();
        for t in 1..=spec.periods {
            let idx = i * tl + t as usize - 1;
            let tf = t as f64;
            let mut v = mu + lambda[t as usize - 1] + p.rho * tf + level + tf * trend + on * p.sigma_eta * normal(rng);
            if let Some(g) = cohort.filter(|&g| t >= g) {
                v += p.effect(g, t as i64 - g as i64, spec.periods);
            }
            y[idx] = v;
            x[idx * d..(idx + 1) * d].copy_from_slice(&xi);
        }
    }
    Panel::from_arrays(spec.periods, cohorts, y, d, x, None, None)
}

/// Draws one panel from the design.
pub fn simulate(spec: &DgpSpec) -> Result<Panel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.design {
        d if d.is_mc81() => simulate_mc81(spec, &mut rng),
        Design::Mc84Small => simulate_mc84(spec, &mut rng),
        _ => simulate_mc85(spec, &mut rng),
    }
}

/// Known targets: cohort-event effects `θ_{g,ℓ}`, the pooled target `θ*`
/// over event times `0..4` with cohort-share weights, and its estimable
/// counterpart that averages each cohort over the horizons the panel
/// observes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub cells: BTreeMap<(u32, i64), f64>,
    /// Fixed weights of the estimable pooled target.
    pub weights: BTreeMap<(u32, i64), f64>,
    pub theta_star: f64,
    pub theta_target: f64,
}

/// Event times pooled into `θ*`.
pub const POOLED_HORIZONS: i64 = 4;

pub fn true_targets(spec: &DgpSpec) -> Result<Truth> {
    spec.validate()?;
    let mut cells = BTreeMap::new();
    // (cohort, share, effect at event time ℓ)
    let profile: Vec<(u32, f64, Box<dyn Fn(i64) -> f64 + '_>)> = match spec.design {
        d if d.is_mc81() => {
            let p = &spec.mc81;
            let tot: f64 = p.shares[..p.adoption.len()].iter().sum();
            p.adoption
                .iter()
                .enumerate()
                .map(|(j, &a)| (a, p.shares[j] / tot, Box::new(move |l| p.effect(j, l)) as Box<dyn Fn(i64) -> f64>))
                .collect()
        }
        Design::Mc84Small => {
            let tau = spec.mc84.tau;
            vec![(spec.mc84.t0, 1.0, Box::new(move |_| tau) as Box<dyn Fn(i64) -> f64>)]
        }
        _ => {
            let p = &spec.mc85;
            let s = p.shares()?;
            let tot: f64 = s[..p.cohorts.len()].iter().sum();
            let periods = spec.periods;
            p.cohorts
                .iter()
                .enumerate()
                .map(|(j, &g)| (g, s[j] / tot, Box::new(move |l| p.effect(g, l, periods)) as Box<dyn Fn(i64) -> f64>))
                .collect()
        }
    };
    let mut theta_star = 0.0;
    let mut weights = BTreeMap::new();
    for (g, w, tau) in &profile {
        for ell in 0..=(spec.periods - g) as i64 {
            cells.insert((*g, ell), tau(ell));
        }
        theta_star += w * (0..POOLED_HORIZONS).map(|l| tau(l)).sum::<f64>() / POOLED_HORIZONS as f64;
        let seen = POOLED_HORIZONS.min((spec.periods - g) as i64 + 1);
        for ell in 0..seen {
            weights.insert((*g, ell), w / seen as f64);
        }
    }
    let theta_target = weights.iter().map(|(k, w)| w * cells[k]).sum();
    Ok(Truth { cells, weights, theta_star, theta_target })
}
