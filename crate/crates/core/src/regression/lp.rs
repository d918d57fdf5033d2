//! Dense two-phase simplex for small bounded-variable linear programs.
//!
//! Bland's rule picks both the entering and the leaving variable, so the
//! method cannot cycle. Problems here have at most a few hundred columns.

use crate::error::{Error, Result};

const EPS: f64 = 1e-9;
const MAX_PIVOTS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub sense: Sense,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    /// Per-variable `[lo, hi]`; either end may be infinite.
    pub bounds: Vec<(f64, f64)>,
    pub constraints: Vec<Constraint>,
}

impl LpProblem {
    pub fn new(objective: Vec<f64>, bounds: Vec<(f64, f64)>) -> Self {
        LpProblem { objective, bounds, constraints: Vec::new() }
    }

    pub fn add(&mut self, coeffs: Vec<f64>, sense: Sense, rhs: f64) {
        self.constraints.push(Constraint { coeffs, sense, rhs });
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub value: f64,
    pub x: Vec<f64>,
}

/// `x_j = offset + sum(sign * standard column)`.
struct VarMap {
    offset: f64,
    cols: Vec<(usize, f64)>,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    width: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.rows[i][self.width]
    }

    fn pivot(&mut self, r: usize, c: usize, obj: &mut [f64]) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i != r {
                let f = row[c];
                if f != 0.0 {
                    for (v, pv) in row.iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                    row[c] = 0.0;
                }
            }
        }
        let f = obj[c];
        if f != 0.0 {
            for (v, pv) in obj.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
            obj[c] = 0.0;
        }
        self.basis[r] = c;
    }

    /// Runs Bland-rule simplex on the reduced-cost row `obj` over the
    /// columns with `allowed[j]`.
    fn optimise(&mut self, obj: &mut [f64], allowed: &[bool]) -> Result<()> {
        for _ in 0..MAX_PIVOTS {
            let Some(enter) = (0..self.width).find(|&j| allowed[j] && obj[j] < -EPS) else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][enter];
                if a > EPS {
                    let ratio = self.rhs(i) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - EPS || (ratio <= lr + EPS && self.basis[i] < self.basis[li]) {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            let Some((r, _)) = leave else {
                return Err(Error::Unbounded);
            };
            self.pivot(r, enter, obj);
        }
        Err(Error::NoConvergence { what: "simplex".into(), iterations: MAX_PIVOTS })
    }
}

/// Solves the program in the requested direction.
pub fn solve_lp(problem: &LpProblem, direction: Direction) -> Result<LpSolution> {
    let n = problem.num_vars();
    if problem.bounds.len() != n {
        return Err(Error::InvalidInput("lp: bounds length differs from objective".into()));
    }
    if problem.objective.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("lp: objective must be finite".into()));
    }
    for c in &problem.constraints {
        if c.coeffs.len() != n || !c.rhs.is_finite() || c.coeffs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("lp: malformed constraint row".into()));
        }
    }
    for &(lo, hi) in &problem.bounds {
        if lo.is_nan() || hi.is_nan() || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
            return Err(Error::InvalidInput("lp: malformed bound".into()));
        }
        if lo > hi {
            return Err(Error::Infeasible);
        }
    }

    // Standard form: every column nonnegative.
    let mut maps = Vec::with_capacity(n);
    let mut ns = 0;
    let mut rows: Vec<(Vec<(usize, f64)>, Sense, f64)> = Vec::new();
    for &(lo, hi) in &problem.bounds {
        let m = match (lo.is_finite(), hi.is_finite()) {
            (true, _) => {
                let col = ns;
                ns += 1;
                if hi.is_finite() {
                    rows.push((vec![(col, 1.0)], Sense::Le, hi - lo));
                }
                VarMap { offset: lo, cols: vec![(col, 1.0)] }
            }
            (false, true) => {
                ns += 1;
                VarMap { offset: hi, cols: vec![(ns - 1, -1.0)] }
            }
            (false, false) => {
                ns += 2;
                VarMap { offset: 0.0, cols: vec![(ns - 2, 1.0), (ns - 1, -1.0)] }
            }
        };
        maps.push(m);
    }
    for c in &problem.constraints {
        let mut terms = Vec::new();
        let mut rhs = c.rhs;
        for (j, &a) in c.coeffs.iter().enumerate() {
            if a != 0.0 {
                rhs -= a * maps[j].offset;
                for &(col, s) in &maps[j].cols {
                    terms.push((col, a * s));
                }
            }
        }
        rows.push((terms, c.sense, rhs));
    }
    let sign = if direction == Direction::Maximize { -1.0 } else { 1.0 };
    let mut cost = vec![0.0; ns];
    for (j, &c) in problem.objective.iter().enumerate() {
        for &(col, s) in &maps[j].cols {
            cost[col] += sign * c * s;
        }
    }

    // Slack / surplus / artificial columns.
    let m = rows.len();
    let n_slack = rows.iter().filter(|r| r.1 != Sense::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 == Sense::Eq || (r.1 == Sense::Le) == (r.2 < 0.0)).count();
    let width = ns + n_slack + n_art;
    let mut tab = Tableau { rows: vec![vec![0.0; width + 1]; m], basis: vec![0; m], width };
    let mut is_art = vec![false; width];
    let (mut next_slack, mut next_art) = (ns, ns + n_slack);
    for (i, (terms, sense, rhs)) in rows.iter().enumerate() {
        let flip = *rhs < 0.0;
        let f = if flip { -1.0 } else { 1.0 };
        let row = &mut tab.rows[i];
        for &(col, a) in terms {
            row[col] += f * a;
        }
        row[width] = f * rhs;
        let sense = match (sense, flip) {
            (Sense::Le, true) => Sense::Ge,
            (Sense::Ge, true) => Sense::Le,
            (s, _) => *s,
        };
        match sense {
            Sense::Le => {
                row[next_slack] = 1.0;
                tab.basis[i] = next_slack;
                next_slack += 1;
            }
            Sense::Ge => {
                row[next_slack] = -1.0;
                next_slack += 1;
                row[next_art] = 1.0;
                is_art[next_art] = true;
                tab.basis[i] = next_art;
                next_art += 1;
            }
            Sense::Eq => {
                row[next_art] = 1.0;
                is_art[next_art] = true;
                tab.basis[i] = next_art;
                next_art += 1;
            }
        }
    }

    let scale = tab.rows.iter().map(|r| r[width].abs()).fold(1.0_f64, f64::max);
    if n_art > 0 {
        // Phase one: minimise the sum of artificials.
        let mut obj = vec![0.0; width + 1];
        for j in 0..width {
            if is_art[j] {
                obj[j] = 1.0;
            }
        }
        for i in 0..m {
            if is_art[tab.basis[i]] {
                for (o, v) in obj.iter_mut().zip(&tab.rows[i]) {
                    *o -= v;
                }
            }
        }
        let all = vec![true; width];
        tab.optimise(&mut obj, &all)?;
        if -obj[width] > EPS * scale {
            return Err(Error::Infeasible);
        }
        // Drive remaining artificials out of the basis; drop redundant rows.
        let mut i = 0;
        while i < tab.rows.len() {
            if is_art[tab.basis[i]] {
                if let Some(c) = (0..width).find(|&j| !is_art[j] && tab.rows[i][j].abs() > EPS) {
                    tab.pivot(i, c, &mut obj);
                } else {
                    tab.rows.remove(i);
                    tab.basis.remove(i);
                    continue;
                }
            }
            i += 1;
        }
    }

    let mut obj = vec![0.0; width + 1];
    obj[..ns].copy_from_slice(&cost);
    for i in 0..tab.rows.len() {
        let cb = obj_cost(&cost, tab.basis[i]);
        if cb != 0.0 {
            for (o, v) in obj.iter_mut().zip(&tab.rows[i]) {
                *o -= cb * v;
            }
        }
    }
    let allowed: Vec<bool> = is_art.iter().map(|a| !a).collect();
    tab.optimise(&mut obj, &allowed)?;

    let mut xs = vec![0.0; width];
    for (i, &b) in tab.basis.iter().enumerate() {
        xs[b] = tab.rhs(i);
    }
    let x: Vec<f64> = maps
        .iter()
        .map(|m| m.offset + m.cols.iter().map(|&(c, s)| s * xs[c]).sum::<f64>())
        .collect();
    let value = problem.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(LpSolution { value, x })
}

fn obj_cost(cost: &[f64], col: usize) -> f64 {
    cost.get(col).copied().unwrap_or(0.0)
}
