//! Linearly constrained least squares `min ‖Aθ - y‖²` with equality anchors,
//! sign constraints and monotone chains, solved by a primal active-set method
//! on the normal equations.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Admissible coefficient set.
///
/// Inequality rows are indexed with the sign rows first (in coefficient
/// order) followed by the chain rows `κ θ_k <= κ θ_{k+1}`, `k = 0..N_b-2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSet {
    pub anchors: Vec<(usize, f64)>,
    pub nonneg: Vec<bool>,
    /// `-1` non-increasing, `0` no chain, `+1` non-decreasing.
    pub monotone: i8,
}

impl ConstraintSet {
    pub fn free(n: usize) -> Self {
        ConstraintSet { anchors: Vec::new(), nonneg: vec![false; n], monotone: 0 }
    }

    pub fn len(&self) -> usize {
        self.nonneg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nonneg.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if !matches!(self.monotone, -1..=1) {
            return Err(Error::Config(format!("monotonicity must be -1, 0 or 1 (got {})", self.monotone)));
        }
        let mut seen = vec![false; n];
        for &(k, v) in &self.anchors {
            if k >= n || seen[k] {
                return Err(Error::Config(format!("anchor index {k} repeated or out of range")));
            }
            if !v.is_finite() {
                return Err(Error::Config("anchor value must be finite".into()));
            }
            seen[k] = true;
        }
        Ok(())
    }

    /// Inequality rows as `(coefficients, rhs)` meaning `c·θ >= rhs`.
    fn inequality_rows(&self) -> Vec<(Vec<(usize, f64)>, f64)> {
        let mut rows = Vec::new();
        for (k, &nn) in self.nonneg.iter().enumerate() {
            if nn {
                rows.push((vec![(k, 1.0)], 0.0));
            }
        }
        if self.monotone != 0 {
            let s = self.monotone as f64;
            for k in 0..self.len().saturating_sub(1) {
                rows.push((vec![(k + 1, s), (k, -s)], 0.0));
            }
        }
        rows
    }

    pub fn inequality_count(&self) -> usize {
        self.inequality_rows().len()
    }

    fn describe(&self, row: usize) -> String {
        let signs = self.nonneg.iter().filter(|&&b| b).count();
        if row < signs {
            let k = self.nonneg.iter().enumerate().filter(|(_, &b)| b).nth(row).unwrap().0;
            format!("sign row {row} (theta_{k} >= 0)")
        } else {
            let k = row - signs;
            let op = if self.monotone > 0 { "<=" } else { ">=" };
            format!("chain row {row} (theta_{k} {op} theta_{})", k + 1)
        }
    }

    /// Largest violation of any constraint at `theta`.
    pub fn max_violation(&self, theta: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for &(k, v) in &self.anchors {
            worst = worst.max((theta[k] - v).abs());
        }
        for (row, rhs) in self.inequality_rows() {
            let lhs: f64 = row.iter().map(|&(k, c)| c * theta[k]).sum();
            worst = worst.max(rhs - lhs);
        }
        worst
    }

    fn anchor_of(&self, k: usize) -> Option<f64> {
        self.anchors.iter().find(|a| a.0 == k).map(|a| a.1)
    }

    /// A feasible point, or the index of a constraint that cannot be met.
    ///
    /// Walking along the chain direction each coefficient takes the smallest
    /// value allowed by its predecessor and sign (or its anchor); this point is
    /// feasible whenever the set is nonempty.
    fn feasible_start(&self) -> std::result::Result<Vec<f64>, usize> {
        let n = self.len();
        let order: Vec<usize> = if self.monotone < 0 { (0..n).rev().collect() } else { (0..n).collect() };
        let mut theta = vec![0.0; n];
        let mut prev: Option<f64> = None;
        for (pos, &k) in order.iter().enumerate() {
            theta[k] = match self.anchor_of(k) {
                Some(v) => v,
                None => {
                    let mut low = if self.nonneg[k] { Some(0.0) } else { None };
                    if self.monotone != 0 {
                        if let Some(p) = prev {
                            low = Some(low.map_or(p, |l: f64| l.max(p)));
                        }
                    }
                    match low {
                        Some(l) => l,
                        None if self.monotone != 0 => {
                            // Stay below every anchor further along the chain.
                            order[pos + 1..].iter().filter_map(|&j| self.anchor_of(j)).fold(0.0f64, f64::min)
                        }
                        None => 0.0,
                    }
                }
            };
            prev = Some(theta[k]);
        }
        let rows = self.inequality_rows();
        for (idx, (row, rhs)) in rows.iter().enumerate() {
            let lhs: f64 = row.iter().map(|&(k, c)| c * theta[k]).sum();
            if lhs < rhs - 1e-12 * (1.0 + rhs.abs()) {
                return Err(idx);
            }
        }
        Ok(theta)
    }
}

/// Anchor `θ_0 = ρ̄` plus the chain `κ θ_k <= κ θ_{k+1}`.
pub fn build_constraints_for_drift(nb: usize, rho_bar: f64, kappa: i8) -> ConstraintSet {
    ConstraintSet { anchors: vec![(0, rho_bar)], nonneg: vec![false; nb], monotone: kappa }
}

/// Nonnegativity of every coefficient, anchors and an optional chain. Negative
/// anchor indices count from the end (`-1` is the last coefficient).
pub fn build_constraints_for_diffusion(nb: usize, anchors: &[(i64, f64)], kappa: i8) -> ConstraintSet {
    let anchors = anchors
        .iter()
        .map(|&(k, v)| {
            let k = if k < 0 { nb as i64 + k } else { k };
            (k.clamp(0, nb as i64 - 1) as usize, v)
        })
        .collect();
    ConstraintSet { anchors, nonneg: vec![true; nb], monotone: kappa }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpOptions {
    pub constraint_tol: f64,
    pub kkt_tol: f64,
    /// Iteration cap per coefficient (total cap is this times `N_b`).
    pub iterations_per_coefficient: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions { constraint_tol: 1e-10, kkt_tol: 1e-8, iterations_per_coefficient: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible { constraint: usize, description: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub theta: Vec<f64>,
    pub objective: f64,
    /// Relative stationarity / dual-feasibility residual.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    /// Whether the Gram matrix needed a diagonal shift to factor.
    pub regularized: bool,
}

impl QpSolution {
    pub fn into_result(self) -> Result<Self> {
        match &self.status {
            QpStatus::Infeasible { description, .. } => Err(Error::Infeasible(description.clone())),
            _ => Ok(self),
        }
    }
}

/// Accumulated `AᵀA`, `Aᵀy`, `yᵀy` of a (weighted) stack of row blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub gram: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub yty: f64,
    pub rows: usize,
}

impl NormalEquations {
    pub fn new(cols: usize) -> Self {
        NormalEquations { gram: DMatrix::zeros(cols, cols), rhs: DVector::zeros(cols), yty: 0.0, rows: 0 }
    }

    pub fn cols(&self) -> usize {
        self.rhs.len()
    }

    /// Adds `weight` times the normal equations of the row-major block `a`, `y`.
    pub fn add_block(&mut self, a: &[f64], y: &[f64], weight: f64) {
        let n = self.cols();
        debug_assert_eq!(a.len(), y.len() * n);
        let mut g = vec![0.0; n * n];
        let mut r = vec![0.0; n];
        let mut yy = 0.0;
        for (row, &yv) in a.chunks_exact(n).zip(y) {
            for p in 0..n {
                let ap = row[p];
                if ap == 0.0 {
                    continue;
                }
                r[p] += ap * yv;
                for q in p..n {
                    g[p * n + q] += ap * row[q];
                }
            }
            yy += yv * yv;
        }
        for p in 0..n {
            self.rhs[p] += weight * r[p];
            for q in p..n {
                self.gram[(p, q)] += weight * g[p * n + q];
                if q != p {
                    self.gram[(q, p)] += weight * g[p * n + q];
                }
            }
        }
        self.yty += weight * yy;
        self.rows += y.len();
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, other: &NormalEquations, weight: f64) {
        self.gram += &other.gram * weight;
        self.rhs += &other.rhs * weight;
        self.yty += weight * other.yty;
        self.rows += other.rows;
    }

    pub fn scaled(&self, weight: f64) -> NormalEquations {
        let mut out = NormalEquations::new(self.cols());
        out.add_scaled(self, weight);
        out
    }

    /// `‖Aθ - y‖² = θᵀGθ - 2θᵀAᵀy + yᵀy`, clamped at zero.
    pub fn objective(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        ((&t.transpose() * &self.gram * &t)[(0, 0)] - 2.0 * t.dot(&self.rhs) + self.yty).max(0.0)
    }
}

/// Solves the problem with design `a` and target `y` directly.
pub fn solve_cls(a: &DMatrix<f64>, y: &DVector<f64>, constraints: &ConstraintSet, opts: &QpOptions) -> Result<QpSolution> {
    if a.nrows() != y.len() || a.ncols() != constraints.len() {
        return Err(Error::Shape(format!(
            "A is {}x{}, y has {} entries, {} coefficients constrained",
            a.nrows(),
            a.ncols(),
            y.len(),
            constraints.len()
        )));
    }
    let ne = NormalEquations { gram: a.transpose() * a, rhs: a.transpose() * y, yty: y.dot(y), rows: a.nrows() };
    let mut sol = solve_normal(&ne, constraints, opts)?;
    let t = DVector::from_column_slice(&sol.theta);
    sol.objective = (a * t - y).norm_squared();
    Ok(sol)
}

/// Solves `min θᵀGθ - 2 θᵀb + yᵀy` over the constraint set.
pub fn solve_normal(ne: &NormalEquations, constraints: &ConstraintSet, opts: &QpOptions) -> Result<QpSolution> {
    constraints.validate()?;
    let n = ne.cols();
    if constraints.len() != n {
        return Err(Error::Shape(format!("{} coefficients, {} constrained", n, constraints.len())));
    }
    if ne.gram.iter().chain(ne.rhs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Config("non-finite normal equations".into()));
    }
    let start = match constraints.feasible_start() {
        Ok(t) => t,
        Err(row) => {
            return Ok(QpSolution {
                theta: vec![0.0; n],
                objective: f64::NAN,
                kkt_residual: f64::NAN,
                iterations: 0,
                status: QpStatus::Infeasible { constraint: row, description: constraints.describe(row) },
                regularized: false,
            })
        }
    };

    // Eliminate anchored coefficients: θ = θ_fixed + E u.
    let free: Vec<usize> = (0..n).filter(|&k| constraints.anchor_of(k).is_none()).collect();
    let nf = free.len();
    let mut fixed = vec![0.0; n];
    for &(k, v) in &constraints.anchors {
        fixed[k] = v;
    }
    let fixed_v = DVector::from_column_slice(&fixed);
    let g_fixed = &ne.gram * &fixed_v;
    let mut h = DMatrix::zeros(nf, nf);
    let mut g = DVector::zeros(nf);
    for (p, &kp) in free.iter().enumerate() {
        g[p] = ne.rhs[kp] - g_fixed[kp];
        for (q, &kq) in free.iter().enumerate() {
            h[(p, q)] = ne.gram[(kp, kq)];
        }
    }
    // Inequalities in u: c·u >= d.
    let mut cons: Vec<(DVector<f64>, f64)> = Vec::new();
    for (row, rhs) in constraints.inequality_rows() {
        let mut c = DVector::zeros(nf);
        let mut d = rhs;
        for (k, coef) in row {
            match free.iter().position(|&f| f == k) {
                Some(p) => c[p] += coef,
                None => d -= coef * fixed[k],
            }
        }
        if c.iter().any(|&v| v != 0.0) {
            cons.push((c, d));
        }
    }

    let mut regularized = false;
    let trace: f64 = (0..nf).map(|p| h[(p, p)]).sum();
    if nf > 0 && Cholesky::new(h.clone()).is_none() {
        let shift = 1e-12 * if trace > 0.0 { trace / nf as f64 } else { 1.0 };
        for p in 0..nf {
            h[(p, p)] += shift;
        }
        regularized = true;
    }

    let mut u = DVector::from_iterator(nf, free.iter().map(|&k| start[k]));
    let scale = 1.0 + g.amax() + h.amax() * u.amax().max(1.0);
    let max_iter = opts.iterations_per_coefficient * n.max(1);
    let mut working: Vec<usize> = Vec::new();
    let mut iterations = 0;
    let mut status = QpStatus::MaxIter;

    while nf > 0 && iterations < max_iter {
        iterations += 1;
        let grad = &h * &u - &g;
        let (p, lambda) = solve_kkt(&h, &grad, &cons, &working);
        let step_small = p.amax() <= 1e-13 * (1.0 + u.amax());
        if step_small {
            // Bland's rule: drop the lowest-indexed constraint with a negative multiplier.
            let drop = working
                .iter()
                .enumerate()
                .filter(|&(w, _)| lambda[w] < -1e-11 * scale)
                .min_by_key(|&(_, &c)| c)
                .map(|(w, _)| w);
            match drop {
                None => {
                    status = QpStatus::Optimal;
                    break;
                }
                Some(w) => {
                    working.remove(w);
                }
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking: Option<usize> = None;
        for (ci, (c, d)) in cons.iter().enumerate() {
            if working.contains(&ci) {
                continue;
            }
            let cp = c.dot(&p);
            if cp < -1e-14 * c.amax() * p.amax() {
                let a = ((d - c.dot(&u)) / cp).max(0.0);
                if a < alpha || (a == alpha && blocking.is_some_and(|b| ci < b)) {
                    alpha = a;
                    blocking = Some(ci);
                }
            }
        }
        u += &p * alpha;
        if let Some(b) = blocking {
            working.push(b);
            working.sort_unstable();
        }
    }
    if nf == 0 {
        status = QpStatus::Optimal;
    }

    let mut theta = fixed;
    for (p, &k) in free.iter().enumerate() {
        theta[k] = u[p];
    }
    // Multipliers of the final working set give the KKT residual.
    let kkt_residual = if nf == 0 {
        0.0
    } else {
        let grad = &h * &u - &g;
        let (_, lam) = solve_kkt(&h, &grad, &cons, &working);
        let mut stat = grad.clone();
        for (w, &ci) in working.iter().enumerate() {
            stat -= &cons[ci].0 * lam[w];
        }
        let dual = lam.iter().fold(0.0f64, |m, &l| m.max(-l));
        stat.amax().max(dual) / scale
    };
    if status == QpStatus::Optimal && kkt_residual > opts.kkt_tol {
        status = QpStatus::MaxIter;
    }
    Ok(QpSolution {
        objective: ne.objective(&theta),
        theta,
        kkt_residual,
        iterations,
        status,
        regularized,
    })
}

/// Equality-constrained step `p` and multipliers `λ` for the working set:
/// `H p - C_Wᵀ λ = -grad`, `C_W p = 0`.
fn solve_kkt(h: &DMatrix<f64>, grad: &DVector<f64>, cons: &[(DVector<f64>, f64)], working: &[usize]) -> (DVector<f64>, Vec<f64>) {
    let n = h.nrows();
    let m = working.len();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    for (w, &ci) in working.iter().enumerate() {
        for p in 0..n {
            k[(p, n + w)] = -cons[ci].0[p];
            k[(n + w, p)] = cons[ci].0[p];
        }
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-grad));
    let sol = k.clone().lu().solve(&rhs).unwrap_or_else(|| {
        k.svd(true, true).solve(&rhs, 1e-14).expect("SVD solve")
    });
    (sol.rows(0, n).into_owned(), sol.rows(n, m).iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_design_returns_the_target() {
        let a = DMatrix::identity(3, 3);
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let s = solve_cls(&a, &y, &ConstraintSet::free(3), &QpOptions::default()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        for (t, v) in s.theta.iter().zip(y.iter()) {
            assert!((t - v).abs() < 1e-12);
        }
    }

    #[test]
    fn nonnegativity_clips_under_identity_design() {
        let a = DMatrix::identity(2, 2);
        let y = DVector::from_vec(vec![-1.0, 2.0]);
        let c = ConstraintSet { anchors: vec![], nonneg: vec![true, true], monotone: 0 };
        let s = solve_cls(&a, &y, &c, &QpOptions::default()).unwrap();
        assert!((s.theta[0]).abs() < 1e-12 && (s.theta[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn contradictory_anchors_are_infeasible_with_a_certificate() {
        let c = ConstraintSet { anchors: vec![(0, 1.0), (2, 0.0)], nonneg: vec![false; 3], monotone: 1 };
        let s = solve_normal(&NormalEquations::new(3), &c, &QpOptions::default()).unwrap();
        assert!(matches!(s.status, QpStatus::Infeasible { .. }));
        assert!(s.into_result().is_err());
        let neg = ConstraintSet { anchors: vec![(1, -1.0)], nonneg: vec![true; 3], monotone: 0 };
        let s = solve_normal(&NormalEquations::new(3), &neg, &QpOptions::default()).unwrap();
        assert!(matches!(s.status, QpStatus::Infeasible { constraint: 1, .. }));
    }

    #[test]
    fn builders() {
        let d = build_constraints_for_drift(5, 1.0, -1);
        assert_eq!(d.anchors, vec![(0, 1.0)]);
        assert_eq!(d.inequality_count(), 4);
        let z = build_constraints_for_diffusion(4, &[(0, 0.0), (-1, 0.0)], 0);
        assert_eq!(z.anchors, vec![(0, 0.0), (3, 0.0)]);
        assert_eq!(z.inequality_count(), 4);
        assert_eq!(build_constraints_for_diffusion(4, &[], -1).inequality_count(), 7);
    }

    #[test]
    fn zero_design_returns_a_feasible_point() {
        let c = build_constraints_for_drift(6, 1.0, -1);
        let s = solve_normal(&NormalEquations::new(6), &c, &QpOptions::default()).unwrap();
        assert!(s.regularized);
        assert!(c.max_violation(&s.theta) <= 1e-10);
        assert_eq!(s.theta[0], 1.0);
        let c0 = ConstraintSet { anchors: vec![(0, 0.0)], nonneg: vec![false; 4], monotone: 0 };
        let s0 = solve_normal(&NormalEquations::new(4), &c0, &QpOptions::default()).unwrap();
        assert!(s0.theta.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn monotone_chain_projection() {
        // Isotonic regression of (3, 1, 2) under non-decreasing order: (2, 2, 2).
        let a = DMatrix::identity(3, 3);
        let y = DVector::from_vec(vec![3.0, 1.0, 2.0]);
        let c = ConstraintSet { anchors: vec![], nonneg: vec![false; 3], monotone: 1 };
        let s = solve_cls(&a, &y, &c, &QpOptions::default()).unwrap();
        for t in &s.theta {
            assert!((t - 2.0).abs() < 1e-12);
        }
        assert!((s.objective - 2.0).abs() < 1e-12);
    }

    #[test]
    fn block_accumulation_equals_the_direct_product() {
        let a = DMatrix::from_fn(7, 3, |i, j| ((i * 3 + j) as f64).sin());
        let y = DVector::from_fn(7, |i, _| (i as f64).cos());
        let mut ne = NormalEquations::new(3);
        let rows: Vec<f64> = (0..7).flat_map(|i| (0..3).map(move |j| ((i * 3 + j) as f64).sin())).collect();
        ne.add_block(&rows[..9], &y.as_slice()[..3], 1.0);
        ne.add_block(&rows[9..], &y.as_slice()[3..], 1.0);
        assert!((ne.gram.clone() - a.transpose() * &a).amax() < 1e-14);
        assert!((ne.rhs.clone() - a.transpose() * &y).amax() < 1e-14);
        assert!((ne.yty - y.dot(&y)).abs() < 1e-14);
    }
}
