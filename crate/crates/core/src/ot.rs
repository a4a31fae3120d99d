//! Entropy-regularized optimal-transport clustering against prototypes.
//!
//! Features and prototypes are unit vectors; the cost is their negative
//! cosine similarity. The plan has uniform marginals `1/n` over features and
//! `1/K` over prototypes and is computed with log-domain Sinkhorn scaling,
//! safeguarded by Newton steps on the column potentials.

use crate::error::{Error, Result};

/// Tolerance on row norms accepted as "unit" by [`compute_cost`].
pub const UNIT_NORM_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

/// `K` unit-norm prototype rows of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub data: Vec<f32>,
    pub k: usize,
    pub d: usize,
    pub role: Role,
}

impl Prototypes {
    pub fn new(data: Vec<f32>, k: usize, d: usize, role: Role) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 prototypes, got {k}")));
        }
        if data.len() != k * d {
            return Err(Error::invalid(format!(
                "prototype buffer has {} values, need {}",
                data.len(),
                k * d
            )));
        }
        Ok(Prototypes { data, k, d, role })
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.data[k * self.d..(k + 1) * self.d]
    }

    /// Rescale every row to unit L2 norm.
    pub fn renormalize(&mut self) {
        for row in self.data.chunks_exact_mut(self.d) {
            crate::grid::normalize_in_place(row, 1e-12);
        }
    }

    pub fn max_norm_error(&self) -> f32 {
        self.data
            .chunks_exact(self.d)
            .map(|r| (crate::grid::l2_norm(r) - 1.0).abs())
            .fold(0.0, f32::max)
    }
}

/// `[n, K]` transport cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: Vec<f32>,
    pub n: usize,
    pub k: usize,
}

impl CostMatrix {
    pub fn new(values: Vec<f32>, n: usize, k: usize) -> Result<Self> {
        if values.len() != n * k {
            return Err(Error::invalid(format!(
                "cost buffer has {} values, need {}",
                values.len(),
                n * k
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cost matrix has non-finite entries"));
        }
        Ok(CostMatrix { values, n, k })
    }

    pub fn at(&self, i: usize, k: usize) -> f32 {
        self.values[i * self.k + k]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub values: Vec<f32>,
    pub n: usize,
    pub k: usize,
    pub iterations_used: u32,
    pub max_marginal_violation: f32,
}

impl TransportPlan {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.k..(i + 1) * self.k]
    }
}

fn check_unit_rows(data: &[f32], d: usize, what: &str) -> Result<()> {
    for (i, row) in data.chunks_exact(d.max(1)).enumerate() {
        let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::contract(format!(
                "{what} row {i} has norm {norm:.6}, expected unit"
            )));
        }
    }
    Ok(())
}

/// `cost[i, k] = -<z_i, p_k>` for unit rows `features` (`[n, d]`).
pub fn compute_cost(features: &[f32], d: usize, protos: &Prototypes) -> Result<CostMatrix> {
    if d != protos.d || !features.len().is_multiple_of(d.max(1)) {
        return Err(Error::contract(format!(
            "feature width {d} does not match prototype width {}",
            protos.d
        )));
    }
    check_unit_rows(features, d, "feature")?;
    check_unit_rows(&protos.data, d, "prototype")?;
    let n = features.len().checked_div(d).unwrap_or(0);
    let mut values = Vec::with_capacity(n * protos.k);
    for z in features.chunks_exact(d) {
        for k in 0..protos.k {
            let dot: f64 = z.iter().zip(protos.row(k)).map(|(a, b)| *a as f64 * *b as f64).sum();
            values.push((-dot).clamp(-1.0, 1.0) as f32);
        }
    }
    Ok(CostMatrix { values, n, k: protos.k })
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn state: the row potentials are always refit to the
/// column potentials, so rows hold their marginal exactly and progress is
/// measured on the columns.
struct Dual<'a> {
    c: &'a [f64],
    n: usize,
    kk: usize,
    eps: f64,
}

struct Iterate {
    g: Vec<f64>,
    f: Vec<f64>,
    plan: Vec<f64>,
    violation: f64,
    /// Relative error of the refit rows; nonzero only through lost precision.
    row_defect: f64,
}

impl Dual<'_> {
    fn evaluate(&self, mut g: Vec<f64>) -> Iterate {
        let (n, kk, eps) = (self.n, self.kk, self.eps);
        // the plan is invariant to a constant shift of g; centring keeps
        // f + g - c free of cancellation
        let mean = g.iter().sum::<f64>() / kk as f64;
        g.iter_mut().for_each(|v| *v -= mean);
        let log_a = -(n as f64).ln();
        let mut f = vec![0.0; n];
        let mut plan = vec![0.0; n * kk];
        for i in 0..n {
            let row = &self.c[i * kk..(i + 1) * kk];
            f[i] = eps * log_a - eps * log_sum_exp(g.iter().zip(row).map(|(gk, cik)| (gk - cik) / eps));
            for k in 0..kk {
                plan[i * kk + k] = ((f[i] + g[k] - row[k]) / eps).exp();
            }
        }
        let violation = marginal_violation(&plan, n, kk, 1.0 / n as f64, 1.0 / kk as f64);
        let row_defect = plan
            .chunks_exact(kk)
            .map(|r| (r.iter().sum::<f64>() * n as f64 - 1.0).abs())
            .fold(0.0, f64::max);
        Iterate {
            g,
            f,
            plan,
            violation,
            row_defect,
        }
    }

    /// Classic column scaling against the current row potentials.
    fn scaling_step(&self, it: &Iterate) -> Vec<f64> {
        let (n, kk, eps) = (self.n, self.kk, self.eps);
        let log_b = -(kk as f64).ln();
        (0..kk)
            .map(|k| eps * log_b - eps * log_sum_exp((0..n).map(|i| (it.f[i] - self.c[i * kk + k]) / eps)))
            .collect()
    }

    /// Newton direction on the column potentials for `colsum(g) = 1/K`, with
    /// the row potentials eliminated. The Jacobian is singular along the
    /// constant shift, which the rank-one term pins down.
    fn newton_direction(&self, it: &Iterate) -> Option<Vec<f64>> {
        let (n, kk, eps) = (self.n, self.kk, self.eps);
        let mut s = vec![0.0; kk];
        let mut jac = vec![0.0; kk * kk];
        for i in 0..n {
            let row = &it.plan[i * kk..(i + 1) * kk];
            for k in 0..kk {
                s[k] += row[k];
                for l in 0..kk {
                    jac[k * kk + l] -= n as f64 * row[k] * row[l];
                }
            }
        }
        for k in 0..kk {
            jac[k * kk + k] += s[k];
        }
        for v in jac.iter_mut() {
            *v = *v / eps + 1.0 / kk as f64;
        }
        let rhs: Vec<f64> = s.iter().map(|sk| 1.0 / kk as f64 - sk).collect();
        solve_dense(jac, rhs, kk).filter(|d| d.iter().all(|v| v.is_finite()))
    }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))?;
        if !(a[piv * n + col].abs() > 1e-300) {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap(piv * n + j, col * n + j);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let m = a[r * n + col] / a[col * n + col];
            if m != 0.0 {
                for j in col..n {
                    a[r * n + j] -= m * a[col * n + j];
                }
                b[r] -= m * b[col];
            }
        }
    }
    for col in (0..n).rev() {
        let tail: f64 = (col + 1..n).map(|j| a[col * n + j] * b[j]).sum();
        b[col] = (b[col] - tail) / a[col * n + col];
    }
    Some(b)
}

/// Step sizes tried along the Newton direction, largest first.
const NEWTON_STEPS: usize = 11;

/// Sinkhorn plan plus the marginal violation after every iteration.
///
/// Each iteration proposes the plain column-scaling update and a damped
/// Newton update of the same potentials, and keeps whichever leaves the
/// smaller marginal violation. The scaling update alone already converges;
/// the Newton candidate removes the slow plateau that plain scaling shows
/// at small `eps`.
pub fn sinkhorn_trace(cost: &CostMatrix, eps: f32, max_iters: u32, tol: f32) -> Result<(TransportPlan, Vec<f64>)> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid(format!("sinkhorn eps must be positive, got {eps}")));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("sinkhorn tol must be positive, got {tol}")));
    }
    let (n, kk) = (cost.n, cost.k);
    if n == 0 || kk == 0 {
        return Ok((
            TransportPlan {
                values: vec![],
                n,
                k: kk,
                iterations_used: 0,
                max_marginal_violation: 0.0,
            },
            vec![],
        ));
    }
    let c: Vec<f64> = cost.values.iter().map(|v| *v as f64).collect();
    let dual = Dual {
        c: &c,
        n,
        kk,
        eps: eps as f64,
    };
    let range_err = || {
        Error::Numerical(format!(
            "sinkhorn eps={eps} drives the log-domain potentials out of floating-point range"
        ))
    };
    let mut cur = dual.evaluate(vec![0.0; kk]);
    if !(cur.row_defect < 1e-3) {
        return Err(range_err());
    }
    let mut trace = Vec::new();
    let mut iters = 0;
    while iters < max_iters && !(cur.violation < tol as f64) {
        iters += 1;
        let mut best = dual.evaluate(dual.scaling_step(&cur));
        if let Some(dir) = dual.newton_direction(&cur) {
            let mut step = 1.0;
            for _ in 0..NEWTON_STEPS {
                let g: Vec<f64> = cur.g.iter().zip(&dir).map(|(g, d)| g + step * d).collect();
                let cand = dual.evaluate(g);
                if cand.violation < best.violation && cand.row_defect < 1e-3 {
                    best = cand;
                }
                step *= 0.5;
            }
        }
        cur = best;
        if !cur.violation.is_finite() || cur.f.iter().chain(&cur.g).any(|v| !v.is_finite()) || !(cur.row_defect < 1e-3)
        {
            return Err(range_err());
        }
        trace.push(cur.violation);
    }
    if !cur.violation.is_finite() || (0..n).any(|i| cur.plan[i * kk..(i + 1) * kk].iter().all(|v| *v == 0.0)) {
        return Err(range_err());
    }
    Ok((
        TransportPlan {
            values: cur.plan.iter().map(|v| *v as f32).collect(),
            n,
            k: kk,
            iterations_used: iters,
            max_marginal_violation: cur.violation as f32,
        },
        trace,
    ))
}

fn marginal_violation(plan: &[f64], n: usize, kk: usize, a: f64, b: f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        let s: f64 = plan[i * kk..(i + 1) * kk].iter().sum();
        worst = worst.max((s - a).abs());
    }
    for k in 0..kk {
        let s: f64 = (0..n).map(|i| plan[i * kk + k]).sum();
        worst = worst.max((s - b).abs());
    }
    worst
}

/// Log-domain Sinkhorn-Knopp toward uniform marginals.
pub fn sinkhorn(cost: &CostMatrix, eps: f32, max_iters: u32, tol: f32) -> Result<TransportPlan> {
    sinkhorn_trace(cost, eps, max_iters, tol).map(|(p, _)| p)
}

/// Row-wise argmax of the plan; ties resolve to the smallest cluster id.
pub fn hard_assign(plan: &TransportPlan) -> Vec<usize> {
    (0..plan.n).map(|i| argmax(plan.row(i))).collect()
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Plain (non-log) Sinkhorn-Knopp in f64, run to a tight violation.
    fn reference_sinkhorn(c: &[f64], n: usize, k: usize, eps: f64, tol: f64) -> Vec<f64> {
        let kmat: Vec<f64> = c.iter().map(|v| (-v / eps).exp()).collect();
        let mut u = vec![1.0; n];
        let mut v = vec![1.0; k];
        for _ in 0..1_000_000 {
            for i in 0..n {
                let s: f64 = (0..k).map(|j| kmat[i * k + j] * v[j]).sum();
                u[i] = (1.0 / n as f64) / s;
            }
            for j in 0..k {
                let s: f64 = (0..n).map(|i| kmat[i * k + j] * u[i]).sum();
                v[j] = (1.0 / k as f64) / s;
            }
            let worst = (0..n)
                .map(|i| ((0..k).map(|j| u[i] * kmat[i * k + j] * v[j]).sum::<f64>() - 1.0 / n as f64).abs())
                .fold(0.0, f64::max);
            if worst < tol {
                break;
            }
        }
        (0..n * k).map(|idx| u[idx / k] * kmat[idx] * v[idx % k]).collect()
    }

    fn unit(v: &mut [f32]) {
        crate::grid::normalize_in_place(v, 1e-12);
    }

    #[test]
    fn cost_of_identical_orthogonal_opposite() {
        let protos = Prototypes::new(vec![1.0, 0.0, 0.0, 1.0], 2, 2, Role::Teacher).unwrap();
        let c = compute_cost(&[1.0, 0.0, -1.0, 0.0], 2, &protos).unwrap();
        assert_eq!(c.values, vec![-1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn cost_rejects_unnormalized() {
        let protos = Prototypes::new(vec![1.0, 0.0, 0.0, 1.0], 2, 2, Role::Teacher).unwrap();
        assert!(matches!(compute_cost(&[2.0, 0.0], 2, &protos), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_cost_gives_independent_coupling() {
        let c = CostMatrix::new(vec![0.0; 4], 2, 2).unwrap();
        let p = sinkhorn(&c, 0.05, 100, 1e-6).unwrap();
        for v in &p.values {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn two_by_two_matches_long_run_reference() {
        let c = CostMatrix::new(vec![0.0, 1.0, 1.0, 0.0], 2, 2).unwrap();
        let p = sinkhorn(&c, 0.05, 1000, 1e-9).unwrap();
        let r = reference_sinkhorn(&[0.0, 1.0, 1.0, 0.0], 2, 2, 0.05, 1e-12);
        for (a, b) in p.values.iter().zip(&r) {
            assert!((*a as f64 - b).abs() < 1e-7, "{a} vs {b}");
        }
        assert!(p.values[0] > p.values[1]);
        assert_eq!(p.values[1], p.values[2]);
    }

    #[test]
    fn row_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f32> = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<f32> = perm.iter().flat_map(|&r| vals[r * 3..r * 3 + 3].to_vec()).collect();
        let p = sinkhorn(&CostMatrix::new(vals, 5, 3).unwrap(), 0.1, 200, 1e-9).unwrap();
        let q = sinkhorn(&CostMatrix::new(permuted, 5, 3).unwrap(), 0.1, 200, 1e-9).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for k in 0..3 {
                assert!((q.row(new_row)[k] - p.row(old_row)[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn marginals_and_monotone_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let vals: Vec<f32> = (0..8 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (p, trace) = sinkhorn_trace(&CostMatrix::new(vals, 8, 6).unwrap(), 0.05, 100, 1e-6).unwrap();
            assert!(p.max_marginal_violation < 1e-6);
            let total: f64 = p.values.iter().map(|v| *v as f64).sum();
            assert!((total - 1.0).abs() < 1e-6);
            for w in trace.windows(2) {
                assert!(w[1] <= w[0], "{trace:?}");
            }
        }
    }

    #[test]
    fn hard_assign_ties_and_unique_max() {
        let p = TransportPlan {
            values: vec![0.1, 0.2, 0.1, 0.6, 0.25, 0.25, 0.25, 0.25],
            n: 2,
            k: 4,
            iterations_used: 0,
            max_marginal_violation: 0.0,
        };
        assert_eq!(hard_assign(&p), vec![3, 0]);
    }

    #[test]
    fn row_shift_keeps_hard_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vals: Vec<f32> = (0..4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut shifted = vals.clone();
        for v in &mut shifted[4..8] {
            *v += 0.7;
        }
        let a = hard_assign(&sinkhorn(&CostMatrix::new(vals, 4, 4).unwrap(), 0.05, 500, 1e-9).unwrap());
        let b = hard_assign(&sinkhorn(&CostMatrix::new(shifted, 4, 4).unwrap(), 0.05, 500, 1e-9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_eps_reports_numerical_range() {
        let c = CostMatrix::new(vec![0.13, -0.71, 0.42, 0.05, 0.93, -0.27], 3, 2).unwrap();
        match sinkhorn(&c, 1e-30, 10, 1e-6) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("eps=")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn protos_renormalize() {
        let mut p = Prototypes::new(vec![3.0, 4.0, 0.0, 2.0], 2, 2, Role::Student).unwrap();
        p.renormalize();
        assert!(p.max_norm_error() < 1e-6);
        let mut v = vec![1.0, 1.0];
        unit(&mut v);
        assert!((v[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-7);
    }
}
