//! Discrete optimal transport: entropic Sinkhorn and an exact small solver.
//!
//! Sinkhorn solves `min ⟨P, C⟩ − ε H(P)` over couplings of `a` and `b`
//! with the scaling iterations
//!
//! ```text
//! K = exp(−C/ε),  u ← a ⊘ (K v),  v ← b ⊘ (Kᵀ u),  P = diag(u) K diag(v)
//! ```
//!
//! or, in the log domain, the equivalent dual-potential updates
//! `f_i = ε log a_i − ε LSE_j((g_j − C_ij)/ε)` and symmetrically for `g`,
//! warm-started by halving ε from the cost scale down to the target.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Below this ε the solver always runs in the log domain.
pub const LOG_DOMAIN_BELOW: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SinkhornConfig {
    pub epsilon: f64,
    /// Ground-cost exponent.
    pub p: f64,
    pub max_iters: usize,
    /// L1 tolerance on the plan marginals.
    pub marginal_tol: f64,
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            p: 2.0,
            max_iters: 100_000,
            marginal_tol: 1e-9,
            log_domain: false,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            bail!(Config, "epsilon must be > 0, got {}", self.epsilon);
        }
        if !(self.p >= 1.0 && self.p.is_finite()) {
            bail!(Config, "cost exponent p must be >= 1, got {}", self.p);
        }
        if !(self.marginal_tol > 0.0) {
            bail!(Config, "marginal_tol must be > 0, got {}", self.marginal_tol);
        }
        if self.max_iters == 0 {
            bail!(Config, "max_iters must be >= 1");
        }
        Ok(())
    }

    pub fn uses_log_domain(&self) -> bool {
        self.log_domain || self.epsilon < LOG_DOMAIN_BELOW
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `[n, m]`, nonnegative.
    pub plan: Tensor,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// `⟨P, C⟩`.
    pub cost: f64,
    /// `⟨P, C⟩^{1/p}`.
    pub cost_root: f64,
    pub iterations: usize,
    /// `‖P1 − a‖₁ + ‖Pᵀ1 − b‖₁`.
    pub marginal_violation: f64,
    pub log_domain: bool,
    /// Scaling vectors of the non-log solver, `P = diag(u) K diag(v)`.
    pub scalings: Option<(Vec<f64>, Vec<f64>)>,
}

/// `C_ij = ‖x_i − y_j‖₂^p`.
pub fn cost_matrix(x: &Tensor, y: &Tensor, p: f64) -> Result<Tensor> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.last_dim() != y.last_dim() {
        bail!(Dimension, "cost between {:?} and {:?}", x.shape(), y.shape());
    }
    let (n, m) = (x.rows(), y.rows());
    let mut c = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let d2: f64 = x.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            c.push(if p == 2.0 { d2 } else { math::pow(math::sqrt(d2), p) });
        }
    }
    Tensor::new(vec![n, m], c)
}

fn check_problem(a: &[f64], b: &[f64], c: &Tensor) -> Result<()> {
    if c.shape() != [a.len(), b.len()] {
        bail!(Dimension, "cost {:?} for marginals of {} and {}", c.shape(), a.len(), b.len());
    }
    if a.is_empty() || b.is_empty() {
        bail!(Contract, "empty marginal");
    }
    for (name, w) in [("a", a), ("b", b)] {
        if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            bail!(Contract, "marginal {name} must be strictly positive");
        }
        let s = math::stable_sum(w.iter().copied());
        if (s - 1.0).abs() > 1e-9 {
            bail!(Contract, "marginal {name} sums to {s}, not 1");
        }
    }
    if c.data().iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        bail!(Contract, "costs must be finite and nonnegative");
    }
    Ok(())
}

fn violation(plan: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let m = b.len();
    let rows: f64 = a
        .iter()
        .enumerate()
        .map(|(i, &ai)| (math::stable_sum(plan[i * m..(i + 1) * m].iter().copied()) - ai).abs())
        .sum();
    let cols: f64 = b
        .iter()
        .enumerate()
        .map(|(j, &bj)| (math::stable_sum((0..a.len()).map(|i| plan[i * m + j])) - bj).abs())
        .sum();
    rows + cols
}

fn finish(plan: Vec<f64>, a: &[f64], b: &[f64], c: &Tensor, p: f64, iterations: usize, log_domain: bool) -> Result<TransportPlan> {
    let cost = math::stable_sum(plan.iter().zip(c.data()).map(|(x, y)| x * y));
    let marginal_violation = violation(&plan, a, b);
    Ok(TransportPlan {
        plan: Tensor::new(vec![a.len(), b.len()], plan)?,
        a: a.to_vec(),
        b: b.to_vec(),
        cost,
        cost_root: math::pow(cost.max(0.0), 1.0 / p),
        iterations,
        marginal_violation,
        log_domain,
        scalings: None,
    })
}

/// Entropic transport plan between `a` and `b` under cost `c`.
///
/// `cfg.p` only sets the exponent of the reported `cost_root`; the costs
/// themselves are taken as given. The plain solver falls back to the log
/// domain when `exp(−C/ε)` underflows.
pub fn sinkhorn(a: &[f64], b: &[f64], c: &Tensor, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    check_problem(a, b, c)?;
    if !cfg.uses_log_domain() {
        if let Some(plan) = sinkhorn_plain(a, b, c, cfg)? {
            return Ok(plan);
        }
    }
    sinkhorn_log(a, b, c, cfg)
}

/// `None` when the kernel underflows.
fn sinkhorn_plain(a: &[f64], b: &[f64], c: &Tensor, cfg: &SinkhornConfig) -> Result<Option<TransportPlan>> {
    let (n, m) = (a.len(), b.len());
    let k: Vec<f64> = c.data().iter().map(|&v| math::exp(-v / cfg.epsilon)).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut viol = f64::INFINITY;
    for it in 1..=cfg.max_iters {
        for i in 0..n {
            let kv: f64 = (0..m).map(|j| k[i * m + j] * v[j]).sum();
            if !(kv > 0.0) {
                return Ok(None);
            }
            u[i] = a[i] / kv;
        }
        for j in 0..m {
            let ku: f64 = (0..n).map(|i| k[i * m + j] * u[i]).sum();
            if !(ku > 0.0) {
                return Ok(None);
            }
            v[j] = b[j] / ku;
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Ok(None);
        }
        viol = (0..n)
            .map(|i| (u[i] * (0..m).map(|j| k[i * m + j] * v[j]).sum::<f64>() - a[i]).abs())
            .sum();
        if viol < cfg.marginal_tol {
            let plan: Vec<f64> = (0..n * m).map(|ij| u[ij / m] * k[ij] * v[ij % m]).collect();
            let mut out = finish(plan, a, b, c, cfg.p, it, false)?;
            out.scalings = Some((u, v));
            return Ok(Some(out));
        }
    }
    Err(Error::Convergence {
        iterations: cfg.max_iters,
        violation: viol,
    })
}

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + math::ln(xs.map(|x| math::exp(x - mx)).sum::<f64>())
}

fn sinkhorn_log(a: &[f64], b: &[f64], c: &Tensor, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let (n, m) = (a.len(), b.len());
    let cd = c.data();
    let la: Vec<f64> = a.iter().map(|&x| math::ln(x)).collect();
    let lb: Vec<f64> = b.iter().map(|&x| math::ln(x)).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let cmax = cd.iter().copied().fold(0.0, f64::max);
    let mut eps = cfg.epsilon.max(cmax);
    let mut iterations = 0;
    let row_violation = |f: &[f64], g: &[f64], eps: f64| -> f64 {
        (0..n)
            .map(|i| {
                let s = math::exp(lse((0..m).map(|j| (f[i] + g[j] - cd[i * m + j]) / eps)));
                (s - a[i]).abs()
            })
            .sum()
    };
    loop {
        let last = eps <= cfg.epsilon;
        let tol = if last { cfg.marginal_tol } else { cfg.marginal_tol.max(1e-3) };
        let mut viol = f64::INFINITY;
        while iterations < cfg.max_iters {
            iterations += 1;
            for i in 0..n {
                f[i] = eps * la[i] - eps * lse((0..m).map(|j| (g[j] - cd[i * m + j]) / eps));
            }
            for j in 0..m {
                g[j] = eps * lb[j] - eps * lse((0..n).map(|i| (f[i] - cd[i * m + j]) / eps));
            }
            viol = row_violation(&f, &g, eps);
            if viol < tol {
                break;
            }
        }
        if !(viol < tol) {
            return Err(Error::Convergence {
                iterations,
                violation: viol,
            });
        }
        if last {
            break;
        }
        eps = (eps * 0.5).max(cfg.epsilon);
    }
    let plan: Vec<f64> = (0..n * m)
        .map(|ij| math::exp((f[ij / m] + g[ij % m] - cd[ij]) / eps))
        .collect();
    finish(plan, a, b, c, cfg.p, iterations, true)
}

/// Largest `n · m` accepted by [`exact_ot_small`].
pub const EXACT_MAX_CELLS: usize = 64;

/// Exact `min ⟨P, C⟩` over couplings of `a` and `b`, by successive
/// shortest paths on the transportation network.
pub fn exact_ot_small(a: &[f64], b: &[f64], c: &Tensor) -> Result<f64> {
    check_problem(a, b, c)?;
    let (n, m) = (a.len(), b.len());
    if n * m > EXACT_MAX_CELLS {
        bail!(Contract, "exact solver limited to {EXACT_MAX_CELLS} cells, got {n}x{m}");
    }
    let mut net = Network::new(n + m + 2);
    let (src, sink) = (0, n + m + 1);
    for (i, &ai) in a.iter().enumerate() {
        net.edge(src, 1 + i, ai, 0.0);
    }
    for (j, &bj) in b.iter().enumerate() {
        net.edge(1 + n + j, sink, bj, 0.0);
    }
    let total: f64 = a.iter().sum::<f64>().max(b.iter().sum());
    for i in 0..n {
        for j in 0..m {
            net.edge(1 + i, 1 + n + j, total, c.at2(i, j));
        }
    }
    Ok(net.min_cost_flow(src, sink))
}

const FLOW_EPS: f64 = 1e-15;

struct Edge {
    to: usize,
    cap: f64,
    cost: f64,
}

struct Network {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

impl Network {
    fn new(nodes: usize) -> Self {
        Self {
            edges: Vec::new(),
            adj: vec![Vec::new(); nodes],
        }
    }

    fn edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) {
        self.adj[from].push(self.edges.len());
        self.edges.push(Edge { to, cap, cost });
        self.adj[to].push(self.edges.len());
        self.edges.push(Edge {
            to: from,
            cap: 0.0,
            cost: -cost,
        });
    }

    /// Push as much flow as possible from `s` to `t` along cheapest paths.
    fn min_cost_flow(&mut self, s: usize, t: usize) -> f64 {
        let nodes = self.adj.len();
        let mut cost = 0.0;
        loop {
            // Bellman-Ford: residual arcs may carry negative cost
            let mut dist = vec![f64::INFINITY; nodes];
            let mut via = vec![usize::MAX; nodes];
            dist[s] = 0.0;
            for _ in 0..nodes {
                let mut changed = false;
                for u in 0..nodes {
                    if dist[u] == f64::INFINITY {
                        continue;
                    }
                    for &e in &self.adj[u] {
                        let ed = &self.edges[e];
                        if ed.cap > FLOW_EPS && dist[u] + ed.cost < dist[ed.to] - 1e-15 {
                            dist[ed.to] = dist[u] + ed.cost;
                            via[ed.to] = e;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            if dist[t] == f64::INFINITY {
                return cost;
            }
            let mut push = f64::INFINITY;
            let mut v = t;
            while v != s {
                let e = via[v];
                push = push.min(self.edges[e].cap);
                v = self.edges[e ^ 1].to;
            }
            let mut v = t;
            while v != s {
                let e = via[v];
                self.edges[e].cap -= push;
                self.edges[e ^ 1].cap += push;
                v = self.edges[e ^ 1].to;
            }
            cost += push * dist[t];
        }
    }
}

/// Closed-form transport cost between weighted points on the line, `|x − y|^p`
/// ground cost, via the monotone (quantile) coupling.
pub fn monotone_1d(x: &[f64], a: &[f64], y: &[f64], b: &[f64], p: f64) -> Result<f64> {
    if x.len() != a.len() || y.len() != b.len() || x.is_empty() || y.is_empty() {
        bail!(Dimension, "support/weight lengths {}/{} and {}/{}", x.len(), a.len(), y.len(), b.len());
    }
    let sorted = |s: &[f64], w: &[f64]| {
        let mut v: Vec<(f64, f64)> = s.iter().copied().zip(w.iter().copied()).collect();
        v.sort_by(|l, r| l.0.total_cmp(&r.0));
        v
    };
    let (xs, ys) = (sorted(x, a), sorted(y, b));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (xs[0].1, ys[0].1);
    let mut cost = 0.0;
    while i < xs.len() && j < ys.len() {
        let t = ra.min(rb);
        cost += t * math::pow((xs[i].0 - ys[j].0).abs(), p);
        ra -= t;
        rb -= t;
        if ra <= FLOW_EPS {
            i += 1;
            ra = xs.get(i).map_or(0.0, |v| v.1);
        }
        if rb <= FLOW_EPS {
            j += 1;
            rb = ys.get(j).map_or(0.0, |v| v.1);
        }
    }
    Ok(cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Normalization {
    /// Per-dimension zero mean and unit variance over both sets pooled.
    #[default]
    JointStandardize,
    None,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::JointStandardize => "joint_standardize",
            Normalization::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OtReport {
    pub epsilon: f64,
    pub p: f64,
    pub iterations: usize,
    pub marginal_violation: f64,
    pub cost: f64,
    pub cost_root: f64,
    pub normalization: Normalization,
}

/// Standardize `x` and `y` with statistics pooled over both.
pub fn joint_standardize(x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.shape().len() != 2 || x.last_dim() != y.last_dim() {
        bail!(Dimension, "standardizing {:?} with {:?}", x.shape(), y.shape());
    }
    let d = x.last_dim();
    let rows = (x.rows() + y.rows()) as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for t in [x, y] {
        for i in 0..t.rows() {
            t.row(i).iter().zip(&mut mean).for_each(|(v, m)| *m += v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    for t in [x, y] {
        for i in 0..t.rows() {
            t.row(i)
                .iter()
                .zip(&mean)
                .zip(&mut var)
                .for_each(|((v, m), s)| *s += (v - m) * (v - m));
        }
    }
    let inv: Vec<f64> = var.iter().map(|s| 1.0 / math::sqrt(s / rows).max(1e-12)).collect();
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            for k in 0..d {
                row[k] = (row[k] - mean[k]) * inv[k];
            }
        }
        out
    };
    Ok((apply(x), apply(y)))
}

/// Entropic transport cost between two feature sets with uniform weights.
pub fn layer_discrepancy(pen: &Tensor, fin: &Tensor, cfg: &SinkhornConfig, norm: Normalization) -> Result<OtReport> {
    if pen.shape().len() != 2 || fin.shape().len() != 2 || pen.rows() < 2 || fin.rows() < 2 {
        bail!(Contract, "need at least two feature rows on each side");
    }
    let (x, y) = match norm {
        Normalization::JointStandardize => joint_standardize(pen, fin)?,
        Normalization::None => (pen.clone(), fin.clone()),
    };
    let c = cost_matrix(&x, &y, cfg.p)?;
    let a = vec![1.0 / x.rows() as f64; x.rows()];
    let b = vec![1.0 / y.rows() as f64; y.rows()];
    let plan = sinkhorn(&a, &b, &c, cfg)?;
    Ok(OtReport {
        epsilon: cfg.epsilon,
        p: cfg.p,
        iterations: plan.iterations,
        marginal_violation: plan.marginal_violation,
        cost: plan.cost,
        cost_root: plan.cost_root,
        normalization: norm,
    })
}
