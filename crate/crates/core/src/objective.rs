//! Data-attachment terms, the kinetic-energy regularizer and the total
//! objective `J = D / (2σ²) + ½ Σ_l w Σ_i ‖v^l_i‖²`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::flow::FlowResult;
use crate::geometry::PointCloud;
use crate::spatial::{nearest_brute_force, squared_distance, KdTree};
use crate::Vec3;

/// Time weighting of the per-block kinetic energies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KineticWeighting {
    /// `w = dt`: a Riemann sum of the time integral.
    #[default]
    Riemann,
    /// `w = 1`: plain sum over blocks.
    Table1,
}

impl KineticWeighting {
    pub fn name(&self) -> &'static str {
        match self {
            KineticWeighting::Riemann => "riemann",
            KineticWeighting::Table1 => "table1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "riemann" => Ok(KineticWeighting::Riemann),
            "table1" | "sum" => Ok(KineticWeighting::Table1),
            other => Err(Error::InvalidConfig(format!("unknown kinetic weighting '{other}'"))),
        }
    }

    fn weight(&self, dt: f64) -> f64 {
        match self {
            KineticWeighting::Riemann => dt,
            KineticWeighting::Table1 => 1.0,
        }
    }
}

/// Entropic optimal-transport solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub min_iters: usize,
    pub max_iters: usize,
    /// Stop once the L1 row-marginal violation drops below this.
    pub tol: f64,
    /// Log-sum-exp stabilized updates. The standard-domain variant
    /// underflows for small `epsilon`.
    pub log_domain: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 8e-6,
            min_iters: 200,
            max_iters: 2000,
            tol: 1e-6,
            log_domain: true,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.tol > 0.0 || self.tol == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sinkhorn epsilon must be > 0 and tol >= 0 (epsilon = {}, tol = {})",
                self.epsilon, self.tol
            )));
        }
        if self.min_iters > self.max_iters || self.max_iters == 0 {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= max_iters and min_iters <= max_iters ({} > {})",
                self.min_iters, self.max_iters
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataTerm {
    Chamfer,
    Sinkhorn(SinkhornConfig),
}

impl DataTerm {
    pub fn name(&self) -> &'static str {
        match self {
            DataTerm::Chamfer => "cd",
            DataTerm::Sinkhorn(_) => "med",
        }
    }
}

/// Everything `total_loss` and the gradient need besides the clouds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub data_term: DataTerm,
    /// Data weight is `1/(2σ²)`. `f64::INFINITY` leaves only the kinetic term.
    pub sigma: f64,
    pub kinetic_weighting: KineticWeighting,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            data_term: DataTerm::Chamfer,
            sigma: 0.1,
            kinetic_weighting: KineticWeighting::Riemann,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if let DataTerm::Sinkhorn(s) = &self.data_term {
            s.validate()?;
        }
        Ok(())
    }

    /// `1/(2σ²)`; zero in the `σ = ∞` limit.
    pub fn data_weight(&self) -> f64 {
        1.0 / (2.0 * self.sigma * self.sigma)
    }
}

/// Breakdown of one evaluation of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub data_term: f64,
    pub kinetic_total: f64,
    pub per_block_energy: Vec<f64>,
    pub total: f64,
    pub sigma: f64,
}

/// Result of entropic optimal transport between two uniform point measures.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// `n1 x n2`, rows sum to `1/n1`, columns to `1/n2`.
    pub plan: Array2<f64>,
    /// Primal transport cost `Σ P_ij ‖x_i - y_j‖²`.
    pub cost: f64,
    /// Entropy-regularized value `cost + ε KL(P | a⊗b)`.
    pub entropic_cost: f64,
    pub epsilon: f64,
    pub iterations: usize,
    /// Final L1 violation of the row marginals.
    pub marginal_error: f64,
}

fn chamfer_half(from: &[Vec3], nearest: impl Fn(&Vec3) -> (usize, f64)) -> (f64, Vec<usize>) {
    let mut total = 0.0;
    let mut assignment = Vec::with_capacity(from.len());
    for p in from {
        let (j, d) = nearest(p);
        total += d;
        assignment.push(j);
    }
    (total, assignment)
}

/// Symmetric Chamfer distance with squared Euclidean terms (exact kd-tree).
pub fn chamfer(q1: &PointCloud, q2: &PointCloud) -> f64 {
    chamfer_points(q1.points(), q2.points())
}

pub fn chamfer_points(a: &[Vec3], b: &[Vec3]) -> f64 {
    chamfer_with_assignments(a, b).0
}

/// Chamfer value plus nearest-neighbour indices in both directions
/// (`a -> b`, `b -> a`). Ties go to the lowest index.
pub fn chamfer_with_assignments(a: &[Vec3], b: &[Vec3]) -> (f64, Vec<usize>, Vec<usize>) {
    let tree_b = KdTree::new(b);
    let tree_a = KdTree::new(a);
    let (forward, ab) = chamfer_half(a, |p| tree_b.nearest(p));
    let (backward, ba) = chamfer_half(b, |p| tree_a.nearest(p));
    (forward + backward, ab, ba)
}

/// Exhaustive O(n1·n2) Chamfer, summed in the same order as [`chamfer`].
pub fn chamfer_brute_force(a: &[Vec3], b: &[Vec3]) -> f64 {
    let (forward, _) = chamfer_half(a, |p| nearest_brute_force(b, p));
    let (backward, _) = chamfer_half(b, |p| nearest_brute_force(a, p));
    forward + backward
}

fn cost_matrix(a: &[Vec3], b: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| squared_distance(&a[i], &b[j]))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT between uniform measures on `q1` and `q2`.
pub fn sinkhorn_emd(q1: &PointCloud, q2: &PointCloud, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    sinkhorn_points(q1.points(), q2.points(), cfg)
}

pub fn sinkhorn_points(a: &[Vec3], b: &[Vec3], cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let cost = cost_matrix(a, b);
    if cfg.log_domain {
        sinkhorn_log(&cost, cfg)
    } else {
        sinkhorn_standard(&cost, cfg)
    }
}

fn row_violation(plan: &Array2<f64>, row_mass: f64) -> f64 {
    plan.rows().into_iter().map(|r| (r.sum() - row_mass).abs()).sum()
}

fn finish(plan: Array2<f64>, log_plan: impl Fn(usize, usize) -> f64, cost: &Array2<f64>, cfg: &SinkhornConfig, iterations: usize) -> TransportPlan {
    let (n1, n2) = cost.dim();
    let log_ab = -((n1 as f64).ln() + (n2 as f64).ln());
    let mut primal = 0.0;
    let mut kl = 0.0;
    for ((i, j), &p) in plan.indexed_iter() {
        primal += p * cost[[i, j]];
        if p > 0.0 {
            kl += p * (log_plan(i, j) - log_ab);
        }
    }
    let marginal_error = row_violation(&plan, 1.0 / n1 as f64);
    TransportPlan {
        plan,
        cost: primal,
        entropic_cost: primal + cfg.epsilon * kl,
        epsilon: cfg.epsilon,
        iterations,
        marginal_error,
    }
}

fn sinkhorn_log(cost: &Array2<f64>, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let (n1, n2) = cost.dim();
    let eps = cfg.epsilon;
    let log_a = -(n1 as f64).ln();
    let log_b = -(n2 as f64).ln();
    let mut f = vec![0.0; n1];
    let mut g = vec![0.0; n2];
    let log_plan = |f: &[f64], g: &[f64], i: usize, j: usize| (f[i] + g[j] - cost[[i, j]]) / eps + log_a + log_b;
    let mut iterations = 0;
    loop {
        for i in 0..n1 {
            let row = cost.row(i);
            f[i] = -eps * log_sum_exp((0..n2).map(|j| (g[j] - row[j]) / eps + log_b));
        }
        for j in 0..n2 {
            let col = cost.column(j);
            g[j] = -eps * log_sum_exp((0..n1).map(|i| (f[i] - col[i]) / eps + log_a));
        }
        iterations += 1;
        if iterations >= cfg.min_iters {
            let violation: f64 = (0..n1)
                .map(|i| ((0..n2).map(|j| log_plan(&f, &g, i, j).exp()).sum::<f64>() - 1.0 / n1 as f64).abs())
                .sum();
            if violation < cfg.tol || iterations >= cfg.max_iters {
                break;
            }
        }
    }
    let plan = Array2::from_shape_fn((n1, n2), |(i, j)| log_plan(&f, &g, i, j).exp());
    Ok(finish(plan, |i, j| log_plan(&f, &g, i, j), cost, cfg, iterations))
}

fn sinkhorn_standard(cost: &Array2<f64>, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    let (n1, n2) = cost.dim();
    let a = 1.0 / n1 as f64;
    let b = 1.0 / n2 as f64;
    let kernel = cost.mapv(|c| (-c / cfg.epsilon).exp());
    let underflow = || Error::NumericalUnderflow { epsilon: cfg.epsilon };
    let mut u = vec![1.0; n1];
    let mut v = vec![1.0; n2];
    let mut iterations = 0;
    loop {
        for i in 0..n1 {
            let s: f64 = (0..n2).map(|j| kernel[[i, j]] * v[j]).sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(underflow());
            }
            u[i] = a / s;
        }
        for j in 0..n2 {
            let s: f64 = (0..n1).map(|i| kernel[[i, j]] * u[i]).sum();
            if !(s > 0.0) || !s.is_finite() {
                return Err(underflow());
            }
            v[j] = b / s;
        }
        iterations += 1;
        if iterations >= cfg.min_iters {
            let violation: f64 = (0..n1)
                .map(|i| ((0..n2).map(|j| u[i] * kernel[[i, j]] * v[j]).sum::<f64>() - a).abs())
                .sum();
            if violation < cfg.tol || iterations >= cfg.max_iters {
                break;
            }
        }
    }
    let plan = Array2::from_shape_fn((n1, n2), |(i, j)| u[i] * kernel[[i, j]] * v[j]);
    let log_plan = |i: usize, j: usize| u[i].ln() + v[j].ln() - cost[[i, j]] / cfg.epsilon;
    Ok(finish(plan, log_plan, cost, cfg, iterations))
}

/// `(total, per_block)` with `per_block[l] = ½ w Σ_i ‖v^l_i‖²`.
pub fn kinetic_energy(fr: &FlowResult, weighting: KineticWeighting) -> (f64, Vec<f64>) {
    let w = weighting.weight(fr.dt);
    let per_block: Vec<f64> = fr
        .velocities
        .iter()
        .map(|v| 0.5 * w * v.iter().map(|x| x * x).sum::<f64>())
        .collect();
    (per_block.iter().sum(), per_block)
}

/// Data term value and its gradient with respect to the deformed points.
pub(crate) fn data_term_with_gradient(
    deformed: &[Vec3],
    target: &[Vec3],
    term: &DataTerm,
) -> Result<(f64, Array2<f64>)> {
    let mut grad = Array2::zeros((deformed.len(), 3));
    match term {
        DataTerm::Chamfer => {
            let (value, ab, ba) = chamfer_with_assignments(deformed, target);
            for (i, &j) in ab.iter().enumerate() {
                let d = deformed[i] - target[j];
                for k in 0..3 {
                    grad[[i, k]] += 2.0 * d[k];
                }
            }
            for (j, &i) in ba.iter().enumerate() {
                let d = deformed[i] - target[j];
                for k in 0..3 {
                    grad[[i, k]] += 2.0 * d[k];
                }
            }
            Ok((value, grad))
        }
        DataTerm::Sinkhorn(cfg) => {
            let tp = sinkhorn_points(deformed, target, cfg)?;
            // Sum over points (not the mean) so the scale matches Chamfer.
            let n1 = deformed.len() as f64;
            for ((i, j), &p) in tp.plan.indexed_iter() {
                if p == 0.0 {
                    continue;
                }
                let d = deformed[i] - target[j];
                for k in 0..3 {
                    grad[[i, k]] += n1 * 2.0 * p * d[k];
                }
            }
            Ok((n1 * tp.entropic_cost, grad))
        }
    }
}

pub(crate) fn data_term_value(deformed: &[Vec3], target: &[Vec3], term: &DataTerm) -> Result<f64> {
    match term {
        DataTerm::Chamfer => Ok(chamfer_points(deformed, target)),
        DataTerm::Sinkhorn(cfg) => {
            Ok(deformed.len() as f64 * sinkhorn_points(deformed, target, cfg)?.entropic_cost)
        }
    }
}

pub(crate) fn assemble_report(data: f64, per_block: Vec<f64>, cfg: &LossConfig) -> LossReport {
    let kinetic_total: f64 = per_block.iter().sum();
    let weight = cfg.data_weight();
    let weighted = if weight == 0.0 { 0.0 } else { data * weight };
    LossReport {
        data_term: data,
        kinetic_total,
        per_block_energy: per_block,
        total: weighted + kinetic_total,
        sigma: cfg.sigma,
    }
}

/// Evaluates `J` for a deformed source (normally `fr`'s endpoint).
pub fn total_loss(
    q_deformed: &PointCloud,
    q_target: &PointCloud,
    fr: &FlowResult,
    cfg: &LossConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    let data = data_term_value(q_deformed.points(), q_target.points(), &cfg.data_term)?;
    let (_, per_block) = kinetic_energy(fr, cfg.kinetic_weighting);
    Ok(assemble_report(data, per_block, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::flow_forward;
    use crate::network::{ActivationKind, NetParams};
    use ndarray::array;

    fn pc(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    #[test]
    fn chamfer_examples() {
        let a = pc(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &a), 0.0);
        assert_eq!(chamfer(&pc(&[[0.0, 0.0, 0.0]]), &pc(&[[1.0, 0.0, 0.0]])), 2.0);
        assert_eq!(chamfer(&a, &pc(&[[1.0, 0.0, 0.0]])), 3.0);
        assert_eq!(chamfer(&pc(&[[1.0, 0.0, 0.0]]), &a), 3.0);
    }

    fn fr_with(velocities: Vec<Array2<f64>>, dt: f64) -> FlowResult {
        let c = pc(&[[0.0, 0.0, 0.0]]);
        FlowResult {
            shapes: vec![c; velocities.len() + 1],
            velocities,
            dt,
        }
    }

    #[test]
    fn kinetic_examples() {
        let zero = fr_with(vec![Array2::zeros((1, 3))], 1.0);
        assert_eq!(kinetic_energy(&zero, KineticWeighting::Riemann).0, 0.0);
        let one = fr_with(vec![array![[1.0, 2.0, 2.0]]], 1.0);
        assert_eq!(kinetic_energy(&one, KineticWeighting::Riemann).0, 4.5);
        assert_eq!(kinetic_energy(&one, KineticWeighting::Table1).0, 4.5);
        let two = fr_with(vec![array![[1.0, 2.0, 2.0]], array![[1.0, 2.0, 2.0]]], 0.5);
        let (riemann, per) = kinetic_energy(&two, KineticWeighting::Riemann);
        assert_eq!(riemann, 4.5);
        assert_eq!(per, vec![2.25, 2.25]);
        assert_eq!(kinetic_energy(&two, KineticWeighting::Table1).0, 9.0);
    }

    #[test]
    fn total_loss_examples() {
        let c = pc(&[[0.0, 0.0, 0.0], [1.0, 0.5, 0.0], [0.2, 0.1, 0.9]]);
        let zero = NetParams::zeros(3, 4, ActivationKind::Relu).unwrap();
        let fr = flow_forward(&c, &zero).unwrap();
        let r = total_loss(fr.endpoint(), &c, &fr, &LossConfig::default()).unwrap();
        assert_eq!(r.total, 0.0);

        let shifted = c.map_points(|p| p + Vec3::new(0.1, 0.0, 0.0));
        let cfg = LossConfig::default();
        assert!((cfg.data_weight() - 50.0).abs() < 1e-12);
        let r1 = total_loss(fr.endpoint(), &shifted, &fr, &cfg).unwrap();
        assert!((r1.total - 50.0 * r1.data_term).abs() < 1e-12);
        let cfg2 = LossConfig { sigma: 0.2, ..cfg };
        let r2 = total_loss(fr.endpoint(), &shifted, &fr, &cfg2).unwrap();
        assert!((r2.total - r1.total / 4.0).abs() < 1e-12);
        assert_eq!(r2.kinetic_total, r1.kinetic_total);

        let inf = LossConfig { sigma: f64::INFINITY, ..cfg };
        assert_eq!(total_loss(fr.endpoint(), &shifted, &fr, &inf).unwrap().total, 0.0);
        assert!(total_loss(fr.endpoint(), &shifted, &fr, &LossConfig { sigma: 0.0, ..cfg }).is_err());
    }

    #[test]
    fn sinkhorn_identity_pair() {
        let c = pc(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let cfg = SinkhornConfig { epsilon: 1e-3, ..Default::default() };
        let tp = sinkhorn_emd(&c, &c, &cfg).unwrap();
        assert!(tp.cost <= cfg.epsilon * 4f64.ln() + 1e-6);
        assert!(tp.entropic_cost <= cfg.epsilon * 4f64.ln() + 1e-6);
        for i in 0..4 {
            assert!((tp.plan[[i, i]] - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn sinkhorn_swapped_pair() {
        let a = pc(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let b = pc(&[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let mut prev = f64::INFINITY;
        for eps in [1.0, 0.1, 0.01, 1e-4] {
            let tp = sinkhorn_emd(&a, &b, &SinkhornConfig { epsilon: eps, ..Default::default() }).unwrap();
            assert!(tp.cost <= prev);
            prev = tp.cost;
        }
        assert!(prev < 1e-12);
        let tp = sinkhorn_emd(&a, &b, &SinkhornConfig { epsilon: 1e-4, ..Default::default() }).unwrap();
        assert!((tp.plan[[0, 1]] - 0.5).abs() < 1e-9 && (tp.plan[[1, 0]] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn standard_domain_agrees_and_underflows() {
        let a = pc(&[[0.0, 0.0, 0.0], [1.0, 0.2, 0.0], [0.3, 1.0, 0.5]]);
        let b = pc(&[[0.1, 0.0, 0.1], [0.9, 0.0, 0.0], [0.2, 0.7, 0.4], [0.5, 0.5, 0.5]]);
        let log_cfg = SinkhornConfig { epsilon: 0.5, tol: 1e-12, ..Default::default() };
        let std_cfg = SinkhornConfig { log_domain: false, ..log_cfg };
        let x = sinkhorn_emd(&a, &b, &log_cfg).unwrap();
        let y = sinkhorn_emd(&a, &b, &std_cfg).unwrap();
        assert!((x.plan - &y.plan).iter().all(|d| d.abs() < 1e-12));
        assert!((x.entropic_cost - y.entropic_cost).abs() < 1e-12);
        let tiny = SinkhornConfig { epsilon: 8e-6, log_domain: false, ..Default::default() };
        let far = pc(&[[10.0, 0.0, 0.0], [11.0, 0.0, 0.0]]);
        assert!(matches!(sinkhorn_emd(&a, &far, &tiny), Err(Error::NumericalUnderflow { .. })));
        // The log-domain solver handles the same instance.
        let ok = sinkhorn_emd(&a, &far, &SinkhornConfig { log_domain: true, ..tiny }).unwrap();
        assert!(ok.cost.is_finite());
    }

    #[test]
    fn sinkhorn_unequal_sizes_marginals() {
        let a = pc(&[[0.0, 0.0, 0.0], [1.0, 0.2, 0.0], [0.3, 1.0, 0.5]]);
        let b = pc(&[[0.1, 0.0, 0.1], [0.9, 0.0, 0.0], [0.2, 0.7, 0.4], [0.5, 0.5, 0.5], [2.0, 0.0, 1.0]]);
        let tp = sinkhorn_emd(&a, &b, &SinkhornConfig { epsilon: 0.05, tol: 1e-9, ..Default::default() }).unwrap();
        for r in tp.plan.rows() {
            assert!((r.sum() - 1.0 / 3.0).abs() < 1e-6);
        }
        for c in tp.plan.columns() {
            assert!((c.sum() - 0.2).abs() < 1e-6);
        }
        let recomputed: f64 = tp
            .plan
            .indexed_iter()
            .map(|((i, j), p)| p * squared_distance(&a.points()[i], &b.points()[j]))
            .sum();
        assert!((recomputed - tp.cost).abs() < 1e-9);
        assert!(tp.plan.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn sinkhorn_rejects_bad_config() {
        let a = pc(&[[0.0, 0.0, 0.0]]);
        let bad = SinkhornConfig { epsilon: 0.0, ..Default::default() };
        assert!(matches!(sinkhorn_emd(&a, &a, &bad), Err(Error::InvalidConfig(_))));
        let bad = SinkhornConfig { min_iters: 10, max_iters: 5, ..Default::default() };
        assert!(matches!(sinkhorn_emd(&a, &a, &bad), Err(Error::InvalidConfig(_))));
    }
}
