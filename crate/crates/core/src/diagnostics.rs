//! Regularity checks for a trained flow: Lipschitz bounds, Jacobian
//! determinants, activation-pattern census, inverse consistency and TRE.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{apply_flow, apply_flow_steps};
use crate::geometry::{bounding_box, PointCloud};
use crate::network::{ActivationKind, BlockParams, NetParams};
use crate::solver::{register, RegistrationConfig, RegistrationOutcome};
use crate::Vec3;

/// Sign vector of the first layer at a point together with the affine map
/// `f(x) = A x + c` that the block reduces to on that cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPattern {
    pub block_index: usize,
    /// `true` means `+`, i.e. pre-activation `>= 0`.
    pub signs: Vec<bool>,
    pub a: Matrix3<f64>,
    pub c: Vec3,
}

impl ActivationPattern {
    pub fn eval(&self, x: &Vec3) -> Vec3 {
        self.a * x + self.c
    }

    /// Compact `+`/`-` rendering of the sign vector.
    pub fn sign_string(&self) -> String {
        self.signs.iter().map(|&s| if s { '+' } else { '-' }).collect()
    }
}

fn pre_activation(theta: &BlockParams, x: &Vec3, k: usize) -> f64 {
    theta.w1[[k, 0]] * x.x + theta.w1[[k, 1]] * x.y + theta.w1[[k, 2]] * x.z + theta.b1[k]
}

/// Sign vector of `W1 x + b1` at `x`.
pub fn sign_vector(x: &Vec3, theta: &BlockParams) -> Vec<bool> {
    (0..theta.width()).map(|k| pre_activation(theta, x, k) >= 0.0).collect()
}

/// Linearization of block `theta` on the cell containing `x`.
/// Only defined for piecewise-affine activations.
pub fn activation_pattern(
    x: &Vec3,
    theta: &BlockParams,
    act: ActivationKind,
    block_index: usize,
) -> Result<ActivationPattern> {
    if !act.is_piecewise_affine() {
        return Err(Error::InvalidConfig(format!(
            "activation '{}' is not piecewise affine",
            act.name()
        )));
    }
    let m = theta.width();
    let signs = sign_vector(x, theta);
    // D W1 and D b1, with D the diagonal of active slopes.
    let mut dw1 = theta.w1.clone();
    let mut db1 = theta.b1.clone();
    for k in 0..m {
        let s = act.piece_slope(signs[k]).expect("piecewise affine");
        dw1.row_mut(k).mapv_inplace(|v| v * s);
        db1[k] *= s;
    }
    let w3w2 = theta.w3.dot(&theta.w2);
    let a = w3w2.dot(&dw1);
    let c = w3w2.dot(&db1) + theta.w3.dot(&theta.b2);
    Ok(ActivationPattern {
        block_index,
        signs,
        a: Matrix3::from_fn(|i, j| a[[i, j]]),
        c: Matrix3x1::new(c[0], c[1], c[2]),
    })
}

/// Realized sign vectors among a probe set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PatternCensus {
    pub counts: BTreeMap<Vec<bool>, usize>,
}

impl PatternCensus {
    pub fn distinct(&self) -> usize {
        self.counts.len()
    }
}

pub fn polytope_census(theta: &BlockParams, probes: &[Vec3]) -> PatternCensus {
    let mut counts = BTreeMap::new();
    for p in probes {
        *counts.entry(sign_vector(p, theta)).or_insert(0) += 1;
    }
    PatternCensus { counts }
}

/// Axis-aligned box sampled at `resolution` points per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub min: Vec3,
    pub max: Vec3,
    pub resolution: usize,
}

impl GridSpec {
    /// Box around `points`, grown about its centre by `inflate`.
    pub fn around<'a>(points: impl Iterator<Item = &'a Vec3>, inflate: f64, resolution: usize) -> Self {
        let (lo, hi) = bounding_box(points);
        let centre = (lo + hi) * 0.5;
        let half = (hi - lo) * 0.5 * inflate;
        GridSpec {
            min: centre - half,
            max: centre + half,
            resolution,
        }
    }

    /// Smallest spacing between neighbouring grid nodes over the three axes.
    pub fn cell_size(&self) -> f64 {
        let steps = (self.resolution.max(2) - 1) as f64;
        (0..3).map(|i| (self.max[i] - self.min[i]) / steps).fold(f64::INFINITY, f64::min)
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    /// Nodes in x-fastest order.
    pub fn points(&self) -> Vec<Vec3> {
        let r = self.resolution;
        let steps = (r.max(2) - 1) as f64;
        let coord = |axis: usize, i: usize| {
            if r == 1 {
                0.5 * (self.min[axis] + self.max[axis])
            } else {
                self.min[axis] + (self.max[axis] - self.min[axis]) * i as f64 / steps
            }
        };
        let mut out = Vec::with_capacity(r * r * r);
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    out.push(Vec3::new(coord(0, i), coord(1, j), coord(2, k)));
                }
            }
        }
        out
    }
}

/// Determinants of the finite-difference Jacobian of `Φ^L` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    pub grid: GridSpec,
    pub h: f64,
    pub points: Vec<Vec3>,
    pub dets: Vec<f64>,
    pub min_det: f64,
}

impl JacobianField {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,z,det\n");
        for (p, d) in self.points.iter().zip(&self.dets) {
            writeln!(s, "{:e},{:e},{:e},{:e}", p.x, p.y, p.z, d).unwrap();
        }
        s
    }
}

pub fn jacobian_grid_check(params: &NetParams, grid: GridSpec, h: f64) -> Result<JacobianField> {
    if grid.resolution < 2 {
        return Err(Error::InvalidConfig("grid resolution must be >= 2".into()));
    }
    let cell = grid.cell_size();
    if !(h > 0.0) || !(h <= 0.1 * cell) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {h} must be in (0, 0.1 * cell size = {})",
            0.1 * cell
        )));
    }
    let points = grid.points();
    let mut probes = Vec::with_capacity(points.len() * 6);
    for p in &points {
        for axis in 0..3 {
            let mut e = Vec3::zeros();
            e[axis] = h;
            probes.push(p + e);
            probes.push(p - e);
        }
    }
    let images = apply_flow(&probes, params)?;
    let dets: Vec<f64> = images
        .chunks_exact(6)
        .map(|c| {
            let cols: Vec<Vec3> = (0..3).map(|a| (c[2 * a] - c[2 * a + 1]) / (2.0 * h)).collect();
            Matrix3::from_columns(&cols).determinant()
        })
        .collect();
    let min_det = dets.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(JacobianField {
        grid,
        h,
        points,
        dets,
        min_det,
    })
}

/// Sampled distortion ratios `‖Φ^l(x) − Φ^l(y)‖ / ‖x − y‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilipschitzSample {
    pub pairs: usize,
    /// Largest ratio after each block `l = 1..L`.
    pub max_ratio_per_step: Vec<f64>,
    /// `exp(l · dt · C(Θ))` for `l = 1..L`.
    pub bound_per_step: Vec<f64>,
    /// Smallest ratio of the full map.
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl BilipschitzSample {
    /// Whether every sampled ratio respects the expansion bound.
    pub fn within_bound(&self, rel_tol: f64) -> bool {
        self.max_ratio_per_step
            .iter()
            .zip(&self.bound_per_step)
            .all(|(r, b)| *r <= b * (1.0 + rel_tol))
    }
}

/// Uses every pair when there are at most `max_pairs` of them, otherwise a
/// seeded random subset.
pub fn bilipschitz_sample(params: &NetParams, probes: &[Vec3], max_pairs: usize, seed: u64) -> Result<BilipschitzSample> {
    let n = probes.len();
    let total = n * n.saturating_sub(1) / 2;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if total <= max_pairs {
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while pairs.len() < max_pairs {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                pairs.push((i.min(j), i.max(j)));
            }
        }
    }
    pairs.retain(|&(i, j)| (probes[i] - probes[j]).norm() > 1e-6);
    let steps = apply_flow_steps(probes, params)?;
    let l_total = params.num_blocks();
    let c = params.lipschitz_constant();
    let dt = params.dt();
    let mut max_ratio_per_step = vec![0.0_f64; l_total];
    let mut min_ratio = f64::INFINITY;
    for &(i, j) in &pairs {
        let d0 = (probes[i] - probes[j]).norm();
        for l in 1..=l_total {
            let r = (steps[l][i] - steps[l][j]).norm() / d0;
            max_ratio_per_step[l - 1] = max_ratio_per_step[l - 1].max(r);
            if l == l_total {
                min_ratio = min_ratio.min(r);
            }
        }
    }
    let bound_per_step = (1..=l_total).map(|l| (l as f64 * dt * c).exp()).collect();
    let max_ratio = max_ratio_per_step.last().copied().unwrap_or(1.0);
    Ok(BilipschitzSample {
        pairs: pairs.len(),
        max_ratio_per_step,
        bound_per_step,
        min_ratio: if pairs.is_empty() { 1.0 } else { min_ratio },
        max_ratio: if pairs.is_empty() { 1.0 } else { max_ratio },
    })
}

/// Probe set for census and distortion sampling: the given points plus a
/// `grid³` lattice over their 1.2x inflated bounding box.
pub fn probe_set(points: &[Vec3], extra_box: &[Vec3], grid: usize) -> Vec<Vec3> {
    let spec = GridSpec::around(points.iter().chain(extra_box), 1.2, grid);
    let mut probes = points.to_vec();
    probes.extend(spec.points());
    probes
}

/// Root-mean-square distance between `deformed[i]` and
/// `target[correspondence[i]]`.
pub fn tre(deformed: &PointCloud, target: &PointCloud, correspondence: &[usize]) -> Result<f64> {
    tre_points(deformed.points(), target.points(), correspondence)
}

pub fn tre_points(deformed: &[Vec3], target: &[Vec3], correspondence: &[usize]) -> Result<f64> {
    if correspondence.len() != deformed.len() {
        return Err(Error::MissingCorrespondence(format!(
            "{} correspondences for {} points",
            correspondence.len(),
            deformed.len()
        )));
    }
    if deformed.is_empty() {
        return Err(Error::MissingCorrespondence("no points to evaluate".into()));
    }
    let mut sum = 0.0;
    for (i, (&j, x)) in correspondence.iter().zip(deformed).enumerate() {
        let y = target.get(j).ok_or_else(|| {
            Error::MissingCorrespondence(format!("point {i} maps to target index {j}, out of range"))
        })?;
        sum += (x - y).norm_squared();
    }
    Ok((sum / deformed.len() as f64).sqrt())
}

/// Reads `i j` lines (source index, target index). Every source index in
/// `0..n` must appear exactly once.
pub fn read_correspondence(path: &Path, n: usize) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_correspondence(&text, n)
}

pub fn parse_correspondence(text: &str, n: usize) -> Result<Vec<usize>> {
    let mut map: Vec<Option<usize>> = vec![None; n];
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [a, b] => a.parse::<usize>().ok().zip(b.parse::<usize>().ok()),
            _ => None,
        };
        let (i, j) = parsed.ok_or_else(|| {
            Error::MissingCorrespondence(format!("line {}: expected two indices, got '{line}'", lineno + 1))
        })?;
        let slot = map.get_mut(i).ok_or_else(|| {
            Error::MissingCorrespondence(format!("line {}: source index {i} out of range", lineno + 1))
        })?;
        if slot.replace(j).is_some() {
            return Err(Error::MissingCorrespondence(format!(
                "line {}: source index {i} listed twice",
                lineno + 1
            )));
        }
    }
    map.into_iter()
        .enumerate()
        .map(|(i, j)| j.ok_or_else(|| Error::MissingCorrespondence(format!("source index {i} has no match"))))
        .collect()
}

pub fn correspondence_to_string(correspondence: &[usize]) -> String {
    let mut s = String::new();
    for (i, j) in correspondence.iter().enumerate() {
        writeln!(s, "{i} {j}").unwrap();
    }
    s
}

/// Matches points by equal labels (first target occurrence wins).
pub fn correspondence_from_labels(source: &PointCloud, target: &PointCloud) -> Result<Vec<usize>> {
    let (Some(ls), Some(lt)) = (source.labels(), target.labels()) else {
        return Err(Error::MissingCorrespondence("both clouds need labels".into()));
    };
    let mut index = HashMap::new();
    for (j, l) in lt.iter().enumerate() {
        index.entry(*l).or_insert(j);
    }
    ls.iter()
        .map(|l| {
            index
                .get(l)
                .copied()
                .ok_or_else(|| Error::MissingCorrespondence(format!("label {l} absent from target")))
        })
        .collect()
}

/// Trains source→target and target→source with the same configuration and
/// returns the mean round-trip displacement of the source points, in scene
/// units, along with both outcomes.
pub fn inverse_consistency_with_outcomes(
    q_s: &PointCloud,
    q_t: &PointCloud,
    cfg: &RegistrationConfig,
) -> Result<(f64, RegistrationOutcome, RegistrationOutcome)> {
    let forward = register(q_s, q_t, cfg)?;
    let backward = register(q_t, q_s, cfg)?;
    let there = forward.transform_points(q_s.points())?;
    let back = backward.transform_points(&there)?;
    let gap = back
        .iter()
        .zip(q_s.points())
        .map(|(b, x)| (b - x).norm())
        .sum::<f64>()
        / q_s.len() as f64;
    Ok((gap, forward, backward))
}

pub fn inverse_consistency(q_s: &PointCloud, q_t: &PointCloud, cfg: &RegistrationConfig) -> Result<f64> {
    inverse_consistency_with_outcomes(q_s, q_t, cfg).map(|r| r.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticsOptions {
    pub probe_grid: usize,
    pub jacobian_resolution: usize,
    /// Finite-difference step as a fraction of the grid diagonal.
    pub jacobian_h_rel: f64,
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        DiagnosticsOptions {
            probe_grid: 16,
            jacobian_resolution: 16,
            jacobian_h_rel: 1e-4,
            max_pairs: 200_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub activation: ActivationKind,
    pub c_theta: f64,
    pub bilipschitz_factor: f64,
    pub min_jacobian_det: f64,
    pub grid: GridSpec,
    pub h: f64,
    pub pattern_count_per_block: Vec<usize>,
    pub probes: usize,
    pub min_distortion: f64,
    pub max_distortion: f64,
    pub distortion_within_bound: bool,
    pub tre: Option<f64>,
    pub inverse_gap: Option<f64>,
}

impl DiagnosticsReport {
    pub fn jacobian_positive(&self) -> bool {
        self.min_jacobian_det > 0.0
    }

    /// Flat `key: value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k}: {v}").unwrap();
        };
        kv("activation", self.activation.to_string());
        kv("C_theta", format!("{:e}", self.c_theta));
        kv("bilipschitz_factor", format!("{:e}", self.bilipschitz_factor));
        kv("min_jacobian_det", format!("{:e}", self.min_jacobian_det));
        kv("jacobian_positive", self.jacobian_positive().to_string());
        kv(
            "grid_min",
            format!("{:e} {:e} {:e}", self.grid.min.x, self.grid.min.y, self.grid.min.z),
        );
        kv(
            "grid_max",
            format!("{:e} {:e} {:e}", self.grid.max.x, self.grid.max.y, self.grid.max.z),
        );
        kv("grid_resolution", self.grid.resolution.to_string());
        kv("fd_step", format!("{:e}", self.h));
        kv("probes", self.probes.to_string());
        let counts: Vec<String> = self.pattern_count_per_block.iter().map(|c| c.to_string()).collect();
        kv("pattern_count_per_block", counts.join(" "));
        kv("min_distortion", format!("{:e}", self.min_distortion));
        kv("max_distortion", format!("{:e}", self.max_distortion));
        kv("distortion_within_bound", self.distortion_within_bound.to_string());
        if !self.activation.is_piecewise_affine() {
            kv("note", "patterns count pre-activation signs only; the field is not piecewise affine".into());
        }
        kv("tre", self.tre.map_or("none".into(), |v| format!("{v:e}")));
        kv("inverse_gap", self.inverse_gap.map_or("none".into(), |v| format!("{v:e}")));
        s
    }
}

/// Diagnostics of `params` in the coordinates it was trained in. `points`
/// seed the probe set and, with `extra_box`, fix the grid extent.
pub fn diagnose(
    params: &NetParams,
    points: &[Vec3],
    extra_box: &[Vec3],
    opts: &DiagnosticsOptions,
) -> Result<(DiagnosticsReport, JacobianField)> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let c_theta = params.lipschitz_constant();
    let probes = probe_set(points, extra_box, opts.probe_grid);
    let grid = GridSpec::around(points.iter().chain(extra_box), 1.2, opts.jacobian_resolution);
    let h = (opts.jacobian_h_rel * grid.diagonal()).min(0.1 * grid.cell_size());
    let field = jacobian_grid_check(params, grid, h)?;

    let steps = apply_flow_steps(&probes, params)?;
    let pattern_count_per_block = params
        .blocks()
        .iter()
        .zip(&steps)
        .map(|(b, inputs)| polytope_census(b, inputs).distinct())
        .collect();
    let sample = bilipschitz_sample(params, &probes, opts.max_pairs, opts.seed)?;
    let report = DiagnosticsReport {
        activation: params.activation(),
        c_theta,
        bilipschitz_factor: c_theta.exp(),
        min_jacobian_det: field.min_det,
        grid,
        h,
        pattern_count_per_block,
        probes: probes.len(),
        min_distortion: sample.min_ratio,
        max_distortion: sample.max_ratio,
        distortion_within_bound: sample.within_bound(1e-9),
        tre: None,
        inverse_gap: None,
    };
    Ok((report, field))
}

/// Diagnostics of a registration outcome. `correspondence` maps source
/// points to target points and, together with `target`, enables TRE.
pub fn diagnose_outcome(
    outcome: &RegistrationOutcome,
    target: Option<(&PointCloud, &[usize])>,
    opts: &DiagnosticsOptions,
) -> Result<(DiagnosticsReport, JacobianField)> {
    let source = outcome.final_flow.shapes[0].points();
    let (mut report, field) = diagnose(&outcome.theta_star, source, outcome.target.points(), opts)?;
    if let Some((t, corr)) = target {
        report.tre = Some(tre(&outcome.deformed_source(), t, corr)?);
    }
    Ok((report, field))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{block_velocity, xavier_init};
    use ndarray::{array, Array1, Array2};

    fn plane_block() -> BlockParams {
        BlockParams {
            w1: array![[1.0, 0.0, 0.0]],
            b1: array![0.0],
            w2: array![[1.0]],
            b2: array![0.0],
            w3: array![[1.0], [0.0], [0.0]],
        }
    }

    #[test]
    fn zero_block_pattern() {
        let b = BlockParams::zeros(4);
        let p = activation_pattern(&Vec3::new(0.3, -1.0, 2.0), &b, ActivationKind::Relu, 0).unwrap();
        assert!(p.signs.iter().all(|&s| s));
        assert_eq!(p.a, Matrix3::zeros());
        assert_eq!(p.c, Vec3::zeros());
    }

    #[test]
    fn plane_signs() {
        let b = plane_block();
        let act = ActivationKind::Relu;
        assert_eq!(activation_pattern(&Vec3::new(1.0, 1.0, 1.0), &b, act, 0).unwrap().signs, vec![true]);
        assert_eq!(activation_pattern(&Vec3::new(-1.0, 1.0, 1.0), &b, act, 0).unwrap().signs, vec![false]);
        assert!(activation_pattern(&Vec3::zeros(), &b, ActivationKind::Tanh, 0).is_err());
    }

    #[test]
    fn pattern_affine_matches_block() {
        for act in [ActivationKind::Relu, ActivationKind::LeakyRelu { alpha: 0.01 }] {
            let p = xavier_init(1, 8, act, 3).unwrap();
            let b = &p.blocks()[0];
            let x = Vec3::new(0.2, -0.1, 0.4);
            let pat = activation_pattern(&x, b, act, 0).unwrap();
            assert!((pat.eval(&x) - block_velocity(&x, b, act)).amax() < 1e-12);
            let mut shared = 0;
            for d in [1e-7, -2e-7, 3e-7] {
                let y = x + Vec3::new(d, -d, 0.5 * d);
                if sign_vector(&y, b) == pat.signs {
                    shared += 1;
                    assert!((pat.eval(&y) - block_velocity(&y, b, act)).amax() < 1e-12);
                }
            }
            assert_eq!(shared, 3);
        }
    }

    #[test]
    fn census_examples() {
        let probes = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        assert_eq!(polytope_census(&BlockParams::zeros(3), &probes).distinct(), 1);
        let c = polytope_census(&plane_block(), &probes);
        assert_eq!(c.distinct(), 2);
        assert_eq!(c.counts[&vec![true]], 2);

        let mut b = BlockParams::zeros(3);
        b.w1 = Array2::eye(3);
        let mut octants = Vec::new();
        for sx in [-0.5, 0.5] {
            for sy in [-0.5, 0.5] {
                for sz in [-0.5, 0.5] {
                    octants.push(Vec3::new(sx, sy, sz));
                }
            }
        }
        assert_eq!(polytope_census(&b, &octants).distinct(), 8);
    }

    #[test]
    fn jacobian_identity_and_translation() {
        let grid = GridSpec {
            min: Vec3::new(-1.0, -1.0, -1.0),
            max: Vec3::new(1.0, 1.0, 1.0),
            resolution: 4,
        };
        let zero = NetParams::zeros(2, 3, ActivationKind::Relu).unwrap();
        let f = jacobian_grid_check(&zero, grid, 1e-3).unwrap();
        assert!(f.dets.iter().all(|&d| (d - 1.0).abs() < 1e-9));
        assert_eq!(f.points.len(), 64);

        let translate = BlockParams {
            w1: Array2::zeros((1, 3)),
            b1: array![1.0],
            w2: array![[1.0]],
            b2: Array1::zeros(1),
            w3: array![[0.3], [-0.2], [0.7]],
        };
        let p = NetParams::new(vec![translate.clone(), translate], ActivationKind::Relu).unwrap();
        let f = jacobian_grid_check(&p, grid, 1e-3).unwrap();
        assert!(f.dets.iter().all(|&d| (d - 1.0).abs() < 1e-9));

        assert!(jacobian_grid_check(&zero, grid, 1.0).is_err());
        assert!(jacobian_grid_check(&zero, grid, 0.0).is_err());
        assert!(jacobian_grid_check(&zero, GridSpec { resolution: 1, ..grid }, 1e-3).is_err());
    }

    #[test]
    fn tre_examples() {
        let one = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        let off = PointCloud::new(vec![Vec3::new(3.0, 4.0, 0.0)]).unwrap();
        assert_eq!(tre(&one, &one, &[0]).unwrap(), 0.0);
        assert_eq!(tre(&one, &off, &[0]).unwrap(), 5.0);
        let a = PointCloud::new(vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        let b = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 7.0, 0.0)]).unwrap();
        assert_eq!(tre(&a, &b, &[0, 1]).unwrap(), 5.0);
        assert!(matches!(tre(&a, &b, &[0]), Err(Error::MissingCorrespondence(_))));
        assert!(matches!(tre(&a, &b, &[0, 2]), Err(Error::MissingCorrespondence(_))));
    }

    #[test]
    fn correspondence_parsing() {
        assert_eq!(parse_correspondence("# c\n1 0\n0 1\n", 2).unwrap(), vec![1, 0]);
        assert!(parse_correspondence("0 1\n", 2).is_err());
        assert!(parse_correspondence("0 x\n1 1\n", 2).is_err());
        assert!(parse_correspondence("0 1\n0 1\n1 0\n", 2).is_err());
        assert!(parse_correspondence("0 1\n5 0\n", 2).is_err());
        let ids = [3usize, 1, 2];
        assert_eq!(parse_correspondence(&correspondence_to_string(&ids), 3).unwrap(), ids);
    }

    #[test]
    fn labels_give_correspondence() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)];
        let s = PointCloud::new(pts.clone()).unwrap().with_labels(vec![7, 9]).unwrap();
        let t = PointCloud::new(pts).unwrap().with_labels(vec![9, 7]).unwrap();
        assert_eq!(correspondence_from_labels(&s, &t).unwrap(), vec![1, 0]);
        let u = t.clone().with_labels(vec![1, 2]).unwrap();
        assert!(correspondence_from_labels(&s, &u).is_err());
    }

    #[test]
    fn distortion_respects_bound() {
        let p = xavier_init(4, 16, ActivationKind::default(), 5).unwrap();
        let pts = crate::synthetic::fibonacci_sphere(40, 0.4);
        let probes = probe_set(pts.points(), &[], 5);
        let s = bilipschitz_sample(&p, &probes, 5000, 0).unwrap();
        assert!(s.within_bound(1e-12));
        assert!(s.min_ratio >= (-p.lipschitz_constant()).exp() * (1.0 - 1e-12));
        assert!(s.pairs > 0);
    }

    #[test]
    fn report_text_has_keys() {
        let p = xavier_init(2, 8, ActivationKind::default(), 1).unwrap();
        let pts = crate::synthetic::fibonacci_sphere(20, 0.5);
        let opts = DiagnosticsOptions {
            probe_grid: 4,
            jacobian_resolution: 4,
            ..Default::default()
        };
        let (r, field) = diagnose(&p, pts.points(), &[], &opts).unwrap();
        assert!(r.c_theta >= 0.0 && r.bilipschitz_factor >= 1.0);
        assert!(r.min_jacobian_det > 0.0);
        assert_eq!(field.dets.len(), 64);
        for c in &r.pattern_count_per_block {
            assert!(*c >= 1 && *c <= r.probes);
        }
        let text = r.to_text();
        for key in ["C_theta:", "min_jacobian_det:", "pattern_count_per_block:", "tre: none"] {
            assert!(text.contains(key), "{key} missing");
        }
        assert!(field.to_csv().starts_with("x,y,z,det\n"));
    }
}
