//! Reverse-mode differentiation of the objective through the unrolled
//! Euler flow.
//!
//! Conventions that make the gradient well defined everywhere:
//! - activation derivatives at exactly 0 use the left slope (0 for relu,
//!   `alpha` for leaky relu);
//! - Chamfer nearest-neighbour assignments are held fixed (ties to the
//!   lowest index);
//! - the entropic transport plan is held fixed. For the entropic value this
//!   is the exact gradient at a converged plan.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::flow::{flow_forward, integrate, Trajectory};
use crate::geometry::{array_to_points, points_to_array, PointCloud};
use crate::network::{BlockParams, NetParams};
use crate::objective::{assemble_report, data_term_with_gradient, total_loss, LossConfig, LossReport};

/// Gradient of the objective, shaped like [`NetParams`]; each block's
/// fields hold `dW1, db1, dW2, db2, dW3`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradient {
    pub blocks: Vec<BlockParams>,
}

impl NetGradient {
    pub fn zeros_like(params: &NetParams) -> Self {
        NetGradient {
            blocks: vec![BlockParams::zeros(params.width()); params.num_blocks()],
        }
    }

    pub fn is_congruent(&self, params: &NetParams) -> bool {
        self.blocks.len() == params.num_blocks()
            && self.blocks.iter().zip(params.blocks()).all(|(g, p)| {
                g.w1.dim() == p.w1.dim()
                    && g.b1.dim() == p.b1.dim()
                    && g.w2.dim() == p.w2.dim()
                    && g.b2.dim() == p.b2.dim()
                    && g.w3.dim() == p.w3.dim()
            })
    }

    /// Every entry in a fixed order: per block `w1, b1, w2, b2, w3`, row-major.
    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.blocks.iter().flat_map(block_entries)
    }

    pub fn is_finite(&self) -> bool {
        self.entries().all(f64::is_finite)
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.entries().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// `(max |g|, ‖g‖)` per block.
    pub fn block_summaries(&self) -> Vec<(f64, f64)> {
        self.blocks
            .iter()
            .map(|b| {
                let (mut max, mut sq) = (0.0_f64, 0.0);
                for g in block_entries(b) {
                    max = max.max(g.abs());
                    sq += g * g;
                }
                (max, sq.sqrt())
            })
            .collect()
    }

    /// `a·self + b·other`, entry by entry.
    pub fn combine(&self, a: f64, other: &NetGradient, b: f64) -> NetGradient {
        let mix = |x: &Array2<f64>, y: &Array2<f64>| x * a + y * b;
        NetGradient {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(x, y)| BlockParams {
                    w1: mix(&x.w1, &y.w1),
                    b1: &x.b1 * a + &y.b1 * b,
                    w2: mix(&x.w2, &y.w2),
                    b2: &x.b2 * a + &y.b2 * b,
                    w3: mix(&x.w3, &y.w3),
                })
                .collect(),
        }
    }
}

pub(crate) fn block_entries(b: &BlockParams) -> impl Iterator<Item = f64> + '_ {
    b.w1.iter()
        .chain(b.b1.iter())
        .chain(b.w2.iter())
        .chain(b.b2.iter())
        .chain(b.w3.iter())
        .copied()
}

/// Largest `|a - r| / max(|a|, |r|)` over entries where `|r| > threshold`.
pub fn max_relative_error(analytic: &NetGradient, reference: &NetGradient, threshold: f64) -> f64 {
    analytic
        .entries()
        .zip(reference.entries())
        .filter(|(_, r)| r.abs() > threshold)
        .map(|(a, r)| (a - r).abs() / a.abs().max(r.abs()))
        .fold(0.0, f64::max)
}

/// Backpropagates an adjoint seeded on the endpoint (`seed`, already
/// weighted) plus the kinetic term with weight `kinetic_w` per block.
fn backward(traj: &Trajectory, params: &NetParams, seed: Array2<f64>, kinetic_w: f64) -> NetGradient {
    let dt = params.dt();
    let act = params.activation();
    let mut adjoint = seed;
    let mut blocks = Vec::with_capacity(params.num_blocks());
    for (l, block) in params.blocks().iter().enumerate().rev() {
        let tape = &traj.tapes[l];
        let input = &traj.states[l];
        let mut d_velocity = &adjoint * dt;
        if kinetic_w != 0.0 {
            d_velocity.scaled_add(kinetic_w, &tape.velocity);
        }
        let d_w3 = d_velocity.t().dot(&tape.mixed);
        let d_mixed = d_velocity.dot(&block.w3);
        let d_b2 = d_mixed.sum_axis(Axis(0));
        let d_w2 = d_mixed.t().dot(&tape.hidden);
        let mut d_pre = d_mixed.dot(&block.w2);
        d_pre.zip_mut_with(&tape.pre, |d, &z| *d *= act.derivative(z));
        let d_b1 = d_pre.sum_axis(Axis(0));
        let d_w1 = d_pre.t().dot(input);
        adjoint += &d_pre.dot(&block.w1);
        blocks.push(BlockParams {
            w1: d_w1,
            b1: d_b1,
            w2: d_w2,
            b2: d_b2,
            w3: d_w3,
        });
    }
    blocks.reverse();
    NetGradient { blocks }
}

struct Evaluation {
    traj: Trajectory,
    report: LossReport,
    data_grad: Array2<f64>,
    kinetic_w: f64,
}

fn evaluate(q_s: &PointCloud, q_t: &PointCloud, params: &NetParams, cfg: &LossConfig) -> Result<Evaluation> {
    cfg.validate()?;
    if !params.is_finite() {
        return Err(Error::NonFiniteGradient("parameters contain non-finite entries".into()));
    }
    let traj = integrate(points_to_array(q_s.points()), params)?;
    let endpoint = array_to_points(traj.states.last().expect("non-empty"));
    let (data, data_grad) = data_term_with_gradient(&endpoint, q_t.points(), &cfg.data_term)?;
    let kinetic_w = match cfg.kinetic_weighting {
        crate::objective::KineticWeighting::Riemann => params.dt(),
        crate::objective::KineticWeighting::Table1 => 1.0,
    };
    let per_block = traj
        .tapes
        .iter()
        .map(|t| 0.5 * kinetic_w * t.velocity.iter().map(|v| v * v).sum::<f64>())
        .collect();
    let report = assemble_report(data, per_block, cfg);
    Ok(Evaluation {
        traj,
        report,
        data_grad,
        kinetic_w,
    })
}

fn check_finite(g: NetGradient) -> Result<NetGradient> {
    if g.is_finite() {
        Ok(g)
    } else {
        Err(Error::NonFiniteGradient("gradient contains NaN or infinity".into()))
    }
}

/// Objective value and its exact gradient (under the conventions above).
pub fn loss_gradient(
    q_s: &PointCloud,
    q_t: &PointCloud,
    params: &NetParams,
    cfg: &LossConfig,
) -> Result<(LossReport, NetGradient)> {
    let eval = evaluate(q_s, q_t, params, cfg)?;
    let weight = cfg.data_weight();
    let seed = if weight == 0.0 {
        Array2::zeros(eval.data_grad.dim())
    } else {
        eval.data_grad * weight
    };
    let grad = backward(&eval.traj, params, seed, eval.kinetic_w);
    Ok((eval.report, check_finite(grad)?))
}

/// Unweighted data-term gradient and kinetic-term gradient, from two
/// separate backward passes. `loss_gradient = data / (2σ²) + kinetic`.
pub fn term_gradients(
    q_s: &PointCloud,
    q_t: &PointCloud,
    params: &NetParams,
    cfg: &LossConfig,
) -> Result<(LossReport, NetGradient, NetGradient)> {
    let eval = evaluate(q_s, q_t, params, cfg)?;
    let n = eval.data_grad.nrows();
    let data = backward(&eval.traj, params, eval.data_grad, 0.0);
    let kinetic = backward(&eval.traj, params, Array2::zeros((n, 3)), eval.kinetic_w);
    Ok((eval.report, check_finite(data)?, check_finite(kinetic)?))
}

/// `J(Θ)` only.
pub fn objective_value(q_s: &PointCloud, q_t: &PointCloud, params: &NetParams, cfg: &LossConfig) -> Result<f64> {
    let fr = flow_forward(q_s, params)?;
    Ok(total_loss(fr.endpoint(), q_t, &fr, cfg)?.total)
}

/// Central differences `(J(θ+h) - J(θ-h)) / 2h` for every scalar entry.
/// Costs two full objective evaluations per parameter: tiny instances only.
pub fn finite_difference_gradient(
    q_s: &PointCloud,
    q_t: &PointCloud,
    params: &NetParams,
    cfg: &LossConfig,
    h: f64,
) -> Result<NetGradient> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be > 0, got {h}")));
    }
    let mut grad = NetGradient::zeros_like(params);
    let mut work = params.clone();
    for l in 0..params.num_blocks() {
        for t in 0..5 {
            let len = tensor_slice(&mut work.blocks_mut()[l], t).len();
            for k in 0..len {
                let orig = tensor_slice(&mut work.blocks_mut()[l], t)[k];
                tensor_slice(&mut work.blocks_mut()[l], t)[k] = orig + h;
                let plus = objective_value(q_s, q_t, &work, cfg)?;
                tensor_slice(&mut work.blocks_mut()[l], t)[k] = orig - h;
                let minus = objective_value(q_s, q_t, &work, cfg)?;
                tensor_slice(&mut work.blocks_mut()[l], t)[k] = orig;
                tensor_slice(&mut grad.blocks[l], t)[k] = (plus - minus) / (2.0 * h);
            }
        }
    }
    Ok(grad)
}

/// Mutable flat view of tensor `t` (0..5 = w1, b1, w2, b2, w3).
pub(crate) fn tensor_slice(b: &mut BlockParams, t: usize) -> &mut [f64] {
    let slice = match t {
        0 => b.w1.as_slice_mut(),
        1 => b.b1.as_slice_mut(),
        2 => b.w2.as_slice_mut(),
        3 => b.b2.as_slice_mut(),
        4 => b.w3.as_slice_mut(),
        _ => unreachable!("a block has five tensors"),
    };
    slice.expect("standard layout")
}
