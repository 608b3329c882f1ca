//! Forward-Euler flow through the stacked velocity fields:
//! `x^l = x^{l-1} + dt · f(x^{l-1}, θ^l)`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::geometry::{array_to_points, points_to_array, save_pointcloud, Format, Normalization, PointCloud};
use crate::network::{BlockTape, NetParams};
use crate::Vec3;

/// States `q^0..q^L` and raw (pre-`dt`) velocities `v^1..v^L` of one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub shapes: Vec<PointCloud>,
    /// `velocities[l]` is the `n x 3` field of block `l + 1` evaluated on `shapes[l]`.
    pub velocities: Vec<Array2<f64>>,
    pub dt: f64,
}

impl FlowResult {
    pub fn num_blocks(&self) -> usize {
        self.velocities.len()
    }

    pub fn endpoint(&self) -> &PointCloud {
        self.shapes.last().expect("flow has at least one shape")
    }

    /// Writes `frame_000 .. frame_L` in scene units.
    pub fn write_frames(&self, dir: &Path, format: Format, normalization: &Normalization) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.shapes
            .iter()
            .enumerate()
            .map(|(l, shape)| {
                let path = dir.join(format!("frame_{l:03}.{}", format.extension()));
                save_pointcloud(&normalization.inverse_cloud(shape), &path, format)?;
                Ok(path)
            })
            .collect()
    }

    /// CSV with one row per point and one speed column per block, in scene units.
    pub fn velocity_csv(&self, normalization: &Normalization) -> String {
        let mut out = String::from("point");
        for l in 1..=self.num_blocks() {
            write!(out, ",block_{l}").unwrap();
        }
        out.push('\n');
        let n = self.shapes[0].len();
        for i in 0..n {
            write!(out, "{i}").unwrap();
            for v in &self.velocities {
                let speed = (v[[i, 0]].powi(2) + v[[i, 1]].powi(2) + v[[i, 2]].powi(2)).sqrt();
                write!(out, ",{:e}", normalization.length_to_scene(speed)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Everything a backward pass needs: the state entering each block and
/// the block's intermediate activations.
#[derive(Debug, Clone)]
pub(crate) struct Trajectory {
    pub states: Vec<Array2<f64>>,
    pub tapes: Vec<BlockTape>,
}

/// The one integration routine shared by shapes and probe points, so
/// both are bit-identical for the same input coordinates.
pub(crate) fn integrate(x0: Array2<f64>, params: &NetParams) -> Result<Trajectory> {
    let dt = params.dt();
    let act = params.activation();
    let mut states = Vec::with_capacity(params.num_blocks() + 1);
    let mut tapes = Vec::with_capacity(params.num_blocks());
    states.push(x0);
    for (l, block) in params.blocks().iter().enumerate() {
        let current = states.last().expect("initial state pushed");
        let tape = block.forward(current.view(), act);
        if !tape.velocity.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { block: l + 1 });
        }
        let mut next = current.clone();
        euler_update(&mut next, &tape.velocity, dt);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { block: l + 1 });
        }
        states.push(next);
        tapes.push(tape);
    }
    Ok(Trajectory { states, tapes })
}

#[inline]
pub(crate) fn euler_update(state: &mut Array2<f64>, velocity: &Array2<f64>, dt: f64) {
    Zip::from(state).and(velocity).for_each(|x, &v| *x += dt * v);
}

/// Deforms `q0` through every block, recording all intermediate shapes.
pub fn flow_forward(q0: &PointCloud, params: &NetParams) -> Result<FlowResult> {
    let traj = integrate(points_to_array(q0.points()), params)?;
    let shapes = traj
        .states
        .iter()
        .map(|s| q0.with_points_unchecked(array_to_points(s)))
        .collect();
    Ok(FlowResult {
        shapes,
        velocities: traj.tapes.into_iter().map(|t| t.velocity).collect(),
        dt: params.dt(),
    })
}

/// Endpoint `Φ^L(x)` for arbitrary points of space.
pub fn apply_flow(points: &[Vec3], params: &NetParams) -> Result<Vec<Vec3>> {
    let traj = integrate(points_to_array(points), params)?;
    Ok(array_to_points(traj.states.last().expect("non-empty")))
}

/// All intermediate maps `Φ^0(x) .. Φ^L(x)` for arbitrary points.
pub fn apply_flow_steps(points: &[Vec3], params: &NetParams) -> Result<Vec<Vec<Vec3>>> {
    let traj = integrate(points_to_array(points), params)?;
    Ok(traj.states.iter().map(array_to_points).collect())
}

/// Repeats every block `factor` times (with `dt = 1/(factor·L)`): the same
/// piecewise-constant-in-time field sampled on a finer Euler grid.
pub fn refine_steps(params: &NetParams, factor: usize) -> Result<NetParams> {
    if factor == 0 {
        return Err(Error::InvalidConfig("refinement factor must be >= 1".into()));
    }
    let blocks = params
        .blocks()
        .iter()
        .flat_map(|b| std::iter::repeat_n(b.clone(), factor))
        .collect();
    NetParams::new(blocks, params.activation())
}
