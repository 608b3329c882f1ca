//! Building-block parameters and the per-block velocity field
//! `f(x) = W3 (W2 act(W1 x + b1) + b2)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// Pointwise nonlinearity between the first and second layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu { alpha: f64 },
    Tanh,
}

impl Default for ActivationKind {
    fn default() -> Self {
        ActivationKind::LeakyRelu { alpha: 0.01 }
    }
}

impl ActivationKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::LeakyRelu { alpha } if !(alpha > 0.0 && alpha < 1.0) => Err(
                Error::InvalidConfig(format!("leaky slope must lie in (0,1), got {alpha}")),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            ActivationKind::Relu => z.max(0.0),
            ActivationKind::LeakyRelu { alpha } => {
                if z >= 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
            ActivationKind::Tanh => z.tanh(),
        }
    }

    /// Derivative; at exactly `z = 0` the left-hand slope is used
    /// (0 for relu, `alpha` for leaky relu).
    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { alpha } => {
                if z > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            ActivationKind::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    /// Slope of the affine piece selected by the sign convention
    /// (`+` iff `z >= 0`). `None` for tanh, which is not piecewise affine.
    pub fn piece_slope(&self, positive: bool) -> Option<f64> {
        match *self {
            ActivationKind::Relu => Some(if positive { 1.0 } else { 0.0 }),
            ActivationKind::LeakyRelu { alpha } => Some(if positive { 1.0 } else { alpha }),
            ActivationKind::Tanh => None,
        }
    }

    pub fn is_piecewise_affine(&self) -> bool {
        !matches!(self, ActivationKind::Tanh)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu { .. } => "leaky_relu",
            ActivationKind::Tanh => "tanh",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match *self {
            ActivationKind::LeakyRelu { alpha } => Some(alpha),
            _ => None,
        }
    }

    /// Parses `relu`, `leaky`/`leaky_relu` (slope `alpha`) or `tanh`.
    pub fn parse_with_alpha(name: &str, alpha: f64) -> Result<Self> {
        let act = match name.to_ascii_lowercase().as_str() {
            "relu" => ActivationKind::Relu,
            "leaky" | "leaky_relu" | "leakyrelu" => ActivationKind::LeakyRelu { alpha },
            "tanh" => ActivationKind::Tanh,
            other => return Err(Error::InvalidConfig(format!("unknown activation '{other}'"))),
        };
        act.validate()?;
        Ok(act)
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActivationKind::LeakyRelu { alpha } => write!(f, "leaky_relu({alpha})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with_alpha(s, 0.01)
    }
}

/// Weights of one building block. `w1: m x 3`, `w2: m x m`, `w3: 3 x m`;
/// there is no bias on the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
}

/// Intermediate values of one batched block evaluation, kept for backprop.
#[derive(Debug, Clone)]
pub struct BlockTape {
    /// First-layer pre-activations `X W1ᵀ + b1`, `n x m`.
    pub pre: Array2<f64>,
    /// `act(pre)`, `n x m`.
    pub hidden: Array2<f64>,
    /// Second-layer output `hidden W2ᵀ + b2`, `n x m`.
    pub mixed: Array2<f64>,
    /// Velocities `mixed W3ᵀ`, `n x 3`.
    pub velocity: Array2<f64>,
}

impl BlockParams {
    pub fn zeros(width: usize) -> Self {
        BlockParams {
            w1: Array2::zeros((width, 3)),
            b1: Array1::zeros(width),
            w2: Array2::zeros((width, width)),
            b2: Array1::zeros(width),
            w3: Array2::zeros((3, width)),
        }
    }

    pub fn width(&self) -> usize {
        self.b1.len()
    }

    fn check_shapes(&self) -> Result<()> {
        let m = self.width();
        let ok = self.w1.dim() == (m, 3)
            && self.w2.dim() == (m, m)
            && self.b2.len() == m
            && self.w3.dim() == (3, m);
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "inconsistent block shapes for width {m}: w1 {:?}, w2 {:?}, b2 {}, w3 {:?}",
                self.w1.dim(),
                self.w2.dim(),
                self.b2.len(),
                self.w3.dim()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn tensors(&self) -> [&[f64]; 5] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
        ]
    }

    /// Evaluates the block on every row of `x` (`n x 3`).
    pub fn forward(&self, x: ArrayView2<'_, f64>, act: ActivationKind) -> BlockTape {
        let mut pre = x.dot(&self.w1.t());
        pre += &self.b1.view().insert_axis(Axis(0));
        let hidden = pre.mapv(|z| act.apply(z));
        let mut mixed = hidden.dot(&self.w2.t());
        mixed += &self.b2.view().insert_axis(Axis(0));
        let velocity = mixed.dot(&self.w3.t());
        BlockTape {
            pre,
            hidden,
            mixed,
            velocity,
        }
    }

    /// Velocities only, `n x 3`.
    pub fn velocities(&self, x: ArrayView2<'_, f64>, act: ActivationKind) -> Array2<f64> {
        self.forward(x, act).velocity
    }
}

/// Velocity of a single block at one point.
pub fn block_velocity(x: &Vec3, theta: &BlockParams, act: ActivationKind) -> Vec3 {
    let m = theta.width();
    let mut hidden = vec![0.0; m];
    for (k, h) in hidden.iter_mut().enumerate() {
        let z = theta.w1[[k, 0]] * x.x + theta.w1[[k, 1]] * x.y + theta.w1[[k, 2]] * x.z + theta.b1[k];
        *h = act.apply(z);
    }
    let mut mixed = theta.b2.to_vec();
    for (j, u) in mixed.iter_mut().enumerate() {
        let row = theta.w2.row(j);
        *u += row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
    }
    let mut out = Vec3::zeros();
    for i in 0..3 {
        out[i] = theta.w3.row(i).iter().zip(&mixed).map(|(w, u)| w * u).sum();
    }
    out
}

/// Spectral norm by power iteration on the smaller Gram matrix, from a
/// fixed start vector: at most 500 iterations, relative tolerance 1e-8.
pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    spectral_norm_with(a, 500, 1e-8)
}

/// Stops once the eigen-residual `‖Gv − λv‖` is below `tol · λ`, which pins
/// `λ` to an eigenvalue of `G` within that relative error. If power
/// iteration has not got there after `max_iters` steps (tiny spectral gap),
/// falls back to a full SVD.
pub fn spectral_norm_with(a: &Array2<f64>, max_iters: usize, tol: f64) -> f64 {
    let (rows, cols) = a.dim();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let gram = if cols <= rows { a.t().dot(a) } else { a.dot(&a.t()) };
    let k = gram.nrows();
    // Irregular positive start; unlikely to be orthogonal to the top vector.
    let mut v = Array1::from_shape_fn(k, |i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract());
    let norm = v.dot(&v).sqrt();
    v /= norm;
    for _ in 0..max_iters {
        let w = gram.dot(&v);
        let lambda = v.dot(&w);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return 0.0;
        }
        let residual = (&w - &(&v * lambda)).dot(&(&w - &(&v * lambda))).sqrt();
        if residual <= tol * lambda {
            return lambda.max(0.0).sqrt();
        }
        v = w / wn;
    }
    let dm = nalgebra::DMatrix::from_row_slice(rows, cols, &a.iter().copied().collect::<Vec<_>>());
    dm.singular_values().max()
}

/// `‖W3‖ ‖W2‖ ‖W1‖`: an upper bound on the block's Lipschitz constant for
/// any 1-Lipschitz activation.
pub fn block_lipschitz_bound(theta: &BlockParams) -> f64 {
    spectral_norm(&theta.w3) * spectral_norm(&theta.w2) * spectral_norm(&theta.w1)
}

/// The stack of `L` blocks with Euler step `dt = 1/L`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    blocks: Vec<BlockParams>,
    activation: ActivationKind,
}

impl NetParams {
    pub fn new(blocks: Vec<BlockParams>, activation: ActivationKind) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidConfig("need at least one block".into()));
        }
        activation.validate()?;
        let m = blocks[0].width();
        if m == 0 {
            return Err(Error::InvalidConfig("width must be at least 1".into()));
        }
        for (l, b) in blocks.iter().enumerate() {
            b.check_shapes()?;
            if b.width() != m {
                return Err(Error::InvalidConfig(format!(
                    "block {l} has width {} but block 0 has width {m}",
                    b.width()
                )));
            }
        }
        Ok(NetParams { blocks, activation })
    }

    pub fn zeros(num_blocks: usize, width: usize, activation: ActivationKind) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidConfig("width must be at least 1".into()));
        }
        Self::new(vec![BlockParams::zeros(width); num_blocks], activation)
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [BlockParams] {
        &mut self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn width(&self) -> usize {
        self.blocks[0].width()
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.blocks.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(BlockParams::is_finite)
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        let m = self.width();
        self.blocks.len() * (3 * m + m + m * m + m + 3 * m)
    }

    /// `C(Θ)`: the largest per-block Lipschitz bound.
    pub fn lipschitz_constant(&self) -> f64 {
        self.blocks
            .iter()
            .map(block_lipschitz_bound)
            .fold(0.0, f64::max)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&NetParamsDoc::from(self))
            .map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&NetParamsDoc::from(self)).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetParamsDoc =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        doc.try_into()
    }
}

/// Xavier-uniform weights (`±√(6/(fan_in+fan_out))` per layer), zero biases.
pub fn xavier_init(
    num_blocks: usize,
    width: usize,
    activation: ActivationKind,
    seed: u64,
) -> Result<NetParams> {
    if num_blocks < 1 || width < 1 {
        return Err(Error::InvalidConfig(format!(
            "need L >= 1 and m >= 1, got L = {num_blocks}, m = {width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |rows: usize, cols: usize| {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
    };
    let blocks = (0..num_blocks)
        .map(|_| BlockParams {
            w1: uniform(width, 3),
            b1: Array1::zeros(width),
            w2: uniform(width, width),
            b2: Array1::zeros(width),
            w3: uniform(3, width),
        })
        .collect();
    NetParams::new(blocks, activation)
}

/// On-disk layout of [`NetParams`]. Matrices are row-major flat arrays:
/// `w1` is `m x 3`, `w2` is `m x m`, `w3` is `3 x m`.
#[derive(Debug, Serialize, Deserialize)]
struct NetParamsDoc {
    #[serde(rename = "L")]
    num_blocks: usize,
    m: usize,
    dt: f64,
    activation: String,
    alpha: Option<f64>,
    blocks: Vec<BlockDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockDoc {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w3: Vec<f64>,
}

impl From<&NetParams> for NetParamsDoc {
    fn from(p: &NetParams) -> Self {
        NetParamsDoc {
            num_blocks: p.num_blocks(),
            m: p.width(),
            dt: p.dt(),
            activation: p.activation.name().to_string(),
            alpha: p.activation.alpha(),
            blocks: p
                .blocks
                .iter()
                .map(|b| BlockDoc {
                    w1: b.w1.iter().copied().collect(),
                    b1: b.b1.to_vec(),
                    w2: b.w2.iter().copied().collect(),
                    b2: b.b2.to_vec(),
                    w3: b.w3.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<NetParamsDoc> for NetParams {
    type Error = Error;

    fn try_from(doc: NetParamsDoc) -> Result<Self> {
        let bad = |msg: String| Error::Serialization(msg);
        if doc.blocks.len() != doc.num_blocks {
            return Err(bad(format!("L = {} but {} blocks", doc.num_blocks, doc.blocks.len())));
        }
        let activation = ActivationKind::parse_with_alpha(&doc.activation, doc.alpha.unwrap_or(0.01))?;
        let m = doc.m;
        let matrix = |v: Vec<f64>, shape: (usize, usize), name: &str| {
            Array2::from_shape_vec(shape, v).map_err(|_| bad(format!("{name} is not {shape:?}")))
        };
        let vector = |v: Vec<f64>, name: &str| {
            if v.len() == m {
                Ok(Array1::from(v))
            } else {
                Err(bad(format!("{name} has length {} but m = {m}", v.len())))
            }
        };
        let blocks = doc
            .blocks
            .into_iter()
            .map(|b| {
                Ok(BlockParams {
                    w1: matrix(b.w1, (m, 3), "w1")?,
                    b1: vector(b.b1, "b1")?,
                    w2: matrix(b.w2, (m, m), "w2")?,
                    b2: vector(b.b2, "b2")?,
                    w3: matrix(b.w3, (3, m), "w3")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = NetParams::new(blocks, activation)?;
        if params.dt() != doc.dt {
            return Err(bad(format!("dt = {} does not equal 1/L = {}", doc.dt, params.dt())));
        }
        Ok(params)
    }
}
