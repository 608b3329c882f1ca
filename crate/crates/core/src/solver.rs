//! ADAM training of the flow parameters and geodesic extraction.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::flow::{apply_flow, flow_forward, FlowResult};
use crate::geometry::{normalize, rigid_icp, Normalization, PointCloud, RigidTransform};
use crate::gradients::{loss_gradient, tensor_slice, NetGradient};
use crate::network::{xavier_init, ActivationKind, NetParams};
use crate::objective::{DataTerm, KineticWeighting, LossConfig, LossReport, SinkhornConfig};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataTermKind {
    #[default]
    Chamfer,
    Sinkhorn,
}

impl DataTermKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cd" | "chamfer" => Ok(DataTermKind::Chamfer),
            "med" | "emd" | "sinkhorn" => Ok(DataTermKind::Sinkhorn),
            other => Err(Error::InvalidConfig(format!("unknown data term '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DataTermKind::Chamfer => "cd",
            DataTermKind::Sinkhorn => "med",
        }
    }
}

/// All knobs of one registration run.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    /// Number of building blocks `L`.
    pub num_blocks: usize,
    /// Block width `m`.
    pub width: usize,
    pub eta: f64,
    pub sigma: f64,
    pub epochs: usize,
    pub activation: ActivationKind,
    pub data_term: DataTermKind,
    pub sinkhorn: SinkhornConfig,
    pub adam: AdamHyper,
    pub seed: u64,
    pub normalize: bool,
    pub kinetic_weighting: KineticWeighting,
    pub rigid_prealign: bool,
    pub icp_max_iters: usize,
    pub icp_tol: f64,
    /// Stop once the best total improves by less than `early_stop_tol`
    /// (relative) over this many epochs. 0 disables early stopping.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            num_blocks: 10,
            width: 900,
            eta: 1e-5,
            sigma: 0.1,
            epochs: 2000,
            activation: ActivationKind::default(),
            data_term: DataTermKind::Chamfer,
            sinkhorn: SinkhornConfig::default(),
            adam: AdamHyper::default(),
            seed: 0,
            normalize: true,
            kinetic_weighting: KineticWeighting::Riemann,
            rigid_prealign: true,
            icp_max_iters: 50,
            icp_tol: 1e-10,
            early_stop_window: 200,
            early_stop_tol: 1e-8,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_blocks < 1 || self.width < 1 {
            return bad(format!("need L >= 1 and m >= 1 (L = {}, m = {})", self.num_blocks, self.width));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.eta > 0.0) || !(self.sigma > 0.0) || !(self.icp_tol >= 0.0) || !(self.early_stop_tol >= 0.0) {
            return bad(format!("rates must be positive (eta = {}, sigma = {})", self.eta, self.sigma));
        }
        let a = &self.adam;
        if !(a.beta1 >= 0.0 && a.beta1 < 1.0 && a.beta2 >= 0.0 && a.beta2 < 1.0 && a.eps > 0.0) {
            return bad(format!("invalid ADAM hyper-parameters {a:?}"));
        }
        self.activation.validate()?;
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            data_term: match self.data_term {
                DataTermKind::Chamfer => DataTerm::Chamfer,
                DataTermKind::Sinkhorn => DataTerm::Sinkhorn(self.sinkhorn),
            },
            sigma: self.sigma,
            kinetic_weighting: self.kinetic_weighting,
        }
    }

    /// Flat `key=value` lines; floats print with round-trip precision.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            writeln!(s, "{k}={v}").unwrap();
        };
        kv("L", self.num_blocks.to_string());
        kv("m", self.width.to_string());
        kv("eta", format!("{:?}", self.eta));
        kv("sigma", format!("{:?}", self.sigma));
        kv("epochs", self.epochs.to_string());
        kv("activation", self.activation.name().into());
        kv("alpha", format!("{:?}", self.activation.alpha().unwrap_or(0.01)));
        kv("data_term", self.data_term.name().into());
        kv("sinkhorn_epsilon", format!("{:?}", self.sinkhorn.epsilon));
        kv("sinkhorn_min_iters", self.sinkhorn.min_iters.to_string());
        kv("sinkhorn_max_iters", self.sinkhorn.max_iters.to_string());
        kv("sinkhorn_tol", format!("{:?}", self.sinkhorn.tol));
        kv("sinkhorn_log_domain", self.sinkhorn.log_domain.to_string());
        kv("adam_beta1", format!("{:?}", self.adam.beta1));
        kv("adam_beta2", format!("{:?}", self.adam.beta2));
        kv("adam_eps", format!("{:?}", self.adam.eps));
        kv("seed", self.seed.to_string());
        kv("normalize", self.normalize.to_string());
        kv("kinetic_weighting", self.kinetic_weighting.name().into());
        kv("rigid_prealign", self.rigid_prealign.to_string());
        kv("icp_max_iters", self.icp_max_iters.to_string());
        kv("icp_tol", format!("{:?}", self.icp_tol));
        kv("early_stop_window", self.early_stop_window.to_string());
        kv("early_stop_tol", format!("{:?}", self.early_stop_tol));
        s
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = RegistrationConfig::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        let mut activation_name: Option<String> = None;
        let mut alpha = self.activation.alpha().unwrap_or(0.01);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", lineno + 1)))?;
            match key {
                "activation" => activation_name = Some(value.to_string()),
                "alpha" => alpha = parse_value(key, value)?,
                _ => self.set(key, value)?,
            }
        }
        let name = activation_name.unwrap_or_else(|| self.activation.name().to_string());
        self.activation = ActivationKind::parse_with_alpha(&name, alpha)?;
        Ok(())
    }

    /// Sets one field by its `key=value` name (`activation`/`alpha` included).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "L" => self.num_blocks = parse_value(key, value)?,
            "m" => self.width = parse_value(key, value)?,
            "eta" => self.eta = parse_value(key, value)?,
            "sigma" => self.sigma = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "activation" => {
                let alpha = self.activation.alpha().unwrap_or(0.01);
                self.activation = ActivationKind::parse_with_alpha(value, alpha)?;
            }
            "alpha" => {
                let alpha: f64 = parse_value(key, value)?;
                if let ActivationKind::LeakyRelu { .. } = self.activation {
                    self.activation = ActivationKind::LeakyRelu { alpha };
                    self.activation.validate()?;
                }
            }
            "data_term" => self.data_term = DataTermKind::parse(value)?,
            "sinkhorn_epsilon" => self.sinkhorn.epsilon = parse_value(key, value)?,
            "sinkhorn_min_iters" => self.sinkhorn.min_iters = parse_value(key, value)?,
            "sinkhorn_max_iters" => self.sinkhorn.max_iters = parse_value(key, value)?,
            "sinkhorn_tol" => self.sinkhorn.tol = parse_value(key, value)?,
            "sinkhorn_log_domain" => self.sinkhorn.log_domain = parse_value(key, value)?,
            "adam_beta1" => self.adam.beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam.eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "normalize" => self.normalize = parse_value(key, value)?,
            "kinetic_weighting" => self.kinetic_weighting = KineticWeighting::parse(value)?,
            "rigid_prealign" => self.rigid_prealign = parse_value(key, value)?,
            "icp_max_iters" => self.icp_max_iters = parse_value(key, value)?,
            "icp_tol" => self.icp_tol = parse_value(key, value)?,
            "early_stop_window" => self.early_stop_window = parse_value(key, value)?,
            "early_stop_tol" => self.early_stop_tol = parse_value(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value '{value}' for '{key}'")))
}

/// First and second moment buffers of ADAM.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m1: NetGradient,
    pub m2: NetGradient,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        AdamState {
            m1: NetGradient::zeros_like(params),
            m2: NetGradient::zeros_like(params),
            step: 0,
        }
    }
}

/// In-place bias-corrected ADAM update. Leaves everything untouched when
/// the gradient is non-finite or misshapen.
pub fn adam_update(
    params: &mut NetParams,
    grad: &NetGradient,
    state: &mut AdamState,
    hp: &AdamHyper,
    eta: f64,
) -> Result<()> {
    if !grad.is_congruent(params) || !state.m1.is_congruent(params) || !state.m2.is_congruent(params) {
        return Err(Error::InvalidConfig("gradient or ADAM state shape differs from parameters".into()));
    }
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient("refusing ADAM step on a non-finite gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for l in 0..params.num_blocks() {
        for k in 0..5 {
            let mut g_block = grad.blocks[l].clone();
            let g = tensor_slice(&mut g_block, k);
            let m1 = tensor_slice(&mut state.m1.blocks[l], k);
            for (m, &gi) in m1.iter_mut().zip(g.iter()) {
                *m = hp.beta1 * *m + (1.0 - hp.beta1) * gi;
            }
            let m2 = tensor_slice(&mut state.m2.blocks[l], k);
            for (v, &gi) in m2.iter_mut().zip(g.iter()) {
                *v = hp.beta2 * *v + (1.0 - hp.beta2) * gi * gi;
            }
            let m1 = tensor_slice(&mut state.m1.blocks[l], k).to_vec();
            let m2 = tensor_slice(&mut state.m2.blocks[l], k).to_vec();
            let theta = tensor_slice(&mut params.blocks_mut()[l], k);
            for ((w, m), v) in theta.iter_mut().zip(&m1).zip(&m2) {
                let m_hat = m / c1;
                let v_hat = v / c2;
                *w -= eta * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
    }
    Ok(())
}

/// Functional form of [`adam_update`].
pub fn adam_step(
    params: &NetParams,
    grad: &NetGradient,
    state: &AdamState,
    hp: &AdamHyper,
    eta: f64,
) -> Result<(NetParams, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    adam_update(&mut p, grad, &mut s, hp, eta)?;
    Ok((p, s))
}

/// What the observer sees after each evaluated epoch.
pub struct EpochInfo<'a> {
    pub epoch: usize,
    pub report: &'a LossReport,
    pub params: &'a NetParams,
    pub gradient: &'a NetGradient,
    pub elapsed: Duration,
}

/// A trained flow plus the bookkeeping needed to map results back to
/// scene units.
#[derive(Debug, Clone)]
pub struct RegistrationOutcome {
    /// Best parameters by total loss over all evaluated epochs.
    pub theta_star: NetParams,
    /// Parameters at epoch 0 (Xavier initialization).
    pub theta_init: NetParams,
    /// Flow of the pre-aligned, normalized source under `theta_star`.
    pub final_flow: FlowResult,
    /// One report per evaluated epoch; `history[e]` scores the parameters before update `e`.
    pub history: Vec<LossReport>,
    pub epoch_wall_ms: Vec<f64>,
    pub best_epoch: usize,
    pub wall_time: Duration,
    pub normalization: Normalization,
    /// Rigid pre-alignment in normalized units.
    pub prealign: RigidTransform,
    /// Pre-aligned source in scene units (equal to the input when pre-alignment is off).
    pub aligned_source: PointCloud,
    /// Target in normalized units.
    pub target: PointCloud,
    pub eta_final: f64,
    pub config: RegistrationConfig,
}

impl RegistrationOutcome {
    pub fn best_report(&self) -> &LossReport {
        &self.history[self.best_epoch]
    }

    /// Rigid pre-alignment expressed in scene units.
    pub fn scene_prealign(&self) -> RigidTransform {
        scene_prealign(&self.normalization, &self.prealign)
    }

    /// Full scene-space map `x -> denorm(Φ(prealign(norm(x))))` for `theta`.
    pub fn transform_points_with(&self, theta: &NetParams, points: &[Vec3]) -> Result<Vec<Vec3>> {
        let n = &self.normalization;
        let moved: Vec<Vec3> = points.iter().map(|p| self.prealign.apply(&n.forward(p))).collect();
        Ok(apply_flow(&moved, theta)?.iter().map(|p| n.inverse(p)).collect())
    }

    pub fn transform_points(&self, points: &[Vec3]) -> Result<Vec<Vec3>> {
        self.transform_points_with(&self.theta_star, points)
    }

    /// Endpoint of the trained flow in scene units.
    pub fn deformed_source(&self) -> PointCloud {
        self.normalization.inverse_cloud(self.final_flow.endpoint())
    }
}

/// Runs the full pipeline: normalization, rigid ICP, Xavier init, then
/// `epochs` rounds of forward flow, loss, backward pass and ADAM.
pub fn register(q_s: &PointCloud, q_t: &PointCloud, cfg: &RegistrationConfig) -> Result<RegistrationOutcome> {
    register_with_observer(q_s, q_t, cfg, |_| {})
}

pub fn register_with_observer(
    q_s: &PointCloud,
    q_t: &PointCloud,
    cfg: &RegistrationConfig,
    mut observer: impl FnMut(&EpochInfo<'_>),
) -> Result<RegistrationOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (src, tgt, normalization) = if cfg.normalize {
        normalize(q_s, q_t)?
    } else {
        (q_s.clone(), q_t.clone(), Normalization::identity())
    };
    let prealign = if cfg.rigid_prealign && src.len() >= 3 && tgt.len() >= 3 {
        rigid_icp(&src, &tgt, cfg.icp_max_iters, cfg.icp_tol)?
    } else {
        RigidTransform::identity()
    };
    let source = prealign.apply_cloud(&src);
    let loss_cfg = cfg.loss_config();

    let theta_init = xavier_init(cfg.num_blocks, cfg.width, cfg.activation, cfg.seed)?;
    let mut theta = theta_init.clone();
    let mut adam = AdamState::new(&theta);
    let mut eta = cfg.eta;
    let mut halved = false;
    let mut previous: Option<(NetParams, AdamState)> = None;

    let mut history: Vec<LossReport> = Vec::with_capacity(cfg.epochs);
    let mut epoch_wall_ms = Vec::with_capacity(cfg.epochs);
    let mut running_best: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, NetParams)> = None;
    let mut last_failed = false;

    let mut epoch = 0;
    while epoch < cfg.epochs {
        let tick = Instant::now();
        let evaluated = loss_gradient(&source, &tgt, &theta, &loss_cfg);
        let (report, grad) = match evaluated {
            Ok(v) => v,
            Err(e @ (Error::NonFiniteState { .. } | Error::NonFiniteGradient(_))) => {
                let rollback = previous.take();
                if halved || last_failed || rollback.is_none() {
                    return Err(Error::Divergence {
                        epoch,
                        reason: e.to_string(),
                    });
                }
                let (p, s) = rollback.expect("checked above");
                theta = p;
                adam = s;
                eta *= 0.5;
                halved = true;
                last_failed = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        last_failed = false;
        let prev_best = running_best.last().copied().unwrap_or(f64::INFINITY);
        if report.total < prev_best {
            best = Some((history.len(), theta.clone()));
        }
        running_best.push(prev_best.min(report.total));
        observer(&EpochInfo {
            epoch,
            report: &report,
            params: &theta,
            gradient: &grad,
            elapsed: start.elapsed(),
        });
        history.push(report);

        previous = Some((theta.clone(), adam.clone()));
        adam_update(&mut theta, &grad, &mut adam, &cfg.adam, eta)?;
        epoch_wall_ms.push(tick.elapsed().as_secs_f64() * 1e3);
        epoch += 1;

        let w = cfg.early_stop_window;
        if w > 0 && running_best.len() > w {
            let now = running_best[running_best.len() - 1];
            let then = running_best[running_best.len() - 1 - w];
            if then - now <= cfg.early_stop_tol * now.abs() {
                break;
            }
        }
    }

    let (best_epoch, theta_star) = best.ok_or_else(|| Error::Divergence {
        epoch: 0,
        reason: "no finite loss was ever evaluated".into(),
    })?;
    let final_flow = flow_forward(&source, &theta_star)?;
    let aligned_source = prealigned_source(q_s, &normalization, &prealign);
    Ok(RegistrationOutcome {
        theta_star,
        theta_init,
        final_flow,
        history,
        epoch_wall_ms,
        best_epoch,
        wall_time: start.elapsed(),
        normalization,
        prealign,
        aligned_source,
        target: tgt,
        eta_final: eta,
        config: cfg.clone(),
    })
}

/// Conjugates a rigid map given in normalized units back to scene units.
pub fn scene_prealign(normalization: &Normalization, prealign: &RigidTransform) -> RigidTransform {
    let n = normalization;
    let r = prealign.rotation;
    RigidTransform {
        rotation: r,
        translation: n.offset - r * n.offset + prealign.translation / n.scale,
    }
}

/// The source after rigid pre-alignment, in scene units. Returns the input
/// unchanged when the pre-alignment is the identity.
pub fn prealigned_source(q_s: &PointCloud, normalization: &Normalization, prealign: &RigidTransform) -> PointCloud {
    if *prealign == RigidTransform::identity() {
        q_s.clone()
    } else {
        scene_prealign(normalization, prealign).apply_cloud(q_s)
    }
}

/// Shapes `q^0 .. q^L` along the trained flow, in scene units. `path[0]`
/// is the pre-aligned source, `path[L]` the deformed source.
pub fn geodesic_path(outcome: &RegistrationOutcome) -> Vec<PointCloud> {
    let n = &outcome.normalization;
    let identity = *n == Normalization::identity();
    let mut path = Vec::with_capacity(outcome.final_flow.shapes.len());
    path.push(outcome.aligned_source.clone());
    for shape in &outcome.final_flow.shapes[1..] {
        path.push(if identity { shape.clone() } else { n.inverse_cloud(shape) });
    }
    path
}

/// Discrete length `Σ_l dt · (Σ_i ‖v^l_i‖²)^{1/2}` of a flow, in its own units.
pub fn path_length(fr: &FlowResult) -> f64 {
    fr.velocities
        .iter()
        .map(|v| fr.dt * v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum()
}

/// Length of the trained geodesic in scene units.
pub fn path_energy(outcome: &RegistrationOutcome) -> f64 {
    outcome.normalization.length_to_scene(path_length(&outcome.final_flow))
}
