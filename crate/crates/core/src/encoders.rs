//! Trainable MLP tower for modality U, a frozen teacher with a trainable
//! projection for modality V, and the lock modes that decide which of them
//! receive updates.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_tensor_file, write_tensor_file};
use crate::error::{CwclError, Result};
use crate::losses::Temperature;
use crate::numerics::{dot, l2_normalize_rows, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => f64::from(u8::from(y > 0.0)),
        }
    }
}

/// Dense layer computing `x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: Matrix::random_uniform(fan_in, fan_out, -limit, limit, rng),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Returns parameter gradients and the gradient with respect to `x`.
    fn backward(&self, x: &Matrix, grad_y: &Matrix) -> Result<(LinearGrads, Matrix)> {
        let weight = x.matmul_tn(grad_y)?;
        let mut bias = vec![0.0; self.out_dim()];
        for row in grad_y.row_iter() {
            for (b, g) in bias.iter_mut().zip(row) {
                *b += g;
            }
        }
        let grad_x = grad_y.matmul_nt(&self.weight)?;
        Ok((LinearGrads { weight, bias }, grad_x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearGrads {
    pub fn zeros_like(layer: &Linear) -> Self {
        Self {
            weight: Matrix::zeros(layer.in_dim(), layer.out_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }

    fn zero(&mut self) {
        self.weight.data_mut().fill(0.0);
        self.bias.fill(0.0);
    }
}

pub type MlpGrads = Vec<LinearGrads>;

/// Feed-forward stack. The activation sits between layers, not after the
/// last one; `normalize` projects outputs onto the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub normalize: bool,
}

struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Output of the last layer before normalization.
    raw_out: Matrix,
}

impl MlpParams {
    pub fn new(layers: Vec<Linear>, activation: Activation, normalize: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(CwclError::invalid("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(CwclError::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(CwclError::shape(format!("layer {i} bias length")));
            }
        }
        Ok(Self {
            layers,
            activation,
            normalize,
        })
    }

    /// Glorot-initialized MLP with the given layer widths.
    pub fn init(dims: &[usize], activation: Activation, normalize: bool, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(CwclError::invalid("need input and output widths"));
        }
        let layers = dims.windows(2).map(|w| Linear::glorot(w[0], w[1], rng)).collect();
        Self::new(layers, activation, normalize)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.in_dim() {
            return Err(CwclError::shape(format!(
                "input has {} features, encoder expects {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&h)?;
            if i < last {
                let act = self.activation;
                y = y.map(|v| act.apply(v));
            }
            inputs.push(std::mem::replace(&mut h, y));
        }
        Ok(ForwardCache { inputs, raw_out: h })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let cache = self.forward_cached(x)?;
        if self.normalize {
            l2_normalize_rows(&cache.raw_out)
        } else {
            Ok(cache.raw_out)
        }
    }

    /// Parameter gradients and input gradient for `grad_out` at the output.
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> Result<(MlpGrads, Matrix)> {
        let cache = self.forward_cached(x)?;
        cache.raw_out.check_same_shape(grad_out)?;
        let mut g = if self.normalize {
            unit_norm_backward(&cache.raw_out, grad_out)?
        } else {
            grad_out.clone()
        };
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (lg, gx) = layer.backward(&cache.inputs[i], &g)?;
            grads.push(lg);
            g = gx;
            if i > 0 {
                // inputs[i] is the activation output of layer i-1
                let act = self.activation;
                for (gv, &y) in g.data_mut().iter_mut().zip(cache.inputs[i].data()) {
                    *gv *= act.derivative_from_output(y);
                }
            }
        }
        grads.reverse();
        Ok((grads, g))
    }

    pub fn zero_grads(&self) -> MlpGrads {
        self.layers.iter().map(LinearGrads::zeros_like).collect()
    }
}

/// Backpropagates through `y = h / |h|` row by row:
/// `∂L/∂h = (g - y (y·g)) / |h|`.
pub fn unit_norm_backward(h: &Matrix, grad_y: &Matrix) -> Result<Matrix> {
    h.check_same_shape(grad_y)?;
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for i in 0..h.rows() {
        let hr = h.row(i);
        let n = dot(hr, hr).sqrt();
        if n == 0.0 {
            return Err(CwclError::ZeroRow { row: i });
        }
        let g = grad_y.row(i);
        let yg = dot(hr, g) / n;
        for ((o, &hv), &gv) in out.row_mut(i).iter_mut().zip(hr).zip(g) {
            *o = (gv - hv / n * yg) / n;
        }
    }
    Ok(out)
}

pub fn encode_u(params: &MlpParams, x: &Matrix) -> Result<Matrix> {
    params.forward(x)
}

pub fn backward_u(params: &MlpParams, x: &Matrix, grad_p: &Matrix) -> Result<MlpGrads> {
    Ok(params.backward(x, grad_p)?.0)
}

/// Frozen feature map followed by a trainable projection. The map's output
/// is normalized (`pre`, used for similarity weights); the projection output
/// is normalized again (`post`, used in the loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherEncoder {
    frozen: MlpParams,
    pub projection: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEmbeddings {
    pub pre: Matrix,
    pub post: Matrix,
}

impl TeacherEncoder {
    pub fn new(mut frozen: MlpParams, projection: Linear) -> Result<Self> {
        frozen.normalize = true;
        if projection.in_dim() != frozen.out_dim() {
            return Err(CwclError::shape(format!(
                "projection expects {} inputs but the frozen map emits {}",
                projection.in_dim(),
                frozen.out_dim()
            )));
        }
        Ok(Self { frozen, projection })
    }

    pub fn frozen(&self) -> &MlpParams {
        &self.frozen
    }

    /// Mutable access for lock modes that train the whole tower.
    pub fn frozen_mut(&mut self) -> &mut MlpParams {
        &mut self.frozen
    }

    pub fn pre_dim(&self) -> usize {
        self.frozen.out_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.projection.out_dim()
    }

    pub fn in_dim(&self) -> usize {
        self.frozen.in_dim()
    }

    /// Projects already-computed pre-projection embeddings.
    pub fn project(&self, pre: &Matrix) -> Result<Matrix> {
        l2_normalize_rows(&self.projection.forward(pre)?)
    }
}

pub fn encode_v(teacher: &TeacherEncoder, x: &Matrix) -> Result<TeacherEmbeddings> {
    let pre = teacher.frozen.forward(x)?;
    let post = teacher.project(&pre)?;
    Ok(TeacherEmbeddings { pre, post })
}

/// Gradients for the teacher given `∂L/∂post`. The frozen-map gradients are
/// only computed when `include_frozen` is set; otherwise they are zero.
pub fn backward_v(
    teacher: &TeacherEncoder,
    x: &Matrix,
    grad_post: &Matrix,
    include_frozen: bool,
) -> Result<(MlpGrads, LinearGrads)> {
    let pre = teacher.frozen.forward(x)?;
    let raw = teacher.projection.forward(&pre)?;
    let g_raw = unit_norm_backward(&raw, grad_post)?;
    let (proj, g_pre) = teacher.projection.backward(&pre, &g_raw)?;
    let map = if include_frozen {
        teacher.frozen.backward(x, &g_pre)?.0
    } else {
        teacher.frozen.zero_grads()
    };
    Ok((map, proj))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockMode {
    None,
    /// Freeze the whole U tower.
    LockU,
    /// Freeze V's feature map; its projection stays trainable.
    #[default]
    LockV,
    /// Freeze everything but the temperature.
    LockBoth,
}

impl LockMode {
    pub fn u_trainable(self) -> bool {
        matches!(self, LockMode::None | LockMode::LockV)
    }

    pub fn v_map_trainable(self) -> bool {
        matches!(self, LockMode::None | LockMode::LockU)
    }

    pub fn v_projection_trainable(self) -> bool {
        !matches!(self, LockMode::LockBoth)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub u: MlpGrads,
    pub v_map: MlpGrads,
    pub v_proj: LinearGrads,
    pub log_tau: f64,
}

impl Gradients {
    pub fn zeros(stack: &EncoderStack) -> Self {
        Self {
            u: stack.u.zero_grads(),
            v_map: stack.teacher.frozen.zero_grads(),
            v_proj: LinearGrads::zeros_like(&stack.teacher.projection),
            log_tau: 0.0,
        }
    }

    /// Every gradient tensor, in the same order as
    /// [`EncoderStack::param_slots`].
    pub fn slices(&self) -> Vec<(ParamGroup, &[f64])> {
        let mut out = Vec::new();
        for l in &self.u {
            out.push((ParamGroup::U, l.weight.data()));
            out.push((ParamGroup::U, l.bias.as_slice()));
        }
        for l in &self.v_map {
            out.push((ParamGroup::VMap, l.weight.data()));
            out.push((ParamGroup::VMap, l.bias.as_slice()));
        }
        out.push((ParamGroup::VProjection, self.v_proj.weight.data()));
        out.push((ParamGroup::VProjection, self.v_proj.bias.as_slice()));
        out.push((ParamGroup::Temperature, std::slice::from_ref(&self.log_tau)));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<(ParamGroup, &mut [f64])> {
        let mut out = Vec::new();
        for l in &mut self.u {
            out.push((ParamGroup::U, l.weight.data_mut()));
            out.push((ParamGroup::U, l.bias.as_mut_slice()));
        }
        for l in &mut self.v_map {
            out.push((ParamGroup::VMap, l.weight.data_mut()));
            out.push((ParamGroup::VMap, l.bias.as_mut_slice()));
        }
        out.push((ParamGroup::VProjection, self.v_proj.weight.data_mut()));
        out.push((ParamGroup::VProjection, self.v_proj.bias.as_mut_slice()));
        out.push((ParamGroup::Temperature, std::slice::from_mut(&mut self.log_tau)));
        out
    }
}

/// Zeroes the gradients of every group the lock mode freezes.
pub fn apply_lock(mode: LockMode, mut grads: Gradients) -> Gradients {
    if !mode.u_trainable() {
        grads.u.iter_mut().for_each(LinearGrads::zero);
    }
    if !mode.v_map_trainable() {
        grads.v_map.iter_mut().for_each(LinearGrads::zero);
    }
    if !mode.v_projection_trainable() {
        grads.v_proj.zero();
    }
    grads
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    U,
    VMap,
    VProjection,
    Temperature,
}

/// One parameter tensor as seen by the optimizer.
pub struct ParamSlot<'a> {
    pub group: ParamGroup,
    pub data: &'a mut [f64],
    /// Whether decoupled weight decay applies (weights yes; biases and τ no).
    pub decay: bool,
}

/// Layer widths for both towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub u_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
    pub teacher_hidden: Vec<usize>,
    /// Width of the frozen map's output, i.e. the projection's input.
    pub teacher_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            u_hidden: vec![64],
            embed_dim: 16,
            activation: Activation::Tanh,
            teacher_hidden: vec![32],
            teacher_dim: 16,
        }
    }
}

/// Both towers, the temperature, and the lock mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub u: MlpParams,
    pub teacher: TeacherEncoder,
    pub tau: Temperature,
    pub lock: LockMode,
}

impl EncoderStack {
    /// The frozen map depends only on `teacher_seed` (the data seed); the
    /// trainable parts depend on `train_seed`.
    pub fn init(
        cfg: &EncoderConfig,
        u_in: usize,
        v_in: usize,
        tau: Temperature,
        lock: LockMode,
        teacher_seed: u64,
        train_seed: u64,
    ) -> Result<Self> {
        if cfg.embed_dim == 0 || cfg.teacher_dim == 0 {
            return Err(CwclError::invalid("embedding widths must be positive"));
        }
        let mut u_dims = vec![u_in];
        u_dims.extend(&cfg.u_hidden);
        u_dims.push(cfg.embed_dim);
        let mut u_rng = Rng::derive(train_seed, "encoder-u");
        let u = MlpParams::init(&u_dims, cfg.activation, true, &mut u_rng)?;

        let mut t_dims = vec![v_in];
        t_dims.extend(&cfg.teacher_hidden);
        t_dims.push(cfg.teacher_dim);
        let mut t_rng = Rng::derive(teacher_seed, "teacher-frozen");
        let frozen = MlpParams::init(&t_dims, Activation::Tanh, true, &mut t_rng)?;
        let mut p_rng = Rng::derive(train_seed, "teacher-projection");
        let projection = Linear::glorot(cfg.teacher_dim, cfg.embed_dim, &mut p_rng);

        Ok(Self {
            u,
            teacher: TeacherEncoder::new(frozen, projection)?,
            tau,
            lock,
        })
    }

    /// Every parameter tensor in a fixed order matching
    /// [`Gradients::slices`].
    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mut out = Vec::new();
        for l in &mut self.u.layers {
            push_layer(&mut out, ParamGroup::U, l);
        }
        for l in &mut self.teacher.frozen.layers {
            push_layer(&mut out, ParamGroup::VMap, l);
        }
        push_layer(&mut out, ParamGroup::VProjection, &mut self.teacher.projection);
        out.push(ParamSlot {
            group: ParamGroup::Temperature,
            data: std::slice::from_mut(self.tau.log_tau_mut()),
            decay: false,
        });
        out
    }

    /// Whether the optimizer may touch a group under this stack's lock mode.
    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::U => self.lock.u_trainable(),
            ParamGroup::VMap => self.lock.v_map_trainable(),
            ParamGroup::VProjection => self.lock.v_projection_trainable(),
            ParamGroup::Temperature => self.tau.is_learnable(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let u = save_mlp(dir, "u", &self.u)?;
        let frozen = save_mlp(dir, "v_frozen", &self.teacher.frozen)?;
        let projection = save_linear(dir, "v_projection", &self.teacher.projection)?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            u,
            v_frozen: frozen,
            v_projection: projection,
            lock: self.lock,
            tau: self.tau.tau(),
            log_tau: self.tau.log_tau(),
            tau_learnable: self.tau.is_learnable(),
        };
        fs::write(
            dir.join("checkpoint.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("checkpoint.json"))?;
        let m: CheckpointManifest = serde_json::from_str(&text)?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(CwclError::Format(format!("unknown checkpoint format {}", m.format)));
        }
        let u = load_mlp(dir, &m.u)?;
        let frozen = load_mlp(dir, &m.v_frozen)?;
        let projection = load_linear(dir, &m.v_projection)?;
        let mut tau = Temperature::new(1.0, m.tau_learnable)?;
        *tau.log_tau_mut() = m.log_tau;
        Ok(Self {
            u,
            teacher: TeacherEncoder::new(frozen, projection)?,
            tau,
            lock: m.lock,
        })
    }
}

fn push_layer<'a>(out: &mut Vec<ParamSlot<'a>>, group: ParamGroup, l: &'a mut Linear) {
    let Linear { weight, bias } = l;
    out.push(ParamSlot {
        group,
        data: weight.data_mut(),
        decay: true,
    });
    out.push(ParamSlot {
        group,
        data: bias.as_mut_slice(),
        decay: false,
    });
}

const CHECKPOINT_FORMAT: &str = "cwcl-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    u: MlpManifest,
    v_frozen: MlpManifest,
    v_projection: LayerManifest,
    lock: LockMode,
    tau: f64,
    /// Authoritative; `tau` is informational.
    log_tau: f64,
    tau_learnable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpManifest {
    activation: Activation,
    normalize: bool,
    layers: Vec<LayerManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerManifest {
    in_dim: usize,
    out_dim: usize,
    weight: String,
    bias: String,
}

fn save_linear(dir: &Path, name: &str, l: &Linear) -> Result<LayerManifest> {
    let weight = format!("{name}.weight.cwt");
    let bias = format!("{name}.bias.cwt");
    write_tensor_file(&dir.join(&weight), &l.weight)?;
    write_tensor_file(&dir.join(&bias), &Matrix::from_vec(1, l.bias.len(), l.bias.clone())?)?;
    Ok(LayerManifest {
        in_dim: l.in_dim(),
        out_dim: l.out_dim(),
        weight,
        bias,
    })
}

fn load_linear(dir: &Path, m: &LayerManifest) -> Result<Linear> {
    let weight = read_tensor_file(&dir.join(&m.weight))?;
    let bias = read_tensor_file(&dir.join(&m.bias))?;
    if weight.shape() != (m.in_dim, m.out_dim) || bias.shape() != (1, m.out_dim) {
        return Err(CwclError::Format(format!("layer {} has unexpected shape", m.weight)));
    }
    Ok(Linear {
        weight,
        bias: bias.into_data(),
    })
}

fn save_mlp(dir: &Path, name: &str, mlp: &MlpParams) -> Result<MlpManifest> {
    let layers = mlp
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| save_linear(dir, &format!("{name}.{i}"), l))
        .collect::<Result<_>>()?;
    Ok(MlpManifest {
        activation: mlp.activation,
        normalize: mlp.normalize,
        layers,
    })
}

fn load_mlp(dir: &Path, m: &MlpManifest) -> Result<MlpParams> {
    let layers = m
        .layers
        .iter()
        .map(|l| load_linear(dir, l))
        .collect::<Result<_>>()?;
    MlpParams::new(layers, m.activation, m.normalize)
}
