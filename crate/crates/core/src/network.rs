//! Small feed-forward models: dense, batch-norm, layer-norm and learnable
//! activation layers with named parameter groups.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use thiserror::Error;

use crate::activation::{actta_on_tape, make_act_params, ActParams, ActShape, BaseActivation, Granularity};
use crate::tensor::{Tape, Tensor, TensorError, Var, VjpRule};

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer {layer}: expected input width {expected}, got {got}")]
    WidthMismatch { layer: usize, expected: usize, got: usize },
    #[error("layer {layer}: batch normalization needs at least two samples in batch mode")]
    DegenerateBatch { layer: usize },
    #[error("parameter-group selection is empty")]
    EmptySelection,
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("model has no parameters in group `{0}`")]
    MissingGroup(ParamGroup),
    #[error("depth ratio must lie in [0, 1], got {0}")]
    InvalidDepthRatio(f64),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Named sets of parameters that adaptation can switch on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Normalization scale and shift (γ, β).
    Affine,
    LambdaPos,
    LambdaNeg,
    #[serde(rename = "c")]
    Center,
    /// Dense weights and biases.
    Weights,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        Self::Affine,
        Self::LambdaPos,
        Self::LambdaNeg,
        Self::Center,
        Self::Weights,
    ];

    pub fn is_activation(self) -> bool {
        matches!(self, Self::LambdaPos | Self::LambdaNeg | Self::Center)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Affine => "affine",
            Self::LambdaPos => "lambda_pos",
            Self::LambdaNeg => "lambda_neg",
            Self::Center => "c",
            Self::Weights => "weights",
        }
    }

    /// Default learning-rate multiplier: activation groups run ten times
    /// faster than the base rate.
    pub fn default_lr_multiplier(self) -> f64 {
        if self.is_activation() {
            10.0
        } else {
            1.0
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| NetworkError::UnknownGroup(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroupSelection {
    pub groups: BTreeSet<ParamGroup>,
    #[serde(default)]
    pub lr_multipliers: BTreeMap<ParamGroup, f64>,
}

impl ParamGroupSelection {
    pub fn new(groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        Self {
            groups: groups.into_iter().collect(),
            lr_multipliers: BTreeMap::new(),
        }
    }

    /// Normalization affine only (the entropy-minimization baseline).
    pub fn affine() -> Self {
        Self::new([ParamGroup::Affine])
    }

    /// Affine plus all activation parameters.
    pub fn actta() -> Self {
        Self::new([
            ParamGroup::Affine,
            ParamGroup::LambdaPos,
            ParamGroup::LambdaNeg,
            ParamGroup::Center,
        ])
    }

    /// Activation parameters only, normalization affine frozen.
    pub fn actta_star() -> Self {
        Self::new([ParamGroup::LambdaPos, ParamGroup::LambdaNeg, ParamGroup::Center])
    }

    pub fn with_multiplier(mut self, group: ParamGroup, m: f64) -> Self {
        self.lr_multipliers.insert(group, m);
        self
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        self.groups.contains(&g)
    }

    pub fn lr_multiplier(&self, g: ParamGroup) -> f64 {
        self.lr_multipliers
            .get(&g)
            .copied()
            .unwrap_or_else(|| g.default_lr_multiplier())
    }

    /// Parses `affine`, `actta`, `actta_star` or `custom=g1,g2,...`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "affine" | "tent" => Ok(Self::affine()),
            "actta" => Ok(Self::actta()),
            "actta_star" => Ok(Self::actta_star()),
            other => {
                let list = other
                    .strip_prefix("custom=")
                    .ok_or_else(|| NetworkError::UnknownGroup(other.to_string()))?;
                let groups = list
                    .split(',')
                    .filter(|g| !g.is_empty())
                    .map(str::parse)
                    .collect::<Result<BTreeSet<_>>>()?;
                Ok(Self {
                    groups,
                    lr_multipliers: BTreeMap::new(),
                })
            }
        }
    }

    /// Short label such as `lambda_pos+lambda_neg+c`.
    pub fn label(&self) -> String {
        self.groups.iter().map(|g| g.name()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamField {
    Weight,
    Bias,
    Gamma,
    Beta,
    LambdaPos,
    LambdaNeg,
    Center,
}

impl ParamField {
    pub fn group(self) -> ParamGroup {
        match self {
            Self::Weight | Self::Bias => ParamGroup::Weights,
            Self::Gamma | Self::Beta => ParamGroup::Affine,
            Self::LambdaPos => ParamGroup::LambdaPos,
            Self::LambdaNeg => ParamGroup::LambdaNeg,
            Self::Center => ParamGroup::Center,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub field: ParamField,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
    None,
}

/// Architecture of one layer; the model derives parameter storage from it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    BatchNorm { width: usize },
    LayerNorm { width: usize },
    Activation { shape: ActShape, base: BaseActivation, granularity: Granularity },
}

impl LayerSpec {
    fn widths(&self) -> (usize, usize) {
        match *self {
            Self::Dense { inputs, outputs } => (inputs, outputs),
            Self::BatchNorm { width } | Self::LayerNorm { width } => (width, width),
            Self::Activation { shape, .. } => (shape.width(), shape.width()),
        }
    }
}

/// Hidden stack `[Dense → Norm → Activation] × hidden_layers → Dense`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArch {
    pub input_dims: usize,
    pub classes: usize,
    #[serde(default = "MlpArch::default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "MlpArch::default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "MlpArch::default_norm")]
    pub norm: NormKind,
    #[serde(default = "MlpArch::default_base")]
    pub base: BaseActivation,
    #[serde(default = "MlpArch::default_granularity")]
    pub granularity: Granularity,
    /// Features per channel inside each activation; 1 makes every hidden
    /// unit its own channel.
    #[serde(default = "MlpArch::default_positions")]
    pub positions: usize,
    #[serde(default = "MlpArch::default_depth_ratio")]
    pub depth_ratio: f64,
}

impl MlpArch {
    fn default_hidden_width() -> usize {
        64
    }
    fn default_hidden_layers() -> usize {
        3
    }
    fn default_norm() -> NormKind {
        NormKind::Batch
    }
    fn default_base() -> BaseActivation {
        BaseActivation::Relu
    }
    fn default_granularity() -> Granularity {
        Granularity::PerChannel
    }
    fn default_positions() -> usize {
        1
    }
    fn default_depth_ratio() -> f64 {
        1.0
    }

    /// The reference architecture for the given input and class counts.
    pub fn reference(input_dims: usize, classes: usize) -> Self {
        Self {
            input_dims,
            classes,
            hidden_width: 64,
            hidden_layers: 3,
            norm: NormKind::Batch,
            base: BaseActivation::Relu,
            granularity: Granularity::PerChannel,
            positions: 1,
            depth_ratio: 1.0,
        }
    }

    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        if self.positions == 0 || self.hidden_width % self.positions != 0 {
            return Err(NetworkError::ArchitectureMismatch(format!(
                "hidden width {} is not a multiple of positions {}",
                self.hidden_width, self.positions
            )));
        }
        let shape = ActShape {
            channels: self.hidden_width / self.positions,
            positions: self.positions,
        };
        let mut specs = Vec::new();
        let mut prev = self.input_dims;
        for _ in 0..self.hidden_layers {
            specs.push(LayerSpec::Dense {
                inputs: prev,
                outputs: self.hidden_width,
            });
            match self.norm {
                NormKind::Batch => specs.push(LayerSpec::BatchNorm { width: self.hidden_width }),
                NormKind::Layer => specs.push(LayerSpec::LayerNorm { width: self.hidden_width }),
                NormKind::None => {}
            }
            specs.push(LayerSpec::Activation {
                shape,
                base: self.base,
                granularity: self.granularity,
            });
            prev = self.hidden_width;
        }
        specs.push(LayerSpec::Dense {
            inputs: prev,
            outputs: self.classes,
        });
        Ok(specs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[inputs × outputs]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Batch-normalization state: affine parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl NormState {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            eps: NORM_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(Dense),
    BatchNorm(NormState),
    LayerNorm(LayerNormState),
    Activation(ActParams),
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Self::Dense(d) => LayerSpec::Dense {
                inputs: d.inputs,
                outputs: d.outputs,
            },
            Self::BatchNorm(n) => LayerSpec::BatchNorm { width: n.gamma.len() },
            Self::LayerNorm(n) => LayerSpec::LayerNorm { width: n.gamma.len() },
            Self::Activation(p) => LayerSpec::Activation {
                shape: p.shape,
                base: p.base,
                granularity: p.granularity,
            },
        }
    }

    fn fields(&self) -> &'static [ParamField] {
        match self {
            Self::Dense(_) => &[ParamField::Weight, ParamField::Bias],
            Self::BatchNorm(_) | Self::LayerNorm(_) => &[ParamField::Gamma, ParamField::Beta],
            Self::Activation(_) => &[ParamField::LambdaPos, ParamField::LambdaNeg, ParamField::Center],
        }
    }
}

/// Which statistics batch normalization uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Current-batch statistics (training and adaptation).
    Batch,
    /// Stored running statistics (evaluation).
    Running,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub params: Vec<(ParamId, Var)>,
    /// `(layer, batch mean, unbiased batch variance)` per batch-norm layer
    /// run in [`NormMode::Batch`].
    pub batch_stats: Vec<(usize, Vec<f64>, Vec<f64>)>,
    /// `(layer, activation input)` per activation layer.
    pub activation_inputs: Vec<(usize, Var)>,
}

/// Deep copy of every parameter and running statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    layers: Vec<Layer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    depth_ratio: f64,
    selection: Option<ParamGroupSelection>,
}

impl Model {
    /// Builds a randomly initialized model. Dense weights and biases are
    /// drawn from `U(−1/√fan_in, 1/√fan_in)`; activations start at identity.
    pub fn new(specs: &[LayerSpec], depth_ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&depth_ratio) {
            return Err(NetworkError::InvalidDepthRatio(depth_ratio));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut prev: Option<usize> = None;
        for (i, spec) in specs.iter().enumerate() {
            let (inp, out) = spec.widths();
            if inp == 0 || out == 0 {
                return Err(NetworkError::ArchitectureMismatch(format!("layer {i} has zero width")));
            }
            if let Some(p) = prev {
                if p != inp {
                    return Err(NetworkError::WidthMismatch {
                        layer: i,
                        expected: p,
                        got: inp,
                    });
                }
            }
            prev = Some(out);
            layers.push(match *spec {
                LayerSpec::Dense { inputs, outputs } => {
                    let bound = 1.0 / (inputs as f64).sqrt();
                    let weight = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
                    let bias = (0..outputs).map(|_| rng.random_range(-bound..bound)).collect();
                    Layer::Dense(Dense {
                        inputs,
                        outputs,
                        weight,
                        bias,
                    })
                }
                LayerSpec::BatchNorm { width } => Layer::BatchNorm(NormState::new(width)),
                LayerSpec::LayerNorm { width } => Layer::LayerNorm(LayerNormState {
                    gamma: vec![1.0; width],
                    beta: vec![0.0; width],
                    eps: NORM_EPS,
                }),
                LayerSpec::Activation { shape, base, granularity } => {
                    Layer::Activation(make_act_params(shape, granularity, base)?)
                }
            });
        }
        if layers.is_empty() {
            return Err(NetworkError::ArchitectureMismatch("model has no layers".into()));
        }
        Ok(Self {
            layers,
            depth_ratio,
            selection: None,
        })
    }

    pub fn from_arch(arch: &MlpArch, seed: u64) -> Result<Self> {
        Self::new(&arch.layer_specs()?, arch.depth_ratio, seed)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].spec().widths().0
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].spec().widths().1
    }

    /// Layer indices of activation layers, input side first.
    pub fn activation_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Activation(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn depth_ratio(&self) -> f64 {
        self.depth_ratio
    }

    /// Number of activation layers, counted from the input, whose
    /// parameters may train: `ceil(depth_ratio × count)`.
    pub fn adaptable_activation_count(&self) -> usize {
        let n = self.activation_layers().len();
        // Guard against 2/3·3 landing a hair above 2.
        let k = (self.depth_ratio * n as f64 - 1e-9).ceil().max(0.0) as usize;
        k.min(n)
    }

    pub fn set_depth_ratio(&mut self, ratio: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(NetworkError::InvalidDepthRatio(ratio));
        }
        self.depth_ratio = ratio;
        self.sync_activation_flags();
        Ok(())
    }

    /// Rebuilds every activation at identity with a new sharing level.
    pub fn set_granularity(&mut self, granularity: Granularity) -> Result<()> {
        for layer in &mut self.layers {
            if let Layer::Activation(p) = layer {
                *p = make_act_params(p.shape, granularity, p.base)?;
            }
        }
        self.sync_activation_flags();
        Ok(())
    }

    /// Total number of activation parameters (three arrays per layer).
    pub fn activation_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Activation(p) => 3 * p.param_len(),
                _ => 0,
            })
            .sum()
    }

    pub fn selection(&self) -> Option<&ParamGroupSelection> {
        self.selection.as_ref()
    }

    /// Marks exactly the selected groups trainable; everything else frozen.
    pub fn set_trainable(&mut self, selection: &ParamGroupSelection) -> Result<()> {
        if selection.groups.is_empty() {
            return Err(NetworkError::EmptySelection);
        }
        for &g in &selection.groups {
            let present = self
                .layers
                .iter()
                .any(|l| l.fields().iter().any(|f| f.group() == g));
            if !present {
                return Err(NetworkError::MissingGroup(g));
            }
        }
        self.selection = Some(selection.clone());
        self.sync_activation_flags();
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.selection = None;
        self.sync_activation_flags();
    }

    fn sync_activation_flags(&mut self) {
        let ids: Vec<(usize, [bool; 3])> = self
            .activation_layers()
            .into_iter()
            .map(|layer| {
                let t = |field| self.is_trainable(ParamId { layer, field });
                (
                    layer,
                    [t(ParamField::LambdaPos), t(ParamField::LambdaNeg), t(ParamField::Center)],
                )
            })
            .collect();
        for (layer, [lp, ln, c]) in ids {
            if let Layer::Activation(p) = &mut self.layers[layer] {
                p.trainable.lambda_pos = lp;
                p.trainable.lambda_neg = ln;
                p.trainable.c = c;
            }
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        let Some(sel) = &self.selection else { return false };
        if !sel.contains(id.field.group()) {
            return false;
        }
        if id.field.group().is_activation() {
            let ordinal = self.activation_layers().iter().position(|&l| l == id.layer);
            return ordinal.is_some_and(|o| o < self.adaptable_activation_count());
        }
        true
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(layer, l)| l.fields().iter().map(move |&field| ParamId { layer, field }))
            .collect()
    }

    pub fn trainable_param_ids(&self) -> Vec<ParamId> {
        self.param_ids().into_iter().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn param(&self, id: ParamId) -> &[f64] {
        match (&self.layers[id.layer], id.field) {
            (Layer::Dense(d), ParamField::Weight) => &d.weight,
            (Layer::Dense(d), ParamField::Bias) => &d.bias,
            (Layer::BatchNorm(n), ParamField::Gamma) => &n.gamma,
            (Layer::BatchNorm(n), ParamField::Beta) => &n.beta,
            (Layer::LayerNorm(n), ParamField::Gamma) => &n.gamma,
            (Layer::LayerNorm(n), ParamField::Beta) => &n.beta,
            (Layer::Activation(p), ParamField::LambdaPos) => &p.lambda_pos,
            (Layer::Activation(p), ParamField::LambdaNeg) => &p.lambda_neg,
            (Layer::Activation(p), ParamField::Center) => &p.c,
            (_, f) => panic!("layer {} has no field {f:?}", id.layer),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut [f64] {
        match (&mut self.layers[id.layer], id.field) {
            (Layer::Dense(d), ParamField::Weight) => &mut d.weight,
            (Layer::Dense(d), ParamField::Bias) => &mut d.bias,
            (Layer::BatchNorm(n), ParamField::Gamma) => &mut n.gamma,
            (Layer::BatchNorm(n), ParamField::Beta) => &mut n.beta,
            (Layer::LayerNorm(n), ParamField::Gamma) => &mut n.gamma,
            (Layer::LayerNorm(n), ParamField::Beta) => &mut n.beta,
            (Layer::Activation(p), ParamField::LambdaPos) => &mut p.lambda_pos,
            (Layer::Activation(p), ParamField::LambdaNeg) => &mut p.lambda_neg,
            (Layer::Activation(p), ParamField::Center) => &mut p.c,
            (_, f) => panic!("layer {} has no field {f:?}", id.layer),
        }
    }

    /// Records a forward pass of `x [batch × features]` on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, mode: NormMode) -> Result<ForwardPass> {
        if x.shape().len() != 2 || x.cols() != self.input_width() {
            return Err(NetworkError::WidthMismatch {
                layer: 0,
                expected: self.input_width(),
                got: x.cols(),
            });
        }
        let batch = x.rows();
        let mut h = tape.leaf(x);
        let mut pass = ForwardPass {
            logits: h,
            params: Vec::new(),
            batch_stats: Vec::new(),
            activation_inputs: Vec::new(),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let mut leaf = |tape: &mut Tape, field: ParamField, data: &[f64], shape: Vec<usize>| {
                let id = ParamId { layer: i, field };
                let t = Tensor::new(shape, data.to_vec())
                    .expect("parameter shape")
                    .with_requires_grad(self.is_trainable(id));
                let v = tape.leaf(&t);
                pass.params.push((id, v));
                v
            };
            h = match layer {
                Layer::Dense(d) => {
                    let w = leaf(tape, ParamField::Weight, &d.weight, vec![d.inputs, d.outputs]);
                    let b = leaf(tape, ParamField::Bias, &d.bias, vec![d.outputs]);
                    let z = tape.matmul(h, w)?;
                    tape.add_row(z, b)?
                }
                Layer::BatchNorm(n) => {
                    let g = leaf(tape, ParamField::Gamma, &n.gamma, vec![n.gamma.len()]);
                    let b = leaf(tape, ParamField::Beta, &n.beta, vec![n.beta.len()]);
                    match mode {
                        NormMode::Batch => {
                            if batch < 2 {
                                return Err(NetworkError::DegenerateBatch { layer: i });
                            }
                            let (out, mean, var) = norm_on_tape(tape, h, g, b, n.eps, NormAxis::Batch)?;
                            let unbiased = var.iter().map(|v| v * batch as f64 / (batch - 1) as f64).collect();
                            pass.batch_stats.push((i, mean, unbiased));
                            out
                        }
                        NormMode::Running => {
                            let axis = NormAxis::Frozen {
                                mean: n.running_mean.clone(),
                                var: n.running_var.clone(),
                            };
                            norm_on_tape(tape, h, g, b, n.eps, axis)?.0
                        }
                    }
                }
                Layer::LayerNorm(n) => {
                    let g = leaf(tape, ParamField::Gamma, &n.gamma, vec![n.gamma.len()]);
                    let b = leaf(tape, ParamField::Beta, &n.beta, vec![n.beta.len()]);
                    norm_on_tape(tape, h, g, b, n.eps, NormAxis::Row)?.0
                }
                Layer::Activation(p) => {
                    let vars = actta_on_tape(tape, h, p)?;
                    for (field, v) in [
                        (ParamField::LambdaPos, vars.lambda_pos),
                        (ParamField::LambdaNeg, vars.lambda_neg),
                        (ParamField::Center, vars.c),
                    ] {
                        pass.params.push((ParamId { layer: i, field }, v));
                    }
                    pass.activation_inputs.push((i, h));
                    vars.output
                }
            };
        }
        pass.logits = h;
        Ok(pass)
    }

    /// Logits without gradient bookkeeping.
    pub fn logits(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, x, mode)?;
        Ok(tape.tensor(pass.logits))
    }

    pub fn predict(&self, x: &Tensor, mode: NormMode) -> Result<Vec<usize>> {
        let logits = self.logits(x, mode)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Folds the batch statistics of a [`NormMode::Batch`] pass into the
    /// running estimates.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        for (layer, mean, var) in &pass.batch_stats {
            if let Layer::BatchNorm(n) = &mut self.layers[*layer] {
                let m = n.momentum;
                for j in 0..mean.len() {
                    n.running_mean[j] = (1.0 - m) * n.running_mean[j] + m * mean[j];
                    n.running_var[j] = (1.0 - m) * n.running_var[j] + m * var[j];
                }
            }
        }
    }

    pub fn snapshot(&self) -> ModelState {
        ModelState {
            layers: self.layers.clone(),
        }
    }

    pub fn restore(&mut self, state: &ModelState) -> Result<()> {
        let ours = self.layer_specs();
        let theirs: Vec<LayerSpec> = state.layers.iter().map(Layer::spec).collect();
        if ours != theirs {
            return Err(NetworkError::ArchitectureMismatch(format!(
                "snapshot has {} layers {:?}, model has {:?}",
                theirs.len(),
                theirs,
                ours
            )));
        }
        self.layers = state.layers.clone();
        self.sync_activation_flags();
        Ok(())
    }

    pub fn save_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&checkpoint::encode(self))?;
        Ok(())
    }

    pub fn load_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        checkpoint::decode(&bytes)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

enum NormAxis {
    /// Statistics over the batch, per feature.
    Batch,
    /// Statistics over features, per sample.
    Row,
    /// Fixed statistics per feature.
    Frozen { mean: Vec<f64>, var: Vec<f64> },
}

struct NormRule {
    rows: usize,
    cols: usize,
    xhat: Vec<f64>,
    /// 1/√(var+eps), per feature for batch/frozen axes, per row for rows.
    inv: Vec<f64>,
    gamma: Vec<f64>,
    kind: u8,
}

const NORM_BATCH: u8 = 0;
const NORM_ROW: u8 = 1;
const NORM_FROZEN: u8 = 2;

impl VjpRule for NormRule {
    fn vjp(&self, g: &[f64], wants: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (n, w) = (self.rows, self.cols);
        let mut dgamma = vec![0.0; w];
        let mut dbeta = vec![0.0; w];
        for i in 0..n {
            for j in 0..w {
                let k = i * w + j;
                dgamma[j] += g[k] * self.xhat[k];
                dbeta[j] += g[k];
            }
        }
        let dx = wants[0].then(|| {
            let mut dx = vec![0.0; n * w];
            match self.kind {
                NORM_BATCH => {
                    let nf = n as f64;
                    for j in 0..w {
                        let scale = self.gamma[j] * self.inv[j] / nf;
                        for i in 0..n {
                            let k = i * w + j;
                            dx[k] = scale * (nf * g[k] - dbeta[j] - self.xhat[k] * dgamma[j]);
                        }
                    }
                }
                NORM_ROW => {
                    let wf = w as f64;
                    for i in 0..n {
                        let row = i * w..(i + 1) * w;
                        let gh: Vec<f64> = g[row.clone()].iter().zip(&self.gamma).map(|(a, b)| a * b).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghx: f64 = gh.iter().zip(&self.xhat[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            let k = i * w + j;
                            dx[k] = self.inv[i] / wf * (wf * gh[j] - sum_gh - self.xhat[k] * sum_ghx);
                        }
                    }
                }
                _ => {
                    for i in 0..n {
                        for j in 0..w {
                            let k = i * w + j;
                            dx[k] = g[k] * self.gamma[j] * self.inv[j];
                        }
                    }
                }
            }
            dx
        });
        vec![dx, wants[1].then_some(dgamma), wants[2].then_some(dbeta)]
    }
}

/// Normalizes `x`, applies `γ·x̂ + β`, and returns the biased variance used.
fn norm_on_tape(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
    axis: NormAxis,
) -> Result<(Var, Vec<f64>, Vec<f64>)> {
    let shape = tape.shape(x).to_vec();
    let (n, w) = (shape[0], shape[1]);
    if tape.value(gamma).len() != w {
        return Err(NetworkError::WidthMismatch {
            layer: 0,
            expected: tape.value(gamma).len(),
            got: w,
        });
    }
    let xs = tape.value(x);
    let (kind, mean, var) = match axis {
        NormAxis::Batch => {
            let mut mean = vec![0.0; w];
            for row in xs.chunks(w) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; w];
            for row in xs.chunks(w) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            (NORM_BATCH, mean, var)
        }
        NormAxis::Row => {
            let mut mean = Vec::with_capacity(n);
            let mut var = Vec::with_capacity(n);
            for row in xs.chunks(w) {
                let m = row.iter().sum::<f64>() / w as f64;
                mean.push(m);
                var.push(row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w as f64);
            }
            (NORM_ROW, mean, var)
        }
        NormAxis::Frozen { mean, var } => (NORM_FROZEN, mean, var),
    };
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (gs, bs) = (tape.value(gamma), tape.value(beta));
    let mut xhat = Vec::with_capacity(n * w);
    let mut out = Vec::with_capacity(n * w);
    for i in 0..n {
        for j in 0..w {
            let stat = if kind == NORM_ROW { i } else { j };
            let xh = (xs[i * w + j] - mean[stat]) * inv[stat];
            xhat.push(xh);
            out.push(gs[j] * xh + bs[j]);
        }
    }
    let rule = NormRule {
        rows: n,
        cols: w,
        xhat,
        inv,
        gamma: gs.to_vec(),
        kind,
    };
    let v = tape.custom(&[x, gamma, beta], shape, out, Box::new(rule))?;
    Ok((v, mean, var))
}

/// Binary checkpoint codec. Layout (all integers u32 LE, floats f64 LE):
///
/// ```text
/// "ACTA" | version=1 | depth_ratio f64 | layer_count
/// layer table, per layer:
///   tag 0 dense       : inputs, outputs
///   tag 1 batch norm  : width
///   tag 2 layer norm  : width
///   tag 3 activation  : channels, positions, base tag, granularity tag, gate beta f64
/// parameters, per layer in table order:
///   dense       : weight[inputs*outputs] (row-major in×out), bias[outputs]
///   batch norm  : gamma, beta, running_mean, running_var, momentum f64, eps f64
///   layer norm  : gamma, beta, eps f64
///   activation  : lambda_pos, lambda_neg, c   (each param_len long)
/// ```
///
/// Base tags: 0 relu, 1 swish, 2 gelu_approx, 3 sigmoid_gate (sharpness is
/// the stored gate beta). Granularity tags: 0 layer, 1 channel, 2 element.
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 4] = b"ACTA";
    pub const VERSION: u32 = 1;

    const TAG_DENSE: u32 = 0;
    const TAG_BATCH_NORM: u32 = 1;
    const TAG_LAYER_NORM: u32 = 2;
    const TAG_ACTIVATION: u32 = 3;

    fn base_tag(b: BaseActivation) -> u32 {
        match b {
            BaseActivation::Relu => 0,
            BaseActivation::Swish => 1,
            BaseActivation::GeluApprox => 2,
            BaseActivation::SigmoidGate(_) => 3,
        }
    }

    fn granularity_tag(g: Granularity) -> u32 {
        match g {
            Granularity::PerLayer => 0,
            Granularity::PerChannel => 1,
            Granularity::PerElement => 2,
        }
    }

    pub fn encode(model: &Model) -> Vec<u8> {
        let mut out = Vec::new();
        let u32s = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        let f64s = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
        let arr = |out: &mut Vec<u8>, a: &[f64]| a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out.extend_from_slice(MAGIC);
        u32s(&mut out, VERSION);
        f64s(&mut out, model.depth_ratio);
        u32s(&mut out, model.layers.len() as u32);
        for layer in &model.layers {
            match layer {
                Layer::Dense(d) => {
                    u32s(&mut out, TAG_DENSE);
                    u32s(&mut out, d.inputs as u32);
                    u32s(&mut out, d.outputs as u32);
                }
                Layer::BatchNorm(n) => {
                    u32s(&mut out, TAG_BATCH_NORM);
                    u32s(&mut out, n.gamma.len() as u32);
                }
                Layer::LayerNorm(n) => {
                    u32s(&mut out, TAG_LAYER_NORM);
                    u32s(&mut out, n.gamma.len() as u32);
                }
                Layer::Activation(p) => {
                    u32s(&mut out, TAG_ACTIVATION);
                    u32s(&mut out, p.shape.channels as u32);
                    u32s(&mut out, p.shape.positions as u32);
                    u32s(&mut out, base_tag(p.base));
                    u32s(&mut out, granularity_tag(p.granularity));
                    f64s(&mut out, p.beta);
                }
            }
        }
        for layer in &model.layers {
            match layer {
                Layer::Dense(d) => {
                    arr(&mut out, &d.weight);
                    arr(&mut out, &d.bias);
                }
                Layer::BatchNorm(n) => {
                    for a in [&n.gamma, &n.beta, &n.running_mean, &n.running_var] {
                        arr(&mut out, a);
                    }
                    f64s(&mut out, n.momentum);
                    f64s(&mut out, n.eps);
                }
                Layer::LayerNorm(n) => {
                    arr(&mut out, &n.gamma);
                    arr(&mut out, &n.beta);
                    f64s(&mut out, n.eps);
                }
                Layer::Activation(p) => {
                    for a in [&p.lambda_pos, &p.lambda_neg, &p.c] {
                        arr(&mut out, a);
                    }
                }
            }
        }
        out
    }

    struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl Reader<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8]> {
            let end = self.pos.checked_add(n).ok_or(NetworkError::Truncated)?;
            let s = self.buf.get(self.pos..end).ok_or(NetworkError::Truncated)?;
            self.pos = end;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn usize(&mut self) -> Result<usize> {
            let v = self.u32()? as usize;
            if v == 0 {
                return Err(NetworkError::Format("zero dimension in layer table".into()));
            }
            Ok(v)
        }
        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
        fn arr(&mut self, n: usize) -> Result<Vec<f64>> {
            let bytes = self.take(n.checked_mul(8).ok_or(NetworkError::Truncated)?)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Model> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).map_err(|_| NetworkError::Format("missing magic".into()))? != MAGIC {
            return Err(NetworkError::Format("bad magic, expected ACTA".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NetworkError::Format(format!("unsupported version {version}")));
        }
        let depth_ratio = r.f64()?;
        let count = r.u32()? as usize;
        let mut specs = Vec::with_capacity(count.min(1024));
        let mut betas = Vec::new();
        for _ in 0..count {
            let spec = match r.u32()? {
                TAG_DENSE => LayerSpec::Dense {
                    inputs: r.usize()?,
                    outputs: r.usize()?,
                },
                TAG_BATCH_NORM => LayerSpec::BatchNorm { width: r.usize()? },
                TAG_LAYER_NORM => LayerSpec::LayerNorm { width: r.usize()? },
                TAG_ACTIVATION => {
                    let shape = ActShape {
                        channels: r.usize()?,
                        positions: r.usize()?,
                    };
                    let base_code = r.u32()?;
                    let gran_code = r.u32()?;
                    let beta = r.f64()?;
                    let base = match base_code {
                        0 => BaseActivation::Relu,
                        1 => BaseActivation::Swish,
                        2 => BaseActivation::GeluApprox,
                        3 if beta > 0.0 && beta.is_finite() => BaseActivation::SigmoidGate(beta),
                        other => return Err(NetworkError::Format(format!("bad base activation tag {other}"))),
                    };
                    let granularity = match gran_code {
                        0 => Granularity::PerLayer,
                        1 => Granularity::PerChannel,
                        2 => Granularity::PerElement,
                        other => return Err(NetworkError::Format(format!("bad granularity tag {other}"))),
                    };
                    betas.push(beta);
                    LayerSpec::Activation { shape, base, granularity }
                }
                other => return Err(NetworkError::Format(format!("unknown layer tag {other}"))),
            };
            specs.push(spec);
        }
        let mut model = Model::new(&specs, depth_ratio, 0)?;
        let mut betas = betas.into_iter();
        for layer in &mut model.layers {
            match layer {
                Layer::Dense(d) => {
                    d.weight = r.arr(d.inputs * d.outputs)?;
                    d.bias = r.arr(d.outputs)?;
                }
                Layer::BatchNorm(n) => {
                    let w = n.gamma.len();
                    n.gamma = r.arr(w)?;
                    n.beta = r.arr(w)?;
                    n.running_mean = r.arr(w)?;
                    n.running_var = r.arr(w)?;
                    n.momentum = r.f64()?;
                    n.eps = r.f64()?;
                    if n.running_var.iter().any(|v| *v < 0.0) || !(n.eps > 0.0) {
                        return Err(NetworkError::Format("invalid batch-norm statistics".into()));
                    }
                }
                Layer::LayerNorm(n) => {
                    let w = n.gamma.len();
                    n.gamma = r.arr(w)?;
                    n.beta = r.arr(w)?;
                    n.eps = r.f64()?;
                }
                Layer::Activation(p) => {
                    let k = p.param_len();
                    p.beta = betas.next().expect("one beta per activation");
                    p.lambda_pos = r.arr(k)?;
                    p.lambda_neg = r.arr(k)?;
                    p.c = r.arr(k)?;
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(NetworkError::Format(format!(
                "{} trailing bytes after parameters",
                bytes.len() - r.pos
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{base_forward, sigmoid};
    use crate::tensor::finite_diff_grad;

    fn small_arch() -> MlpArch {
        MlpArch {
            hidden_width: 6,
            ..MlpArch::reference(4, 3)
        }
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn identity_dense_with_relu() {
        let specs = [
            LayerSpec::Dense { inputs: 2, outputs: 2 },
            LayerSpec::Activation {
                shape: ActShape::flat(2),
                base: BaseActivation::Relu,
                granularity: Granularity::PerChannel,
            },
        ];
        let mut m = Model::new(&specs, 1.0, 0).unwrap();
        if let Layer::Dense(d) = &mut m.layers_mut()[0] {
            d.weight = vec![1.0, 0.0, 0.0, 1.0];
            d.bias = vec![0.0, 0.0];
        }
        let x = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        assert_eq!(m.logits(&x, NormMode::Running).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn batch_norm_zero_variance_feature_outputs_zero() {
        let specs = [LayerSpec::BatchNorm { width: 2 }];
        let m = Model::new(&specs, 1.0, 0).unwrap();
        let x = Tensor::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 6.0]]).unwrap();
        let out = m.logits(&x, NormMode::Batch).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i)[0], 0.0);
        }
    }

    #[test]
    fn batch_norm_rejects_single_sample_in_batch_mode() {
        let m = Model::from_arch(&small_arch(), 1).unwrap();
        let x = random_batch(1, 4, 0);
        assert!(matches!(m.logits(&x, NormMode::Batch), Err(NetworkError::DegenerateBatch { .. })));
        assert!(m.logits(&x, NormMode::Running).is_ok());
        let wrong = random_batch(3, 5, 0);
        assert!(matches!(m.logits(&wrong, NormMode::Running), Err(NetworkError::WidthMismatch { .. })));
    }

    /// Straight-line reimplementation of Dense→BN(batch)→Act×k→Dense.
    fn straight_line(m: &Model, x: &Tensor) -> Vec<f64> {
        let mut h: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
        for layer in m.layers() {
            h = match layer {
                Layer::Dense(d) => h
                    .iter()
                    .map(|row| {
                        (0..d.outputs)
                            .map(|o| d.bias[o] + (0..d.inputs).map(|i| row[i] * d.weight[i * d.outputs + o]).sum::<f64>())
                            .collect()
                    })
                    .collect(),
                Layer::BatchNorm(n) => {
                    let w = n.gamma.len();
                    let cnt = h.len() as f64;
                    let mean: Vec<f64> = (0..w).map(|j| h.iter().map(|r| r[j]).sum::<f64>() / cnt).collect();
                    let var: Vec<f64> = (0..w)
                        .map(|j| h.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / cnt)
                        .collect();
                    h.iter()
                        .map(|r| {
                            (0..w)
                                .map(|j| n.gamma[j] * (r[j] - mean[j]) / (var[j] + n.eps).sqrt() + n.beta[j])
                                .collect()
                        })
                        .collect()
                }
                Layer::Activation(p) => h
                    .iter()
                    .map(|r| {
                        r.iter()
                            .enumerate()
                            .map(|(j, &v)| {
                                let k = p.shape.param_index(p.granularity, j);
                                let u = v - p.c[k];
                                let lam = p.lambda_neg[k] + (p.lambda_pos[k] - p.lambda_neg[k]) * sigmoid(p.beta * u);
                                p.base.value(u) + lam * u
                            })
                            .collect()
                    })
                    .collect(),
                Layer::LayerNorm(_) => unreachable!(),
            };
        }
        h.concat()
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        let arch = MlpArch {
            base: BaseActivation::Swish,
            ..small_arch()
        };
        let mut m = Model::from_arch(&arch, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for id in m.param_ids() {
            for v in m.param_mut(id) {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = random_batch(5, 4, 2);
        let got = m.logits(&x, NormMode::Batch).unwrap();
        for (a, b) in got.data().iter().zip(straight_line(&m, &x)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn identity_wrapped_predictions_match_raw_base() {
        let m = Model::from_arch(&small_arch(), 3).unwrap();
        let x = random_batch(50, 4, 4);
        let wrapped = m.logits(&x, NormMode::Running).unwrap();
        // Raw path: the same stack with plain base functions in place of the wrapper.
        let mut h = x.clone();
        for layer in m.layers() {
            h = match layer {
                Layer::Activation(p) => base_forward(&h, p.base),
                _ => {
                    let single = Model {
                        layers: vec![layer.clone()],
                        depth_ratio: 1.0,
                        selection: None,
                    };
                    single.logits(&h, NormMode::Running).unwrap()
                }
            };
        }
        assert_eq!(wrapped, h);
    }

    #[test]
    fn depth_mask_counts() {
        let mut m = Model::from_arch(&small_arch(), 0).unwrap();
        m.set_trainable(&ParamGroupSelection::actta_star()).unwrap();
        let acts = m.activation_layers();
        for (ratio, want) in [(0.0, 0), (1.0 / 3.0, 1), (0.5, 2), (2.0 / 3.0, 2), (1.0, 3)] {
            m.set_depth_ratio(ratio).unwrap();
            assert_eq!(m.adaptable_activation_count(), want, "ratio {ratio}");
            let trainable: Vec<bool> = acts
                .iter()
                .map(|&layer| m.is_trainable(ParamId { layer, field: ParamField::Center }))
                .collect();
            let expected: Vec<bool> = (0..3).map(|k| k < want).collect();
            assert_eq!(trainable, expected);
        }
        assert!(m.set_depth_ratio(1.5).is_err());
    }

    #[test]
    fn set_trainable_presets() {
        let mut m = Model::from_arch(&small_arch(), 0).unwrap();
        m.set_trainable(&ParamGroupSelection::affine()).unwrap();
        let groups: BTreeSet<ParamGroup> = m.trainable_param_ids().iter().map(|id| id.field.group()).collect();
        assert_eq!(groups, BTreeSet::from([ParamGroup::Affine]));

        m.set_trainable(&ParamGroupSelection::actta_star()).unwrap();
        let groups: BTreeSet<ParamGroup> = m.trainable_param_ids().iter().map(|id| id.field.group()).collect();
        assert_eq!(
            groups,
            BTreeSet::from([ParamGroup::LambdaPos, ParamGroup::LambdaNeg, ParamGroup::Center])
        );
        assert!(matches!(
            m.set_trainable(&ParamGroupSelection::new([])),
            Err(NetworkError::EmptySelection)
        ));
        assert!(matches!(ParamGroupSelection::parse("custom=gamma"), Err(NetworkError::UnknownGroup(_))));
        let custom = ParamGroupSelection::parse("custom=lambda_neg,c").unwrap();
        assert_eq!(custom.label(), "lambda_neg+c");

        let no_norm = MlpArch {
            norm: NormKind::None,
            ..small_arch()
        };
        let mut m = Model::from_arch(&no_norm, 0).unwrap();
        assert!(matches!(
            m.set_trainable(&ParamGroupSelection::affine()),
            Err(NetworkError::MissingGroup(ParamGroup::Affine))
        ));
    }

    #[test]
    fn snapshot_restore_is_bitwise() {
        let mut m = Model::from_arch(&small_arch(), 5).unwrap();
        let x = random_batch(6, 4, 1);
        let before = m.logits(&x, NormMode::Running).unwrap();
        let snap = m.snapshot();
        for id in m.param_ids() {
            m.param_mut(id).iter_mut().for_each(|v| *v += 0.25);
        }
        assert_ne!(m.logits(&x, NormMode::Running).unwrap(), before);
        m.restore(&snap).unwrap();
        assert_eq!(m.logits(&x, NormMode::Running).unwrap(), before);

        let mut other = Model::from_arch(&MlpArch::reference(4, 3), 5).unwrap();
        assert!(matches!(other.restore(&snap), Err(NetworkError::ArchitectureMismatch(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let arch = MlpArch {
            base: BaseActivation::SigmoidGate(3.0),
            granularity: Granularity::PerElement,
            positions: 2,
            ..small_arch()
        };
        let mut m = Model::from_arch(&arch, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for id in m.param_ids() {
            m.param_mut(id).iter_mut().for_each(|v| *v += rng.random_range(-1.0..1.0));
        }
        let mut bytes = Vec::new();
        m.save_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"ACTA");
        let back = Model::load_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Model::load_checkpoint(&bad[..]), Err(NetworkError::Format(_))));
        assert!(matches!(
            Model::load_checkpoint(&bytes[..bytes.len() - 3]),
            Err(NetworkError::Truncated)
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Model::load_checkpoint(&long[..]), Err(NetworkError::Format(_))));
    }

    fn check_model_grads(arch: &MlpArch, mode: NormMode, selection: ParamGroupSelection) {
        let mut m = Model::from_arch(arch, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for id in m.param_ids() {
            if matches!(id.field, ParamField::LambdaPos | ParamField::LambdaNeg | ParamField::Center) {
                m.param_mut(id).iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        m.set_trainable(&selection).unwrap();
        let x = random_batch(5, 4, 23);
        let loss_of = |m: &Model| {
            let mut tape = Tape::new();
            let pass = m.forward(&mut tape, &x, mode).unwrap();
            let sq = tape.mul(pass.logits, pass.logits).unwrap();
            let l = tape.mean(sq);
            (tape, pass, l)
        };
        let (tape, pass, loss) = loss_of(&m);
        let grads = tape.backward(loss).unwrap();
        for &(id, var) in &pass.params {
            if !m.is_trainable(id) {
                assert!(grads.get(var).is_none());
                continue;
            }
            let start = Tensor::vector(m.param(id).to_vec());
            let fd = finite_diff_grad(
                |t| {
                    let mut probe = m.clone();
                    probe.param_mut(id).copy_from_slice(t.data());
                    let (tp, _, l) = loss_of(&probe);
                    tp.value(l)[0]
                },
                &start,
                1e-5,
            )
            .unwrap();
            for (a, n) in grads.get(var).unwrap().iter().zip(fd.data()) {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(err < 1e-5, "{id:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let all = ParamGroupSelection::new(ParamGroup::ALL);
        let swish = MlpArch {
            base: BaseActivation::Swish,
            ..small_arch()
        };
        check_model_grads(&swish, NormMode::Batch, all.clone());
        check_model_grads(&swish, NormMode::Running, all.clone());
        let ln = MlpArch {
            norm: NormKind::Layer,
            base: BaseActivation::GeluApprox,
            granularity: Granularity::PerLayer,
            ..small_arch()
        };
        check_model_grads(&ln, NormMode::Batch, all);
    }

    #[test]
    fn eval_mode_is_per_sample() {
        let mut m = Model::from_arch(&small_arch(), 2).unwrap();
        if let Layer::BatchNorm(n) = &mut m.layers_mut()[1] {
            n.running_mean.iter_mut().for_each(|v| *v = 0.3);
            n.running_var.iter_mut().for_each(|v| *v = 2.0);
        }
        let a = random_batch(4, 4, 10);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|i| random_batch(1, 4, 20 + i).data().to_vec()).collect();
        rows[2] = a.row(1).to_vec();
        let b = Tensor::from_rows(&rows).unwrap();
        let la = m.logits(&a, NormMode::Running).unwrap();
        let lb = m.logits(&b, NormMode::Running).unwrap();
        assert_eq!(la.row(1), lb.row(2));
    }

    #[test]
    fn running_stats_update() {
        let mut m = Model::new(&[LayerSpec::BatchNorm { width: 1 }], 1.0, 0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let mut tape = Tape::new();
        let pass = m.forward(&mut tape, &x, NormMode::Batch).unwrap();
        m.update_running_stats(&pass);
        let Layer::BatchNorm(n) = &m.layers()[0] else { unreachable!() };
        assert!((n.running_mean[0] - 0.2).abs() < 1e-15);
        // unbiased variance of {1, 3} is 2
        assert!((n.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }
}
