//! Self-gated base activations and the shift-aware learnable reparameterization
//!
//! ```text
//! g(x) = φ(x − c) + λ(x − c)·(x − c)
//! λ(u) = λ_neg + (λ_pos − λ_neg)·σ(βu)
//! ```
//!
//! `φ` is a base activation written as `x·σ(βx)` (ReLU is the exact piecewise
//! limit). With `λ_pos = λ_neg = c = 0` the wrapper is the base activation
//! itself, so a pretrained network is unchanged until adaptation moves the
//! parameters. Far from the center the slope of `g` tends to `λ_neg` on the
//! left and `1 + λ_pos` on the right.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::tensor::{Result, Tape, Tensor, TensorError, Var, VjpRule};

/// Gate sharpness used for the slope interpolation when the base is ReLU.
pub const RELU_GATE_BETA: f64 = 10.0;
/// Sigmoid-gate approximation of GELU.
pub const GELU_APPROX_BETA: f64 = 1.702;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseActivation {
    Relu,
    Swish,
    GeluApprox,
    /// `x·σ(βx)` with an arbitrary positive sharpness.
    SigmoidGate(f64),
}

impl BaseActivation {
    /// Sharpness of the sigmoid gate. For ReLU this is only used by the slope
    /// function; the base term stays exactly piecewise linear.
    pub fn gate_beta(self) -> f64 {
        match self {
            Self::Relu => RELU_GATE_BETA,
            Self::Swish => 1.0,
            Self::GeluApprox => GELU_APPROX_BETA,
            Self::SigmoidGate(b) => b,
        }
    }

    pub fn value(self, x: f64) -> f64 {
        match self {
            Self::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            _ => x * sigmoid(self.gate_beta() * x),
        }
    }

    /// ReLU's derivative at exactly 0 is taken to be 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            _ => {
                let b = self.gate_beta();
                let s = sigmoid(b * x);
                s + b * x * s * (1.0 - s)
            }
        }
    }
}

impl fmt::Display for BaseActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Relu => f.write_str("relu"),
            Self::Swish => f.write_str("swish"),
            Self::GeluApprox => f.write_str("gelu"),
            Self::SigmoidGate(b) => write!(f, "sigmoid_gate:{b}"),
        }
    }
}

impl FromStr for BaseActivation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Self::Relu),
            "swish" | "silu" => Ok(Self::Swish),
            "gelu" | "gelu_approx" => Ok(Self::GeluApprox),
            other => {
                let beta = other
                    .strip_prefix("sigmoid_gate:")
                    .and_then(|b| b.parse::<f64>().ok())
                    .ok_or_else(|| format!("unknown base activation `{other}`"))?;
                if beta > 0.0 && beta.is_finite() {
                    Ok(Self::SigmoidGate(beta))
                } else {
                    Err(format!("gate sharpness must be positive, got {beta}"))
                }
            }
        }
    }
}

/// How activation parameters are shared within one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[serde(rename = "layer")]
    PerLayer,
    #[serde(rename = "channel")]
    PerChannel,
    #[serde(rename = "element")]
    PerElement,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerLayer => "layer",
            Self::PerChannel => "channel",
            Self::PerElement => "element",
        })
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "layer" => Ok(Self::PerLayer),
            "channel" => Ok(Self::PerChannel),
            "element" => Ok(Self::PerElement),
            other => Err(format!("unknown granularity `{other}` (layer, channel, element)")),
        }
    }
}

/// Per-sample layout of an activation's input: `channels` groups of
/// `positions` consecutive features, channel-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActShape {
    pub channels: usize,
    pub positions: usize,
}

impl ActShape {
    pub fn flat(width: usize) -> Self {
        Self {
            channels: width,
            positions: 1,
        }
    }

    pub fn width(self) -> usize {
        self.channels * self.positions
    }

    pub fn param_len(self, granularity: Granularity) -> usize {
        match granularity {
            Granularity::PerLayer => 1,
            Granularity::PerChannel => self.channels,
            Granularity::PerElement => self.width(),
        }
    }

    /// Parameter slot used by feature `j` of a sample.
    pub fn param_index(self, granularity: Granularity, j: usize) -> usize {
        match granularity {
            Granularity::PerLayer => 0,
            Granularity::PerChannel => j / self.positions,
            Granularity::PerElement => j,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActTrainable {
    pub lambda_pos: bool,
    pub lambda_neg: bool,
    pub c: bool,
}

/// Learnable state of one activation layer. Parameters are shared across
/// the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ActParams {
    pub shape: ActShape,
    pub granularity: Granularity,
    pub base: BaseActivation,
    pub beta: f64,
    pub lambda_pos: Vec<f64>,
    pub lambda_neg: Vec<f64>,
    pub c: Vec<f64>,
    pub trainable: ActTrainable,
}

/// Identity-initialized parameters for an activation of the given layout.
pub fn make_act_params(shape: ActShape, granularity: Granularity, base: BaseActivation) -> Result<ActParams> {
    if shape.channels == 0 || shape.positions == 0 {
        return Err(TensorError::Contract(format!(
            "activation width must be positive, got {} channels × {} positions",
            shape.channels, shape.positions
        )));
    }
    let n = shape.param_len(granularity);
    Ok(ActParams {
        shape,
        granularity,
        base,
        beta: base.gate_beta(),
        lambda_pos: vec![0.0; n],
        lambda_neg: vec![0.0; n],
        c: vec![0.0; n],
        trainable: ActTrainable::default(),
    })
}

impl ActParams {
    pub fn param_len(&self) -> usize {
        self.lambda_pos.len()
    }

    pub fn is_identity(&self) -> bool {
        [&self.lambda_pos, &self.lambda_neg, &self.c]
            .iter()
            .all(|a| a.iter().all(|&v| v == 0.0))
    }

    pub fn reset(&mut self) {
        for a in [&mut self.lambda_pos, &mut self.lambda_neg, &mut self.c] {
            a.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn check(&self, x: &[usize]) -> Result<()> {
        let n = self.shape.param_len(self.granularity);
        let arrays_ok = [&self.lambda_pos, &self.lambda_neg, &self.c]
            .iter()
            .all(|a| a.len() == n);
        if !arrays_ok {
            return Err(TensorError::Shape {
                op: "activation parameters",
                left: vec![n],
                right: vec![self.lambda_pos.len(), self.lambda_neg.len(), self.c.len()],
            });
        }
        if x.last().copied() != Some(self.shape.width()) || x.len() > 2 {
            return Err(TensorError::Shape {
                op: "activation",
                left: x.to_vec(),
                right: vec![self.shape.width()],
            });
        }
        Ok(())
    }

    fn slot(&self, flat: usize) -> usize {
        let width = self.shape.width();
        self.shape.param_index(self.granularity, flat % width)
    }

    #[inline]
    fn slope(&self, k: usize, u: f64) -> (f64, f64) {
        let s = sigmoid(self.beta * u);
        (self.lambda_neg[k] + (self.lambda_pos[k] - self.lambda_neg[k]) * s, s)
    }

    #[inline]
    fn point(&self, k: usize, x: f64) -> Pointwise {
        let u = x - self.c[k];
        let (lam, s) = self.slope(k, u);
        let dlam = (self.lambda_pos[k] - self.lambda_neg[k]) * self.beta * s * (1.0 - s);
        Pointwise {
            value: self.base.value(u) + lam * u,
            d_x: self.base.derivative(u) + lam + u * dlam,
            u,
            s,
        }
    }
}

struct Pointwise {
    value: f64,
    d_x: f64,
    u: f64,
    s: f64,
}

pub fn base_forward(x: &Tensor, kind: BaseActivation) -> Tensor {
    map(x, |v| kind.value(v))
}

pub fn base_derivative(x: &Tensor, kind: BaseActivation) -> Tensor {
    map(x, |v| kind.derivative(v))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

/// `λ(u)` for already-centered inputs.
pub fn slope_at(u: &Tensor, params: &ActParams) -> Result<Tensor> {
    params.check(u.shape())?;
    let out = u
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| params.slope(params.slot(i), v).0)
        .collect();
    Tensor::new(u.shape().to_vec(), out)
}

pub fn actta_forward(x: &Tensor, params: &ActParams) -> Result<Tensor> {
    params.check(x.shape())?;
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| params.point(params.slot(i), v).value)
        .collect();
    Tensor::new(x.shape().to_vec(), out)
}

/// Local derivatives of `g`. `d_x` is elementwise; the parameter partials
/// are summed over every element that shares a parameter slot, i.e. they are
/// the gradient of `Σ g(x)` with respect to each parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct ActPartials {
    pub d_x: Tensor,
    pub d_lambda_pos: Vec<f64>,
    pub d_lambda_neg: Vec<f64>,
    pub d_c: Vec<f64>,
}

pub fn actta_backward_partials(x: &Tensor, params: &ActParams) -> Result<ActPartials> {
    params.check(x.shape())?;
    let ones = vec![1.0; x.len()];
    let (d_x, d_lambda_pos, d_lambda_neg, d_c) = vjp_raw(params, x.data(), &ones);
    Ok(ActPartials {
        d_x: Tensor::new(x.shape().to_vec(), d_x)?,
        d_lambda_pos,
        d_lambda_neg,
        d_c,
    })
}

/// Per-element `|∂g/∂x|` values, used for gradient pass-through statistics.
pub fn input_derivative(x: &Tensor, params: &ActParams) -> Result<Tensor> {
    params.check(x.shape())?;
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| params.point(params.slot(i), v).d_x)
        .collect();
    Tensor::new(x.shape().to_vec(), out)
}

fn vjp_raw(params: &ActParams, x: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = params.param_len();
    let mut gx = Vec::with_capacity(x.len());
    let (mut glp, mut gln, mut gc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for (i, (&xv, &g)) in x.iter().zip(grad_out).enumerate() {
        let k = params.slot(i);
        let p = params.point(k, xv);
        let dx = g * p.d_x;
        gx.push(dx);
        glp[k] += g * p.s * p.u;
        gln[k] += g * (1.0 - p.s) * p.u;
        // g depends on x and c only through x − c.
        gc[k] -= dx;
    }
    (gx, glp, gln, gc)
}

/// Tape handles of one recorded activation.
#[derive(Clone, Copy, Debug)]
pub struct ActVars {
    pub input: Var,
    pub output: Var,
    pub lambda_pos: Var,
    pub lambda_neg: Var,
    pub c: Var,
}

struct ActRule {
    params: ActParams,
    x: Vec<f64>,
}

impl VjpRule for ActRule {
    fn vjp(&self, grad_out: &[f64], wants: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (gx, glp, gln, gc) = vjp_raw(&self.params, &self.x, grad_out);
        [gx, glp, gln, gc]
            .into_iter()
            .zip(wants)
            .map(|(g, &w)| w.then_some(g))
            .collect()
    }
}

/// Records `g(x)` on the tape. The parameter arrays enter as leaves that
/// require gradients according to `params.trainable`.
pub fn actta_on_tape(tape: &mut Tape, x: Var, params: &ActParams) -> Result<ActVars> {
    let shape = tape.shape(x).to_vec();
    params.check(&shape)?;
    let leaf = |tape: &mut Tape, data: &[f64], rg: bool| {
        tape.leaf(&Tensor::vector(data.to_vec()).with_requires_grad(rg))
    };
    let lambda_pos = leaf(tape, &params.lambda_pos, params.trainable.lambda_pos);
    let lambda_neg = leaf(tape, &params.lambda_neg, params.trainable.lambda_neg);
    let c = leaf(tape, &params.c, params.trainable.c);
    let xs = tape.value(x).to_vec();
    let value = xs
        .iter()
        .enumerate()
        .map(|(i, &v)| params.point(params.slot(i), v).value)
        .collect();
    let rule = ActRule {
        params: params.clone(),
        x: xs,
    };
    let output = tape.custom(&[x, lambda_pos, lambda_neg, c], shape, value, Box::new(rule))?;
    Ok(ActVars {
        input: x,
        output,
        lambda_pos,
        lambda_neg,
        c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;

    const ALL_BASES: [BaseActivation; 4] = [
        BaseActivation::Relu,
        BaseActivation::Swish,
        BaseActivation::GeluApprox,
        BaseActivation::SigmoidGate(2.5),
    ];

    fn params_with(base: BaseActivation, lp: f64, ln: f64, c: f64) -> ActParams {
        let mut p = make_act_params(ActShape::flat(1), Granularity::PerLayer, base).unwrap();
        p.lambda_pos[0] = lp;
        p.lambda_neg[0] = ln;
        p.c[0] = c;
        p
    }

    fn scalar_fwd(p: &ActParams, x: f64) -> f64 {
        actta_forward(&Tensor::vector(vec![x]), p).unwrap().data()[0]
    }

    #[test]
    fn base_examples() {
        let relu = BaseActivation::Relu;
        assert_eq!(relu.value(-2.0), 0.0);
        assert_eq!(relu.value(3.0), 3.0);
        assert_eq!(BaseActivation::Swish.value(0.0), 0.0);
        // 2·σ(2) = 2 / (1 + e^-2)
        let want = 2.0 / (1.0 + (-2.0f64).exp());
        assert!((BaseActivation::Swish.value(2.0) - want).abs() < 1e-15);
        assert!((want - 1.761594).abs() < 1e-6);
    }

    #[test]
    fn base_derivative_examples() {
        assert_eq!(BaseActivation::Relu.derivative(5.0), 1.0);
        assert_eq!(BaseActivation::Relu.derivative(-5.0), 0.0);
        assert_eq!(BaseActivation::Relu.derivative(0.0), 0.0);
        assert_eq!(BaseActivation::Swish.derivative(0.0), 0.5);
        let h = 1e-6;
        let sw = BaseActivation::Swish;
        let fd = (sw.value(1.3 + h) - sw.value(1.3 - h)) / (2.0 * h);
        assert!((sw.derivative(1.3) - fd).abs() < 1e-7);
    }

    #[test]
    fn slope_examples() {
        let u = Tensor::vector(vec![-4.0, 0.0, 2.0, 7.5]);
        let zero = make_act_params(ActShape::flat(4), Granularity::PerLayer, BaseActivation::Swish).unwrap();
        assert!(slope_at(&u, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let mut k = zero.clone();
        k.lambda_pos[0] = 0.3;
        k.lambda_neg[0] = 0.3;
        for v in slope_at(&u, &k).unwrap().data() {
            assert!((v - 0.3).abs() < 1e-15);
        }

        let p = params_with(BaseActivation::Swish, 0.5, -0.1, 0.0);
        let got = slope_at(&Tensor::vector(vec![2.0]), &p).unwrap().data()[0];
        assert!((got - (-0.1 + 0.6 * sigmoid(2.0))).abs() < 1e-15);
        assert!((got - 0.428478).abs() < 1e-6);
    }

    #[test]
    fn slope_rejects_wrong_width() {
        let p = make_act_params(ActShape::flat(3), Granularity::PerChannel, BaseActivation::Swish).unwrap();
        assert!(slope_at(&Tensor::vector(vec![0.0; 4]), &p).is_err());
        let mut bad = p.clone();
        bad.c.pop();
        assert!(actta_forward(&Tensor::vector(vec![0.0; 3]), &bad).is_err());
    }

    #[test]
    fn forward_examples() {
        let p = params_with(BaseActivation::Swish, 0.5, -0.1, 0.0);
        let got = scalar_fwd(&p, 2.0);
        let want = 2.0 * sigmoid(2.0) + (-0.1 + 0.6 * sigmoid(2.0)) * 2.0;
        assert!((got - want).abs() < 1e-15);
        assert!((got - 2.618550).abs() < 1e-6);

        let p = params_with(BaseActivation::Relu, 0.0, 0.0, 0.3);
        assert_eq!(scalar_fwd(&p, 0.3), 0.0);
    }

    #[test]
    fn identity_initialization_is_exact() {
        let xs: Vec<f64> = (0..=20_000).map(|i| -10.0 + i as f64 * 1e-3).collect();
        let x = Tensor::vector(xs);
        for base in ALL_BASES {
            let p = make_act_params(ActShape::flat(x.len()), Granularity::PerChannel, base).unwrap();
            let g = actta_forward(&x, &p).unwrap();
            let phi = base_forward(&x, base);
            assert_eq!(g.data(), phi.data(), "{base}");
        }
    }

    #[test]
    fn asymptotic_slopes() {
        let p = params_with(BaseActivation::Swish, 0.5, -0.1, 0.0);
        let d = |x: f64| actta_backward_partials(&Tensor::vector(vec![x]), &p).unwrap().d_x.data()[0];
        assert!((d(100.0) - 1.5).abs() < 1e-6);
        assert!((d(-100.0) + 0.1).abs() < 1e-6);
    }

    #[test]
    fn lambda_neg_partial_example() {
        let p = params_with(BaseActivation::Swish, 0.0, 0.0, 0.0);
        let parts = actta_backward_partials(&Tensor::vector(vec![-3.0]), &p).unwrap();
        let want = (1.0 - sigmoid(-3.0)) * -3.0;
        assert!((parts.d_lambda_neg[0] - want).abs() < 1e-15);
        assert!((want + 2.857722).abs() < 1e-6);
        assert_eq!(parts.d_c[0], -parts.d_x.data()[0]);
    }

    #[test]
    fn partials_match_finite_differences() {
        let base_cases = [
            (BaseActivation::Swish, 0.4, -0.2, 0.1, 1.7),
            (BaseActivation::GeluApprox, -0.3, 0.6, -0.5, -0.8),
            (BaseActivation::Relu, 0.2, 0.3, 0.25, -0.4),
            (BaseActivation::SigmoidGate(2.5), 0.9, -0.9, 1.0, 2.2),
        ];
        for (base, lp, ln, c, x) in base_cases {
            let p = params_with(base, lp, ln, c);
            let parts = actta_backward_partials(&Tensor::vector(vec![x]), &p).unwrap();
            let probe = |which: usize| {
                let start = Tensor::vector(vec![[x, lp, ln, c][which]]);
                finite_diff_grad(
                    |t| {
                        let mut vals = [x, lp, ln, c];
                        vals[which] = t.data()[0];
                        scalar_fwd(&params_with(base, vals[1], vals[2], vals[3]), vals[0])
                    },
                    &start,
                    1e-5,
                )
                .unwrap()
                .data()[0]
            };
            let analytic = [
                parts.d_x.data()[0],
                parts.d_lambda_pos[0],
                parts.d_lambda_neg[0],
                parts.d_c[0],
            ];
            for (which, a) in analytic.iter().enumerate() {
                let n = probe(which);
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel < 1e-5, "{base} partial {which}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn shift_covariance_is_exact() {
        let c0 = 0.37;
        let xs = Tensor::vector((0..200).map(|i| -5.0 + 0.05 * i as f64).collect());
        let shifted = Tensor::vector(xs.data().iter().map(|x| x - c0).collect());
        for base in ALL_BASES {
            let mut p = make_act_params(ActShape::flat(200), Granularity::PerLayer, base).unwrap();
            p.lambda_pos[0] = 0.2;
            p.lambda_neg[0] = -0.15;
            let centered = actta_forward(&shifted, &p).unwrap();
            p.c[0] = c0;
            assert_eq!(actta_forward(&xs, &p).unwrap(), centered);
        }
    }

    #[test]
    fn per_layer_equals_uniform_per_channel() {
        let shape = ActShape { channels: 3, positions: 2 };
        let x = Tensor::new(vec![2, 6], (0..12).map(|i| i as f64 * 0.7 - 4.0).collect()).unwrap();
        let mut layer = make_act_params(shape, Granularity::PerLayer, BaseActivation::GeluApprox).unwrap();
        layer.lambda_pos[0] = 0.3;
        layer.lambda_neg[0] = 0.1;
        layer.c[0] = -0.2;
        let mut chan = make_act_params(shape, Granularity::PerChannel, BaseActivation::GeluApprox).unwrap();
        chan.lambda_pos.fill(0.3);
        chan.lambda_neg.fill(0.1);
        chan.c.fill(-0.2);
        assert_eq!(actta_forward(&x, &layer).unwrap(), actta_forward(&x, &chan).unwrap());
    }

    #[test]
    fn make_params_lengths() {
        let p = make_act_params(ActShape::flat(8), Granularity::PerChannel, BaseActivation::Relu).unwrap();
        assert_eq!((p.lambda_pos.len(), p.lambda_neg.len(), p.c.len()), (8, 8, 8));
        assert!(p.is_identity());
        let p = make_act_params(ActShape::flat(8), Granularity::PerLayer, BaseActivation::Relu).unwrap();
        assert_eq!(p.param_len(), 1);
        let shape = ActShape { channels: 8, positions: 4 };
        let el = make_act_params(shape, Granularity::PerElement, BaseActivation::Relu).unwrap();
        let ch = make_act_params(shape, Granularity::PerChannel, BaseActivation::Relu).unwrap();
        assert_eq!(el.param_len(), 32);
        assert_eq!(el.param_len() / ch.param_len(), shape.width() / shape.channels);
        assert_eq!(p.beta, RELU_GATE_BETA);
        assert!(make_act_params(ActShape::flat(0), Granularity::PerLayer, BaseActivation::Relu).is_err());
    }

    #[test]
    fn per_channel_partials_reduce_over_batch_and_positions() {
        let shape = ActShape { channels: 2, positions: 2 };
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 - 5.5) * 0.4).collect()).unwrap();
        let mut p = make_act_params(shape, Granularity::PerChannel, BaseActivation::Swish).unwrap();
        p.lambda_pos = vec![0.2, -0.1];
        p.lambda_neg = vec![0.05, 0.3];
        let parts = actta_backward_partials(&x, &p).unwrap();
        let mut want = [0.0; 2];
        for (i, &v) in x.data().iter().enumerate() {
            let ch = (i % 4) / 2;
            let s = sigmoid(v);
            want[ch] += s * v;
        }
        for ch in 0..2 {
            assert!((parts.d_lambda_pos[ch] - want[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn parse_round_trip() {
        for base in ALL_BASES {
            assert_eq!(base.to_string().parse::<BaseActivation>().unwrap(), base);
        }
        assert!("sigmoid_gate:-1".parse::<BaseActivation>().is_err());
        assert!("tanh".parse::<BaseActivation>().is_err());
        for g in [Granularity::PerLayer, Granularity::PerChannel, Granularity::PerElement] {
            assert_eq!(g.to_string().parse::<Granularity>().unwrap(), g);
        }
    }
}
