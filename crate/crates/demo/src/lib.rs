//! WebAssembly bindings for the browser demo. The plain functions are what
//! the page calls through the `#[wasm_bindgen]` wrappers; they also run
//! natively so the demo logic is tested with the rest of the workspace.

use wasm_bindgen::prelude::*;

use actta::activation::{actta_forward, base_forward, input_derivative, make_act_params, ActShape, BaseActivation, Granularity};
use actta::adapt::{evaluate_stream, run_episode, AdaptConfig, RunMetrics};
use actta::network::{MlpArch, Model, NormMode, ParamGroupSelection};
use actta::pretrain::{error_rate, pretrain, PretrainConfig};
use actta::shiftgen::{self, build_stream, CorruptionKind, CorruptionSpec, DatasetSpec, LabeledBatch};
use actta::tensor::Tensor;

/// Values per batch in the array returned by [`Session::adapt`].
pub const FIELDS_PER_BATCH: usize = 4;

/// `n` samples of `g`, `φ` and `∂g/∂x` on `[lo, hi]`, concatenated.
pub fn curve(base: &str, lambda_pos: f64, lambda_neg: f64, c: f64, lo: f64, hi: f64, n: usize) -> Result<Vec<f64>, String> {
    if n < 2 || !(hi > lo) {
        return Err("need at least 2 points on a non-empty interval".into());
    }
    let base: BaseActivation = base.parse()?;
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let x = Tensor::vector(xs);
    let mut p = make_act_params(ActShape::flat(n), Granularity::PerLayer, base).map_err(|e| e.to_string())?;
    p.lambda_pos[0] = lambda_pos;
    p.lambda_neg[0] = lambda_neg;
    p.c[0] = c;
    let g = actta_forward(&x, &p).map_err(|e| e.to_string())?;
    let d = input_derivative(&x, &p).map_err(|e| e.to_string())?;
    let mut out = g.into_data();
    out.extend(base_forward(&x, base).into_data());
    out.extend(d.into_data());
    Ok(out)
}

/// A small pretrained source model and its clean test pool.
#[wasm_bindgen]
pub struct Session {
    model: Model,
    test: LabeledBatch,
    source_error: f64,
}

impl Session {
    pub fn create(seed: u64, epochs: usize) -> Result<Session, String> {
        let spec = DatasetSpec {
            n_samples: 1500,
            ..DatasetSpec::reference(seed)
        };
        let (train, test) = shiftgen::generate(&spec).map_err(|e| e.to_string())?;
        let arch = MlpArch {
            hidden_width: 32,
            ..MlpArch::reference(spec.dims, spec.n_classes)
        };
        let mut model = Model::from_arch(&arch, seed).map_err(|e| e.to_string())?;
        let cfg = PretrainConfig {
            epochs,
            seed,
            ..PretrainConfig::default()
        };
        pretrain(&mut model, &train, &cfg).map_err(|e| e.to_string())?;
        let source_error = error_rate(&model, &test, NormMode::Running).map_err(|e| e.to_string())?;
        Ok(Session {
            model,
            test,
            source_error,
        })
    }

    /// Per batch: target error, mean entropy, selected fraction and mean
    /// pass-through ratio. `groups` also accepts `none` for the frozen model.
    pub fn run(&self, groups: &str, corruption: &str, severity: u8, lr: f64, batches: usize, seed: u64) -> Result<Vec<f64>, String> {
        let kind: CorruptionKind = corruption.parse().map_err(|e: shiftgen::ShiftError| e.to_string())?;
        let spec = CorruptionSpec::new(kind, severity, seed).map_err(|e| e.to_string())?;
        let cfg = AdaptConfig {
            base_lr: lr,
            ..AdaptConfig::default()
        };
        cfg.validate().map_err(|e| e.to_string())?;
        if batches == 0 {
            return Err("need at least one batch".into());
        }
        let stream = build_stream(&self.test, Some(&spec), cfg.batch_size, batches, seed).map_err(|e| e.to_string())?;
        let run: RunMetrics = if groups == "none" {
            let frozen = AdaptConfig {
                norm_mode: NormMode::Running,
                ..cfg
            };
            evaluate_stream(&self.model, &stream, Some(spec), &frozen, "demo").map_err(|e| e.to_string())?
        } else {
            let sel = ParamGroupSelection::parse(groups).map_err(|e| e.to_string())?;
            let mut m = self.model.clone();
            m.set_trainable(&sel).map_err(|e| e.to_string())?;
            run_episode(&mut m, &stream, Some(spec), &cfg, "demo").map_err(|e| e.to_string())?
        };
        Ok(run
            .records
            .iter()
            .flat_map(|r| [r.target_error, r.mean_entropy, r.selected_fraction, r.pass_through_ratio])
            .collect())
    }
}

#[wasm_bindgen]
impl Session {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, epochs: u32) -> Result<Session, JsError> {
        Session::create(u64::from(seed), epochs as usize).map_err(|e| JsError::new(&e))
    }

    #[wasm_bindgen(getter, js_name = sourceError)]
    pub fn source_error(&self) -> f64 {
        self.source_error
    }

    /// Flat array, [`FIELDS_PER_BATCH`] values per batch.
    pub fn adapt(&self, groups: &str, corruption: &str, severity: u8, lr: f64, batches: u32, seed: u32) -> Result<Vec<f64>, JsError> {
        self.run(groups, corruption, severity, lr, batches as usize, u64::from(seed))
            .map_err(|e| JsError::new(&e))
    }
}

#[wasm_bindgen(js_name = activationCurve)]
pub fn activation_curve(base: &str, lambda_pos: f64, lambda_neg: f64, c: f64, lo: f64, hi: f64, n: u32) -> Result<Vec<f64>, JsError> {
    curve(base, lambda_pos, lambda_neg, c, lo, hi, n as usize).map_err(|e| JsError::new(&e))
}
