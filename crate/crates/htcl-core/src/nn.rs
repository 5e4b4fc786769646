//! Feedforward models with rectifier hidden layers, their tape hookup, and
//! the Adam optimizer. Also hosts the scalar loss primitives shared by every
//! training objective (cross-entropy, entropy, covariance).

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::RealMatrix;
use crate::rng::Rng;
use crate::tape::{covariance_value, Tape, Var};

/// Multilayer perceptron: affine layers with rectifier activations on hidden
/// layers and identity output. `layer_dims` lists input, hidden..., output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<RealMatrix>,
    pub biases: Vec<RealMatrix>,
}

impl MlpModel {
    /// He-style initialization scaled by each layer's fan-in; biases zero.
    pub fn new(layer_dims: &[usize], rng: &mut Rng) -> Self {
        assert!(layer_dims.len() >= 2, "a model needs input and output dims");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in layer_dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let mut w = RealMatrix::zeros(fan_in, fan_out);
            for v in w.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * std;
            }
            weights.push(w);
            biases.push(RealMatrix::zeros(1, fan_out));
        }
        MlpModel { layer_dims: layer_dims.to_vec(), weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.data().len()).sum::<usize>()
            + self.biases.iter().map(|b| b.data().len()).sum::<usize>()
    }

    /// Plain forward pass: batch rows in, batch rows out. Pure and
    /// deterministic; repeated calls are bit-identical.
    pub fn forward(&self, batch: &RealMatrix) -> Result<RealMatrix> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Contract(format!(
                "forward: batch has {} columns, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let last = self.num_layers() - 1;
        let mut h = batch.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.matmul(w);
            for i in 0..z.rows() {
                for (j, v) in z.row_mut(i).iter_mut().enumerate() {
                    *v += b.get(0, j);
                }
            }
            if l < last {
                h = z.map(|v| if v > 0.0 { v } else { 0.0 });
            } else {
                h = z;
            }
        }
        Ok(h)
    }

    /// XOR-fold over the raw bit patterns of all parameters. Used to verify
    /// that measurement paths leave a model untouched.
    pub fn checksum(&self) -> u64 {
        let mut acc = 0u64;
        let mut mix = |m: &RealMatrix| {
            for &v in m.data() {
                acc = acc.rotate_left(7) ^ v.to_bits();
            }
        };
        for w in &self.weights {
            mix(w);
        }
        for b in &self.biases {
            mix(b);
        }
        acc
    }
}

/// Tape handles for one model's parameters, so a model can be applied to
/// several batches in one graph (per-domain risks share the same leaves).
pub struct ModelVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

/// Register all parameters of `model` as tape leaves.
pub fn register_model(tape: &mut Tape, model: &MlpModel) -> ModelVars {
    let weights = model.weights.iter().map(|w| tape.leaf(w.clone())).collect();
    let biases = model.biases.iter().map(|b| tape.leaf(b.clone())).collect();
    ModelVars { weights, biases }
}

/// Recorded forward pass through registered parameters.
pub fn forward_tape(tape: &mut Tape, params: &ModelVars, input: Var) -> Var {
    let last = params.weights.len() - 1;
    let mut h = input;
    for l in 0..params.weights.len() {
        let z = tape.matmul(h, params.weights[l]);
        let zb = tape.add_row_broadcast(z, params.biases[l]);
        h = if l < last { tape.relu(zb) } else { zb };
    }
    h
}

/// Per-parameter gradients in model layout.
pub struct ModelGrads {
    pub weights: Vec<RealMatrix>,
    pub biases: Vec<RealMatrix>,
}

pub fn model_grads(tape: &Tape, grads: &crate::tape::Gradients, params: &ModelVars) -> ModelGrads {
    ModelGrads {
        weights: params.weights.iter().map(|&v| grads.get(tape, v)).collect(),
        biases: params.biases.iter().map(|&v| grads.get(tape, v)).collect(),
    }
}

/// Mean negative log softmax probability of the true class, with max
/// subtraction for stability. Plain (value-only) variant.
pub fn softmax_cross_entropy(logits: &RealMatrix, labels: &[usize]) -> Result<f64> {
    validate_labels(logits, labels)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Recorded cross-entropy over logits already on the tape.
pub fn softmax_cross_entropy_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    validate_labels(tape.value(logits), labels)?;
    let lsm = tape.log_softmax_rows(logits);
    let picked = tape.select_per_row(lsm, labels);
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

fn validate_labels(logits: &RealMatrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "cross-entropy: {} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("cross-entropy on an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Contract(format!(
            "label {} out of range for {} classes",
            bad,
            logits.cols()
        )));
    }
    Ok(())
}

/// Shannon entropy of a probability vector, with 0*ln(0) := 0.
pub fn entropy(distribution: &[f64]) -> Result<f64> {
    if distribution.is_empty() {
        return Err(Error::Contract("entropy of an empty distribution".into()));
    }
    let mut sum = 0.0;
    for &p in distribution {
        if p < 0.0 {
            return Err(Error::Contract(format!("negative probability {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(distribution
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum())
}

/// Sample covariance of the rows (1/(n-1) normalization).
pub fn covariance(batch: &RealMatrix) -> Result<RealMatrix> {
    if batch.rows() < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: batch.rows() });
    }
    Ok(covariance_value(batch))
}

/// Fraction of rows whose argmax logit matches the class label. Ties break
/// toward the lowest class index.
pub fn classify_accuracy(
    phi: &MlpModel,
    w: &MlpModel,
    features: &RealMatrix,
    classes: &[usize],
) -> Result<f64> {
    if features.rows() == 0 || classes.is_empty() {
        return Err(Error::Contract("accuracy of an empty split".into()));
    }
    if features.rows() != classes.len() {
        return Err(Error::Contract("accuracy: feature/label length mismatch".into()));
    }
    let logits = w.forward(&phi.forward(features)?)?;
    let mut hits = 0usize;
    for (i, &y) in classes.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / classes.len() as f64)
}

/// Adam state for one model. beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m_weights: Vec<RealMatrix>,
    v_weights: Vec<RealMatrix>,
    m_biases: Vec<RealMatrix>,
    v_biases: Vec<RealMatrix>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(model: &MlpModel) -> Self {
        let zero_like =
            |ms: &[RealMatrix]| ms.iter().map(|m| RealMatrix::zeros(m.rows(), m.cols())).collect();
        AdamState {
            step: 0,
            m_weights: zero_like(&model.weights),
            v_weights: zero_like(&model.weights),
            m_biases: zero_like(&model.biases),
            v_biases: zero_like(&model.biases),
        }
    }
}

/// One Adam update. Gradient shapes must match the model's parameters.
pub fn adam_step(
    model: &mut MlpModel,
    grads: &ModelGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.weights.len() != model.weights.len() || grads.biases.len() != model.biases.len() {
        return Err(Error::Contract("adam: gradient layer count mismatch".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);

    let update = |param: &mut RealMatrix,
                      grad: &RealMatrix,
                      m: &mut RealMatrix,
                      v: &mut RealMatrix|
     -> Result<()> {
        if (param.rows(), param.cols()) != (grad.rows(), grad.cols()) {
            return Err(Error::Contract(format!(
                "adam: gradient shape {}x{} vs parameter {}x{}",
                grad.rows(),
                grad.cols(),
                param.rows(),
                param.cols()
            )));
        }
        for i in 0..param.data().len() {
            let g = grad.data()[i];
            let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * g;
            let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let mh = mi / bc1;
            let vh = vi / bc2;
            param.data_mut()[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        Ok(())
    };

    for l in 0..model.weights.len() {
        update(
            &mut model.weights[l],
            &grads.weights[l],
            &mut state.m_weights[l],
            &mut state.v_weights[l],
        )?;
        update(
            &mut model.biases[l],
            &grads.biases[l],
            &mut state.m_biases[l],
            &mut state.v_biases[l],
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn forward_identity_single_layer() {
        let mut model = MlpModel::new(&[2, 2], &mut rng_from_seed(0));
        model.weights[0] = RealMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        model.biases[0] = RealMatrix::zeros(1, 2);
        let out = model.forward(&RealMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_affine_single_output() {
        let mut model = MlpModel::new(&[2, 1], &mut rng_from_seed(0));
        model.weights[0] = RealMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        model.biases[0] = RealMatrix::zeros(1, 1);
        let out = model.forward(&RealMatrix::from_rows(&[vec![2.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn forward_matches_scalar_loop_oracle() {
        let mut rng = rng_from_seed(42);
        let model = MlpModel::new(&[3, 5, 4, 2], &mut rng);
        let mut batch = RealMatrix::zeros(4, 3);
        for v in batch.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z;
        }
        let got = model.forward(&batch).unwrap();

        // Scalar-loop reimplementation.
        for r in 0..batch.rows() {
            let mut h: Vec<f64> = batch.row(r).to_vec();
            for l in 0..model.num_layers() {
                let w = &model.weights[l];
                let b = &model.biases[l];
                let mut z = vec![0.0; w.cols()];
                for (j, zj) in z.iter_mut().enumerate() {
                    let mut acc = b.get(0, j);
                    for (k, &hk) in h.iter().enumerate() {
                        acc += hk * w.get(k, j);
                    }
                    *zj = acc;
                }
                if l + 1 < model.num_layers() {
                    for v in z.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                h = z;
            }
            for (j, &v) in h.iter().enumerate() {
                assert!((got.get(r, j) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let model = MlpModel::new(&[3, 2], &mut rng_from_seed(0));
        let bad = RealMatrix::zeros(1, 4);
        assert!(model.forward(&bad).is_err());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = rng_from_seed(9);
        let model = MlpModel::new(&[4, 8, 3], &mut rng);
        let mut batch = RealMatrix::zeros(5, 4);
        for v in batch.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z;
        }
        let a = model.forward(&batch).unwrap();
        let b = model.forward(&batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn cross_entropy_known_values() {
        // Uniform softmax over two classes.
        let l = RealMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let v = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        // Saturated case must not overflow.
        let l = RealMatrix::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let v = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!(v.is_finite() && v.abs() < 1e-9);

        // Scalar-arithmetic oracle: -ln(e^3 / (e^1 + e^2 + e^3)).
        let l = RealMatrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let v = softmax_cross_entropy(&l, &[2]).unwrap();
        let expect = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.40760596444438079).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let l = RealMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(softmax_cross_entropy(&l, &[2]).is_err());
        assert!(softmax_cross_entropy(&l, &[0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_shift_invariant() {
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let mut l = RealMatrix::zeros(4, 3);
            for v in l.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = 3.0 * z;
            }
            let labels = vec![0, 2, 1, 1];
            let base = softmax_cross_entropy(&l, &labels).unwrap();
            let shifted_m = l.map(|v| v + 17.25);
            let shifted = softmax_cross_entropy(&shifted_m, &labels).unwrap();
            assert!((base - shifted).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_known_values() {
        let third = 1.0 / 3.0;
        assert!((entropy(&[third, third, third]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let v = entropy(&[0.7, 0.2, 0.1]).unwrap();
        let expect = -(0.7 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.8018185525433373).abs() < 1e-10);
    }

    #[test]
    fn entropy_rejects_invalid_distributions() {
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn covariance_known_values() {
        // Identical rows: zero matrix.
        let x = RealMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let c = covariance(&x).unwrap();
        assert!(c.data().iter().all(|&v| v.abs() < 1e-15));

        // Hand oracle with 1/(n-1).
        let x = RealMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let c = covariance(&x).unwrap();
        assert_eq!(c.data(), &[2.0, 0.0, 0.0, 0.0]);

        // Translation invariance.
        let y = x.map(|v| v + 5.0);
        let cy = covariance(&y).unwrap();
        for (a, b) in c.data().iter().zip(cy.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Row-permutation invariance.
        let xp = RealMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let cp = covariance(&xp).unwrap();
        for (a, b) in c.data().iter().zip(cp.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        assert!(covariance(&RealMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut rng = rng_from_seed(1);
        let mut model = MlpModel::new(&[2, 3], &mut rng);
        let before = model.clone();
        let grads = ModelGrads {
            weights: vec![RealMatrix::zeros(2, 3)],
            biases: vec![RealMatrix::zeros(1, 3)],
        };
        let mut state = AdamState::new(&model);
        adam_step(&mut model, &grads, &mut state, 0.1).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn adam_scalar_quadratic_first_step() {
        // Loss theta^2 at theta = 1: gradient 2. Adam's normalized first step
        // moves by ~lr regardless of gradient magnitude.
        let mut rng = rng_from_seed(1);
        let mut model = MlpModel::new(&[1, 1], &mut rng);
        model.weights[0] = RealMatrix::scalar(1.0);
        let grads = ModelGrads {
            weights: vec![RealMatrix::scalar(2.0)],
            biases: vec![RealMatrix::zeros(1, 1)],
        };
        let mut state = AdamState::new(&model);
        adam_step(&mut model, &grads, &mut state, 0.1).unwrap();
        let theta = model.weights[0].as_scalar();
        assert!((theta - 0.9).abs() < 1e-6, "theta after one step: {theta}");
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut rng = rng_from_seed(5);
            let mut model = MlpModel::new(&[2, 4, 2], &mut rng);
            let mut state = AdamState::new(&model);
            for step in 0..10 {
                let grads = ModelGrads {
                    weights: model
                        .weights
                        .iter()
                        .map(|w| w.map(|v| (v * (step + 1) as f64).sin()))
                        .collect(),
                    biases: model.biases.iter().map(|b| b.map(|v| v + 0.1)).collect(),
                };
                adam_step(&mut model, &grads, &mut state, 0.01).unwrap();
            }
            model
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut rng = rng_from_seed(1);
        let mut model = MlpModel::new(&[2, 3], &mut rng);
        let grads = ModelGrads {
            weights: vec![RealMatrix::zeros(3, 2)],
            biases: vec![RealMatrix::zeros(1, 3)],
        };
        let mut state = AdamState::new(&model);
        assert!(adam_step(&mut model, &grads, &mut state, 0.1).is_err());
    }
}

/// Write a model as a versioned decimal-text dump. 17 significant digits
/// reproduce every f64 exactly on load.
pub fn save_model(model: &MlpModel, path: &std::path::Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("htcl-model v1\n");
    let dims: Vec<String> = model.layer_dims.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(out, "dims {}", dims.join(","));
    for l in 0..model.num_layers() {
        let _ = writeln!(out, "layer {l}");
        for m in [&model.weights[l], &model.biases[l]] {
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(out, "{}", row.join(","));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a model written by [`save_model`].
pub fn load_model(path: &std::path::Path) -> Result<MlpModel> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let err = |line: usize, msg: String| Error::Parse { path: pstr.clone(), line, msg };
    let mut lines = text.lines().enumerate();
    let (_, header) =
        lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    if header.trim() != "htcl-model v1" {
        return Err(err(1, format!("unsupported header '{header}'")));
    }
    let (_, dims_line) = lines.next().ok_or_else(|| err(2, "missing dims line".into()))?;
    let dims_str = dims_line
        .strip_prefix("dims ")
        .ok_or_else(|| err(2, "expected 'dims ...'".into()))?;
    let layer_dims: Vec<usize> = dims_str
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| err(2, format!("bad dim '{s}'"))))
        .collect::<Result<_>>()?;
    if layer_dims.len() < 2 {
        return Err(err(2, "model needs at least 2 dims".into()));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..layer_dims.len() - 1 {
        let (ln, layer_line) =
            lines.next().ok_or_else(|| err(0, format!("missing layer {l}")))?;
        if layer_line.trim() != format!("layer {l}") {
            return Err(err(ln + 1, format!("expected 'layer {l}', got '{layer_line}'")));
        }
        let (rows, cols) = (layer_dims[l], layer_dims[l + 1]);
        let mut read_matrix = |r: usize, c: usize| -> Result<RealMatrix> {
            let mut m = RealMatrix::zeros(r, c);
            for i in 0..r {
                let (ln, row_line) =
                    lines.next().ok_or_else(|| err(0, "truncated matrix".into()))?;
                let fields: Vec<&str> = row_line.split(',').collect();
                if fields.len() != c {
                    return Err(err(ln + 1, format!("expected {c} values, got {}", fields.len())));
                }
                for (j, f) in fields.iter().enumerate() {
                    let v: f64 = f
                        .trim()
                        .parse()
                        .map_err(|_| err(ln + 1, format!("bad real '{f}'")))?;
                    m.set(i, j, v);
                }
            }
            Ok(m)
        };
        weights.push(read_matrix(rows, cols)?);
        biases.push(read_matrix(1, cols)?);
    }
    Ok(MlpModel { layer_dims, weights, biases })
}
