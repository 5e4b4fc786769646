//! Reference methods: ERM, IRM, GroupDRO, CORAL, and the K-means pattern
//! divider used by the ablation study.

use serde::Serialize;

use crate::batching::stratified_batches;
use crate::dataset::{Dataset, DividingPattern};
use crate::error::{Error, Result};
use crate::invariant::{predict_loss, ContrastiveVariant, Stage2Result, StepLog};
use crate::matrix::RealMatrix;
use crate::nn::{
    adam_step, classify_accuracy, forward_tape, model_grads, register_model,
    softmax_cross_entropy_tape, AdamState, MlpModel, ModelVars,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BaselineMethod {
    Erm,
    Irm,
    GroupDro,
    Coral,
}

impl BaselineMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "erm" => Ok(BaselineMethod::Erm),
            "irm" => Ok(BaselineMethod::Irm),
            "groupdro" => Ok(BaselineMethod::GroupDro),
            "coral" => Ok(BaselineMethod::Coral),
            other => Err(Error::Config(format!("unknown baseline method '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaselineMethod::Erm => "erm",
            BaselineMethod::Irm => "irm",
            BaselineMethod::GroupDro => "groupdro",
            BaselineMethod::Coral => "coral",
        }
    }

    /// Whether the objective reads domain labels at all.
    pub fn uses_domains(&self) -> bool {
        !matches!(self, BaselineMethod::Erm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub irm_lambda: f64,
    pub groupdro_eta: f64,
    /// CORAL alignment weight.
    pub lambda_mmd: f64,
    pub min_group: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            method: BaselineMethod::Erm,
            irm_lambda: 100.0,
            groupdro_eta: 0.01,
            lambda_mmd: 1.0,
            min_group: 2,
            steps: 3000,
            lr: 1e-3,
            batch_size: 128,
            eval_every: 500,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.irm_lambda < 0.0 || self.groupdro_eta < 0.0 || self.lambda_mmd < 0.0 {
            return Err(Error::Contract("baseline: weights must be >= 0".into()));
        }
        if self.steps < 1 {
            return Err(Error::Contract("baseline: steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pooled cross-entropy, ignoring domain labels.
pub fn erm_loss(
    tape: &mut Tape,
    phi: &ModelVars,
    w: &ModelVars,
    batch: Var,
    classes: &[usize],
) -> Result<Var> {
    let reprs = forward_tape(tape, phi, batch);
    let logits = forward_tape(tape, w, reprs);
    softmax_cross_entropy_tape(tape, logits, classes)
}

/// Per-domain risks plus the squared gradient penalty with respect to a
/// scalar logit multiplier held at 1.0.
///
/// For cross-entropy the derivative in the multiplier has the closed form
/// mean_i(<softmax(z_i), z_i> - z_i[y_i]), which keeps the whole objective
/// first-order differentiable in the parameters.
pub fn irm_loss(
    tape: &mut Tape,
    phi: &ModelVars,
    w: &ModelVars,
    batch: Var,
    classes: &[usize],
    domains: &[usize],
    irm_lambda: f64,
) -> Result<Var> {
    let reprs = forward_tape(tape, phi, batch);
    let logits = forward_tape(tape, w, reprs);
    let num_domains = domains.iter().max().map_or(0, |&m| m + 1);
    let mut total: Option<Var> = None;
    for d in 0..num_domains {
        let members: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == d).collect();
        if members.is_empty() {
            continue;
        }
        let z = tape.gather_rows(logits, &members);
        let y: Vec<usize> = members.iter().map(|&i| classes[i]).collect();
        let risk = softmax_cross_entropy_tape(tape, z, &y)?;

        let p = tape.softmax_rows(z);
        let pz = tape.mul(p, z);
        let row_dots = tape.sum_rows(pz);
        let picked = tape.select_per_row(z, &y);
        let diff = tape.sub(row_dots, picked);
        let gsum = tape.sum_all(diff);
        let gmean = tape.scale(gsum, 1.0 / members.len() as f64);
        let penalty = tape.mul(gmean, gmean);

        let term = if irm_lambda == 0.0 {
            risk
        } else {
            let weighted = tape.scale(penalty, irm_lambda);
            tape.add(risk, weighted)
        };
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    total.ok_or_else(|| Error::Contract("irm_loss: no domain present in batch".into()))
}

/// Exponential-weights worst-group objective. Weights of domains present in
/// the batch are multiplied by exp(eta * risk) and the whole vector is
/// renormalized; the loss is the weighted sum of per-domain risks under the
/// updated weights. Domains absent from the batch keep their weight.
pub fn groupdro_loss(
    tape: &mut Tape,
    phi: &ModelVars,
    w: &ModelVars,
    batch: Var,
    classes: &[usize],
    domains: &[usize],
    weights: &mut [f64],
    eta: f64,
) -> Result<Var> {
    let reprs = forward_tape(tape, phi, batch);
    let logits = forward_tape(tape, w, reprs);
    let mut risks: Vec<(usize, Var)> = Vec::new();
    for d in 0..weights.len() {
        let members: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == d).collect();
        if members.is_empty() {
            continue;
        }
        let z = tape.gather_rows(logits, &members);
        let y: Vec<usize> = members.iter().map(|&i| classes[i]).collect();
        risks.push((d, softmax_cross_entropy_tape(tape, z, &y)?));
    }
    if risks.is_empty() {
        return Err(Error::Contract("groupdro_loss: no domain present in batch".into()));
    }
    for &(d, risk) in &risks {
        let r = tape.value(risk).as_scalar();
        weights[d] *= (eta * r).exp();
    }
    let z: f64 = weights.iter().sum();
    for v in weights.iter_mut() {
        *v /= z;
    }
    let mut total: Option<Var> = None;
    for &(d, risk) in &risks {
        let term = tape.scale(risk, weights[d]);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    Ok(total.unwrap())
}

/// Cross-entropy plus weighted domain alignment: exactly the stage-2
/// objective with the contrastive weight at zero.
#[allow(clippy::too_many_arguments)]
pub fn coral_loss(
    tape: &mut Tape,
    phi: &ModelVars,
    w: &ModelVars,
    batch: Var,
    classes: &[usize],
    domains: &[usize],
    lambda_mmd: f64,
    min_group: usize,
) -> Result<Var> {
    let loss = predict_loss(
        tape,
        phi,
        w,
        batch,
        classes,
        domains,
        0.0,
        lambda_mmd,
        min_group,
        ContrastiveVariant::Ratio,
    )?;
    Ok(loss.total)
}

/// Lloyd's algorithm with k-means++ seeding: 50 iterations or centroid
/// shift below 1e-6. An empty cluster is reseeded at the point farthest
/// from its current centroid.
pub fn kmeans_pattern(features: &RealMatrix, k: usize, seed: u64) -> Result<DividingPattern> {
    kmeans_with_objectives(features, k, seed).map(|(p, _)| p)
}

/// K-means plus the within-cluster sum of squares measured after every
/// assignment phase.
pub(crate) fn kmeans_with_objectives(
    features: &RealMatrix,
    k: usize,
    seed: u64,
) -> Result<(DividingPattern, Vec<f64>)> {
    use rand::Rng as _;
    let n = features.rows();
    if n < k {
        return Err(Error::Contract(format!("kmeans: {n} points for {k} clusters")));
    }
    if k == 0 {
        return Err(Error::Contract("kmeans: k must be >= 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let d = features.cols();

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..n);
    centroids.push(features.row(first).to_vec());
    let mut dist2 = vec![0.0f64; n];
    while centroids.len() < k {
        let mut total = 0.0;
        for i in 0..n {
            let mut best = f64::INFINITY;
            for c in &centroids {
                let mut acc = 0.0;
                for (j, &v) in features.row(i).iter().enumerate() {
                    let diff = v - c[j];
                    acc += diff * diff;
                }
                best = best.min(acc);
            }
            dist2[i] = best;
            total += best;
        }
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                acc += w;
                if acc >= target {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(features.row(next).to_vec());
    }

    let mut assignment = vec![0usize; n];
    let mut objectives = Vec::new();
    for _ in 0..50 {
        // Assign.
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let mut acc = 0.0;
                for (j, &v) in features.row(i).iter().enumerate() {
                    let diff = v - centroid[j];
                    acc += diff * diff;
                }
                if acc < best_d {
                    best_d = acc;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        // Objective after assignment, against the current centroids.
        let mut wcss = 0.0;
        for i in 0..n {
            let c = &centroids[assignment[i]];
            for (j, &v) in features.row(i).iter().enumerate() {
                let diff = v - c[j];
                wcss += diff * diff;
            }
        }
        objectives.push(wcss);
        // Reseed empty clusters at the farthest point from its centroid.
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = 0usize;
            let mut far_d = -1.0;
            for i in 0..n {
                let cur = &centroids[assignment[i]];
                let mut acc = 0.0;
                for (j, &v) in features.row(i).iter().enumerate() {
                    let diff = v - cur[j];
                    acc += diff * diff;
                }
                if acc > far_d && counts[assignment[i]] > 1 {
                    far_d = acc;
                    far = i;
                }
            }
            counts[assignment[far]] -= 1;
            assignment[far] = c;
            counts[c] = 1;
            centroids[c] = features.row(far).to_vec();
        }
        // Update.
        let mut sums = vec![vec![0.0f64; d]; k];
        let mut sizes = vec![0usize; k];
        for i in 0..n {
            sizes[assignment[i]] += 1;
            for (j, &v) in features.row(i).iter().enumerate() {
                sums[assignment[i]][j] += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if sizes[c] == 0 {
                continue;
            }
            for j in 0..d {
                let new = sums[c][j] / sizes[c] as f64;
                shift = shift.max((new - centroids[c][j]).abs());
                centroids[c][j] = new;
            }
        }
        if shift < 1e-6 {
            break;
        }
    }
    // Final assignment against the converged centroids, keeping clusters
    // nonempty.
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let mut acc = 0.0;
            for (j, &v) in features.row(i).iter().enumerate() {
                let diff = v - centroid[j];
                acc += diff * diff;
            }
            if acc < best_d {
                best_d = acc;
                best = c;
            }
        }
        assignment[i] = best;
    }
    let mut counts = vec![0usize; k];
    for &a in &assignment {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] == 0 {
            let mut far = 0usize;
            let mut far_d = -1.0;
            for i in 0..n {
                if counts[assignment[i]] <= 1 {
                    continue;
                }
                let cur = &centroids[assignment[i]];
                let mut acc = 0.0;
                for (j, &v) in features.row(i).iter().enumerate() {
                    let diff = v - cur[j];
                    acc += diff * diff;
                }
                if acc > far_d {
                    far_d = acc;
                    far = i;
                }
            }
            counts[assignment[far]] -= 1;
            assignment[far] = c;
            counts[c] = 1;
        }
    }
    DividingPattern::new(assignment, k).map(|p| (p, objectives))
}

/// Train a baseline with the same architecture, batching and checkpointing
/// as stage 2, but the method's own objective. The pattern supplies the
/// domain labels (ERM ignores them; batches stay stratified for
/// comparability).
pub fn run_baseline(
    dataset: &Dataset,
    pattern: &DividingPattern,
    cfg: &BaselineConfig,
    validation: Option<(&RealMatrix, &[usize])>,
) -> Result<Stage2Result> {
    cfg.validate()?;
    if pattern.len() != dataset.len() {
        return Err(Error::Contract("baseline: pattern length != dataset size".into()));
    }
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0xBA5E));
    let mut phi = MlpModel::new(&[dataset.input_dim(), 256, 256, 64], &mut rng);
    let mut w = MlpModel::new(&[64, dataset.num_classes], &mut rng);
    let mut phi_state = AdamState::new(&phi);
    let mut w_state = AdamState::new(&w);
    let mut dro_weights = vec![1.0 / pattern.num_domains as f64; pattern.num_domains];

    let mut log = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, MlpModel, MlpModel)> = None;
    let mut step = 0usize;
    let mut epoch = 0u64;
    'outer: loop {
        let batches =
            stratified_batches(dataset, pattern, cfg.batch_size, derive_seed(cfg.seed, epoch))?;
        epoch += 1;
        for batch in &batches {
            let x = dataset.features.gather_rows(batch);
            let classes: Vec<usize> = batch.iter().map(|&i| dataset.class_labels[i]).collect();
            let domains: Vec<usize> = batch.iter().map(|&i| pattern.assignment[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let phi_vars = register_model(&mut tape, &phi);
            let w_vars = register_model(&mut tape, &w);
            let loss = match cfg.method {
                BaselineMethod::Erm => erm_loss(&mut tape, &phi_vars, &w_vars, xv, &classes)?,
                BaselineMethod::Irm => irm_loss(
                    &mut tape,
                    &phi_vars,
                    &w_vars,
                    xv,
                    &classes,
                    &domains,
                    cfg.irm_lambda,
                )?,
                BaselineMethod::GroupDro => groupdro_loss(
                    &mut tape,
                    &phi_vars,
                    &w_vars,
                    xv,
                    &classes,
                    &domains,
                    &mut dro_weights,
                    cfg.groupdro_eta,
                )?,
                BaselineMethod::Coral => coral_loss(
                    &mut tape,
                    &phi_vars,
                    &w_vars,
                    xv,
                    &classes,
                    &domains,
                    cfg.lambda_mmd,
                    cfg.min_group,
                )?,
            };
            log.push(StepLog {
                step,
                total: tape.value(loss).as_scalar(),
                cross_entropy: tape.value(loss).as_scalar(),
                contrastive: 0.0,
                alignment: 0.0,
            });
            let grads = tape.backward(loss);
            let phi_g = model_grads(&tape, &grads, &phi_vars);
            let w_g = model_grads(&tape, &grads, &w_vars);
            adam_step(&mut phi, &phi_g, &mut phi_state, cfg.lr)?;
            adam_step(&mut w, &w_g, &mut w_state, cfg.lr)?;
            step += 1;

            let at_end = step == cfg.steps;
            if let Some((vx, vy)) = validation {
                if step % cfg.eval_every == 0 || at_end {
                    let acc = classify_accuracy(&phi, &w, vx, vy)?;
                    checkpoints.push((step, acc));
                    let better = best.as_ref().is_none_or(|(b, _, _)| acc > *b);
                    if better {
                        best = Some((acc, phi.clone(), w.clone()));
                    }
                }
            }
            if at_end {
                break 'outer;
            }
        }
    }
    let (sel_phi, sel_w) = match best {
        Some((_, p, w_sel)) => (p, w_sel),
        None => (phi.clone(), w.clone()),
    };
    Ok(Stage2Result { phi: sel_phi, w: sel_w, final_phi: phi, final_w: w, log, checkpoints })
}
