//! Stage 2: train the final predictor with the generated pattern.
//!
//! The objective adds two covariance-based terms to the classification
//! loss: a contrastive term that, per (domain, class) cell, drives the
//! covariance gap toward same-class samples in *other* domains to be small
//! relative to the gap toward other classes in the *same* domain, and a
//! CORAL-style alignment term over all domain pairs.

use serde::Serialize;

use crate::batching::stratified_batches;
use crate::dataset::{Dataset, DividingPattern};
use crate::error::{Error, Result};
use crate::matrix::RealMatrix;
use crate::nn::{
    adam_step, classify_accuracy, forward_tape, model_grads, register_model,
    softmax_cross_entropy_tape, AdamState, MlpModel, ModelVars,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tape::{covariance_value, Tape, Var, EPS_DIV};

/// Which contrastive form to train with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ContrastiveVariant {
    /// Per-cell log(1 + mmd_pos / mmd_neg).
    Ratio,
    /// The InfoNCE-style motivating form: the same per-cell log ratio
    /// summed per anchor sample, i.e. weighted by cell size.
    InfoNce,
}

impl ContrastiveVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(ContrastiveVariant::Ratio),
            "infonce" => Ok(ContrastiveVariant::InfoNce),
            other => Err(Error::Config(format!("unknown contrastive variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ContrastiveVariant::Ratio => "ratio",
            ContrastiveVariant::InfoNce => "infonce",
        }
    }
}

/// Stage-2 controls. The predictor is input -> 256 -> 256 -> 64 with an
/// affine classifier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage2Config {
    /// Total optimizer steps.
    pub t2: usize,
    pub lambda_cont: f64,
    pub lambda_mmd: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Minimum samples per group before a covariance term is counted.
    pub min_group: usize,
    pub contrastive_variant: ContrastiveVariant,
    /// Validation checkpoint interval, in steps.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            t2: 5000,
            lambda_cont: 1.0,
            lambda_mmd: 1.0,
            lr: 1e-3,
            batch_size: 128,
            min_group: 2,
            contrastive_variant: ContrastiveVariant::Ratio,
            eval_every: 500,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.t2 < 1 {
            return Err(Error::Contract("stage2: t2 must be >= 1".into()));
        }
        if self.lambda_cont < 0.0 || self.lambda_mmd < 0.0 {
            return Err(Error::Contract("stage2: lambdas must be >= 0".into()));
        }
        if self.min_group < 2 {
            return Err(Error::Contract("stage2: min_group must be >= 2".into()));
        }
        Ok(())
    }
}

/// Covariance discrepancy: squared Frobenius norm of the covariance
/// difference, scaled by 1/(4 d^2). Plain variant.
pub fn mmd(batch_a: &RealMatrix, batch_b: &RealMatrix) -> Result<f64> {
    if batch_a.rows() < 2 || batch_b.rows() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: batch_a.rows().min(batch_b.rows()),
        });
    }
    if batch_a.cols() != batch_b.cols() {
        return Err(Error::Contract("mmd: dimension mismatch".into()));
    }
    let ca = covariance_value(batch_a);
    let cb = covariance_value(batch_b);
    let d = batch_a.cols() as f64;
    let mut fro = 0.0;
    for (x, y) in ca.data().iter().zip(cb.data()) {
        let diff = x - y;
        fro += diff * diff;
    }
    Ok(fro / (4.0 * d * d))
}

/// Recorded version of [`mmd`] over two row groups already on the tape.
pub fn mmd_tape(tape: &mut Tape, group_a: Var, group_b: Var) -> Var {
    let d = tape.value(group_a).cols() as f64;
    let ca = tape.covariance(group_a);
    let cb = tape.covariance(group_b);
    let diff = tape.sub(ca, cb);
    let sq = tape.mul(diff, diff);
    let fro = tape.sum_all(sq);
    tape.scale(fro, 1.0 / (4.0 * d * d))
}

/// Index sets for one anchor cell (domain, class): the cell itself, its
/// positives (same class, other domains) and negatives (same domain, other
/// classes). The three sets are disjoint by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSets {
    pub domain: usize,
    pub class: usize,
    pub same: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// False when any of the three sets has fewer than `min_group` members.
    pub active: bool,
}

/// One [`PairSets`] per (domain, class) cell present in the batch, in
/// sorted (domain, class) order.
pub fn build_pairs(classes: &[usize], domains: &[usize], min_group: usize) -> Vec<PairSets> {
    assert_eq!(classes.len(), domains.len());
    let num_classes = classes.iter().max().map_or(0, |&m| m + 1);
    let num_domains = domains.iter().max().map_or(0, |&m| m + 1);
    let mut out = Vec::new();
    for d in 0..num_domains {
        for c in 0..num_classes {
            let mut same = Vec::new();
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for i in 0..classes.len() {
                match (domains[i] == d, classes[i] == c) {
                    (true, true) => same.push(i),
                    (false, true) => positives.push(i),
                    (true, false) => negatives.push(i),
                    (false, false) => {}
                }
            }
            if same.is_empty() {
                continue;
            }
            let active = same.len() >= min_group
                && positives.len() >= min_group
                && negatives.len() >= min_group;
            out.push(PairSets { domain: d, class: c, same, positives, negatives, active });
        }
    }
    out
}

/// Contrastive loss over the active cells. Returns the loss node and the
/// number of active cells (zero active cells yields a constant 0).
pub fn contrastive_loss(
    tape: &mut Tape,
    reprs: Var,
    pairs: &[PairSets],
    variant: ContrastiveVariant,
) -> (Var, usize) {
    let mut terms = Vec::new();
    for cell in pairs.iter().filter(|p| p.active) {
        let same = tape.gather_rows(reprs, &cell.same);
        let pos = tape.gather_rows(reprs, &cell.positives);
        let neg = tape.gather_rows(reprs, &cell.negatives);
        let mmd_pos = mmd_tape(tape, same, pos);
        let mmd_neg = mmd_tape(tape, same, neg);
        let neg_eps = tape.add_const(mmd_neg, EPS_DIV);
        let ratio = tape.div(mmd_pos, neg_eps);
        let one_plus = tape.add_const(ratio, 1.0);
        let mut term = tape.ln(one_plus);
        if variant == ContrastiveVariant::InfoNce {
            // Summed per anchor sample rather than per cell.
            term = tape.scale(term, cell.same.len() as f64);
        }
        terms.push(term);
    }
    let active = terms.len();
    let loss = match terms.split_first() {
        None => tape.scalar(0.0),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t);
            }
            acc
        }
    };
    (loss, active)
}

/// CORAL-style alignment: sum of covariance discrepancies over all
/// unordered pairs of domains with at least `min_group` samples. Returns
/// the loss node and the number of summed pairs.
pub fn alignment_loss(
    tape: &mut Tape,
    reprs: Var,
    domains: &[usize],
    min_group: usize,
) -> (Var, usize) {
    let num_domains = domains.iter().max().map_or(0, |&m| m + 1);
    let groups: Vec<Vec<usize>> = (0..num_domains)
        .map(|d| (0..domains.len()).filter(|&i| domains[i] == d).collect())
        .filter(|g: &Vec<usize>| g.len() >= min_group)
        .collect();
    let mut terms = Vec::new();
    let gathered: Vec<Var> = groups.iter().map(|g| tape.gather_rows(reprs, g)).collect();
    for a in 0..gathered.len() {
        for b in (a + 1)..gathered.len() {
            terms.push(mmd_tape(tape, gathered[a], gathered[b]));
        }
    }
    let pairs = terms.len();
    let loss = match terms.split_first() {
        None => tape.scalar(0.0),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t);
            }
            acc
        }
    };
    (loss, pairs)
}

/// Parts of the recorded stage-2 objective.
pub struct PredictLossVars {
    pub total: Var,
    pub cross_entropy: Var,
    /// None when the corresponding lambda is zero (term skipped entirely,
    /// so the zero-lambda total is bit-identical to plain cross-entropy).
    pub contrastive: Option<Var>,
    pub alignment: Option<Var>,
    pub active_cells: usize,
    pub active_pairs: usize,
}

/// Full objective: cross-entropy + lambda_cont * contrastive +
/// lambda_mmd * alignment, with gradients into both models.
#[allow(clippy::too_many_arguments)]
pub fn predict_loss(
    tape: &mut Tape,
    phi: &ModelVars,
    w: &ModelVars,
    batch: Var,
    classes: &[usize],
    domains: &[usize],
    lambda_cont: f64,
    lambda_mmd: f64,
    min_group: usize,
    variant: ContrastiveVariant,
) -> Result<PredictLossVars> {
    let reprs = forward_tape(tape, phi, batch);
    let logits = forward_tape(tape, w, reprs);
    let ce = softmax_cross_entropy_tape(tape, logits, classes)?;
    let mut total = ce;
    let mut contrastive = None;
    let mut alignment = None;
    let mut active_cells = 0;
    let mut active_pairs = 0;
    if lambda_cont > 0.0 {
        let pairs = build_pairs(classes, domains, min_group);
        let (l_cont, cells) = contrastive_loss(tape, reprs, &pairs, variant);
        active_cells = cells;
        let weighted = tape.scale(l_cont, lambda_cont);
        total = tape.add(total, weighted);
        contrastive = Some(l_cont);
    }
    if lambda_mmd > 0.0 {
        let (l_mmd, npairs) = alignment_loss(tape, reprs, domains, min_group);
        active_pairs = npairs;
        let weighted = tape.scale(l_mmd, lambda_mmd);
        total = tape.add(total, weighted);
        alignment = Some(l_mmd);
    }
    Ok(PredictLossVars { total, cross_entropy: ce, contrastive, alignment, active_cells, active_pairs })
}

/// One optimizer step's logged loss values.
#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub cross_entropy: f64,
    pub contrastive: f64,
    pub alignment: f64,
}

/// Output of a stage-2 (or baseline) training run.
pub struct Stage2Result {
    /// Selected parameters: best validation checkpoint when a validation
    /// set was given, otherwise the final parameters.
    pub phi: MlpModel,
    pub w: MlpModel,
    pub final_phi: MlpModel,
    pub final_w: MlpModel,
    pub log: Vec<StepLog>,
    /// (step, validation accuracy) at every checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
}

/// Train a fresh predictor for `t2` steps over stratified batches keyed to
/// the pattern. Checkpoints every `eval_every` steps (and at the end) when
/// a validation set is provided.
pub fn run_stage2(
    dataset: &Dataset,
    pattern: &DividingPattern,
    cfg: &Stage2Config,
    validation: Option<(&RealMatrix, &[usize])>,
) -> Result<Stage2Result> {
    cfg.validate()?;
    if pattern.len() != dataset.len() {
        return Err(Error::Contract("stage2: pattern length != dataset size".into()));
    }
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 0x5702));
    let mut phi = MlpModel::new(&[dataset.input_dim(), 256, 256, 64], &mut rng);
    let mut w = MlpModel::new(&[64, dataset.num_classes], &mut rng);
    let mut phi_state = AdamState::new(&phi);
    let mut w_state = AdamState::new(&w);

    let mut log = Vec::with_capacity(cfg.t2);
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
            let loss = predict_loss(
                &mut tape,
                &phi_vars,
                &w_vars,
                xv,
                &classes,
                &domains,
                cfg.lambda_cont,
                cfg.lambda_mmd,
                cfg.min_group,
                cfg.contrastive_variant,
            )?;
            log.push(StepLog {
                step,
                total: tape.value(loss.total).as_scalar(),
                cross_entropy: tape.value(loss.cross_entropy).as_scalar(),
                contrastive: loss.contrastive.map_or(0.0, |v| tape.value(v).as_scalar()),
                alignment: loss.alignment.map_or(0.0, |v| tape.value(v).as_scalar()),
            });
            let grads = tape.backward(loss.total);
            let phi_g = model_grads(&tape, &grads, &phi_vars);
            let w_g = model_grads(&tape, &grads, &w_vars);
            adam_step(&mut phi, &phi_g, &mut phi_state, cfg.lr)?;
            adam_step(&mut w, &w_g, &mut w_state, cfg.lr)?;
            step += 1;

            let at_end = step == cfg.t2;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy, PatternMode, SyntheticSpec};
    use crate::gradcheck::check_gradients;
    use crate::nn::softmax_cross_entropy;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> RealMatrix {
        let mut rng = rng_from_seed(seed);
        let mut m = RealMatrix::zeros(rows, cols);
        for v in m.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z;
        }
        m
    }

    /// Scalar-loop mmd oracle: hand covariance + Frobenius norm.
    fn mmd_oracle(a: &RealMatrix, b: &RealMatrix) -> f64 {
        let cov = |x: &RealMatrix| {
            let (n, d) = (x.rows(), x.cols());
            let mut mean = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    mean[j] += x.get(i, j) / n as f64;
                }
            }
            let mut c = vec![vec![0.0; d]; d];
            for p in 0..d {
                for q in 0..d {
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += (x.get(i, p) - mean[p]) * (x.get(i, q) - mean[q]);
                    }
                    c[p][q] = acc / (n as f64 - 1.0);
                }
            }
            c
        };
        let (ca, cb) = (cov(a), cov(b));
        let d = a.cols();
        let mut fro = 0.0;
        for p in 0..d {
            for q in 0..d {
                let diff = ca[p][q] - cb[p][q];
                fro += diff * diff;
            }
        }
        fro / (4.0 * (d * d) as f64)
    }

    #[test]
    fn mmd_known_values() {
        let a = RealMatrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let b = RealMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert!((mmd(&a, &b).unwrap() - 0.5).abs() < 1e-12);

        // Identical batches and translated batches are at zero.
        assert_eq!(mmd(&a, &a).unwrap(), 0.0);
        let shifted = a.map(|v| v + 3.25);
        assert!(mmd(&a, &shifted).unwrap().abs() < 1e-12);

        // Too few rows is a signal, not a panic.
        assert!(mmd(&RealMatrix::zeros(1, 2), &b).is_err());
    }

    #[test]
    fn mmd_matches_oracle_and_is_symmetric() {
        for trial in 0..25u64 {
            let rows_a = 2 + (trial % 7) as usize;
            let rows_b = 2 + ((trial / 2) % 7) as usize;
            let cols = 1 + (trial % 4) as usize;
            let a = random_matrix(rows_a, cols, 900 + trial);
            let b = random_matrix(rows_b, cols, 1900 + trial);
            let got = mmd(&a, &b).unwrap();
            let want = mmd_oracle(&a, &b);
            assert!((got - want).abs() <= 1e-9, "trial {trial}: {got} vs {want}");
            assert!((mmd(&b, &a).unwrap() - got).abs() < 1e-15);
            assert!(got >= 0.0);

            let mut tape = Tape::new();
            let va = tape.leaf(a.clone());
            let vb = tape.leaf(b.clone());
            let node = mmd_tape(&mut tape, va, vb);
            assert!((tape.value(node).as_scalar() - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn build_pairs_definition_trace() {
        // Cells (d0,c0), (d0,c1), (d1,c0): anchor (d0,c0) takes positives
        // from (d1,c0) and negatives from (d0,c1).
        let classes = vec![0, 0, 1, 1, 0, 0];
        let domains = vec![0, 0, 0, 0, 1, 1];
        let pairs = build_pairs(&classes, &domains, 2);
        let anchor =
            pairs.iter().find(|p| p.domain == 0 && p.class == 0).expect("anchor cell");
        assert_eq!(anchor.same, vec![0, 1]);
        assert_eq!(anchor.positives, vec![4, 5]);
        assert_eq!(anchor.negatives, vec![2, 3]);
        assert!(anchor.active);

        // Disjointness across the three sets.
        for p in &pairs {
            for i in &p.same {
                assert!(!p.positives.contains(i) && !p.negatives.contains(i));
            }
            for i in &p.positives {
                assert!(!p.negatives.contains(i));
            }
        }
    }

    #[test]
    fn single_domain_batch_has_no_active_cells() {
        let classes = vec![0, 0, 1, 1];
        let domains = vec![0, 0, 0, 0];
        let pairs = build_pairs(&classes, &domains, 2);
        assert!(pairs.iter().all(|p| !p.active));

        // And the losses stay finite and zero.
        let reprs = random_matrix(4, 3, 5);
        let mut tape = Tape::new();
        let rv = tape.leaf(reprs);
        let (cont, cells) = contrastive_loss(&mut tape, rv, &pairs, ContrastiveVariant::Ratio);
        assert_eq!(cells, 0);
        assert_eq!(tape.value(cont).as_scalar(), 0.0);
        let (align, npairs) = alignment_loss(&mut tape, rv, &domains, 2);
        assert_eq!(npairs, 0);
        assert_eq!(tape.value(align).as_scalar(), 0.0);
    }

    #[test]
    fn contrastive_loss_known_cases() {
        // Positives are a translation of the anchor cell: identical
        // covariance, so the cell contributes ln(1 + 0) = 0.
        let mut rows = Vec::new();
        let base = random_matrix(3, 2, 8);
        for i in 0..3 {
            rows.push(base.row(i).to_vec());
        }
        for i in 0..3 {
            let mut r = base.row(i).to_vec();
            for v in r.iter_mut() {
                *v += 5.0;
            }
            rows.push(r);
        }
        // Negatives with a different covariance.
        let neg = random_matrix(3, 2, 9).map(|v| v * 2.0);
        for i in 0..3 {
            rows.push(neg.row(i).to_vec());
        }
        let reprs = RealMatrix::from_rows(&rows).unwrap();
        let classes = vec![0, 0, 0, 0, 0, 0, 1, 1, 1];
        let domains = vec![0, 0, 0, 1, 1, 1, 0, 0, 0];
        let pairs = build_pairs(&classes, &domains, 2);
        let mut tape = Tape::new();
        let rv = tape.leaf(reprs.clone());
        let anchor_pairs: Vec<PairSets> = pairs
            .iter()
            .filter(|p| p.domain == 0 && p.class == 0)
            .cloned()
            .collect();
        let (loss, cells) =
            contrastive_loss(&mut tape, rv, &anchor_pairs, ContrastiveVariant::Ratio);
        assert_eq!(cells, 1);
        assert!(tape.value(loss).as_scalar().abs() < 1e-9);

        // Equal numerator and denominator: ln 2. Reuse identical values for
        // positives and negatives (disjoint indices, equal rows).
        let mut rows = Vec::new();
        let anchor = random_matrix(3, 2, 10);
        let other = random_matrix(3, 2, 11);
        for m in [&anchor, &other, &other] {
            for i in 0..3 {
                rows.push(m.row(i).to_vec());
            }
        }
        let reprs = RealMatrix::from_rows(&rows).unwrap();
        let classes = vec![0, 0, 0, 0, 0, 0, 1, 1, 1];
        let domains = vec![0, 0, 0, 1, 1, 1, 0, 0, 0];
        let pairs: Vec<PairSets> = build_pairs(&classes, &domains, 2)
            .into_iter()
            .filter(|p| p.domain == 0 && p.class == 0)
            .collect();
        let mut tape = Tape::new();
        let rv = tape.leaf(reprs);
        let (loss, _) = contrastive_loss(&mut tape, rv, &pairs, ContrastiveVariant::Ratio);
        assert!((tape.value(loss).as_scalar() - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn contrastive_loss_matches_composition_oracle() {
        let mut rng = rng_from_seed(33);
        for trial in 0..10u64 {
            let n = 24;
            let reprs = random_matrix(n, 3, 4000 + trial);
            let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let domains: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let pairs = build_pairs(&classes, &domains, 2);
            let mut tape = Tape::new();
            let rv = tape.leaf(reprs.clone());
            for variant in [ContrastiveVariant::Ratio, ContrastiveVariant::InfoNce] {
                let (loss, _) = contrastive_loss(&mut tape, rv, &pairs, variant);
                let mut want = 0.0;
                for cell in pairs.iter().filter(|p| p.active) {
                    let s = reprs.gather_rows(&cell.same);
                    let p = reprs.gather_rows(&cell.positives);
                    let ng = reprs.gather_rows(&cell.negatives);
                    let term =
                        (1.0 + mmd_oracle(&s, &p) / (mmd_oracle(&s, &ng) + EPS_DIV)).ln();
                    want += if variant == ContrastiveVariant::InfoNce {
                        cell.same.len() as f64 * term
                    } else {
                        term
                    };
                }
                assert!(
                    (tape.value(loss).as_scalar() - want).abs() <= 1e-9,
                    "trial {trial} variant {variant:?}"
                );
            }
        }
    }

    #[test]
    fn alignment_loss_reductions_and_renaming() {
        let reprs = random_matrix(12, 3, 44);
        let domains = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let mut tape = Tape::new();
        let rv = tape.leaf(reprs.clone());
        let (loss, pairs) = alignment_loss(&mut tape, rv, &domains, 2);
        assert_eq!(pairs, 1);
        let a = reprs.gather_rows(&[0, 1, 2, 3, 4, 5]);
        let b = reprs.gather_rows(&[6, 7, 8, 9, 10, 11]);
        assert!((tape.value(loss).as_scalar() - mmd(&a, &b).unwrap()).abs() < 1e-12);

        // Swapping domain ids leaves the sum unchanged.
        let renamed: Vec<usize> = domains.iter().map(|&d| 1 - d).collect();
        let mut tape2 = Tape::new();
        let rv2 = tape2.leaf(reprs.clone());
        let (loss2, _) = alignment_loss(&mut tape2, rv2, &renamed, 2);
        assert!(
            (tape.value(loss).as_scalar() - tape2.value(loss2).as_scalar()).abs() < 1e-12
        );
    }

    #[test]
    fn predict_loss_reductions() {
        let mut rng = rng_from_seed(50);
        let phi = MlpModel::new(&[3, 8, 4], &mut rng);
        let w = MlpModel::new(&[4, 2], &mut rng);
        let x = random_matrix(16, 3, 51);
        let classes: Vec<usize> = (0..16).map(|i| i % 2).collect();
        let domains: Vec<usize> = (0..16).map(|i| (i / 4) % 2).collect();

        // Zero lambdas: bit-identical to the plain cross-entropy.
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pv = register_model(&mut tape, &phi);
        let wv = register_model(&mut tape, &w);
        let loss = predict_loss(
            &mut tape, &pv, &wv, xv, &classes, &domains, 0.0, 0.0, 2,
            ContrastiveVariant::Ratio,
        )
        .unwrap();
        let ce = softmax_cross_entropy(&w.forward(&phi.forward(&x).unwrap()).unwrap(), &classes)
            .unwrap();
        assert_eq!(tape.value(loss.total).as_scalar().to_bits(), ce.to_bits());
        assert!(loss.contrastive.is_none() && loss.alignment.is_none());

        // Unit lambdas: the total equals the sum of independently computed
        // terms.
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let pv = register_model(&mut tape, &phi);
        let wv = register_model(&mut tape, &w);
        let loss = predict_loss(
            &mut tape, &pv, &wv, xv, &classes, &domains, 1.0, 1.0, 2,
            ContrastiveVariant::Ratio,
        )
        .unwrap();
        let reprs = phi.forward(&x).unwrap();
        let pairs = build_pairs(&classes, &domains, 2);
        let mut t2 = Tape::new();
        let rv = t2.leaf(reprs.clone());
        let (cont, _) = contrastive_loss(&mut t2, rv, &pairs, ContrastiveVariant::Ratio);
        let (align, _) = alignment_loss(&mut t2, rv, &domains, 2);
        let want =
            ce + t2.value(cont).as_scalar() + t2.value(align).as_scalar();
        assert!((tape.value(loss.total).as_scalar() - want).abs() < 1e-12);
    }

    #[test]
    fn predict_loss_passes_gradient_contract() {
        let mut rng = rng_from_seed(52);
        let phi = MlpModel::new(&[2, 5, 3], &mut rng);
        let w = MlpModel::new(&[3, 2], &mut rng);
        let x = random_matrix(12, 2, 53);
        let classes: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let domains: Vec<usize> = (0..12).map(|i| (i / 3) % 2).collect();
        let mut params: Vec<RealMatrix> = Vec::new();
        params.extend(phi.weights.iter().cloned());
        params.extend(phi.biases.iter().cloned());
        params.extend(w.weights.iter().cloned());
        params.extend(w.biases.iter().cloned());
        let report = check_gradients(
            &params,
            &mut |tape, vars| {
                let pv = crate::nn::ModelVars {
                    weights: vars[0..2].to_vec(),
                    biases: vars[2..4].to_vec(),
                };
                let wv = crate::nn::ModelVars {
                    weights: vars[4..5].to_vec(),
                    biases: vars[5..6].to_vec(),
                };
                let xv = tape.leaf(x.clone());
                predict_loss(
                    tape, &pv, &wv, xv, &classes, &domains, 1.0, 1.0, 2,
                    ContrastiveVariant::Ratio,
                )
                .unwrap()
                .total
            },
            1e-4,
        );
        assert!(report.passes(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn single_cell_batch_is_finite() {
        // One class in one domain: both extra terms inactive, loss finite.
        let mut rng = rng_from_seed(54);
        let phi = MlpModel::new(&[2, 4, 3], &mut rng);
        let w = MlpModel::new(&[3, 2], &mut rng);
        let x = random_matrix(6, 2, 55);
        let classes = vec![0, 0, 0, 0, 0, 0];
        let domains = vec![0, 0, 0, 0, 0, 0];
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let pv = register_model(&mut tape, &phi);
        let wv = register_model(&mut tape, &w);
        let loss = predict_loss(
            &mut tape, &pv, &wv, xv, &classes, &domains, 1.0, 1.0, 2,
            ContrastiveVariant::Ratio,
        )
        .unwrap();
        assert!(tape.value(loss.total).as_scalar().is_finite());
        assert_eq!(loss.active_cells, 0);
        assert_eq!(loss.active_pairs, 0);
        assert_eq!(loss.contrastive.map(|v| tape.value(v).as_scalar()), Some(0.0));
        assert_eq!(loss.alignment.map(|v| tape.value(v).as_scalar()), Some(0.0));
    }

    #[test]
    fn run_stage2_reduces_loss_and_is_deterministic() {
        let spec = SyntheticSpec {
            n_per_class_per_env: 40,
            initial_pattern_mode: PatternMode::Aligned,
            ..SyntheticSpec::default()
        };
        let data = generate_toy(&spec).unwrap();
        let pattern = data.original_pattern();
        let cfg = Stage2Config { t2: 80, batch_size: 32, seed: 9, ..Stage2Config::default() };
        let a = run_stage2(&data, &pattern, &cfg, None).unwrap();
        let b = run_stage2(&data, &pattern, &cfg, None).unwrap();
        assert_eq!(a.final_phi, b.final_phi);
        assert_eq!(a.final_w, b.final_w);

        let k = a.log.len() / 10;
        let head: f64 =
            a.log[..k].iter().map(|l| l.cross_entropy).sum::<f64>() / k as f64;
        let tail: f64 = a.log[a.log.len() - k..].iter().map(|l| l.cross_entropy).sum::<f64>()
            / k as f64;
        assert!(tail < head, "cross-entropy did not decrease: {head} -> {tail}");
    }
}
