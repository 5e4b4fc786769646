//! Datasets, dividing patterns, and the synthetic generators used by the
//! benchmarks: a cluster-structured toy set whose variant features carry a
//! latent environment, and a correlation-shift set where the variant feature
//! is spuriously predictive in training environments and anti-predictive in
//! the held-out one.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::RealMatrix;
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Feature matrix plus class and domain labels. Immutable after
/// construction; all invariants are checked both on construction and load.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: RealMatrix,
    pub class_labels: Vec<usize>,
    pub domain_labels: Vec<usize>,
    /// Ground-truth variant-feature clusters, synthetic data only.
    pub latent_groups: Option<Vec<usize>>,
    pub num_classes: usize,
    pub num_domains: usize,
}

impl Dataset {
    pub fn new(
        features: RealMatrix,
        class_labels: Vec<usize>,
        domain_labels: Vec<usize>,
        latent_groups: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::Contract("dataset must contain at least one sample".into()));
        }
        if class_labels.len() != n || domain_labels.len() != n {
            return Err(Error::Contract(format!(
                "label lengths ({}, {}) do not match {} samples",
                class_labels.len(),
                domain_labels.len(),
                n
            )));
        }
        if let Some(g) = &latent_groups {
            if g.len() != n {
                return Err(Error::Contract("latent group length mismatch".into()));
            }
        }
        let num_classes = check_contiguous(&class_labels, "class")?;
        let num_domains = check_contiguous(&domain_labels, "domain")?;
        Ok(Dataset { features, class_labels, domain_labels, latent_groups, num_classes, num_domains })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// The original domain labels as a dividing pattern (the initial pattern
    /// for stage 1).
    pub fn original_pattern(&self) -> DividingPattern {
        DividingPattern { assignment: self.domain_labels.clone(), num_domains: self.num_domains }
    }

    /// Subset by sample indices, remapping class/domain ids to stay
    /// contiguous. Returns the subset plus the (class, domain) id maps
    /// (old id -> new id, absent entries dropped).
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() {
            return Err(Error::Contract("empty subset".into()));
        }
        let features = self.features.gather_rows(idx);
        let classes: Vec<usize> = idx.iter().map(|&i| self.class_labels[i]).collect();
        let domains: Vec<usize> = idx.iter().map(|&i| self.domain_labels[i]).collect();
        let classes = remap_contiguous(&classes);
        let domains = remap_contiguous(&domains);
        let latent = self
            .latent_groups
            .as_ref()
            .map(|g| idx.iter().map(|&i| g[i]).collect::<Vec<usize>>())
            .map(|g| remap_contiguous(&g));
        Dataset::new(features, classes, domains, latent)
    }
}

fn check_contiguous(labels: &[usize], kind: &str) -> Result<usize> {
    let max = *labels.iter().max().unwrap();
    let mut seen = vec![false; max + 1];
    for &l in labels {
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Contract(format!(
            "{kind} index {missing} never occurs (indices must be contiguous from 0)"
        )));
    }
    Ok(max + 1)
}

fn remap_contiguous(labels: &[usize]) -> Vec<usize> {
    let max = *labels.iter().max().unwrap();
    let mut map = vec![usize::MAX; max + 1];
    let mut next = 0;
    // Assign new ids in order of old id, not order of appearance, so the
    // remap is independent of sample order.
    for old in 0..=max {
        if labels.contains(&old) {
            map[old] = next;
            next += 1;
        }
    }
    labels.iter().map(|&l| map[l]).collect()
}

/// Assignment of every sample to one of `num_domains` domains: the object
/// stage 1 produces and stage 2 consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct DividingPattern {
    pub assignment: Vec<usize>,
    pub num_domains: usize,
}

impl DividingPattern {
    pub fn new(assignment: Vec<usize>, num_domains: usize) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::Contract("pattern must cover at least one sample".into()));
        }
        if let Some(&bad) = assignment.iter().find(|&&d| d >= num_domains) {
            return Err(Error::Contract(format!(
                "domain {bad} out of range for {num_domains} domains"
            )));
        }
        Ok(DividingPattern { assignment, num_domains })
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Sample count per domain.
    pub fn domain_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_domains];
        for &d in &self.assignment {
            counts[d] += 1;
        }
        counts
    }
}

/// How the initial domain labels of a synthetic dataset relate to the
/// latent environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PatternMode {
    /// Domain equals the latent environment.
    Aligned,
    /// Each domain holds an equal share of every latent environment.
    Mixed,
    /// Uniformly random assignment.
    Random,
}

impl PatternMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(PatternMode::Aligned),
            "mixed" => Ok(PatternMode::Mixed),
            "random" => Ok(PatternMode::Random),
            other => Err(Error::Config(format!("unknown pattern mode '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PatternMode::Aligned => "aligned",
            PatternMode::Mixed => "mixed",
            PatternMode::Random => "random",
        }
    }
}

/// Parameters of the synthetic generators.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub n_per_class_per_env: usize,
    pub num_classes: usize,
    pub num_latent_envs: usize,
    /// Invariant-feature dimension (class-informative coordinates).
    pub d_inv: usize,
    /// Variant-feature dimension (environment-informative coordinates).
    pub d_var: usize,
    pub class_center_scale: f64,
    pub env_center_scale: f64,
    pub noise_std: f64,
    /// Probability of flipping the observed class label (spurious only).
    pub label_noise: f64,
    /// Per-training-environment probability that the variant feature agrees
    /// with the observed label (spurious only).
    pub correlations: Vec<f64>,
    /// Agreement probability in the held-out test environment.
    pub correlation_test: f64,
    /// Per-color increment of the variant-block noise scale (spurious
    /// only): color c draws with std noise_std * variant_scale *
    /// (1 + step * c), so the shortcut has a second-moment signature.
    pub variant_spread_step: f64,
    /// Overall scale of the spurious variant block. Second-moment penalties
    /// grow with the fourth power of this scale while the shortcut's
    /// per-sample readability stays fixed (it is a variance ratio).
    pub variant_scale: f64,
    pub initial_pattern_mode: PatternMode,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_per_class_per_env: 250,
            num_classes: 2,
            num_latent_envs: 2,
            d_inv: 5,
            d_var: 5,
            class_center_scale: 3.0,
            env_center_scale: 3.0,
            noise_std: 0.5,
            label_noise: 0.25,
            correlations: vec![0.9, 0.8],
            correlation_test: 0.1,
            variant_spread_step: 0.5,
            variant_scale: 1.0,
            initial_pattern_mode: PatternMode::Mixed,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_per_class_per_env == 0
            || self.num_classes == 0
            || self.num_latent_envs == 0
            || self.d_inv == 0
            || self.d_var == 0
        {
            return Err(Error::Contract("synthetic spec: counts and dims must be >= 1".into()));
        }
        if self.noise_std <= 0.0 {
            return Err(Error::Contract("synthetic spec: noise_std must be > 0".into()));
        }
        for &p in self.correlations.iter().chain([&self.label_noise, &self.correlation_test]) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Contract(format!(
                    "synthetic spec: probability {p} outside [0,1]"
                )));
            }
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Draw the class and environment centers once per seed.
fn draw_centers(spec: &SyntheticSpec, rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let class_centers =
        (0..spec.num_classes).map(|_| normal_vec(rng, spec.d_inv, spec.class_center_scale)).collect();
    let env_centers =
        (0..spec.num_latent_envs).map(|_| normal_vec(rng, spec.d_var, spec.env_center_scale)).collect();
    (class_centers, env_centers)
}

fn initial_domains(mode: PatternMode, latent: &[usize], num_envs: usize, rng: &mut Rng) -> Vec<usize> {
    match mode {
        PatternMode::Aligned => latent.to_vec(),
        PatternMode::Mixed => {
            // Deal each latent environment's samples round-robin across
            // domains so every domain holds an equal share of every
            // environment (within one sample).
            let mut domains = vec![0usize; latent.len()];
            for e in 0..num_envs {
                let mut members: Vec<usize> =
                    (0..latent.len()).filter(|&i| latent[i] == e).collect();
                members.shuffle(rng);
                for (k, &i) in members.iter().enumerate() {
                    domains[i] = k % num_envs;
                }
            }
            domains
        }
        PatternMode::Random => (0..latent.len()).map(|_| rng.gen_range(0..num_envs)).collect(),
    }
}

/// Cluster-structured toy dataset: invariant coordinates carry the class,
/// variant coordinates carry a latent environment. Domain labels follow
/// `initial_pattern_mode`.
pub fn generate_toy(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let (class_centers, env_centers) = draw_centers(spec, &mut rng);

    let n = spec.n_per_class_per_env * spec.num_classes * spec.num_latent_envs;
    let d = spec.d_inv + spec.d_var;
    let mut features = RealMatrix::zeros(n, d);
    let mut classes = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    let mut row = 0;
    for e in 0..spec.num_latent_envs {
        for y in 0..spec.num_classes {
            for _ in 0..spec.n_per_class_per_env {
                let out = features.row_mut(row);
                for (k, v) in out.iter_mut().take(spec.d_inv).enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = class_centers[y][k] + z * spec.noise_std;
                }
                for (k, v) in out.iter_mut().skip(spec.d_inv).enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = env_centers[e][k] + z * spec.noise_std;
                }
                classes.push(y);
                latent.push(e);
                row += 1;
            }
        }
    }
    let domains =
        initial_domains(spec.initial_pattern_mode, &latent, spec.num_latent_envs, &mut rng);
    Dataset::new(features, classes, domains, Some(latent))
}

/// Correlation-shift dataset: the variant feature agrees with the observed
/// label with probability `correlations[e]` per training environment, and
/// `correlation_test` in the held-out test environment. Label noise is
/// applied before the variant feature is drawn, so in training environments
/// the variant feature predicts the observed label better than the invariant
/// feature can. Returns (train, test).
///
/// Each color shifts both the mean and the spread of the variant block
/// (spread factor 0.5 + color), so the shortcut is visible to second-moment
/// statistics as well as to the classifier.
pub fn generate_spurious(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if spec.num_latent_envs < 2 {
        return Err(Error::Contract("spurious benchmark needs >= 2 training environments".into()));
    }
    if spec.correlations.len() != spec.num_latent_envs {
        return Err(Error::Contract(format!(
            "spurious benchmark: {} correlations for {} environments",
            spec.correlations.len(),
            spec.num_latent_envs
        )));
    }
    let mut rng = rng_from_seed(spec.seed);
    let (class_centers, env_centers_raw) = draw_centers(spec, &mut rng);
    // Variant centers index by "color" (the spuriously correlated group),
    // one per class.
    let env_centers: Vec<Vec<f64>> = if env_centers_raw.len() >= spec.num_classes {
        env_centers_raw
    } else {
        let mut c = env_centers_raw;
        while c.len() < spec.num_classes {
            let v = normal_vec(&mut rng, spec.d_var, spec.env_center_scale);
            c.push(v);
        }
        c
    };

    let gen_env = |rho: f64, env_id: usize, rng: &mut Rng| -> (Vec<Vec<f64>>, Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut classes = Vec::new();
        let mut colors = Vec::new();
        let mut envs = Vec::new();
        for true_y in 0..spec.num_classes {
            for _ in 0..spec.n_per_class_per_env {
                // Observed label: flipped with probability label_noise.
                let y = if rng.gen::<f64>() < spec.label_noise {
                    let mut other = rng.gen_range(0..spec.num_classes - 1);
                    if other >= true_y {
                        other += 1;
                    }
                    other
                } else {
                    true_y
                };
                // Color: agrees with the observed label with probability rho.
                let color = if rng.gen::<f64>() < rho {
                    y
                } else {
                    let mut other = rng.gen_range(0..spec.num_classes - 1);
                    if other >= y {
                        other += 1;
                    }
                    other
                };
                let mut x = Vec::with_capacity(spec.d_inv + spec.d_var);
                for k in 0..spec.d_inv {
                    let z: f64 = StandardNormal.sample(rng);
                    x.push(class_centers[true_y][k] + z * spec.noise_std);
                }
                let spread =
                    spec.noise_std * spec.variant_scale * (1.0 + spec.variant_spread_step * color as f64);
                for k in 0..spec.d_var {
                    let z: f64 = StandardNormal.sample(rng);
                    x.push(env_centers[color][k] + z * spread);
                }
                rows.push(x);
                classes.push(y);
                colors.push(color);
                envs.push(env_id);
            }
        }
        (rows, classes, colors, envs)
    };

    let mut rows = Vec::new();
    let mut classes = Vec::new();
    let mut colors = Vec::new();
    let mut envs = Vec::new();
    for (e, &rho) in spec.correlations.iter().enumerate() {
        let (r, c, col, ev) = gen_env(rho, e, &mut rng);
        rows.extend(r);
        classes.extend(c);
        colors.extend(col);
        envs.extend(ev);
    }
    let domains = initial_domains(spec.initial_pattern_mode, &envs, spec.num_latent_envs, &mut rng);
    let train = Dataset::new(RealMatrix::from_rows(&rows)?, classes, domains, Some(colors))?;

    let mut test_rng = rng_from_seed(derive_seed(spec.seed, 0x7357));
    let (rows, classes, colors, _) = gen_env(spec.correlation_test, 0, &mut test_rng);
    let n_test = rows.len();
    let test = Dataset::new(
        RealMatrix::from_rows(&rows)?,
        classes,
        vec![0; n_test],
        Some(colors),
    )?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// CSV persistence
// ---------------------------------------------------------------------------

/// 17 significant digits: enough to reproduce any f64 exactly on parse.
fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_real(s: &str, path: &str, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("invalid real number '{s}'"),
    })
}

fn parse_index(s: &str, path: &str, line: usize, what: &str) -> Result<usize> {
    s.trim().parse::<usize>().map_err(|_| Error::Parse {
        path: path.to_string(),
        line,
        msg: format!("invalid {what} index '{s}'"),
    })
}

/// Write a dataset as CSV: `f0,...,f{d-1},class,domain[,latent_group]`.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let d = dataset.input_dim();
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "f{j},");
    }
    out.push_str("class,domain");
    if dataset.latent_groups.is_some() {
        out.push_str(",latent_group");
    }
    out.push('\n');
    for i in 0..dataset.len() {
        for &v in dataset.features.row(i) {
            out.push_str(&fmt_real(v));
            out.push(',');
        }
        let _ = write!(out, "{},{}", dataset.class_labels[i], dataset.domain_labels[i]);
        if let Some(g) = &dataset.latent_groups {
            let _ = write!(out, ",{}", g[i]);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`]. All dataset invariants are
/// re-checked; violations surface as parse errors naming the line.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().filter(|(_, h)| !h.trim().is_empty()).ok_or(Error::Parse {
        path: pstr.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    let has_latent = cols.last() == Some(&"latent_group");
    let label_cols = if has_latent { 3 } else { 2 };
    if cols.len() < label_cols + 1 {
        return Err(Error::Parse { path: pstr, line: 1, msg: "header too short".into() });
    }
    let d = cols.len() - label_cols;
    for (j, c) in cols.iter().take(d).enumerate() {
        if *c != format!("f{j}") {
            return Err(Error::Parse {
                path: pstr,
                line: 1,
                msg: format!("expected column f{j}, found '{c}'"),
            });
        }
    }
    if cols[d] != "class" || cols[d + 1] != "domain" {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            msg: "expected 'class,domain' after feature columns".into(),
        });
    }

    let mut rows = Vec::new();
    let mut classes = Vec::new();
    let mut domains = Vec::new();
    let mut latent = Vec::new();
    for (idx, line_text) in lines {
        let line_no = idx + 1;
        if line_text.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line_text.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                msg: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for f in fields.iter().take(d) {
            row.push(parse_real(f, &pstr, line_no)?);
        }
        rows.push(row);
        classes.push(parse_index(fields[d], &pstr, line_no, "class")?);
        domains.push(parse_index(fields[d + 1], &pstr, line_no, "domain")?);
        if has_latent {
            latent.push(parse_index(fields[d + 2], &pstr, line_no, "latent group")?);
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse { path: pstr, line: 1, msg: "no data rows".into() });
    }
    let features = RealMatrix::from_rows(&rows)?;
    Dataset::new(features, classes, domains, if has_latent { Some(latent) } else { None })
        .map_err(|e| Error::Parse { path: pstr, line: 1, msg: e.to_string() })
}

/// Write a pattern as CSV: header `index,domain`, one row per sample.
pub fn save_pattern(pattern: &DividingPattern, path: &Path) -> Result<()> {
    let mut out = String::from("index,domain\n");
    for (i, &d) in pattern.assignment.iter().enumerate() {
        let _ = writeln!(out, "{i},{d}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a pattern for a dataset of `n` samples. Rows may appear in any
/// order but every index in [0, n) must occur exactly once.
pub fn load_pattern(path: &Path, n: usize) -> Result<DividingPattern> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        path: pstr.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    if header.trim() != "index,domain" {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            msg: format!("expected header 'index,domain', found '{header}'"),
        });
    }
    let mut assignment = vec![usize::MAX; n];
    let mut filled = 0usize;
    for (idx, line_text) in lines {
        let line_no = idx + 1;
        if line_text.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line_text.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                msg: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        let i = parse_index(fields[0], &pstr, line_no, "sample")?;
        let d = parse_index(fields[1], &pstr, line_no, "domain")?;
        if i >= n {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                msg: format!("sample index {i} out of range for {n} samples"),
            });
        }
        if assignment[i] != usize::MAX {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                msg: format!("duplicate sample index {i}"),
            });
        }
        assignment[i] = d;
        filled += 1;
    }
    if filled != n {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            msg: format!("pattern covers {filled} of {n} samples"),
        });
    }
    let num_domains = assignment.iter().max().copied().unwrap_or(0) + 1;
    DividingPattern::new(assignment, num_domains)
}

/// Write bare embeddings (no labels): header `f0,...,f{d-1}`.
pub fn save_embeddings(features: &RealMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for j in 0..features.cols() {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "f{j}");
    }
    out.push('\n');
    for i in 0..features.rows() {
        for (j, &v) in features.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&fmt_real(v));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<RealMatrix> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().filter(|(_, h)| !h.trim().is_empty()).ok_or(Error::Parse {
        path: pstr.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let d = header.split(',').count();
    let mut rows = Vec::new();
    for (idx, line_text) in lines {
        let line_no = idx + 1;
        if line_text.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line_text.split(',').collect();
        if fields.len() != d {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                msg: format!("expected {d} fields, found {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for f in fields {
            row.push(parse_real(f, &pstr, line_no)?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { path: pstr, line: 1, msg: "no data rows".into() });
    }
    RealMatrix::from_rows(&rows)
}

/// Class labels as CSV: header `index,class`. Same shape rules as patterns.
pub fn save_classes(classes: &[usize], path: &Path) -> Result<()> {
    let mut out = String::from("index,class\n");
    for (i, &c) in classes.iter().enumerate() {
        let _ = writeln!(out, "{i},{c}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_classes(path: &Path, n: usize) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        path: pstr.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    if header.trim() != "index,class" {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            msg: format!("expected header 'index,class', found '{header}'"),
        });
    }
    let mut classes = vec![usize::MAX; n];
    let mut filled = 0usize;
    for (idx, line_text) in lines {
        let line_no = idx + 1;
        if line_text.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line_text.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                msg: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        let i = parse_index(fields[0], &pstr, line_no, "sample")?;
        let c = parse_index(fields[1], &pstr, line_no, "class")?;
        if i >= n || classes[i] != usize::MAX {
            return Err(Error::Parse {
                path: pstr,
                line: line_no,
                msg: format!("bad or duplicate sample index {i}"),
            });
        }
        classes[i] = c;
        filled += 1;
    }
    if filled != n {
        return Err(Error::Parse {
            path: pstr,
            line: 1,
            msg: format!("classes cover {filled} of {n} samples"),
        });
    }
    Ok(classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::adjusted_rand_index;

    #[test]
    fn mixed_mode_splits_each_latent_env_evenly() {
        let spec = SyntheticSpec::default();
        let data = generate_toy(&spec).unwrap();
        let latent = data.latent_groups.as_ref().unwrap();
        for e in 0..2 {
            for d in 0..2 {
                let count = (0..data.len())
                    .filter(|&i| latent[i] == e && data.domain_labels[i] == d)
                    .count();
                // 500 samples per env, two domains.
                assert!((count as i64 - 250).abs() <= 1, "env {e} domain {d}: {count}");
            }
        }
    }

    #[test]
    fn aligned_mode_matches_latent_groups_exactly() {
        let spec = SyntheticSpec {
            initial_pattern_mode: PatternMode::Aligned,
            ..SyntheticSpec::default()
        };
        let data = generate_toy(&spec).unwrap();
        let latent = data.latent_groups.as_ref().unwrap();
        assert_eq!(adjusted_rand_index(&data.domain_labels, latent), 1.0);
    }

    #[test]
    fn vanishing_noise_separates_variant_clusters() {
        let spec = SyntheticSpec {
            noise_std: 1e-9,
            env_center_scale: 10.0,
            n_per_class_per_env: 10,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let data = generate_toy(&spec).unwrap();
        let latent = data.latent_groups.as_ref().unwrap();
        let d_inv = spec.d_inv;
        let var_dist = |i: usize, j: usize| {
            let (a, b) = (data.features.row(i), data.features.row(j));
            let mut acc = 0.0;
            for k in d_inv..a.len() {
                let d = a[k] - b[k];
                acc += d * d;
            }
            acc.sqrt()
        };
        let mut within_max: f64 = 0.0;
        let mut cross_min = f64::INFINITY;
        for i in 0..data.len() {
            for j in (i + 1)..data.len() {
                let d = var_dist(i, j);
                if latent[i] == latent[j] {
                    within_max = within_max.max(d);
                } else {
                    cross_min = cross_min.min(d);
                }
            }
        }
        assert!(within_max < 1e-6, "within-env variant spread {within_max}");
        assert!(cross_min > 1.0, "cross-env variant distance {cross_min}");
    }

    #[test]
    fn generators_are_deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_toy(&spec).unwrap(), generate_toy(&spec).unwrap());
        let (a_tr, a_te) = generate_spurious(&spec).unwrap();
        let (b_tr, b_te) = generate_spurious(&spec).unwrap();
        assert_eq!(a_tr, b_tr);
        assert_eq!(a_te, b_te);
        let other = SyntheticSpec { seed: 1, ..spec };
        assert_ne!(generate_toy(&other).unwrap(), generate_toy(&SyntheticSpec::default()).unwrap());
    }

    #[test]
    fn spurious_with_full_correlation_is_color_separable() {
        // rho = 1, no label noise: the color (variant cluster) equals the
        // observed label on every training sample.
        let spec = SyntheticSpec {
            label_noise: 0.0,
            correlations: vec![1.0, 1.0],
            ..SyntheticSpec::default()
        };
        let (train, _) = generate_spurious(&spec).unwrap();
        let colors = train.latent_groups.as_ref().unwrap();
        for i in 0..train.len() {
            assert_eq!(colors[i], train.class_labels[i]);
        }
    }

    #[test]
    fn spurious_test_split_reverses_the_correlation() {
        let spec = SyntheticSpec { seed: 11, ..SyntheticSpec::default() };
        let (train, test) = generate_spurious(&spec).unwrap();
        let agree = |d: &Dataset| {
            let colors = d.latent_groups.as_ref().unwrap();
            let hits =
                (0..d.len()).filter(|&i| colors[i] == d.class_labels[i]).count();
            hits as f64 / d.len() as f64
        };
        // Train agreement ~ (0.9 + 0.8) / 2, test ~ 0.1.
        let tr = agree(&train);
        let te = agree(&test);
        assert!((tr - 0.85).abs() < 0.05, "train color agreement {tr}");
        assert!((te - 0.1).abs() < 0.05, "test color agreement {te}");
    }

    #[test]
    fn dataset_rejects_non_contiguous_labels() {
        let f = RealMatrix::zeros(3, 2);
        assert!(Dataset::new(f.clone(), vec![0, 0, 2], vec![0, 1, 0], None).is_err());
        assert!(Dataset::new(f, vec![0, 1, 0], vec![0, 2, 2], None).is_err());
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("htcl_dataset_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.csv");
        let data = generate_toy(&SyntheticSpec::default()).unwrap();
        save_dataset(&data, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(data, loaded);
    }

    #[test]
    fn dataset_parse_errors_name_the_line() {
        let dir = std::env::temp_dir().join("htcl_dataset_parse");
        std::fs::create_dir_all(&dir).unwrap();

        let p = dir.join("empty.csv");
        std::fs::write(&p, "").unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }

        let p = dir.join("badrow.csv");
        std::fs::write(&p, "f0,f1,class,domain\n1.0,2.0,0,0\n1.0,0,1\n").unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        // Domain 2 never... domain 1 missing: non-contiguous.
        let p = dir.join("gap.csv");
        std::fs::write(&p, "f0,class,domain\n1.0,0,0\n2.0,1,2\n").unwrap();
        assert!(load_dataset(&p).is_err());
    }

    #[test]
    fn pattern_roundtrip_and_errors() {
        let dir = std::env::temp_dir().join("htcl_pattern_io");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.csv");
        let pattern = DividingPattern::new(vec![0, 1, 1, 0, 1], 2).unwrap();
        save_pattern(&pattern, &path).unwrap();
        assert_eq!(load_pattern(&path, 5).unwrap(), pattern);

        // Shorter than n.
        assert!(load_pattern(&path, 6).is_err());

        // Duplicate index.
        let p = dir.join("dup.csv");
        std::fs::write(&p, "index,domain\n0,0\n0,1\n").unwrap();
        assert!(load_pattern(&p, 2).is_err());
    }

    #[test]
    fn embeddings_roundtrip() {
        let dir = std::env::temp_dir().join("htcl_embed_io");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("e.csv");
        let m = RealMatrix::from_rows(&[vec![1.5, -2.25e-7], vec![0.1 + 0.2, 3.0]]).unwrap();
        save_embeddings(&m, &path).unwrap();
        assert_eq!(load_embeddings(&path).unwrap(), m);
    }
}
