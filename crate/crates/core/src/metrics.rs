//! Evaluation battery: SSIM, MC-SSIM, Fréchet distance and intra-cluster
//! diversity over declared feature extractors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
/// Images whose smaller side is below this use global SSIM.
pub const GLOBAL_SSIM_BELOW: usize = 16;
const FRECHET_RIDGE: f64 = 1e-6;

pub const REPORT_HEADER: &str = "Synthetic desk-scale metrics: Fréchet distances use the declared \
feature extractor and diversity uses unit-normalized features, not Inception or LPIPS networks. \
Values are comparable across runs of this tool only.";

fn image_dims(x: &Tensor) -> (usize, usize) {
    match x.shape() {
        [h, w] => (*h, *w),
        [n] => (1, *n),
        s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
    }
}

fn ssim_stats(
    a: impl Iterator<Item = (f64, f64, f64)> + Clone,
    l: f64,
) -> f64 {
    // inputs are (weight, a, b) triples with weights summing to 1
    let (mut ma, mut mb) = (0.0, 0.0);
    for (w, x, y) in a.clone() {
        ma += w * x;
        mb += w * y;
    }
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (w, x, y) in a {
        va += w * ((x - ma) * (x - ma));
        vb += w * ((y - mb) * (y - mb));
        // deviations multiply first: swapping images is bit-exact and
        // identical images give cov == va == vb
        cov += w * ((x - ma) * (y - mb));
    }
    let c1 = (K1 * l).powi(2);
    let c2 = (K2 * l).powi(2);
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

fn gaussian_window() -> Vec<f64> {
    let c = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Structural similarity with dynamic range `l`.
pub fn ssim(a: &Tensor, b: &Tensor, l: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "ssim needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !(l > 0.0) {
        return Err(Error::invalid("dynamic range must be positive"));
    }
    let (h, w) = image_dims(a);
    let (da, db) = (a.data(), b.data());
    if h.min(w) < GLOBAL_SSIM_BELOW {
        let wt = 1.0 / da.len() as f64;
        return Ok(ssim_stats(
            da.iter().zip(db).map(move |(&x, &y)| (wt, x, y)),
            l,
        ));
    }
    let g = gaussian_window();
    let mut acc = 0.0;
    let (rows, cols) = (h - WINDOW + 1, w - WINDOW + 1);
    for r in 0..rows {
        for c in 0..cols {
            let g = &g;
            let it = (0..WINDOW).flat_map(move |i| {
                (0..WINDOW).map(move |j| {
                    let k = (r + i) * w + c + j;
                    (g[i] * g[j], da[k], db[k])
                })
            });
            acc += ssim_stats(it, l);
        }
    }
    Ok(acc / (rows * cols) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McDirection {
    /// For each target, the best `n` generated matches.
    #[default]
    PerTarget,
    /// For each generated sample, the best `n` target matches.
    PerGenerated,
}

/// Mode-coverage SSIM: mean of top-`n` SSIM scores, averaged over the
/// anchoring set chosen by `direction`.
pub fn mc_ssim(
    generated: &[Tensor],
    targets: &[Tensor],
    n: usize,
    direction: McDirection,
    l: f64,
) -> Result<f64> {
    if generated.is_empty() || targets.is_empty() {
        return Err(Error::invalid("mc_ssim needs non-empty sets"));
    }
    let (anchors, pool) = match direction {
        McDirection::PerTarget => (targets, generated),
        McDirection::PerGenerated => (generated, targets),
    };
    if n == 0 || n > pool.len() {
        return Err(Error::invalid(format!(
            "mc_ssim n = {n} outside 1..={}",
            pool.len()
        )));
    }
    let mut total = 0.0;
    for a in anchors {
        let mut scores = pool
            .iter()
            .map(|p| ssim(a, p, l))
            .collect::<Result<Vec<f64>>>()?;
        scores.sort_by(|x, y| y.total_cmp(x));
        total += scores[..n].iter().sum::<f64>() / n as f64;
    }
    Ok(total / anchors.len() as f64)
}

fn moments(features: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let d = features[0].len();
    let mut mu = DVector::zeros(d);
    for f in features {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two mean/covariance pairs.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> f64 {
    let root_a = psd_sqrt(cov_a.clone());
    let mut inner = &root_a * cov_b * &root_a;
    // symmetrize before the eigensolver; round-off makes it slightly lopsided
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let dmu = (mu_a - mu_b).norm_squared();
    (dmu + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0)
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    if features_a.len() < 2 || features_b.len() < 2 {
        return Err(Error::invalid("frechet needs at least two samples per side"));
    }
    let d = features_a[0].len();
    if features_a.iter().chain(features_b).any(|f| f.len() != d) {
        return Err(Error::shape("frechet features differ in dimension"));
    }
    let (mu_a, mut cov_a) = moments(features_a);
    let (mu_b, mut cov_b) = moments(features_b);
    for i in 0..d {
        cov_a[(i, i)] += FRECHET_RIDGE;
        cov_b[(i, i)] += FRECHET_RIDGE;
    }
    let v = frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b);
    if !v.is_finite() {
        return Err(Error::numeric(0, "frechet distance is not finite"));
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureKind {
    Identity,
    Pixels,
    RandomProjection { seed: u64, output_dim: usize },
}

impl FeatureKind {
    pub fn label(&self) -> String {
        match self {
            FeatureKind::Identity => "identity".into(),
            FeatureKind::Pixels => "pixels".into(),
            FeatureKind::RandomProjection { seed, output_dim } => {
                format!("random-projection(seed={seed},dim={output_dim})")
            }
        }
    }
}

/// Deterministic map from samples to feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    kind: FeatureKind,
    input_dim: usize,
    /// Row-major `[output_dim, input_dim]`, only for random projections.
    projection: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(kind: FeatureKind, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("feature input dimension must be positive"));
        }
        let projection = match kind {
            FeatureKind::RandomProjection { seed, output_dim } => {
                if output_dim == 0 {
                    return Err(Error::invalid("projection dimension must be positive"));
                }
                let mut st = RngStream::new(seed, "feature-projection");
                let scale = 1.0 / (output_dim as f64).sqrt();
                let mut m = vec![0.0; output_dim * input_dim];
                st.fill_normal(&mut m);
                m.iter_mut().for_each(|v| *v *= scale);
                m
            }
            _ => Vec::new(),
        };
        Ok(Self {
            kind,
            input_dim,
            projection,
        })
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            FeatureKind::RandomProjection { output_dim, .. } => output_dim,
            _ => self.input_dim,
        }
    }

    pub fn extract(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::shape(format!(
                "extractor expects {} values, got {}",
                self.input_dim,
                x.len()
            )));
        }
        match self.kind {
            FeatureKind::Pixels if x.rank() < 2 => {
                Err(Error::shape("pixel features need an image tensor"))
            }
            FeatureKind::Identity | FeatureKind::Pixels => Ok(x.data().to_vec()),
            FeatureKind::RandomProjection { .. } => Ok(self
                .projection
                .chunks(self.input_dim)
                .map(|row| row.iter().zip(x.data()).map(|(a, b)| a * b).sum())
                .collect()),
        }
    }

    pub fn extract_all(&self, xs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.extract(x)).collect()
    }
}

/// How generated samples are assigned to target clusters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterRule {
    /// Highest SSIM with the target (images).
    MaxSsim,
    /// Smallest feature distance (points).
    NearestFeature,
}

impl ClusterRule {
    pub fn for_sample(x: &Tensor) -> Self {
        if x.rank() >= 2 {
            ClusterRule::MaxSsim
        } else {
            ClusterRule::NearestFeature
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub value: f64,
    /// Clusters with at least two members.
    pub clusters_scored: usize,
    /// True when no cluster had two members.
    pub degenerate: bool,
    pub assignment: Vec<usize>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean pairwise distance between unit-normalized features inside each
/// target's cluster, averaged over clusters with at least two members.
pub fn intra_diversity(
    generated: &[Tensor],
    targets: &[Tensor],
    extractor: &FeatureExtractor,
    rule: ClusterRule,
) -> Result<Diversity> {
    if targets.is_empty() {
        return Err(Error::invalid("intra_diversity needs at least one target"));
    }
    if generated.len() < 2 {
        return Err(Error::invalid("intra_diversity needs at least two samples"));
    }
    let gen_f = extractor.extract_all(generated)?;
    let assignment = match rule {
        ClusterRule::MaxSsim => generated
            .iter()
            .map(|g| {
                let mut best = (0, f64::NEG_INFINITY);
                for (j, y) in targets.iter().enumerate() {
                    let s = ssim(g, y, 1.0)?;
                    if s > best.1 {
                        best = (j, s);
                    }
                }
                Ok(best.0)
            })
            .collect::<Result<Vec<_>>>()?,
        ClusterRule::NearestFeature => {
            let tgt_f = extractor.extract_all(targets)?;
            gen_f
                .iter()
                .map(|g| {
                    let mut best = (0, f64::INFINITY);
                    for (j, y) in tgt_f.iter().enumerate() {
                        let d = distance(g, y);
                        if d < best.1 {
                            best = (j, d);
                        }
                    }
                    best.0
                })
                .collect()
        }
    };
    let normed: Vec<Vec<f64>> = gen_f.iter().map(|f| unit(f)).collect();
    let mut total = 0.0;
    let mut scored = 0;
    for j in 0..targets.len() {
        let members: Vec<usize> = (0..generated.len()).filter(|&i| assignment[i] == j).collect();
        if members.len() < 2 {
            continue;
        }
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for (p, &a) in members.iter().enumerate() {
            for &b in &members[p + 1..] {
                acc += distance(&normed[a], &normed[b]);
                pairs += 1;
            }
        }
        total += acc / pairs as f64;
        scored += 1;
    }
    Ok(Diversity {
        value: if scored == 0 { 0.0 } else { total / scored as f64 },
        clusters_scored: scored,
        degenerate: scored == 0,
        assignment,
    })
}

/// Mean pairwise Euclidean distance, unnormalized.
pub fn mean_pairwise_distance(xs: &[Tensor]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(Error::invalid("pairwise distance needs two samples"));
    }
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            acc += xs[i].sub(&xs[j])?.norm();
            pairs += 1;
        }
    }
    Ok(acc / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub mc_ssim_n: usize,
    pub mc_direction: McDirection,
    pub features: FeatureKind,
    /// Dynamic range for SSIM.
    pub range: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            mc_ssim_n: 3,
            mc_direction: McDirection::PerTarget,
            features: FeatureKind::Pixels,
            range: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfigEcho {
    pub mc_ssim_n: usize,
    pub mc_direction: McDirection,
    pub cluster_rule: ClusterRule,
    pub features: String,
    pub global_ssim_below: usize,
    /// Size of the set the Fréchet distance is measured against.
    pub frechet_reference: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub header: String,
    pub config_hash: Option<String>,
    /// Reconstruction SSIM per target, in target order.
    pub ssim: Vec<f64>,
    pub mean_ssim: Option<f64>,
    pub mc_ssim: Option<f64>,
    pub frechet: f64,
    pub intra_diversity: f64,
    pub diversity_degenerate: bool,
    pub config: ReportConfigEcho,
    pub n_generated: usize,
    pub n_targets: usize,
}

pub const CSV_HEADER: &str =
    "label,mean_ssim,mc_ssim,frechet,intra_diversity,diversity_degenerate,n_generated,n_targets";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.17e}")).unwrap_or_default()
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{label},{},{},{:.17e},{:.17e},{},{},{}",
            opt(self.mean_ssim),
            opt(self.mc_ssim),
            self.frechet,
            self.intra_diversity,
            self.diversity_degenerate,
            self.n_generated,
            self.n_targets
        )
    }
}

/// Scores a generated set against the targets. `reconstructions`, when
/// non-empty, pairs index-wise with `targets` for per-sample SSIM. The
/// Fréchet distance uses `reference` when given, else the targets.
pub fn evaluate(
    generated: &[Tensor],
    targets: &[Tensor],
    reconstructions: &[Tensor],
    reference: Option<&[Tensor]>,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    let first = targets
        .first()
        .ok_or_else(|| Error::invalid("evaluation needs targets"))?;
    let images = first.rank() >= 2;
    let rule = ClusterRule::for_sample(first);
    let extractor = FeatureExtractor::new(cfg.features, first.len())?;
    if !reconstructions.is_empty() && reconstructions.len() != targets.len() {
        return Err(Error::invalid("one reconstruction per target is required"));
    }
    // SSIM is an image score; point domains report none
    let ssim_pairs = reconstructions
        .iter()
        .zip(targets)
        .filter(|_| images)
        .map(|(r, y)| ssim(r, y, cfg.range))
        .collect::<Result<Vec<_>>>()?;
    let mean_ssim =
        (!ssim_pairs.is_empty()).then(|| ssim_pairs.iter().sum::<f64>() / ssim_pairs.len() as f64);
    let mc = if images {
        let n = cfg.mc_ssim_n.min(match cfg.mc_direction {
            McDirection::PerTarget => generated.len(),
            McDirection::PerGenerated => targets.len(),
        });
        Some(mc_ssim(generated, targets, n, cfg.mc_direction, cfg.range)?)
    } else {
        None
    };
    let reference = reference.unwrap_or(targets);
    let frechet_v = frechet(
        &extractor.extract_all(generated)?,
        &extractor.extract_all(reference)?,
    )?;
    let div = intra_diversity(generated, targets, &extractor, rule)?;
    let report = MetricsReport {
        header: REPORT_HEADER.into(),
        config_hash: None,
        ssim: ssim_pairs,
        mean_ssim,
        mc_ssim: mc,
        frechet: frechet_v,
        intra_diversity: div.value,
        diversity_degenerate: div.degenerate,
        config: ReportConfigEcho {
            mc_ssim_n: cfg.mc_ssim_n,
            mc_direction: cfg.mc_direction,
            cluster_rule: rule,
            features: cfg.features.label(),
            global_ssim_below: GLOBAL_SSIM_BELOW,
            frechet_reference: reference.len(),
        },
        n_generated: generated.len(),
        n_targets: targets.len(),
    };
    let finite = report.ssim.iter().chain(&report.mean_ssim).chain(&report.mc_ssim).all(|v| v.is_finite())
        && report.frechet.is_finite()
        && report.intra_diversity.is_finite();
    if !finite {
        return Err(Error::numeric(0, "metrics report contains non-finite values"));
    }
    Ok(report)
}
