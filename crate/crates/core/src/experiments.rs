//! Seeded generators and pipelines comparing truncated and classical
//! barycenters: nested-ellipse images with outliers in one quadrant, Gaussian
//! contamination, Student-t heavy tails, and a generic 1-D
//! sample → measure pipeline.
//!
//! Every random quantity comes from a ChaCha stream keyed by
//! `(seed, stream id)`, so results do not depend on scheduling.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;

use crate::cluster::{kmeans, nearest};
use crate::cost::CostSpec;
use crate::entropic::{ibp_barycenter, SinkhornParams};
use crate::error::{Error, Result};
use crate::exact_ot::wasserstein_1d_cost;
use crate::free_support::{
    evaluate, free_support_from, kmeans_init, BarycenterProblem, FreeSupportOptions, MassSolver, ObjectiveMethod,
};
use crate::measures::{image_to_measure, DiscreteMeasure, GrayImage, DEFAULT_PRUNE_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    EllipseImages,
    Contamination,
    Heavytail,
    Pipeline1d,
}

impl Scenario {
    pub fn tag(&self) -> &'static str {
        match self {
            Scenario::EllipseImages => "ellipse_images",
            Scenario::Contamination => "contamination",
            Scenario::Heavytail => "heavytail",
            Scenario::Pipeline1d => "pipeline1d",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse_images" | "images" => Ok(Scenario::EllipseImages),
            "contamination" => Ok(Scenario::Contamination),
            "heavytail" => Ok(Scenario::Heavytail),
            "pipeline1d" => Ok(Scenario::Pipeline1d),
            other => Err(Error::invalid(format!("unknown scenario '{other}'"))),
        }
    }
}

/// Half-open pixel rectangle `[r0, r1) × [c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Region {
    pub const EMPTY: Region = Region {
        r0: 0,
        r1: 0,
        c0: 0,
        c1: 0,
    };

    /// Upper-right quadrant `[0, ⌊n/2⌋) × [n − ⌊n/2⌋, n)`.
    pub fn upper_right(n: usize) -> Region {
        let k = n / 2;
        Region {
            r0: 0,
            r1: k,
            c0: n - k,
            c1: n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.r0 >= self.r1 || self.c0 >= self.c1
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.r0..self.r1).contains(&r) && (self.c0..self.c1).contains(&c)
    }

    /// Fraction of the image's mass inside the region.
    pub fn mass_fraction(&self, image: &GrayImage) -> f64 {
        let total = image.total();
        if self.is_empty() || total <= 0.0 {
            return 0.0;
        }
        image.region_mass(self.r0, self.r1, self.c0, self.c1) / total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub n_datasets: usize,
    pub samples_per_dataset: usize,
    /// Number of k-means support points for the 1-D scenarios.
    pub support_size: usize,
    /// Ratio used by single-ratio runs (`gen_contamination`, pipeline1d).
    pub contamination_ratio: f64,
    /// Ratios swept by the contamination scenario.
    pub ratios: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub p: f64,
    pub image_size: usize,
    /// Free-support barycenter size for images.
    pub r: usize,
    pub outlier_region: Region,
    /// Absolute entropic strength; `None` picks `1e-2 · λ_min^p` in sweeps
    /// and `2e-2 · λ^p` for images.
    pub epsilon: Option<f64>,
    /// Two-sided tail probability of the pipeline1d outlier split.
    pub tail_quantile: f64,
    pub outer_max: usize,
}

impl ExperimentConfig {
    /// Small sizes that keep a full sweep within minutes.
    pub fn desk(scenario: Scenario, seed: u64) -> Self {
        let base = ExperimentConfig {
            scenario,
            seed,
            n_datasets: 20,
            samples_per_dataset: 500,
            support_size: 50,
            contamination_ratio: 0.05,
            ratios: vec![0.0, 0.05, 0.10, 0.15, 0.20, 0.25],
            lambda_grid: (1..=7).map(|k| 10.0 * k as f64).collect(),
            p: 1.0,
            image_size: 20,
            r: 40,
            outlier_region: Region::upper_right(20),
            epsilon: None,
            tail_quantile: 0.005,
            outer_max: 20,
        };
        match scenario {
            Scenario::Heavytail => ExperimentConfig {
                lambda_grid: (3..=11).map(|k| 10.0 * k as f64).collect(),
                ratios: vec![],
                p: 2.0,
                ..base
            },
            Scenario::EllipseImages => ExperimentConfig {
                lambda_grid: vec![2.5],
                ..base
            },
            _ => base,
        }
    }

    /// Full-size runs.
    pub fn full_scale(scenario: Scenario, seed: u64) -> Self {
        let desk = Self::desk(scenario, seed);
        ExperimentConfig {
            n_datasets: if scenario == Scenario::EllipseImages { 200 } else { 100 },
            samples_per_dataset: 1000,
            support_size: if scenario == Scenario::Pipeline1d { 200 } else { 100 },
            ratios: (0..=25).map(|k| k as f64 / 100.0).collect(),
            image_size: 40,
            r: 105,
            outlier_region: Region::upper_right(40),
            lambda_grid: if scenario == Scenario::EllipseImages {
                vec![5.0]
            } else {
                desk.lambda_grid.clone()
            },
            ..desk
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_datasets", self.n_datasets),
            ("samples_per_dataset", self.samples_per_dataset),
            ("support_size", self.support_size),
            ("image_size", self.image_size),
            ("r", self.r),
            ("outer_max", self.outer_max),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        let in_unit = |r: f64| (0.0..=1.0).contains(&r);
        if !in_unit(self.contamination_ratio) || !self.ratios.iter().all(|&r| in_unit(r)) {
            return Err(Error::invalid("contamination ratios must lie in [0, 1]"));
        }
        if self.lambda_grid.is_empty()
            || self.lambda_grid.iter().any(|l| !(*l > 0.0))
            || self.lambda_grid.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::invalid("lambda grid must be positive and strictly ascending"));
        }
        CostSpec::new(self.p, self.lambda_grid[0])?;
        if self.scenario == Scenario::EllipseImages && self.image_size < 10 {
            return Err(Error::invalid("image_size must be at least 10"));
        }
        if self.outlier_region.r1 > self.image_size || self.outlier_region.c1 > self.image_size {
            return Err(Error::invalid("outlier region exceeds the image"));
        }
        if !(0.0..0.5).contains(&self.tail_quantile) {
            return Err(Error::invalid("tail_quantile must lie in [0, 0.5)"));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::invalid("epsilon must be > 0"));
            }
        }
        Ok(())
    }
}

/// One row of a sweep output.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub scenario: Scenario,
    /// `+∞` marks the classical barycenter.
    pub lambda: f64,
    /// `None` for records that aggregate over ratios or have no ratio.
    pub ratio: Option<f64>,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "scenario,lambda,ratio,metric,value,seed";

impl RunRecord {
    pub fn to_csv_row(&self) -> String {
        let lambda = if self.lambda.is_infinite() {
            "inf".to_string()
        } else {
            self.lambda.to_string()
        };
        let ratio = self.ratio.map(|r| r.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{:.12e},{}",
            self.scenario, lambda, ratio, self.metric, self.value, self.seed
        )
    }
}

/// Header plus one line per record.
pub fn records_to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

/// Independent RNG for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const DATA_STREAMS: u64 = 0;
const SUPPORT_STREAMS: u64 = 1 << 32;
const SOLVER_STREAMS: u64 = 2 << 32;

fn draw_ellipse(img: &mut GrayImage, center: (f64, f64), axes: (f64, f64), angle: f64) {
    let n = img.rows();
    let steps = (8.0 * (axes.0 + axes.1)).ceil() as usize * 4;
    let (s, c) = angle.sin_cos();
    for k in 0..steps {
        let t = std::f64::consts::TAU * k as f64 / steps as f64;
        let (x, y) = (axes.0 * t.cos(), axes.1 * t.sin());
        let r = (center.0 + c * x - s * y).round();
        let col = (center.1 + s * x + c * y).round();
        if r >= 0.0 && col >= 0.0 && (r as usize) < n && (col as usize) < n {
            img.set(r as usize, col as usize, 1.0);
        }
    }
}

/// Two concentric random ellipse outlines in the lower-left quadrant plus
/// 1–5 outlier pixels of intensity in `[0.5, 1]` inside `outlier_region`.
///
/// The common center sits at `(0.75n, 0.25n)` up to a jitter of `0.025n`
/// and the outer semi-axes lie in `[0.12n, 0.18n]`, so the outlines never
/// reach the default upper-right quadrant.
pub fn gen_ellipse_images(cfg: &ExperimentConfig) -> Result<Vec<GrayImage>> {
    cfg.validate()?;
    let n = cfg.image_size;
    let nf = n as f64;
    let images = (0..cfg.n_datasets)
        .map(|j| {
            let mut rng = stream_rng(cfg.seed, DATA_STREAMS + j as u64);
            let mut img = GrayImage::zeros(n, n);
            let jitter = 0.025 * nf;
            let center = (
                0.75 * nf - 0.5 + rng.random_range(-jitter..=jitter),
                0.25 * nf - 0.5 + rng.random_range(-jitter..=jitter),
            );
            let outer = (rng.random_range(0.12 * nf..=0.18 * nf), rng.random_range(0.12 * nf..=0.18 * nf));
            let shrink = rng.random_range(0.4..=0.7);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            draw_ellipse(&mut img, center, outer, angle);
            draw_ellipse(&mut img, center, (outer.0 * shrink, outer.1 * shrink), angle);
            let region = cfg.outlier_region;
            if !region.is_empty() {
                let count = rng.random_range(1..=5);
                for _ in 0..count {
                    let r = rng.random_range(region.r0..region.r1);
                    let c = rng.random_range(region.c0..region.c1);
                    img.set(r, c, rng.random_range(0.5..=1.0));
                }
            }
            img
        })
        .collect();
    Ok(images)
}

/// Signal `N(μ₀, 1)` with `μ₀ ~ U(−20, 20)` mixed with exactly
/// `⌊ratio · m⌋` draws of `N(μ₁, 1)`, `μ₁ ~ U(30, 70)`.
///
/// Dataset `j` uses the same stream for every ratio: the centers and the
/// standard-normal noise are shared, only the split point moves.
pub fn gen_contamination(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    Ok(contamination_at(cfg, cfg.contamination_ratio))
}

fn contamination_at(cfg: &ExperimentConfig, ratio: f64) -> Vec<Vec<f64>> {
    let m = cfg.samples_per_dataset;
    let k = ((ratio * m as f64) + 1e-9).floor() as usize;
    (0..cfg.n_datasets)
        .map(|j| {
            let mut rng = stream_rng(cfg.seed, DATA_STREAMS + j as u64);
            let mu0 = rng.random_range(-20.0..20.0);
            let mu1 = rng.random_range(30.0..70.0);
            (0..m)
                .map(|s| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if s < m - k {
                        mu0 + z
                    } else {
                        mu1 + z
                    }
                })
                .collect()
        })
        .collect()
}

/// `t(3)` draws shifted by a per-dataset `m ~ U(−50, 50)`.
pub fn gen_heavytail(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    Ok(heavytail_with_range(cfg, 50.0))
}

fn heavytail_with_range(cfg: &ExperimentConfig, half_range: f64) -> Vec<Vec<f64>> {
    let t3 = StudentT::new(3.0).expect("valid degrees of freedom");
    (0..cfg.n_datasets)
        .map(|j| {
            let mut rng = stream_rng(cfg.seed, DATA_STREAMS + j as u64);
            let m = if half_range > 0.0 {
                rng.random_range(-half_range..half_range)
            } else {
                0.0
            };
            (0..cfg.samples_per_dataset).map(|_| m + t3.sample(&mut rng)).collect()
        })
        .collect()
}

fn as_points(samples: &[f64]) -> Vec<&[f64]> {
    samples.iter().map(std::slice::from_ref).collect()
}

/// 1-D k-means support (k-means++, at most 100 Lloyd steps) with the
/// fraction of samples nearest each centroid as mass. Coinciding centroids
/// are merged.
pub fn samples_to_measure(samples: &[f64], support_size: usize, seed: u64) -> Result<DiscreteMeasure> {
    if samples.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    if support_size == 0 || support_size > samples.len() {
        return Err(Error::invalid(format!(
            "support_size {support_size} must lie in 1..={}",
            samples.len()
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("samples"));
    }
    let mut rng = stream_rng(seed, SUPPORT_STREAMS);
    let km = kmeans(&as_points(samples), &vec![1.0; samples.len()], support_size, 100, &mut rng);
    let support: Vec<f64> = km.centroids.iter().map(|c| c[0]).collect();
    Ok(histogram_on(samples, &support)?.merge_duplicates())
}

/// Frequencies of the samples' nearest support points (lower index on ties).
/// Empty bins keep zero mass so every histogram shares the support.
pub fn histogram_on(samples: &[f64], support: &[f64]) -> Result<DiscreteMeasure> {
    if samples.is_empty() || support.is_empty() {
        return Err(Error::EmptyMeasure);
    }
    let centroids: Vec<Vec<f64>> = support.iter().map(|&x| vec![x]).collect();
    let mut counts = vec![0.0; support.len()];
    for &x in samples {
        counts[nearest(&[x], &centroids)] += 1.0;
    }
    DiscreteMeasure::from_unnormalized(centroids, counts)
}

/// Gaussian KDE on `grid` with Silverman's bandwidth `1.06 σ̂ n^(−1/5)`.
pub fn kde_curve(samples: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid("KDE needs at least two samples"));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let h = 1.06 * var.sqrt() * (n as f64).powf(-0.2);
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&g| {
            samples
                .iter()
                .map(|&x| {
                    let u = (g - x) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect())
}

/// Density evaluated on `n` equispaced points of `[lo, hi]`, renormalized.
pub fn discretize_density(density: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Result<DiscreteMeasure> {
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|k| vec![lo + (hi - lo) * k as f64 / (n - 1).max(1) as f64])
        .collect();
    let w = pts.iter().map(|x| density(x[0])).collect();
    DiscreteMeasure::from_unnormalized(pts, w)
}

/// Reference barycenter: `N(0, 1)` on 200 points over `±6`, or `t(3)` on 400
/// points over `±20` for the heavy-tail scenario.
pub fn true_barycenter(scenario: Scenario) -> Result<DiscreteMeasure> {
    match scenario {
        Scenario::Heavytail => discretize_density(|x| (1.0 + x * x / 3.0).powi(-2), -20.0, 20.0, 400),
        _ => discretize_density(|x| (-0.5 * x * x).exp(), -6.0, 6.0, 200),
    }
}

/// Untruncated `W_p` between two 1-D measures.
fn w_p_1d(a: &DiscreteMeasure, b: &DiscreteMeasure, p: f64) -> Result<f64> {
    Ok(wasserstein_1d_cost(a, b, p)?.powf(1.0 / p))
}

/// Entropic strength shared by every λ of a sweep.
fn sweep_epsilon(cfg: &ExperimentConfig) -> f64 {
    cfg.epsilon.unwrap_or_else(|| 1e-2 * cfg.lambda_grid[0].powf(cfg.p))
}

fn sweep_params(cfg: &ExperimentConfig) -> SinkhornParams {
    SinkhornParams {
        tol: 1e-7,
        ..SinkhornParams::absolute(sweep_epsilon(cfg))
    }
}

/// Histograms of every dataset on a shared pooled k-means support.
fn shared_histograms(datasets: &[Vec<f64>], support_size: usize, seed: u64, stream: u64) -> Result<Vec<DiscreteMeasure>> {
    let pooled: Vec<f64> = datasets.iter().flatten().copied().collect();
    let mut rng = stream_rng(seed, SUPPORT_STREAMS + stream);
    let k = support_size.min(pooled.len());
    let km = kmeans(&as_points(&pooled), &vec![1.0; pooled.len()], k, 100, &mut rng);
    let mut support: Vec<f64> = km.centroids.iter().map(|c| c[0]).collect();
    support.sort_by(f64::total_cmp);
    datasets.iter().map(|d| histogram_on(d, &support)).collect()
}

/// Distance to the reference of the barycenter for each λ in the grid
/// followed by `λ = ∞`.
fn barycenter_errors(
    cfg: &ExperimentConfig,
    inputs: Vec<DiscreteMeasure>,
    truth: &DiscreteMeasure,
) -> Result<Vec<(f64, f64)>> {
    let support = inputs[0].points_vec();
    let params = sweep_params(cfg);
    let problem = BarycenterProblem::uniform(inputs, CostSpec::untruncated(cfg.p)?)?;
    let lambdas: Vec<f64> = cfg.lambda_grid.iter().copied().chain([f64::INFINITY]).collect();
    lambdas
        .into_iter()
        .map(|lambda| {
            let pb = problem.with_spec(CostSpec::new(cfg.p, lambda)?);
            let bary = ibp_barycenter(&pb, &support, &params)?.measure(&support)?;
            Ok((lambda, w_p_1d(&bary, truth, cfg.p)?))
        })
        .collect()
}

/// Records of one sweep cell; a failing cell yields its error.
fn sweep_cell(cfg: &ExperimentConfig, index: usize, ratio: Option<f64>) -> Result<Vec<RunRecord>> {
    let datasets = match cfg.scenario {
        Scenario::Heavytail => heavytail_with_range(cfg, 50.0),
        _ => contamination_at(cfg, ratio.unwrap_or(cfg.contamination_ratio)),
    };
    let truth = true_barycenter(cfg.scenario)?;
    let mut records = Vec::new();
    let inputs = if cfg.scenario == Scenario::Pipeline1d {
        let (inputs, outlier_fraction) = split_pipeline(cfg, &datasets)?;
        records.push(record(cfg, f64::INFINITY, ratio, "outlier_fraction", outlier_fraction));
        inputs
    } else {
        shared_histograms(&datasets, cfg.support_size, cfg.seed, index as u64)?
    };
    for (lambda, err) in barycenter_errors(cfg, inputs, &truth)? {
        records.push(record(cfg, lambda, ratio, "w_to_true", err));
    }
    Ok(records)
}

fn record(cfg: &ExperimentConfig, lambda: f64, ratio: Option<f64>, metric: &str, value: f64) -> RunRecord {
    RunRecord {
        scenario: cfg.scenario,
        lambda,
        ratio,
        metric: metric.to_string(),
        value,
        seed: cfg.seed,
    }
}

/// Two-sided pooled quantile split, then k-means supports on each side:
/// about 5% of the support points (at least one) go to the tails.
fn split_pipeline(cfg: &ExperimentConfig, datasets: &[Vec<f64>]) -> Result<(Vec<DiscreteMeasure>, f64)> {
    let mut pooled: Vec<f64> = datasets.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let q = |p: f64| pooled[((p * (pooled.len() - 1) as f64).round() as usize).min(pooled.len() - 1)];
    let (lo, hi) = (q(cfg.tail_quantile), q(1.0 - cfg.tail_quantile));
    let (clean, out): (Vec<f64>, Vec<f64>) = pooled.iter().partition(|&&x| x >= lo && x <= hi);
    let n_out = if out.is_empty() {
        0
    } else {
        ((cfg.support_size as f64 * 0.05).round() as usize).clamp(1, out.len())
    };
    let n_clean = cfg.support_size.saturating_sub(n_out).clamp(1, clean.len().max(1));
    let mut rng = stream_rng(cfg.seed, SUPPORT_STREAMS);
    let mut support: Vec<f64> = kmeans(&as_points(&clean), &vec![1.0; clean.len()], n_clean, 100, &mut rng)
        .centroids
        .iter()
        .map(|c| c[0])
        .collect();
    if n_out > 0 {
        let km = kmeans(&as_points(&out), &vec![1.0; out.len()], n_out, 100, &mut rng);
        support.extend(km.centroids.iter().map(|c| c[0]));
    }
    support.sort_by(f64::total_cmp);
    support.dedup();
    let inputs = datasets
        .iter()
        .map(|d| histogram_on(d, &support))
        .collect::<Result<Vec<_>>>()?;
    Ok((inputs, out.len() as f64 / pooled.len() as f64))
}

/// Records appended before a failure, and the failure if any.
#[derive(Debug)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub error: Option<Error>,
}

/// Runs the configured scenario and keeps whatever finished before an error.
///
/// 1-D scenarios emit `w_to_true` for every (ratio, λ) cell, `λ = ∞` being
/// the classical barycenter, then `mean_w_to_true` per λ averaged over
/// ratios. Images emit outlier-region leakage and objective values.
pub fn run_sweep_partial(cfg: &ExperimentConfig) -> SweepOutcome {
    if let Err(e) = cfg.validate() {
        return SweepOutcome {
            records: vec![],
            error: Some(e),
        };
    }
    if cfg.scenario == Scenario::EllipseImages {
        return match run_image_experiment(cfg) {
            Ok(o) => SweepOutcome {
                records: o.records,
                error: None,
            },
            Err(e) => SweepOutcome {
                records: vec![],
                error: Some(e),
            },
        };
    }
    let cells: Vec<Option<f64>> = match cfg.scenario {
        Scenario::Contamination if !cfg.ratios.is_empty() => cfg.ratios.iter().map(|&r| Some(r)).collect(),
        Scenario::Heavytail => vec![None],
        _ => vec![Some(cfg.contamination_ratio)],
    };
    let results: Vec<Result<Vec<RunRecord>>> = cells
        .par_iter()
        .enumerate()
        .map(|(k, &ratio)| sweep_cell(cfg, k, ratio))
        .collect();
    let mut records = Vec::new();
    for res in results {
        match res {
            Ok(r) => records.extend(r),
            Err(e) => return SweepOutcome { records, error: Some(e) },
        }
    }
    let lambdas: Vec<f64> = cfg.lambda_grid.iter().copied().chain([f64::INFINITY]).collect();
    for lambda in lambdas {
        let vals: Vec<f64> = records
            .iter()
            .filter(|r| r.metric == "w_to_true" && r.lambda == lambda)
            .map(|r| r.value)
            .collect();
        if !vals.is_empty() {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            records.push(record(cfg, lambda, None, "mean_w_to_true", mean));
        }
    }
    SweepOutcome { records, error: None }
}

pub fn run_lambda_sweep(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let out = run_sweep_partial(cfg);
    match out.error {
        Some(e) => Err(e),
        None => Ok(out.records),
    }
}

/// Classical and truncated free-support barycenters of generated images.
#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub lambda: f64,
    pub wb: DiscreteMeasure,
    pub rwb: DiscreteMeasure,
    pub wb_image: GrayImage,
    pub rwb_image: GrayImage,
    /// Outlier-region mass fraction of the rendered barycenters.
    pub wb_leak: f64,
    pub rwb_leak: f64,
    /// Truncated objective of the fixed-support (pixel grid) barycenter.
    pub f_fixed: f64,
    /// Same objective after free-support refinement started from it.
    pub f_free: f64,
    pub records: Vec<RunRecord>,
}

/// Shared by the classical and truncated runs: `ε = 2e-2 · λ^p` unless set.
fn image_params(cfg: &ExperimentConfig) -> SinkhornParams {
    let eps = cfg.epsilon.unwrap_or_else(|| 2e-2 * cfg.lambda_grid[0].powf(cfg.p));
    SinkhornParams {
        tol: 1e-7,
        ..SinkhornParams::absolute(eps)
    }
}

/// Pixel grid of an `n × n` image in `(row, col)` coordinates.
pub fn pixel_grid(n: usize) -> Vec<Vec<f64>> {
    (0..n * n).map(|k| vec![(k / n) as f64, (k % n) as f64]).collect()
}

/// Free-support barycenters with `λ = lambda_grid[0]` and `λ = ∞`, their
/// outlier leakage, and the truncated objective of the fixed-support grid
/// barycenter before and after free-support refinement.
pub fn run_image_experiment(cfg: &ExperimentConfig) -> Result<ImageOutcome> {
    cfg.validate()?;
    let n = cfg.image_size;
    let images = gen_ellipse_images(cfg)?;
    let inputs = images.iter().map(image_to_measure).collect::<Result<Vec<_>>>()?;
    let lambda = cfg.lambda_grid[0];
    let robust = BarycenterProblem::uniform(inputs, CostSpec::new(cfg.p, lambda)?)?;
    let classical = robust.with_spec(CostSpec::untruncated(cfg.p)?);
    let params = image_params(cfg);
    let exact = ObjectiveMethod::Exact { cap: usize::MAX };
    let options = FreeSupportOptions {
        mass_solver: MassSolver::Ibp(params),
        evaluation: exact,
        outer_max: cfg.outer_max,
        outer_tol: 1e-6,
    };

    let init = kmeans_init(&robust, cfg.r, cfg.seed ^ SOLVER_STREAMS);
    let rwb = free_support_from(&robust, &init, None, &options)?.barycenter;
    let wb = free_support_from(&classical, &init, None, &options)?.barycenter;
    let rwb_image = GrayImage::splat(&rwb, n, n)?;
    let wb_image = GrayImage::splat(&wb, n, n)?;
    let rwb_leak = cfg.outlier_region.mass_fraction(&rwb_image);
    let wb_leak = cfg.outlier_region.mass_fraction(&wb_image);

    let grid = pixel_grid(n);
    let fixed = ibp_barycenter(&robust, &grid, &params)?;
    let (f_fixed, _) = evaluate(&robust, &grid, &fixed.mass, exact)?;
    let start = fixed.measure(&grid)?.prune(DEFAULT_PRUNE_THRESHOLD);
    let refined = free_support_from(&robust, &start.points_vec(), Some(start.weights()), &options)?;
    let f_free = *refined.objective_trace.last().unwrap_or(&refined.initial_objective);

    let records = vec![
        record(cfg, lambda, None, "leak", rwb_leak),
        record(cfg, f64::INFINITY, None, "leak", wb_leak),
        record(cfg, lambda, None, "f_fixed", f_fixed),
        record(cfg, lambda, None, "f_free", f_free),
    ];
    Ok(ImageOutcome {
        lambda,
        wb,
        rwb,
        wb_image,
        rwb_image,
        wb_leak,
        rwb_leak,
        f_fixed,
        f_free,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(scenario: Scenario) -> ExperimentConfig {
        ExperimentConfig {
            n_datasets: 4,
            samples_per_dataset: 100,
            ..ExperimentConfig::desk(scenario, 7)
        }
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::desk(Scenario::Contamination, 0).validate().is_ok());
        assert!(ExperimentConfig::full_scale(Scenario::EllipseImages, 0).validate().is_ok());
        let bad = ExperimentConfig {
            lambda_grid: vec![20.0, 10.0],
            ..cfg(Scenario::Contamination)
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig {
            contamination_ratio: 1.5,
            ..cfg(Scenario::Contamination)
        };
        assert!(bad.validate().is_err());
        assert_eq!("heavytail".parse::<Scenario>().unwrap(), Scenario::Heavytail);
        assert!("nope".parse::<Scenario>().is_err());
    }

    #[test]
    fn contamination_counts_are_exact() {
        let c = ExperimentConfig {
            contamination_ratio: 0.1,
            samples_per_dataset: 1000,
            ..cfg(Scenario::Contamination)
        };
        for d in gen_contamination(&c).unwrap() {
            assert_eq!(d.len(), 1000);
            assert_eq!(d.iter().filter(|&&x| x > 25.0).count(), 100);
        }
        let clean = ExperimentConfig {
            contamination_ratio: 0.0,
            ..c
        };
        for d in gen_contamination(&clean).unwrap() {
            assert!(d.iter().all(|&x| x < 25.0));
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let c = cfg(Scenario::Heavytail);
        assert_eq!(gen_heavytail(&c).unwrap(), gen_heavytail(&c).unwrap());
        let c = cfg(Scenario::EllipseImages);
        assert_eq!(gen_ellipse_images(&c).unwrap(), gen_ellipse_images(&c).unwrap());
        let other = ExperimentConfig { seed: 8, ..c.clone() };
        assert_ne!(gen_ellipse_images(&c).unwrap(), gen_ellipse_images(&other).unwrap());
    }

    #[test]
    fn heavytail_collapsed_range_is_centered() {
        let c = ExperimentConfig {
            samples_per_dataset: 2000,
            ..cfg(Scenario::Heavytail)
        };
        for d in heavytail_with_range(&c, 0.0) {
            let mut s = d.clone();
            s.sort_by(f64::total_cmp);
            assert!(s[1000].abs() < 0.2);
        }
    }

    #[test]
    fn images_have_outliers_only_in_region() {
        let c = ExperimentConfig {
            n_datasets: 30,
            ..cfg(Scenario::EllipseImages)
        };
        let reg = c.outlier_region;
        for img in gen_ellipse_images(&c).unwrap() {
            assert!(reg.mass_fraction(&img) > 0.0);
        }
        let quiet = ExperimentConfig {
            outlier_region: Region::EMPTY,
            ..c
        };
        for img in gen_ellipse_images(&quiet).unwrap() {
            assert_eq!(reg.mass_fraction(&img), 0.0);
            assert!(img.total() > 0.0);
        }
    }

    #[test]
    fn samples_to_measure_examples() {
        let m = samples_to_measure(&[5.0; 10], 1, 0).unwrap();
        assert_eq!(m, DiscreteMeasure::dirac(vec![5.0]));
        let m = samples_to_measure(&[5.0; 10], 3, 0).unwrap();
        assert_eq!(m.len(), 1);
        let xs = [0.0, 1.0, 3.0, 7.0];
        let m = samples_to_measure(&xs, 4, 0).unwrap();
        let mut pts: Vec<f64> = m.points().map(|p| p[0]).collect();
        pts.sort_by(f64::total_cmp);
        assert_eq!(pts, xs.to_vec());
        assert!(m.weights().iter().all(|&w| (w - 0.25).abs() < 1e-15));
        assert!(samples_to_measure(&xs, 5, 0).is_err());
    }

    #[test]
    fn kde_examples() {
        let xs = [-2.0, -1.0, 0.5, 1.0, 2.0, -0.5];
        let grid: Vec<f64> = (-40..=40).map(|k| k as f64 * 0.1).collect();
        let f = kde_curve(&xs, &grid).unwrap();
        for k in 0..grid.len() {
            assert!((f[k] - f[grid.len() - 1 - k]).abs() < 1e-9);
        }
        assert!(matches!(kde_curve(&[1.0, 1.0], &grid), Err(Error::ZeroVariance)));
        let area: f64 = f.iter().sum::<f64>() * 0.1;
        assert!((area - 1.0).abs() < 0.05);
    }

    #[test]
    fn kde_mode_of_standard_normal() {
        let grid: Vec<f64> = (-300..=300).map(|k| k as f64 * 0.01).collect();
        for seed in 0..5 {
            let mut rng = stream_rng(seed, 0);
            let xs: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
            let f = kde_curve(&xs, &grid).unwrap();
            let mode = grid[crate::measures::argmax(&f)];
            assert!(mode.abs() < 0.2, "seed {seed}: {mode}");
        }
    }

    #[test]
    fn csv_rows() {
        let r = RunRecord {
            scenario: Scenario::Contamination,
            lambda: f64::INFINITY,
            ratio: Some(0.05),
            metric: "w_to_true".into(),
            value: 1.5,
            seed: 3,
        };
        assert_eq!(
            records_to_csv(&[r]),
            "scenario,lambda,ratio,metric,value,seed\ncontamination,inf,0.05,w_to_true,1.500000000000e0,3\n"
        );
    }

    #[test]
    fn small_sweep_is_deterministic_and_saturates() {
        let c = ExperimentConfig {
            ratios: vec![0.0, 0.1],
            support_size: 15,
            lambda_grid: vec![10.0, 1000.0],
            ..cfg(Scenario::Contamination)
        };
        let a = run_lambda_sweep(&c).unwrap();
        assert_eq!(records_to_csv(&a), records_to_csv(&run_lambda_sweep(&c).unwrap()));
        let get = |lambda: f64, ratio: f64| {
            a.iter()
                .find(|r| r.metric == "w_to_true" && r.lambda == lambda && r.ratio == Some(ratio))
                .unwrap()
                .value
        };
        for ratio in [0.0, 0.1] {
            let (big, wb) = (get(1000.0, ratio), get(f64::INFINITY, ratio));
            assert!((big - wb).abs() <= 1e-6 * wb.max(1.0), "{big} vs {wb}");
        }
        assert_eq!(a.iter().filter(|r| r.metric == "mean_w_to_true").count(), 3);
    }
}
