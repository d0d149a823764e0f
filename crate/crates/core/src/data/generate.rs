//! Synthetic multi-domain and multi-task generators. Pure functions of their
//! configuration (including the seed).

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Mode, MultiSourceDataset, Source};
use crate::error::{Error, Result};
use crate::nn::{LossKind, Matrix, TaskSpec};
use crate::rng;

/// Gaussian-mixture classification shared across domains.
///
/// Class means are drawn once; domain `t > 0` translates every class mean
/// by its own random direction scaled by `domain_shift` (in units of the
/// within-class standard deviation of domain 0). Class frequencies inside a
/// domain decay geometrically with `class_skew` along a domain-specific
/// class ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiDomainConfig {
    pub seed: u64,
    pub n_per_source: Vec<usize>,
    pub class_count: usize,
    pub feature_dim: usize,
    pub domain_shift: f64,
    pub class_skew: f64,
    /// Standard deviation of each class-mean coordinate.
    pub class_separation: f64,
    /// Per-domain within-class standard deviation (empty: all 1).
    pub class_std: Vec<f64>,
    /// Per-domain probability of replacing a label with a uniform class (empty: none).
    pub label_noise: Vec<f64>,
}

impl Default for MultiDomainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_per_source: vec![500, 500],
            class_count: 4,
            feature_dim: 8,
            domain_shift: 0.0,
            class_skew: 0.0,
            class_separation: 1.5,
            class_std: Vec::new(),
            label_noise: Vec::new(),
        }
    }
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn gen_multidomain(cfg: &MultiDomainConfig) -> Result<MultiSourceDataset> {
    let t_count = cfg.n_per_source.len();
    if t_count < 2 {
        return Err(Error::config("multi-domain generator needs at least two domains"));
    }
    if cfg.n_per_source.contains(&0) {
        return Err(Error::config("every domain needs a positive sample count"));
    }
    if cfg.class_count < 2 || cfg.feature_dim == 0 {
        return Err(Error::config("need at least two classes and one feature"));
    }
    if !(cfg.domain_shift.is_finite() && cfg.domain_shift >= 0.0) {
        return Err(Error::config("domain_shift must be non-negative"));
    }
    if !(0.0..1.0).contains(&cfg.class_skew) {
        return Err(Error::config("class_skew must be in [0, 1)"));
    }
    let per_domain = |v: &[f64], default: f64, what: &str| -> Result<Vec<f64>> {
        match v.len() {
            0 => Ok(vec![default; t_count]),
            n if n == t_count => Ok(v.to_vec()),
            n => Err(Error::config(format!("{what} has {n} entries for {t_count} domains"))),
        }
    };
    let class_std = per_domain(&cfg.class_std, 1.0, "class_std")?;
    let label_noise = per_domain(&cfg.label_noise, 0.0, "label_noise")?;
    if class_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || label_noise.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::config("class_std must be positive and label_noise in [0, 1]"));
    }

    let (c, d) = (cfg.class_count, cfg.feature_dim);
    let mut base_rng = rng::seeded(cfg.seed, 0);
    let means: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..d)
                .map(|_| cfg.class_separation * base_rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut sources = Vec::with_capacity(t_count);
    for (t, &n) in cfg.n_per_source.iter().enumerate() {
        let mut r = rng::seeded(cfg.seed, 1 + t as u64);
        let domain_means: Vec<Vec<f64>> = means
            .iter()
            .map(|m| {
                if t == 0 {
                    return m.clone();
                }
                let u = unit_vector(&mut r, d);
                m.iter().zip(u).map(|(a, b)| a + cfg.domain_shift * b).collect()
            })
            .collect();
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(&mut r);
        let mut probs = vec![0.0; c];
        for (rank, &class) in order.iter().enumerate() {
            probs[class] = (1.0 - cfg.class_skew).powi(rank as i32);
        }
        let total: f64 = probs.iter().sum();
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let mut u = r.random::<f64>() * total;
            let mut class = c - 1;
            for (k, p) in probs.iter().enumerate() {
                if u < *p {
                    class = k;
                    break;
                }
                u -= p;
            }
            for mu in &domain_means[class] {
                x.push(mu + class_std[t] * r.sample::<f64, _>(StandardNormal));
            }
            let label = if r.random::<f64>() < label_noise[t] {
                r.random_range(0..c)
            } else {
                class
            };
            y.push(label as f64);
        }
        sources.push(Source {
            name: format!("domain{t}"),
            inputs: Arc::new(Matrix::from_vec(n, d, x)?),
            targets: Matrix::from_vec(n, 1, y)?,
        });
    }
    MultiSourceDataset::new(
        Mode::MultiDomain,
        vec![TaskSpec::new("class", LossKind::SoftmaxCrossEntropy, c)],
        sources,
        0,
    )
}

/// Binary domains whose classes differ along different axes, so a single
/// linear decision rule cannot serve all of them at once. Domain `t` places
/// its two classes at `-margin[t]` and `+margin[t]` on feature axis
/// `t % feature_dim` with isotropic noise of standard deviation
/// `class_std[t]`. Labels are balanced in expectation.
///
/// The default is the asymmetric two-domain benchmark: a wide, noisy first
/// domain next to a clean second domain living on a much smaller scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConflictingAxesConfig {
    pub seed: u64,
    pub n_per_source: Vec<usize>,
    pub feature_dim: usize,
    pub margin: Vec<f64>,
    pub class_std: Vec<f64>,
}

impl Default for ConflictingAxesConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_per_source: vec![10_000, 10_000],
            feature_dim: 2,
            margin: vec![1.0, 0.2],
            class_std: vec![1.5, 0.1],
        }
    }
}

pub fn gen_conflicting_axes(cfg: &ConflictingAxesConfig) -> Result<MultiSourceDataset> {
    let t_count = cfg.n_per_source.len();
    if t_count < 2 {
        return Err(Error::config("conflicting-axes generator needs at least two domains"));
    }
    if cfg.n_per_source.contains(&0) || cfg.feature_dim == 0 {
        return Err(Error::config("every domain needs a positive sample count and at least one feature"));
    }
    if cfg.margin.len() != t_count || cfg.class_std.len() != t_count {
        return Err(Error::config(format!("margin and class_std need {t_count} entries")));
    }
    if cfg.margin.iter().any(|m| !m.is_finite()) || cfg.class_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::config("margins must be finite and class_std positive"));
    }
    let d = cfg.feature_dim;
    let mut sources = Vec::with_capacity(t_count);
    for (t, &n) in cfg.n_per_source.iter().enumerate() {
        let mut r = rng::seeded(cfg.seed, 1 + t as u64);
        let axis = t % d;
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let class = r.random_range(0..2usize);
            let sign = if class == 1 { 1.0 } else { -1.0 };
            for j in 0..d {
                let mu = if j == axis { sign * cfg.margin[t] } else { 0.0 };
                x.push(mu + cfg.class_std[t] * r.sample::<f64, _>(StandardNormal));
            }
            y.push(class as f64);
        }
        sources.push(Source {
            name: format!("domain{t}"),
            inputs: Arc::new(Matrix::from_vec(n, d, x)?),
            targets: Matrix::from_vec(n, 1, y)?,
        });
    }
    MultiSourceDataset::new(
        Mode::MultiDomain,
        vec![TaskSpec::new("class", LossKind::SoftmaxCrossEntropy, 2)],
        sources,
        0,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// `y_t = w_t . x + noise`, trained with L1.
    Regression,
    /// `y_t = 1[w_t . x + noise > 0]`, trained with binary cross-entropy.
    Logistic,
}

/// Shared inputs `x ~ N(0, I)` with per-task targets generated by unit
/// vectors whose pairwise cosine equals `task_correlation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiTaskConfig {
    pub seed: u64,
    pub task_count: usize,
    pub n: usize,
    pub feature_dim: usize,
    pub task_correlation: f64,
    pub noise: f64,
    pub target: TargetKind,
}

impl Default for MultiTaskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task_count: 2,
            n: 1000,
            feature_dim: 8,
            task_correlation: 0.0,
            noise: 0.1,
            target: TargetKind::Regression,
        }
    }
}

/// Lower-triangular `L` with `L L^T = gram`, tolerating rank deficiency.
fn psd_cholesky(gram: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = gram.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            let v = gram[i][j] - s;
            if i == j {
                if v < -1e-10 {
                    return Err(Error::InfeasibleCorrelation { task: i, pivot: v });
                }
                l[i][i] = v.max(0.0).sqrt();
            } else if l[j][j] > 1e-9 {
                l[i][j] = v / l[j][j];
            } else if v.abs() > 1e-8 {
                return Err(Error::InfeasibleCorrelation { task: i, pivot: v });
            }
        }
    }
    Ok(l)
}

/// Unit vectors in `R^feature_dim` whose Gram matrix equals `gram`.
pub fn generating_vectors(seed: u64, feature_dim: usize, gram: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let t = gram.len();
    if t == 0 || gram.iter().any(|r| r.len() != t) {
        return Err(Error::config("Gram matrix must be square and non-empty"));
    }
    for i in 0..t {
        if (gram[i][i] - 1.0).abs() > 1e-12 {
            return Err(Error::config("Gram matrix diagonal must be 1"));
        }
        for j in 0..t {
            if (gram[i][j] - gram[j][i]).abs() > 1e-12 || gram[i][j].abs() > 1.0 + 1e-12 {
                return Err(Error::config("Gram matrix must be symmetric with entries in [-1, 1]"));
            }
        }
    }
    if feature_dim < t {
        return Err(Error::config(format!("feature_dim {feature_dim} must be at least the task count {t}")));
    }
    let l = psd_cholesky(gram)?;
    // Orthonormal basis by Gram-Schmidt on Gaussian draws.
    let mut r = rng::seeded(seed, 0xBA5E);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(t);
    while basis.len() < t {
        let mut v: Vec<f64> = (0..feature_dim).map(|_| r.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(l.iter()
        .map(|row| {
            let mut w = vec![0.0; feature_dim];
            for (coef, b) in row.iter().zip(&basis) {
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi += coef * bi;
                }
            }
            w
        })
        .collect())
}

pub fn gen_multitask(cfg: &MultiTaskConfig) -> Result<MultiSourceDataset> {
    if cfg.task_count < 2 {
        return Err(Error::config("multi-task generator needs at least two tasks"));
    }
    if !(-1.0..=1.0).contains(&cfg.task_correlation) {
        return Err(Error::config("task_correlation must be in [-1, 1]"));
    }
    let t = cfg.task_count;
    let gram: Vec<Vec<f64>> = (0..t)
        .map(|i| (0..t).map(|j| if i == j { 1.0 } else { cfg.task_correlation }).collect())
        .collect();
    gen_multitask_with_gram(cfg.seed, cfg.n, cfg.feature_dim, &gram, cfg.noise, cfg.target)
}

/// Multi-task generator for an arbitrary Gram matrix of task generators.
pub fn gen_multitask_with_gram(
    seed: u64,
    n: usize,
    feature_dim: usize,
    gram: &[Vec<f64>],
    noise: f64,
    target: TargetKind,
) -> Result<MultiSourceDataset> {
    if n == 0 {
        return Err(Error::config("n must be positive"));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::config("noise must be non-negative"));
    }
    let w = generating_vectors(seed, feature_dim, gram)?;
    let mut r = rng::seeded(seed, 0xDA7A);
    let x: Vec<f64> = (0..n * feature_dim).map(|_| r.sample(StandardNormal)).collect();
    let x = Arc::new(Matrix::from_vec(n, feature_dim, x)?);
    let mut tasks = Vec::with_capacity(w.len());
    let mut sources = Vec::with_capacity(w.len());
    for (k, wk) in w.iter().enumerate() {
        let mut nr = rng::seeded(seed, 0x1000 + k as u64);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let s: f64 = x.row(i).iter().zip(wk).map(|(a, b)| a * b).sum::<f64>()
                    + noise * nr.sample::<f64, _>(StandardNormal);
                match target {
                    TargetKind::Regression => s,
                    TargetKind::Logistic => f64::from(u8::from(s > 0.0)),
                }
            })
            .collect();
        let name = format!("task{k}");
        let loss = match target {
            TargetKind::Regression => LossKind::L1,
            TargetKind::Logistic => LossKind::BinaryCrossEntropy,
        };
        tasks.push(TaskSpec::new(name.clone(), loss, 1));
        sources.push(Source {
            name,
            inputs: Arc::clone(&x),
            targets: Matrix::from_vec(n, 1, y)?,
        });
    }
    MultiSourceDataset::new(Mode::MultiTask, tasks, sources, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_of(w: &[Vec<f64>]) -> Vec<Vec<f64>> {
        w.iter()
            .map(|a| w.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
            .collect()
    }

    #[test]
    fn anti_correlated_gram_is_reproduced() {
        let cfg = MultiTaskConfig {
            task_count: 3,
            task_correlation: -0.5,
            feature_dim: 5,
            ..Default::default()
        };
        let gram: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..3).map(|j| if i == j { 1.0 } else { -0.5 }).collect())
            .collect();
        let w = generating_vectors(cfg.seed, cfg.feature_dim, &gram).unwrap();
        let g = gram_of(&w);
        for i in 0..3 {
            for j in 0..3 {
                assert!((g[i][j] - gram[i][j]).abs() < 1e-9);
            }
        }
        gen_multitask(&cfg).unwrap();
    }

    #[test]
    fn orthogonal_pair() {
        let w = generating_vectors(4, 6, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(gram_of(&w)[0][1].abs() < 1e-12);
    }

    #[test]
    fn perfect_correlation_gives_identical_signal() {
        let ds = gen_multitask(&MultiTaskConfig {
            task_correlation: 1.0,
            noise: 0.0,
            ..Default::default()
        })
        .unwrap();
        let a = ds.source(0).targets.as_slice();
        let b = ds.source(1).targets.as_slice();
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    #[test]
    fn infeasible_correlation_is_rejected() {
        let err = gen_multitask(&MultiTaskConfig {
            task_count: 3,
            task_correlation: -0.6,
            ..Default::default()
        })
        .unwrap_err();
        assert!(matches!(err, Error::InfeasibleCorrelation { .. }));
    }

    #[test]
    fn generators_are_deterministic() {
        let cfg = MultiDomainConfig {
            seed: 42,
            domain_shift: 2.0,
            class_skew: 0.5,
            ..Default::default()
        };
        assert_eq!(gen_multidomain(&cfg).unwrap(), gen_multidomain(&cfg).unwrap());
        let other = MultiDomainConfig { seed: 43, ..cfg };
        assert_ne!(gen_multidomain(&other).unwrap(), gen_multidomain(&MultiDomainConfig { seed: 42, ..other.clone() }).unwrap());
    }

    #[test]
    fn invalid_parameters() {
        let bad = [
            MultiDomainConfig {
                n_per_source: vec![10],
                ..Default::default()
            },
            MultiDomainConfig {
                n_per_source: vec![10, 0],
                ..Default::default()
            },
            MultiDomainConfig {
                class_skew: 1.0,
                ..Default::default()
            },
            MultiDomainConfig {
                domain_shift: -1.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(gen_multidomain(&cfg).is_err());
        }
    }
}
