//! Collapse diagnostics over last-layer activations and the action head.
//!
//! Standard deviations are population (divide by `n`) throughout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative singular-value cutoff for the pseudo-inverse of `Sigma_B`.
pub const PINV_CUTOFF: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("activation set is empty")]
    Empty,
    #[error("class {0} has no activations")]
    EmptyClass(usize),
    #[error("activation dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("need at least {needed} vectors, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("vector {0} has zero norm")]
    ZeroVector(usize),
    #[error("mean norm is zero")]
    ZeroMeanNorm,
    #[error("class means coincide; between-class covariance is zero")]
    DegenerateBetween,
    #[error("class index {class} out of range for {classes} classes")]
    ClassIndex { class: usize, classes: usize },
}

/// Activations grouped by class (the optimal action of the state that
/// produced them).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    dim: usize,
    classes: Vec<Vec<DVector<f64>>>,
}

impl ActivationSet {
    pub fn new(dim: usize, class_count: usize) -> Self {
        ActivationSet {
            dim,
            classes: vec![Vec::new(); class_count],
        }
    }

    pub fn from_classes(classes: Vec<Vec<DVector<f64>>>) -> Result<Self, MetricsError> {
        let dim = classes
            .iter()
            .flatten()
            .next()
            .map(|h| h.len())
            .ok_or(MetricsError::Empty)?;
        let mut set = ActivationSet::new(dim, classes.len());
        for (k, members) in classes.into_iter().enumerate() {
            for h in members {
                set.push(k, h)?;
            }
        }
        Ok(set)
    }

    pub fn push(&mut self, class: usize, h: DVector<f64>) -> Result<(), MetricsError> {
        if h.len() != self.dim {
            return Err(MetricsError::Dimension {
                expected: self.dim,
                got: h.len(),
            });
        }
        let classes = self.classes.len();
        self.classes
            .get_mut(class)
            .ok_or(MetricsError::ClassIndex { class, classes })?
            .push(h);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class(&self, k: usize) -> &[DVector<f64>] {
        &self.classes[k]
    }

    fn require_full(&self) -> Result<(), MetricsError> {
        match self.classes.iter().position(Vec::is_empty) {
            Some(k) => Err(MetricsError::EmptyClass(k)),
            None => Ok(()),
        }
    }
}

/// Mean of every activation, `h_G`.
pub fn global_mean(a: &ActivationSet) -> Result<DVector<f64>, MetricsError> {
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sum = DVector::zeros(a.dim);
    for h in a.classes.iter().flatten() {
        sum += h;
    }
    Ok(sum / a.len() as f64)
}

/// Per-class means `h_k`.
pub fn class_means(a: &ActivationSet) -> Result<Vec<DVector<f64>>, MetricsError> {
    a.require_full()?;
    Ok(a.classes
        .iter()
        .map(|members| {
            let mut sum = DVector::zeros(a.dim);
            for h in members {
                sum += h;
            }
            sum / members.len() as f64
        })
        .collect())
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// `Std_k(||v_k||) / Avg_k(||v_k||)`.
pub fn equinorm(vectors: &[DVector<f64>]) -> Result<f64, MetricsError> {
    if vectors.len() < 2 {
        return Err(MetricsError::TooFew {
            needed: 2,
            got: vectors.len(),
        });
    }
    let norms: Vec<f64> = vectors.iter().map(|v| v.norm()).collect();
    let avg = norms.iter().sum::<f64>() / norms.len() as f64;
    if avg <= 0.0 {
        return Err(MetricsError::ZeroMeanNorm);
    }
    Ok(population_std(&norms) / avg)
}

/// Cosines of the `K(K-1)/2` distinct pairs, after subtracting `center`.
pub fn pairwise_cosines(vectors: &[DVector<f64>], center: Option<&DVector<f64>>) -> Result<Vec<f64>, MetricsError> {
    let shifted: Vec<DVector<f64>> = match center {
        Some(c) => vectors.iter().map(|v| v - c).collect(),
        None => vectors.to_vec(),
    };
    let norms: Vec<f64> = shifted.iter().map(|v| v.norm()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(MetricsError::ZeroVector(i));
    }
    let k = shifted.len();
    let mut out = Vec::with_capacity(k * (k.saturating_sub(1)) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            out.push(shifted[i].dot(&shifted[j]) / (norms[i] * norms[j]));
        }
    }
    Ok(out)
}

/// Population std of the pairwise cosines; 0 when only one pair exists.
pub fn equiangularity_std(vectors: &[DVector<f64>], center: Option<&DVector<f64>>) -> Result<f64, MetricsError> {
    if vectors.len() < 2 {
        return Err(MetricsError::TooFew {
            needed: 2,
            got: vectors.len(),
        });
    }
    let cos = pairwise_cosines(vectors, center)?;
    if cos.len() < 2 {
        return Ok(0.0);
    }
    Ok(population_std(&cos))
}

/// `Avg_{k != k'} |cos(k, k') + 1/(K-1)|`.
pub fn maxangle_metric(vectors: &[DVector<f64>], center: Option<&DVector<f64>>) -> Result<f64, MetricsError> {
    let k = vectors.len();
    if k < 2 {
        return Err(MetricsError::TooFew { needed: 2, got: k });
    }
    let target = 1.0 / (k as f64 - 1.0);
    let cos = pairwise_cosines(vectors, center)?;
    Ok(cos.iter().map(|c| (c + target).abs()).sum::<f64>() / cos.len() as f64)
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix, discarding singular
/// values below `rel_cutoff * sigma_max`.
///
/// For symmetric input the singular values are `|lambda_i|` of the
/// eigendecomposition `Q diag(lambda) Q^T`, so the pseudo-inverse is
/// `Q diag(1/lambda_i) Q^T` over the kept spectrum.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sigma_max = eig.eigenvalues.amax();
    let cutoff = rel_cutoff * sigma_max;
    let inv = eig
        .eigenvalues
        .map(|l| if l.abs() > cutoff && l != 0.0 { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Within-class covariance `Sigma_W` (averaged over all samples) and
/// between-class covariance `Sigma_B` (averaged over classes).
pub fn scatter_matrices(a: &ActivationSet) -> Result<(DMatrix<f64>, DMatrix<f64>), MetricsError> {
    let means = class_means(a)?;
    let g = global_mean(a)?;
    let d = a.dim;
    let mut within = DMatrix::zeros(d, d);
    for (k, members) in a.classes.iter().enumerate() {
        for h in members {
            let diff = h - &means[k];
            within.ger(1.0, &diff, &diff, 1.0);
        }
    }
    within /= a.len() as f64;
    let mut between = DMatrix::zeros(d, d);
    for m in &means {
        let diff = m - &g;
        between.ger(1.0, &diff, &diff, 1.0);
    }
    between /= means.len() as f64;
    Ok((within, between))
}

/// `Tr(Sigma_W Sigma_B^+) / K`.
pub fn within_class_variability(a: &ActivationSet) -> Result<f64, MetricsError> {
    let (within, between) = scatter_matrices(a)?;
    if between.amax() == 0.0 {
        return Err(MetricsError::DegenerateBetween);
    }
    let pinv = pseudo_inverse(&between, PINV_CUTOFF);
    let value = (within * pinv).trace() / a.class_count() as f64;
    Ok(value.max(0.0))
}

/// Mean over classes of `cos(h_k - h_G, w_k)`; `head` has `w_k` as row `k`.
pub fn self_duality(a: &ActivationSet, head: &DMatrix<f64>) -> Result<f64, MetricsError> {
    let means = class_means(a)?;
    let g = global_mean(a)?;
    if head.nrows() != means.len() || head.ncols() != a.dim {
        return Err(MetricsError::Dimension {
            expected: means.len(),
            got: head.nrows(),
        });
    }
    let mut total = 0.0;
    for (k, m) in means.iter().enumerate() {
        let centered = m - &g;
        let w = head.row(k).transpose();
        let (nc, nw) = (centered.norm(), w.norm());
        if nc == 0.0 {
            return Err(MetricsError::ZeroVector(k));
        }
        if nw == 0.0 {
            return Err(MetricsError::ZeroVector(k));
        }
        total += centered.dot(&w) / (nc * nw);
    }
    Ok(total / means.len() as f64)
}

/// Where the class labels of an activation set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    /// The environment's optimal-policy oracle.
    Oracle,
    /// The trained policy's own argmax.
    Argmax,
    /// Labels supplied with an external activation dump.
    Provided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub epoch: usize,
    pub equinorm_w: f64,
    pub equiang_std_h: f64,
    pub equiang_std_w: f64,
    pub maxangle_h: f64,
    pub maxangle_w: f64,
    pub within_var: f64,
    pub self_duality: f64,
    pub label_source: LabelSource,
    /// True when the activations are a sample of a larger (continuous) state
    /// space rather than every state.
    pub sampled: bool,
}

pub fn head_rows(head: &DMatrix<f64>) -> Vec<DVector<f64>> {
    head.row_iter().map(|r| r.transpose()).collect()
}

pub fn collapse_report(
    a: &ActivationSet,
    head: &DMatrix<f64>,
    epoch: usize,
    label_source: LabelSource,
    sampled: bool,
) -> Result<CollapseReport, MetricsError> {
    let means = class_means(a)?;
    let g = global_mean(a)?;
    let w = head_rows(head);
    Ok(CollapseReport {
        epoch,
        equinorm_w: equinorm(&w)?,
        equiang_std_h: equiangularity_std(&means, Some(&g))?,
        equiang_std_w: equiangularity_std(&w, None)?,
        maxangle_h: maxangle_metric(&means, Some(&g))?,
        maxangle_w: maxangle_metric(&w, None)?,
        within_var: within_class_variability(a)?,
        self_duality: self_duality(a, head)?,
        label_source,
        sampled,
    })
}

/// Predicted class by the largest logit `<h, w_k>`.
pub fn argmax_logit(h: &DVector<f64>, head: &DMatrix<f64>) -> usize {
    (head * h).argmax().0
}

/// Predicted class by the nearest class mean.
pub fn nearest_class_mean(h: &DVector<f64>, means: &[DVector<f64>]) -> usize {
    means
        .iter()
        .enumerate()
        .map(|(k, m)| (k, (h - m).norm()))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
        .0
}

/// One line of an activation dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationRecord {
    pub state_id: usize,
    pub class_k: usize,
    pub h: Vec<f64>,
}

/// Groups dump records into an activation set with `class_count` classes
/// (inferred from the largest label when `None`).
pub fn activation_set_from_records(
    records: &[ActivationRecord],
    class_count: Option<usize>,
) -> Result<ActivationSet, MetricsError> {
    let first = records.first().ok_or(MetricsError::Empty)?;
    let k = class_count.unwrap_or_else(|| records.iter().map(|r| r.class_k + 1).max().unwrap_or(0));
    let mut set = ActivationSet::new(first.h.len(), k);
    for r in records {
        set.push(r.class_k, DVector::from_column_slice(&r.h))?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etf::generate_etf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn gaussian(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
    }

    fn random_set(k: usize, per: usize, d: usize, seed: u64) -> ActivationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = (0..k)
            .map(|_| {
                let center = gaussian(d, &mut rng) * 3.0;
                (0..per).map(|_| &center + gaussian(d, &mut rng)).collect()
            })
            .collect();
        ActivationSet::from_classes(classes).unwrap()
    }

    fn random_rotation(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        crate::etf::modified_gram_schmidt(&m).unwrap()
    }

    #[test]
    fn global_mean_cases() {
        let one = ActivationSet::from_classes(vec![vec![v(&[1.0, 2.0])]]).unwrap();
        assert_eq!(global_mean(&one).unwrap(), v(&[1.0, 2.0]));

        let sym = ActivationSet::from_classes(vec![
            vec![v(&[1.0, 1.0]), v(&[3.0, -1.0])],
            vec![v(&[-2.0, 0.0]), v(&[-2.0, 0.0])],
        ])
        .unwrap();
        assert!(global_mean(&sym).unwrap().norm() < 1e-15);

        let set = random_set(3, 5, 4, 1);
        let mut sum = [0.0; 4];
        for k in 0..3 {
            for h in set.class(k) {
                for i in 0..4 {
                    sum[i] += h[i];
                }
            }
        }
        let g = global_mean(&set).unwrap();
        for i in 0..4 {
            assert!((g[i] - sum[i] / 15.0).abs() < 1e-12);
        }
        // Count-weighted mean of class means.
        let means = class_means(&set).unwrap();
        let weighted: DVector<f64> = means.iter().fold(DVector::zeros(4), |acc, m| acc + m * 5.0) / 15.0;
        assert!((weighted - g).norm() < 1e-12);
        assert_eq!(global_mean(&ActivationSet::new(3, 2)), Err(MetricsError::Empty));
    }

    #[test]
    fn equinorm_cases() {
        let etf = generate_etf(4, 6, 2.0, 0).unwrap();
        let w: Vec<_> = (0..4).map(|k| etf.column(k)).collect();
        assert!(equinorm(&w).unwrap() < 1e-12);
        let pair = [v(&[1.0, 0.0]), v(&[0.0, 3.0])];
        assert!((equinorm(&pair).unwrap() - 0.5).abs() < 1e-15);
        let scaled: Vec<_> = pair.iter().map(|x| x * 7.5).collect();
        assert!((equinorm(&scaled).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(equinorm(&[v(&[0.0]), v(&[0.0])]), Err(MetricsError::ZeroMeanNorm));
    }

    #[test]
    fn equiangularity_cases() {
        let etf = generate_etf(5, 5, 1.0, 2).unwrap();
        let w: Vec<_> = (0..5).map(|k| etf.column(k)).collect();
        assert!(equiangularity_std(&w, None).unwrap() < 1e-12);
        let basis: Vec<_> = (0..4).map(|i| DVector::from_fn(4, |r, _| f64::from(u8::from(r == i)))).collect();
        assert_eq!(equiangularity_std(&basis, None).unwrap(), 0.0);
        // Pairwise cosines {0, 0, 1}: a, b orthogonal, c parallel to b.
        let three = [v(&[1.0, 0.0]), v(&[0.0, 1.0]), v(&[0.0, 2.0])];
        let cos = pairwise_cosines(&three, None).unwrap();
        assert_eq!(cos, vec![0.0, 0.0, 1.0]);
        let expected = 2f64.sqrt() / 3.0;
        assert!((equiangularity_std(&three, None).unwrap() - expected).abs() < 1e-15);
        assert_eq!(equiangularity_std(&[v(&[1.0]), v(&[2.0])], None).unwrap(), 0.0);
        assert_eq!(
            equiangularity_std(&[v(&[1.0]), v(&[0.0]), v(&[2.0])], None),
            Err(MetricsError::ZeroVector(1))
        );
    }

    #[test]
    fn maxangle_cases() {
        let etf = generate_etf(6, 9, 1.0, 4).unwrap();
        let w: Vec<_> = (0..6).map(|k| etf.column(k)).collect();
        assert!(maxangle_metric(&w, None).unwrap() < 1e-12);
        let basis: Vec<_> = (0..4).map(|i| DVector::from_fn(4, |r, _| f64::from(u8::from(r == i)))).collect();
        assert!((maxangle_metric(&basis, None).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((maxangle_metric(&[v(&[1.0, 1.0]), v(&[1.0, 1.0])], None).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn within_variability_cases() {
        let tight = ActivationSet::from_classes(vec![
            vec![v(&[1.0, 0.0]); 3],
            vec![v(&[0.0, 1.0]); 2],
            vec![v(&[-1.0, -1.0]); 4],
        ])
        .unwrap();
        assert_eq!(within_class_variability(&tight).unwrap(), 0.0);

        // d = 1, class means +-1, each class spread +-sqrt(v): Sigma_W = v,
        // Sigma_B = 1, K = 2.
        let var: f64 = 0.09;
        let s = var.sqrt();
        let scalar = ActivationSet::from_classes(vec![
            vec![v(&[1.0 + s]), v(&[1.0 - s])],
            vec![v(&[-1.0 + s]), v(&[-1.0 - s])],
        ])
        .unwrap();
        let (w, b) = scatter_matrices(&scalar).unwrap();
        assert!((w[(0, 0)] - var).abs() < 1e-15);
        assert!((b[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((within_class_variability(&scalar).unwrap() - var / 2.0).abs() < 1e-15);

        let same = ActivationSet::from_classes(vec![vec![v(&[1.0]), v(&[2.0])], vec![v(&[1.5])]]).unwrap();
        assert_eq!(within_class_variability(&same), Err(MetricsError::DegenerateBetween));
    }

    #[test]
    fn pseudo_inverse_of_rank_deficient_matrix() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        let p = pseudo_inverse(&a, PINV_CUTOFF);
        let expected = DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        assert!((p - expected).amax() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: DMatrix<f64> = DMatrix::from_fn(7, 3, |_, _| StandardNormal.sample(&mut rng));
        let q = random_rotation(7, 4);
        let low_rank = &q * (&x * x.transpose()) * q.transpose();
        let p = pseudo_inverse(&low_rank, PINV_CUTOFF);
        // Penrose conditions.
        assert!((&low_rank * &p * &low_rank - &low_rank).amax() < 1e-10);
        assert!((&p * &low_rank * &p - &p).amax() < 1e-10);
    }

    #[test]
    fn self_duality_cases() {
        let etf = generate_etf(3, 5, 1.0, 7).unwrap();
        let head = etf.as_head();
        let aligned = ActivationSet::from_classes((0..3).map(|k| vec![etf.column(k) * 2.5]).collect()).unwrap();
        assert!((self_duality(&aligned, &head).unwrap() - 1.0).abs() < 1e-12);
        let opposed = ActivationSet::from_classes((0..3).map(|k| vec![-etf.column(k)]).collect()).unwrap();
        assert!((self_duality(&opposed, &head).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_duality_of_random_means_is_small() {
        // Monte-Carlo null: random class means against a 64-d frame.
        let etf = generate_etf(4, 64, 1.0, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut hits = 0;
        let trials = 200;
        for _ in 0..trials {
            let set = ActivationSet::from_classes((0..4).map(|_| vec![gaussian(64, &mut rng)]).collect()).unwrap();
            if self_duality(&set, &etf.as_head()).unwrap().abs() < 0.3 {
                hits += 1;
            }
        }
        assert!(hits as f64 / trials as f64 > 0.95, "{hits}/{trials}");
    }

    #[test]
    fn report_is_zero_on_exact_collapse() {
        let etf = generate_etf(4, 10, 1.0, 3).unwrap();
        let e_h: f64 = 3.0;
        let balanced = ActivationSet::from_classes(
            (0..4).map(|k| vec![etf.column(k) * e_h.sqrt(); 2]).collect(),
        )
        .unwrap();
        let r = collapse_report(&balanced, &etf.as_head(), 1, LabelSource::Oracle, false).unwrap();
        assert!(r.equinorm_w < 1e-8);
        assert!(r.equiang_std_h < 1e-8 && r.equiang_std_w < 1e-8);
        assert!(r.maxangle_h < 1e-8 && r.maxangle_w < 1e-8);
        assert!(r.within_var < 1e-8);
        assert!((r.self_duality - 1.0).abs() < 1e-8);
    }

    #[test]
    fn records_group_by_class() {
        let recs = vec![
            ActivationRecord { state_id: 0, class_k: 1, h: vec![1.0, 2.0] },
            ActivationRecord { state_id: 1, class_k: 0, h: vec![0.0, 2.0] },
            ActivationRecord { state_id: 2, class_k: 1, h: vec![1.0, 0.0] },
        ];
        let set = activation_set_from_records(&recs, None).unwrap();
        assert_eq!(set.counts(), vec![1, 2]);
        let bad = vec![ActivationRecord { state_id: 0, class_k: 0, h: vec![1.0] }, recs[0].clone()];
        assert!(matches!(
            activation_set_from_records(&bad, None),
            Err(MetricsError::Dimension { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn metrics_invariant_under_rotation(seed in any::<u64>(), k in 3usize..6) {
                let d = 7;
                let set = random_set(k, 3, d, seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
                let head = DMatrix::from_fn(k, d, |_, _| StandardNormal.sample(&mut rng));
                let q = random_rotation(d, seed.wrapping_add(1));
                let rotated = ActivationSet::from_classes(
                    (0..k).map(|c| set.class(c).iter().map(|h| &q * h).collect()).collect(),
                ).unwrap();
                let rhead = &head * q.transpose();
                let a = collapse_report(&set, &head, 0, LabelSource::Provided, false).unwrap();
                let b = collapse_report(&rotated, &rhead, 0, LabelSource::Provided, false).unwrap();
                prop_assert!((a.equinorm_w - b.equinorm_w).abs() < 1e-9);
                prop_assert!((a.equiang_std_h - b.equiang_std_h).abs() < 1e-9);
                prop_assert!((a.equiang_std_w - b.equiang_std_w).abs() < 1e-9);
                prop_assert!((a.maxangle_h - b.maxangle_h).abs() < 1e-9);
                prop_assert!((a.maxangle_w - b.maxangle_w).abs() < 1e-9);
                prop_assert!((a.within_var - b.within_var).abs() < 1e-7 * a.within_var.max(1.0), "{} vs {}", a.within_var, b.within_var);
                prop_assert!((a.self_duality - b.self_duality).abs() < 1e-9);
            }

            #[test]
            fn angle_and_norm_metrics_are_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let k = rng.random_range(3..7);
                let vs: Vec<_> = (0..k).map(|_| gaussian(5, &mut rng)).collect();
                let scaled: Vec<_> = vs.iter().map(|x| x * scale).collect();
                prop_assert!((equinorm(&vs).unwrap() - equinorm(&scaled).unwrap()).abs() < 1e-10);
                prop_assert!((equiangularity_std(&vs, None).unwrap()
                    - equiangularity_std(&scaled, None).unwrap()).abs() < 1e-10);
                prop_assert!((maxangle_metric(&vs, None).unwrap()
                    - maxangle_metric(&scaled, None).unwrap()).abs() < 1e-10);
            }

            #[test]
            fn report_values_in_range(seed in any::<u64>()) {
                let set = random_set(4, 3, 6, seed);
                let etf = generate_etf(4, 6, 1.0, seed).unwrap();
                let r = collapse_report(&set, &etf.as_head(), 0, LabelSource::Provided, false).unwrap();
                prop_assert!(r.maxangle_h >= 0.0 && r.within_var >= 0.0);
                prop_assert!((-1.0..=1.0).contains(&r.self_duality));
            }
        }
    }
}
