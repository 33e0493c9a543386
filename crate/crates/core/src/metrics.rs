//! Evaluation measures and the linear probe.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn check_labels(actual: &[usize], predicted: &[usize], n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {n}")));
    }
    if actual.len() != predicted.len() {
        return Err(Error::shape("labels", &[actual.len()], &[predicted.len()]));
    }
    if actual.is_empty() {
        return Err(Error::invalid("no labels to score"));
    }
    if let Some(&bad) = actual.iter().chain(predicted).find(|&&l| l >= n) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {n} classes"
        )));
    }
    Ok(())
}

/// `O[i][j]` counts items with actual class `i` predicted as `j`.
pub fn confusion(actual: &[usize], predicted: &[usize], n: usize) -> Result<Vec<Vec<u64>>> {
    check_labels(actual, predicted, n)?;
    let mut o = vec![vec![0u64; n]; n];
    for (&a, &p) in actual.iter().zip(predicted) {
        o[a][p] += 1;
    }
    Ok(o)
}

/// Quadratic weighted kappa over `n` ordered classes.
pub fn qwk(actual: &[usize], predicted: &[usize], n: usize) -> Result<f64> {
    let o = confusion(actual, predicted, n)?;
    let mut hist_a = vec![0.0; n];
    let mut hist_p = vec![0.0; n];
    for (&a, &p) in actual.iter().zip(predicted) {
        hist_a[a] += 1.0;
        hist_p[p] += 1.0;
    }
    let total = actual.len() as f64;
    // outer(hist_a, hist_p) sums to total^2; rescale to total
    let scale = 1.0 / total;
    let denom = ((n - 1) * (n - 1)) as f64;
    let mut wo = 0.0;
    let mut we = 0.0;
    for i in 0..n {
        for j in 0..n {
            let diff = i as f64 - j as f64;
            let w = diff * diff / denom;
            wo += w * o[i][j] as f64;
            we += w * hist_a[i] * hist_p[j] * scale;
        }
    }
    if we == 0.0 {
        // both histograms sit on a single shared class, so every item agrees
        return if wo == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::degenerate("kappa undefined"))
        };
    }
    Ok(1.0 - wo / we)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub f1: Vec<f64>,
    pub micro_f1: f64,
}

fn f1(tp: u64, fp: u64, fneg: u64) -> f64 {
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        // equal to 2PR/(P+R) and zero when tp is
        2.0 * tp as f64 / denom as f64
    }
}

pub fn classification_scores(
    actual: &[usize],
    predicted: &[usize],
    n: usize,
) -> Result<ClassificationScores> {
    let o = confusion(actual, predicted, n)?;
    let mut per = Vec::with_capacity(n);
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    for c in 0..n {
        let tp = o[c][c];
        let fp: u64 = (0..n).filter(|&r| r != c).map(|r| o[r][c]).sum();
        let fneg: u64 = (0..n).filter(|&p| p != c).map(|p| o[c][p]).sum();
        per.push(f1(tp, fp, fneg));
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
    }
    let correct = actual.iter().zip(predicted).filter(|(a, p)| a == p).count();
    Ok(ClassificationScores {
        accuracy: correct as f64 / actual.len() as f64,
        f1: per,
        micro_f1: f1(tp_all, fp_all, fn_all),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionScores {
    pub mae: f64,
    pub mse: f64,
    pub r2: f64,
}

pub fn regression_scores(actual: &[f64], predicted: &[f64]) -> Result<RegressionScores> {
    if actual.len() != predicted.len() {
        return Err(Error::shape(
            "regression_scores",
            &[actual.len()],
            &[predicted.len()],
        ));
    }
    if actual.is_empty() {
        return Err(Error::invalid("no values to score"));
    }
    if actual.iter().chain(predicted).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression_scores input".into()));
    }
    let n = actual.len() as f64;
    let mean = actual.iter().sum::<f64>() / n;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::degenerate(
            "R^2 undefined: actual values have zero variance",
        ));
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (a, p) in actual.iter().zip(predicted) {
        abs += (a - p).abs();
        sq += (a - p) * (a - p);
    }
    Ok(RegressionScores {
        mae: abs / n,
        mse: sq / n,
        r2: 1.0 - sq / ss_tot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationScores {
    pub pixel_accuracy: f64,
    pub dice: f64,
    pub miou: f64,
}

/// Scores binary masks given as flat pixel buffers of equal length. Several
/// images may be scored together by concatenating their pixels.
pub fn segmentation_scores(pred: &[u8], truth: &[u8]) -> Result<SegmentationScores> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "segmentation_scores",
            &[pred.len()],
            &[truth.len()],
        ));
    }
    if pred.is_empty() {
        return Err(Error::invalid("empty mask"));
    }
    if pred.iter().chain(truth).any(|&v| v > 1) {
        return Err(Error::invalid("masks must be binary"));
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => tn += 1,
        }
    }
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let total = pred.len() as u64;
    let iou_fg = ratio(tp, tp + fp + fneg);
    let iou_bg = ratio(tn, tn + fp + fneg);
    Ok(SegmentationScores {
        pixel_accuracy: (tp + tn) as f64 / total as f64,
        dice: ratio(2 * tp, 2 * tp + fp + fneg),
        miou: 0.5 * (iou_fg + iou_bg),
    })
}

/// Fixed probe hyperparameters.
pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
pub const PROBE_L2: f64 = 1e-4;
pub const PROBE_MIN_SAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
}

/// Stratified split: a fifth of every class (rounded down) goes to the test
/// side. Returns `(train, test)` indices.
pub fn probe_split(labels: &[u64], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&label, idx) in groups.iter_mut() {
        let mut rng = Rng::derived(seed, &[label]);
        rng.shuffle(idx);
        let n_test = idx.len() / 5;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Multinomial logistic regression on frozen features, trained by full-batch
/// gradient descent from zero. Features are PCA-whitened with training-split
/// statistics first, so the fixed step budget is not spent fighting
/// correlated columns. Returns held-out accuracy.
pub fn linear_probe(features: &Tensor, labels: &[u64], split_seed: u64) -> Result<ProbeResult> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::shape(
            "linear_probe",
            features.shape(),
            &[labels.len()],
        ));
    }
    let n = labels.len();
    if n < PROBE_MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "linear probe needs at least {PROBE_MIN_SAMPLES} samples, got {n}"
        )));
    }
    let (train, test) = probe_split(labels, split_seed);
    let mut classes: Vec<u64> = train.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::degenerate(
            "fewer than 2 classes in the probe training split",
        ));
    }
    if let Some(&missing) = test
        .iter()
        .map(|&i| &labels[i])
        .find(|l| classes.binary_search(l).is_err())
    {
        return Err(Error::degenerate(format!(
            "class {missing} missing from the probe training split"
        )));
    }
    if test.is_empty() {
        return Err(Error::degenerate("probe test split is empty"));
    }
    let c = classes.len();
    let class_of = |l: u64| classes.binary_search(&l).unwrap_or(0);

    let nt = train.len() as f64;
    let whiten = Whitening::fit(features, &train);
    let standardize = |i: usize| whiten.apply(features.row(i));
    let d = whiten.k;
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();
    let ytr: Vec<usize> = train.iter().map(|&i| class_of(labels[i])).collect();

    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let mut gw = vec![0.0; d * c];
    let mut gb = vec![0.0; c];
    let mut logits = vec![0.0; c];
    for _ in 0..PROBE_STEPS {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (x, &y) in xtr.iter().zip(&ytr) {
            scores(x, &w, &b, &mut logits);
            softmax_in_place(&mut logits);
            logits[y] -= 1.0;
            for (k, xk) in x.iter().enumerate() {
                let row = &mut gw[k * c..(k + 1) * c];
                for (g, r) in row.iter_mut().zip(&logits) {
                    *g += xk * r;
                }
            }
            for (g, r) in gb.iter_mut().zip(&logits) {
                *g += r;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= PROBE_LR * (gi / nt + PROBE_L2 * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= PROBE_LR * gi / nt;
        }
    }
    if w.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear probe weights".into()));
    }
    let mut correct = 0;
    for &i in &test {
        scores(&standardize(i), &w, &b, &mut logits);
        if crate::transfer::argmax(&logits) == class_of(labels[i]) {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        classes: c,
        train: train.len(),
        test: test.len(),
    })
}

/// PCA whitening fitted on a subset of rows. Directions whose variance is
/// negligible next to the largest one are dropped.
struct Whitening {
    mean: Vec<f64>,
    /// `d x k`, row-major.
    projection: Vec<f64>,
    k: usize,
}

const WHITEN_RTOL: f64 = 1e-9;

impl Whitening {
    fn fit(features: &Tensor, rows: &[usize]) -> Self {
        let d = features.shape()[1];
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in rows {
            for (m, x) in mean.iter_mut().zip(features.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut centered = vec![0.0; d];
        for &i in rows {
            for ((c, x), m) in centered.iter_mut().zip(features.row(i)).zip(&mean) {
                *c = x - m;
            }
            for a in 0..d {
                for b in a..d {
                    cov[(a, b)] += centered[a] * centered[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] /= n;
                cov[(b, a)] = cov[(a, b)];
            }
        }
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..d)
            .filter(|&j| top > 0.0 && eig.eigenvalues[j] > WHITEN_RTOL * top)
            .collect();
        let k = keep.len();
        let mut projection = vec![0.0; d * k];
        for (col, &j) in keep.iter().enumerate() {
            let s = 1.0 / libm::sqrt(eig.eigenvalues[j]);
            for a in 0..d {
                projection[a * k + col] = eig.eigenvectors[(a, j)] * s;
            }
        }
        Whitening {
            mean,
            projection,
            k,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (a, (xa, m)) in x.iter().zip(&self.mean).enumerate() {
            let c = xa - m;
            for (o, p) in out
                .iter_mut()
                .zip(&self.projection[a * self.k..(a + 1) * self.k])
            {
                *o += c * p;
            }
        }
        out
    }
}

fn scores(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let c = b.len();
    out.copy_from_slice(b);
    for (k, xk) in x.iter().enumerate() {
        for (o, wk) in out.iter_mut().zip(&w[k * c..(k + 1) * c]) {
            *o += xk * wk;
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - m);
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

/// Accuracy of always predicting the most frequent label.
pub fn majority_rate(labels: &[u64]) -> f64 {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    if labels.is_empty() {
        0.0
    } else {
        top as f64 / labels.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn qwk_examples() {
        assert!((qwk(&[0, 1, 2], &[0, 1, 1], 3).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((qwk(&[0, 1], &[1, 0], 2).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(qwk(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap(), 1.0);
        assert_eq!(qwk(&[1, 1], &[1, 1], 3).unwrap(), 1.0);
    }

    #[test]
    fn qwk_errors() {
        assert!(qwk(&[0, 3], &[0, 1], 3).is_err());
        assert!(qwk(&[0], &[0, 1], 3).is_err());
        assert!(qwk(&[], &[], 3).is_err());
        assert!(qwk(&[0], &[0], 1).is_err());
    }

    #[test]
    fn classification_examples() {
        let s = classification_scores(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(s.accuracy, 0.75);
        assert!((s.f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1[1] - 0.8).abs() < 1e-15);
        let p = classification_scores(&[0, 1, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(p.accuracy, 1.0);
        assert_eq!(p.f1, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn regression_examples() {
        let s = regression_scores(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        assert_eq!((s.mae, s.mse, s.r2), (0.5, 0.25, 0.0));
        let p = regression_scores(&[0.1, 0.4, 0.9], &[0.1, 0.4, 0.9]).unwrap();
        assert_eq!((p.mae, p.mse, p.r2), (0.0, 0.0, 1.0));
        assert!(matches!(
            regression_scores(&[0.3, 0.3], &[0.1, 0.2]),
            Err(Error::Degenerate(_))
        ));
        assert!(regression_scores(&[0.3], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn segmentation_examples() {
        let truth = [1, 1, 1, 1, 0, 0, 0, 0];
        let half = [1, 1, 0, 0, 0, 0, 0, 0];
        let s = segmentation_scores(&half, &truth).unwrap();
        assert!((s.dice - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.pixel_accuracy, 0.75);
        assert_eq!(
            segmentation_scores(&truth, &truth).unwrap(),
            SegmentationScores {
                pixel_accuracy: 1.0,
                dice: 1.0,
                miou: 1.0
            }
        );
        assert_eq!(segmentation_scores(&[0; 4], &[0; 4]).unwrap().dice, 1.0);
        assert_eq!(segmentation_scores(&[0; 4], &[0; 4]).unwrap().miou, 1.0);
        assert!(segmentation_scores(&[0, 2], &[0, 1]).is_err());
        assert!(segmentation_scores(&[0], &[0, 1]).is_err());
    }

    fn blobs(n: usize, d: usize, sep: f64, seed: u64) -> (Tensor, Vec<u64>) {
        let mut rng = Rng::new(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i % 2) as u64;
            for k in 0..d {
                let centre = if k == 0 {
                    sep * (2.0 * y as f64 - 1.0)
                } else {
                    0.0
                };
                data.push(centre + rng.normal());
            }
            labels.push(y);
        }
        (Tensor::new(&[n, d], data).unwrap(), labels)
    }

    #[test]
    fn probe_separable() {
        let (x, y) = blobs(100, 4, 10.0, 1);
        assert_eq!(linear_probe(&x, &y, 0).unwrap().accuracy, 1.0);
    }

    #[test]
    fn probe_constant_features_is_chance() {
        let x = Tensor::full(&[200, 3], 0.7);
        let y: Vec<u64> = (0..200).map(|i| i % 2).collect();
        let acc = linear_probe(&x, &y, 3).unwrap().accuracy;
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn probe_duplicated_columns() {
        let (x, y) = blobs(120, 3, 1.0, 5);
        let n = 120;
        let mut dup = Vec::new();
        for i in 0..n {
            dup.extend_from_slice(x.row(i));
            dup.extend_from_slice(x.row(i));
        }
        let xd = Tensor::new(&[n, 6], dup).unwrap();
        assert_eq!(
            linear_probe(&x, &y, 9).unwrap().accuracy,
            linear_probe(&xd, &y, 9).unwrap().accuracy
        );
    }

    #[test]
    fn probe_errors() {
        let x = Tensor::zeros(&[10, 2]);
        assert!(linear_probe(&x, &[0; 10], 0).is_err());
        let x = Tensor::zeros(&[30, 2]);
        assert!(linear_probe(&x, &[1; 30], 0).is_err());
        let mut y = vec![0u64; 30];
        y[0] = 1;
        // a singleton class never reaches the test split, but training still needs two classes
        assert!(linear_probe(&x, &y, 0).is_ok());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let y: Vec<u64> = (0..50).map(|i| i % 5).collect();
        let (tr, te) = probe_split(&y, 4);
        assert_eq!((tr.len(), te.len()), (40, 10));
        assert_eq!(probe_split(&y, 4), (tr, te));
    }

    proptest! {
        #[test]
        fn qwk_symmetric(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40)) {
            let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            match (qwk(&a, &p, 4), qwk(&p, &a, 4)) {
                (Ok(x), Ok(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x.is_err(), y.is_err()),
            }
        }

        #[test]
        fn qwk_self_agreement(a in prop::collection::vec(0usize..5, 2..40)) {
            prop_assume!(a.iter().any(|&x| x != a[0]));
            prop_assert_eq!(qwk(&a, &a, 5).unwrap(), 1.0);
        }

        #[test]
        fn micro_f1_is_accuracy(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..60)) {
            let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let s = classification_scores(&a, &p, 6).unwrap();
            prop_assert!((s.micro_f1 - s.accuracy).abs() < 1e-12);
        }

        #[test]
        fn segmentation_is_order_invariant(
            px in prop::collection::vec((0u8..2, 0u8..2), 1..64),
            seed in any::<u64>(),
        ) {
            let p: Vec<u8> = px.iter().map(|x| x.0).collect();
            let t: Vec<u8> = px.iter().map(|x| x.1).collect();
            let mut perm: Vec<usize> = (0..px.len()).collect();
            Rng::new(seed).shuffle(&mut perm);
            let ps: Vec<u8> = perm.iter().map(|&i| p[i]).collect();
            let ts: Vec<u8> = perm.iter().map(|&i| t[i]).collect();
            let a = segmentation_scores(&p, &t).unwrap();
            let b = segmentation_scores(&ps, &ts).unwrap();
            prop_assert!((a.dice - b.dice).abs() < 1e-15);
            prop_assert!((a.miou - b.miou).abs() < 1e-15);
            let agree = p.iter().zip(&t).filter(|(x, y)| x == y).count();
            prop_assert_eq!(a.pixel_accuracy, agree as f64 / p.len() as f64);
        }
    }
}
