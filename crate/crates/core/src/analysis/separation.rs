//! Confidence and feature-space separation diagnostics.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Split, Universe};
use crate::model::ModelParams;
use crate::rng::Stream;
use crate::{Error, Result, Tensor};

/// Mean over rows of `top1 − mean(next m−1)` for probability rows.
pub fn tsd(probs: &Tensor, m: usize) -> Result<f64> {
    let c = probs.cols();
    if m < 2 || m > c {
        return Err(Error::invalid("tsd needs 2 <= m <= number of classes"));
    }
    if probs.rows() == 0 {
        return Err(Error::invalid("tsd needs at least one row"));
    }
    let mut total = 0.0;
    let mut row = Vec::with_capacity(c);
    for r in 0..probs.rows() {
        row.clear();
        row.extend_from_slice(probs.row(r));
        row.sort_by(|a, b| b.total_cmp(a));
        let rest: f64 = row[1..m].iter().sum::<f64>() / (m - 1) as f64;
        total += row[0] - rest;
    }
    Ok(total / probs.rows() as f64)
}

fn centroid(rows: &Tensor) -> Vec<f64> {
    let mut c = alloc::vec![0.0; rows.cols()];
    for r in 0..rows.rows() {
        for (a, &b) in c.iter_mut().zip(rows.row(r)) {
            *a += b;
        }
    }
    let n = rows.rows() as f64;
    c.iter_mut().for_each(|a| *a /= n);
    c
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_classes(features: &[Tensor], min_rows: usize) -> Result<usize> {
    if features.len() < 2 {
        return Err(Error::InsufficientClasses {
            needed: 2,
            available: features.len(),
        });
    }
    let m = features[0].cols();
    for f in features {
        if f.cols() != m {
            return Err(Error::ShapeMismatch {
                op: "separation",
                lhs: alloc::vec![m],
                rhs: f.shape().into(),
            });
        }
        if f.rows() < min_rows {
            return Err(Error::invalid("too few samples per class"));
        }
    }
    Ok(m)
}

/// Intra- to inter-class variance ratio
/// `(N_w / N_q) · Σ‖f − μ_c‖² / Σ_c ‖μ_c − μ‖²`, with `μ` the mean of the
/// class centroids and `N_q` the mean number of samples per class.
/// `features[c]` holds the feature rows of class `c`.
pub fn r_fc(features: &[Tensor]) -> Result<f64> {
    check_classes(features, 1)?;
    let cents: Vec<Vec<f64>> = features.iter().map(centroid).collect();
    let n_way = cents.len() as f64;
    let mut within = 0.0;
    let mut n = 0usize;
    for (f, c) in features.iter().zip(&cents) {
        for r in 0..f.rows() {
            within += sq_dist(f.row(r), c);
        }
        n += f.rows();
    }
    let mut mu = alloc::vec![0.0; cents[0].len()];
    for c in &cents {
        mu.iter_mut().zip(c).for_each(|(a, b)| *a += b / n_way);
    }
    let between: f64 = cents.iter().map(|c| sq_dist(c, &mu)).sum();
    if between <= 0.0 {
        return Err(Error::degenerate("class centroids coincide"));
    }
    let n_query = n as f64 / n_way;
    Ok(n_way / n_query * within / between)
}

/// Minimum-norm least-squares separator (with bias) of `pos` against `neg`.
fn separator(pos: &Tensor, neg: &Tensor) -> DVector<f64> {
    let m = pos.cols();
    let n = pos.rows() + neg.rows();
    let mut x = DMatrix::<f64>::zeros(n, m + 1);
    let mut y = DVector::<f64>::zeros(n);
    for (i, (t, s)) in (0..pos.rows()).map(|r| (pos.row(r), 1.0)).chain((0..neg.rows()).map(|r| (neg.row(r), -1.0))).enumerate() {
        for j in 0..m {
            x[(i, j)] = t[j];
        }
        x[(i, m)] = 1.0;
        y[i] = s;
    }
    min_norm_lstsq(x, &y)
}

pub(crate) fn min_norm_lstsq(x: DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = x.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = (smax * 1e-10).max(f64::MIN_POSITIVE);
    svd.solve(y, eps).unwrap_or_else(|_| DVector::zeros(svd.v_t.as_ref().map_or(0, |v| v.ncols())))
}

/// Separator instability from two fixed halves of every class.
pub fn r_hv_halves(half_a: &[Tensor], half_b: &[Tensor]) -> Result<f64> {
    if half_a.len() != half_b.len() {
        return Err(Error::invalid("halves must cover the same classes"));
    }
    check_classes(half_a, 1)?;
    check_classes(half_b, 1)?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..half_a.len() {
        for b in a + 1..half_a.len() {
            let wa = separator(&half_a[a], &half_a[b]);
            let wb = separator(&half_b[a], &half_b[b]);
            let denom = wa.norm() + wb.norm();
            if denom > 0.0 {
                total += (&wa - &wb).norm() / denom;
            }
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Separator instability: each class is split at random into two disjoint
/// halves, separators are fitted per half, and their relative disagreement is
/// averaged over class pairs.
pub fn r_hv(features: &[Tensor], rng: &mut Stream) -> Result<f64> {
    check_classes(features, 2)?;
    let mut ha = Vec::with_capacity(features.len());
    let mut hb = Vec::with_capacity(features.len());
    for f in features {
        let mut idx: Vec<usize> = (0..f.rows()).collect();
        idx.shuffle(rng);
        let half = f.rows() / 2;
        ha.push(take_rows(f, &idx[..half]));
        hb.push(take_rows(f, &idx[half..2 * half]));
    }
    r_hv_halves(&ha, &hb)
}

fn take_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut d = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        d.extend_from_slice(t.row(i));
    }
    Tensor::from_parts(alloc::vec![idx.len(), c], d)
}

/// Groups rows of `x` by `labels` into `n_classes` tensors.
pub(crate) fn group_rows(x: &Tensor, labels: &[usize], n_classes: usize) -> Vec<Tensor> {
    (0..n_classes)
        .map(|c| {
            let idx: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect();
            take_rows(x, &idx)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub r_fc: f64,
    pub r_hv: f64,
    pub n_tasks: usize,
}

/// Averages `r_fc` and `r_hv` of encoder features over `n_tasks` random
/// `n_way`-class draws with `per_class` samples each (the single support
/// sample of every class is unused).
pub fn separation_report(
    model: &ModelParams,
    universe: &Universe,
    domain: usize,
    split: Split,
    n_way: usize,
    per_class: usize,
    n_tasks: usize,
    rng: &mut Stream,
) -> Result<SeparationReport> {
    if n_tasks == 0 {
        return Err(Error::invalid("separation report needs at least one task"));
    }
    let (mut fc, mut hv) = (0.0, 0.0);
    for _ in 0..n_tasks {
        let ep = universe.sample_episode(domain, split, n_way, 1, per_class, rng)?;
        let feats = model.encode(&ep.query_x)?;
        let groups = group_rows(&feats, &ep.query_y, n_way);
        fc += r_fc(&groups)?;
        hv += r_hv(&groups, rng)?;
    }
    Ok(SeparationReport {
        r_fc: fc / n_tasks as f64,
        r_hv: hv / n_tasks as f64,
        n_tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn tsd_examples() {
        let p = Tensor::from_rows(&[vec![0.7, 0.2, 0.1]]).unwrap();
        assert!((tsd(&p, 3).unwrap() - 0.55).abs() < 1e-12);
        let u = Tensor::filled(&[2, 4], 0.25);
        assert!(tsd(&u, 3).unwrap().abs() < 1e-15);
        let q = Tensor::from_rows(&[vec![0.7, 0.2, 0.05, 0.05]]).unwrap();
        assert!((tsd(&q, 3).unwrap() - 0.575).abs() < 1e-12);
        let oh = Tensor::one_hot(&[1, 3], 5).unwrap();
        assert!((tsd(&oh, 5).unwrap() - 1.0).abs() < 1e-15);
        assert!(tsd(&oh, 1).is_err());
        assert!(tsd(&oh, 6).is_err());
    }

    #[test]
    fn r_fc_example() {
        let a = Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![4.0], vec![6.0]]).unwrap();
        assert!((r_fc(&[a.clone(), b.clone()]).unwrap() - 0.5).abs() < 1e-12);
        let moved = [a.map(|x| 3.0 * x - 7.0), b.map(|x| 3.0 * x - 7.0)];
        assert!((r_fc(&moved).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(r_fc(&[a.clone()]), Err(Error::InsufficientClasses { .. })));
        assert!(matches!(r_fc(&[a.clone(), a]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn r_hv_identical_halves_is_zero() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.5], vec![0.3, 0.2]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 1.0], vec![4.0, 2.5], vec![5.0, 0.0]]).unwrap();
        let h = [a, b];
        assert!(r_hv_halves(&h, &h).unwrap().abs() < 1e-12);
    }

    /// Independent separator via normal equations and Gauss-Jordan elimination.
    fn normal_eq_separator(pos: &Tensor, neg: &Tensor) -> Vec<f64> {
        let m = pos.cols() + 1;
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for r in 0..pos.rows() {
            let mut v = pos.row(r).to_vec();
            v.push(1.0);
            rows.push((v, 1.0));
        }
        for r in 0..neg.rows() {
            let mut v = neg.row(r).to_vec();
            v.push(1.0);
            rows.push((v, -1.0));
        }
        let mut a = vec![vec![0.0; m + 1]; m];
        for (x, y) in &rows {
            for i in 0..m {
                for j in 0..m {
                    a[i][j] += x[i] * x[j];
                }
                a[i][m] += x[i] * y;
            }
        }
        for col in 0..m {
            let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            let d = a[col][col];
            for k in 0..=m {
                a[col][k] /= d;
            }
            for r in 0..m {
                if r != col {
                    let f = a[r][col];
                    for k in 0..=m {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        a.iter().map(|r| r[m]).collect()
    }

    fn random_class(rng: &mut Stream, n: usize, m: usize, shift: f64) -> Tensor {
        let d: Vec<f64> = (0..n * m).map(|_| StandardNormal.sample(rng)).map(|z: f64| z + shift).collect();
        Tensor::new(vec![n, m], d).unwrap()
    }

    #[test]
    fn r_hv_matches_independent_reimplementation() {
        let mut rng = rng::stream(11, "hv");
        let (n, m) = (12, 3);
        let ha: Vec<Tensor> = (0..3).map(|c| random_class(&mut rng, n, m, c as f64)).collect();
        let hb: Vec<Tensor> = (0..3).map(|c| random_class(&mut rng, n, m, c as f64)).collect();
        let mut expect = 0.0;
        let mut pairs = 0.0;
        for a in 0..3 {
            for b in a + 1..3 {
                let wa = normal_eq_separator(&ha[a], &ha[b]);
                let wb = normal_eq_separator(&hb[a], &hb[b]);
                let nrm = |v: &[f64]| libm::sqrt(v.iter().map(|x| x * x).sum());
                let diff: Vec<f64> = wa.iter().zip(&wb).map(|(x, y)| x - y).collect();
                expect += nrm(&diff) / (nrm(&wa) + nrm(&wb));
                pairs += 1.0;
            }
        }
        expect /= pairs;
        let got = r_hv_halves(&ha, &hb).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn r_hv_random_split_is_reproducible() {
        let mut rng = rng::stream(3, "hv");
        let f: Vec<Tensor> = (0..4).map(|c| random_class(&mut rng, 10, 4, 2.0 * c as f64)).collect();
        let a = r_hv(&f, &mut rng::stream(5, "s")).unwrap();
        let b = r_hv(&f, &mut rng::stream(5, "s")).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
    }
}
