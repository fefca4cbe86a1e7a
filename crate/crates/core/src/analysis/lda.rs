//! Fisher discriminant projection and the linear-probe accuracy on it.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use super::separation::min_norm_lstsq;
use crate::{Error, Result, Tensor};

/// Ridge added to the within-class scatter before whitening.
pub const LDA_RIDGE: f64 = 1e-6;

fn n_classes(labels: &[usize]) -> usize {
    labels.iter().copied().max().map_or(0, |m| m + 1)
}

/// Fisher LDA. Returns the `m×k` projection (unit-norm columns, ordered by
/// decreasing discriminant eigenvalue) and the `n×k` projected samples.
pub fn lda_project(features: &Tensor, labels: &[usize], k: usize) -> Result<(Tensor, Tensor)> {
    let (n, m) = (features.rows(), features.cols());
    if labels.len() != n {
        return Err(Error::invalid("one label per feature row is required"));
    }
    let c = n_classes(labels);
    let present = {
        let mut seen = alloc::vec![false; c];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if present < 2 {
        return Err(Error::InsufficientClasses { needed: 2, available: present });
    }
    if k == 0 || k > m {
        return Err(Error::invalid("projection rank must be in 1..=feature_dim"));
    }
    let x = DMatrix::from_row_slice(n, m, features.data());
    let mean: DVector<f64> = x.row_mean().transpose();
    let mut sw = DMatrix::<f64>::zeros(m, m);
    let mut sb = DMatrix::<f64>::zeros(m, m);
    for cls in 0..c {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == cls).collect();
        if rows.is_empty() {
            continue;
        }
        let mut mu = DVector::<f64>::zeros(m);
        for &i in &rows {
            mu += x.row(i).transpose();
        }
        mu /= rows.len() as f64;
        for &i in &rows {
            let d = x.row(i).transpose() - &mu;
            sw += &d * d.transpose();
        }
        let d = &mu - &mean;
        sb += (&d * d.transpose()) * rows.len() as f64;
    }
    for i in 0..m {
        sw[(i, i)] += LDA_RIDGE;
    }
    let chol = sw.cholesky().ok_or_else(|| Error::degenerate("within-class scatter is not positive definite"))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::degenerate("singular Cholesky factor"))?;
    let c_mat = &linv * sb * linv.transpose();
    let sym = (&c_mat + c_mat.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut proj = DMatrix::<f64>::zeros(m, k);
    for (j, &o) in order.iter().take(k).enumerate() {
        let v = linv.transpose() * eig.eigenvectors.column(o);
        let mut v = v.normalize();
        let lead = v.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v = -v;
        }
        proj.set_column(j, &v);
    }
    let projected = &x * &proj;
    let to_tensor = |mat: &DMatrix<f64>| {
        let mut d = Vec::with_capacity(mat.len());
        for r in 0..mat.nrows() {
            d.extend(mat.row(r).iter());
        }
        Tensor::new(alloc::vec![mat.nrows(), mat.ncols()], d)
    };
    Ok((to_tensor(&proj)?, to_tensor(&projected)?))
}

/// Training accuracy (percent) of a one-vs-rest least-squares probe with a
/// bias column fitted on `x` against 0/1 indicator targets.
pub fn lr_acc(x: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, m) = (x.rows(), x.cols());
    if labels.len() != n || n == 0 {
        return Err(Error::invalid("one label per row is required"));
    }
    let c = n_classes(labels);
    let mut a = DMatrix::<f64>::zeros(n, m + 1);
    for i in 0..n {
        for j in 0..m {
            a[(i, j)] = x.at(i, j);
        }
        a[(i, m)] = 1.0;
    }
    let mut scores = DMatrix::<f64>::zeros(n, c);
    for cls in 0..c {
        let y = DVector::from_iterator(n, labels.iter().map(|&l| if l == cls { 1.0 } else { 0.0 }));
        let w = min_norm_lstsq(a.clone(), &y);
        scores.set_column(cls, &(&a * w));
    }
    let mut hits = 0usize;
    for i in 0..n {
        let mut best = 0;
        for cls in 1..c {
            if scores[(i, cls)] > scores[(i, best)] {
                best = cls;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use alloc::vec;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(sep: f64) -> (Tensor, Vec<usize>) {
        let mut r = rng::stream(2, "lda");
        let mut d = Vec::new();
        let mut y = Vec::new();
        for c in 0..3 {
            for _ in 0..30 {
                for j in 0..4 {
                    let z: f64 = StandardNormal.sample(&mut r);
                    d.push(z + if j == c { sep } else { 0.0 });
                }
                y.push(c);
            }
        }
        (Tensor::new(vec![90, 4], d).unwrap(), y)
    }

    #[test]
    fn projection_shapes_and_unit_columns() {
        let (x, y) = blobs(4.0);
        let (p, z) = lda_project(&x, &y, 2).unwrap();
        assert_eq!(p.shape(), &[4, 2]);
        assert_eq!(z.shape(), &[90, 2]);
        for j in 0..2 {
            let n: f64 = (0..4).map(|i| p.at(i, j) * p.at(i, j)).sum();
            assert!((n - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn separable_blobs_are_probe_separable() {
        let (x, y) = blobs(8.0);
        let (_, z) = lda_project(&x, &y, 2).unwrap();
        assert!(lr_acc(&z, &y).unwrap() > 95.0);
    }

    #[test]
    fn leading_direction_maximises_fisher_ratio() {
        let (x, y) = blobs(3.0);
        let (p, _) = lda_project(&x, &y, 1).unwrap();
        let ratio = |w: &[f64]| {
            let proj: Vec<f64> = (0..x.rows()).map(|i| x.row(i).iter().zip(w).map(|(a, b)| a * b).sum()).collect();
            let mean = proj.iter().sum::<f64>() / proj.len() as f64;
            let (mut sw, mut sb) = (0.0, 0.0);
            for c in 0..3 {
                let v: Vec<f64> = (0..proj.len()).filter(|&i| y[i] == c).map(|i| proj[i]).collect();
                let mu = v.iter().sum::<f64>() / v.len() as f64;
                sw += v.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>();
                sb += v.len() as f64 * (mu - mean) * (mu - mean);
            }
            sb / sw
        };
        let best = ratio(&[p.at(0, 0), p.at(1, 0), p.at(2, 0), p.at(3, 0)]);
        for w in [[1.0, 0.0, 0.0, 0.0], [0.5, -0.5, 0.2, 0.1], [0.0, 1.0, -1.0, 0.0]] {
            assert!(best >= ratio(&w) - 1e-9);
        }
    }

    #[test]
    fn one_class_is_rejected() {
        let x = Tensor::zeros(&[4, 2]);
        assert!(matches!(lda_project(&x, &[0, 0, 0, 0], 1), Err(Error::InsufficientClasses { .. })));
    }

    #[test]
    fn probe_on_trivial_labels() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![10.0], vec![11.0]]).unwrap();
        assert_eq!(lr_acc(&x, &[0, 0, 1, 1]).unwrap(), 100.0);
    }
}
