//! Whitened two-component PCA of opponent-ID embeddings and a 2-means
//! clustering of the projected points.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::env::Sociality;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProjectedPoint {
    pub id: usize,
    pub sociality: Sociality,
    pub pc1: f64,
    pub pc2: f64,
    pub cluster: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Geometry {
    pub points: Vec<ProjectedPoint>,
    /// Share of the variance carried by each of the two components.
    pub explained: [f64; 2],
    /// Fraction of points whose cluster's majority sociality matches their own.
    pub purity: f64,
}

/// Projects `rows` onto their top two principal components, each scaled to
/// unit sample variance, and clusters the result.
pub fn whitened_pca(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    Ok(pca_with_variance(rows)?.0)
}

fn pca_with_variance(rows: &[Vec<f64>]) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("PCA needs at least 3 embeddings, got {n}")));
    }
    let d = rows[0].len();
    if d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape(format!("embedding rows must share a width of at least 2, got {d}")));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = x.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = &svd.singular_values;
    let total: f64 = s.iter().map(|v| v * v).sum();
    let top = [order[0], order[1]];
    if s[top[1]] <= 1e-12 * s[top[0]].max(1e-300) {
        return Err(Error::InsufficientData("embeddings span fewer than two dimensions".into()));
    }
    let scale = ((n - 1) as f64).sqrt();
    let mut coords = vec![[0.0; 2]; n];
    for (c, &k) in top.iter().enumerate() {
        // fix the sign so the largest loading is positive
        let loading = v_t.row(k);
        let big = loading.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if big < 0.0 { -1.0 } else { 1.0 };
        for (i, p) in coords.iter_mut().enumerate() {
            p[c] = sign * u[(i, k)] * scale;
        }
    }
    let explained = [s[top[0]].powi(2) / total, s[top[1]].powi(2) / total];
    Ok((coords, explained))
}

/// Lloyd's 2-means started from every pair of points; the lowest-inertia
/// result wins and ties go to the earliest pair. Labels are relabeled so the
/// first point is in cluster 0.
pub fn two_means(points: &[[f64; 2]]) -> Vec<usize> {
    let n = points.len();
    if n < 2 {
        return vec![0; n];
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for i in 0..n {
        for j in i + 1..n {
            let mut centers = [points[i], points[j]];
            let mut labels = vec![0; n];
            for _ in 0..100 {
                let next: Vec<usize> = points
                    .iter()
                    .map(|p| usize::from(dist(p, &centers[1]) < dist(p, &centers[0])))
                    .collect();
                let changed = next != labels;
                labels = next;
                for (c, center) in centers.iter_mut().enumerate() {
                    let members: Vec<&[f64; 2]> = points.iter().zip(&labels).filter(|(_, l)| **l == c).map(|(p, _)| p).collect();
                    if !members.is_empty() {
                        let m = members.len() as f64;
                        *center = [
                            members.iter().map(|p| p[0]).sum::<f64>() / m,
                            members.iter().map(|p| p[1]).sum::<f64>() / m,
                        ];
                    }
                }
                if !changed {
                    break;
                }
            }
            let inertia: f64 = points.iter().zip(&labels).map(|(p, &l)| dist(p, &centers[l])).sum();
            if best.as_ref().map_or(true, |(b, _)| inertia < *b - 1e-12) {
                best = Some((inertia, labels));
            }
        }
    }
    let mut labels = best.expect("at least one pair").1;
    if labels[0] == 1 {
        labels.iter_mut().for_each(|l| *l = 1 - *l);
    }
    labels
}

/// Majority-label purity of a clustering.
pub fn purity(clusters: &[usize], labels: &[Sociality]) -> f64 {
    let n = clusters.len();
    if n == 0 {
        return 0.0;
    }
    let k = clusters.iter().max().map_or(0, |m| m + 1);
    let mut agree = 0;
    for c in 0..k {
        let members: Vec<Sociality> = clusters.iter().zip(labels).filter(|(x, _)| **x == c).map(|(_, l)| *l).collect();
        let pros = members.iter().filter(|s| **s == Sociality::Prosocial).count();
        agree += pros.max(members.len() - pros);
    }
    agree as f64 / n as f64
}

pub fn embedding_geometry(rows: &[Vec<f64>], sociality: &[Sociality]) -> Result<Geometry> {
    if rows.len() != sociality.len() {
        return Err(Error::Shape(format!("{} embeddings but {} labels", rows.len(), sociality.len())));
    }
    let (coords, explained) = pca_with_variance(rows)?;
    let clusters = two_means(&coords);
    let points = coords
        .iter()
        .zip(&clusters)
        .zip(sociality)
        .enumerate()
        .map(|(id, ((c, &cluster), &sociality))| ProjectedPoint {
            id,
            sociality,
            pc1: c[0],
            pc2: c[1],
            cluster,
        })
        .collect();
    Ok(Geometry {
        points,
        explained,
        purity: purity(&clusters, sociality),
    })
}
