use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{domain, stream};
use crate::tensor::Tensor;

/// Labeled feature matrix: `features` is `[n, dim]`, labels in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let [n, _] = features.shape() else {
            return Err(Error::Input(format!(
                "dataset features must be [n, dim], got {:?}",
                features.shape()
            )));
        };
        if *n != labels.len() {
            return Err(Error::Input(format!("{n} rows but {} labels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order, with their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let dim = self.dim();
        let src = self.features.data();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * dim..(i + 1) * dim]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(vec![indices.len(), dim], data).expect("gather shape"), labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (features, labels) = self.gather(indices);
        Dataset {
            features,
            labels,
            classes: self.classes,
        }
    }

    /// Stratified split: `fraction` of every class goes to the first dataset.
    pub fn split_stratified(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("split fraction must be in [0, 1), got {fraction}")));
        }
        let mut rng = stream(seed, domain::PUBLIC_SPLIT, &[]);
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (class, members) in indices_by_class(&self.labels, self.classes).into_iter().enumerate() {
            let mut members = members;
            members.shuffle(&mut rng);
            let take = (members.len() as f64 * fraction).round() as usize;
            if take == members.len() && take > 0 {
                return Err(Error::Config(format!(
                    "split fraction {fraction} leaves class {class} empty"
                )));
            }
            first.extend_from_slice(&members[..take]);
            second.extend_from_slice(&members[take..]);
        }
        first.sort_unstable();
        second.sort_unstable();
        Ok((self.subset(&first), self.subset(&second)))
    }
}

pub(crate) fn indices_by_class(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

pub const FEATURE_DIM: usize = 64;

/// Gaussian class clusters in 64 dimensions.
///
/// Class centers are `separation` times mutually orthonormal random
/// directions, so every pair of centers is `separation·√2` apart; noise is
/// isotropic with unit variance. Labels are dealt round-robin so classes are
/// balanced to within one sample.
pub fn generate_synthetic(n: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if !(2..=FEATURE_DIM).contains(&classes) {
        return Err(Error::Config(format!("class count must be in 2..={FEATURE_DIM}, got {classes}")));
    }
    if n < 10 * classes {
        return Err(Error::Config(format!(
            "need at least 10 samples per class ({}), got n = {n}",
            10 * classes
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation must be finite and >= 0, got {separation}")));
    }
    let mut rng = stream(seed, domain::DATASET, &[]);
    let centers = orthonormal_rows(classes, FEATURE_DIM, &mut rng);

    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * FEATURE_DIM);
    for &y in &labels {
        for j in 0..FEATURE_DIM {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(separation * centers[y][j] + noise);
        }
    }
    Dataset::new(Tensor::new(vec![n, FEATURE_DIM], data)?, labels, classes)
}

fn orthonormal_rows<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let d = crate::tensor::dot(&v, r);
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= d * y);
        }
        let n = crate::tensor::norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
    }
    rows
}
