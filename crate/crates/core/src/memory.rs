//! Budgeted exemplar memory with herding selection and nearest-mean
//! classification.

use std::collections::BTreeMap;
use std::io::Write;

use crate::autodiff::NORM_EPS;
use crate::error::{CilError, Result};
use crate::linalg;
use crate::stream::Dataset;
use crate::tensor::Tensor;

/// `floor(budget / seen)`, at least 1.
pub fn per_class_quota(budget: usize, num_seen_classes: usize) -> usize {
    (budget / num_seen_classes.max(1)).max(1)
}

fn normalized_rows(features: &Tensor) -> Vec<Vec<f64>> {
    (0..features.rows())
        .map(|i| linalg::normalized(features.row(i), NORM_EPS))
        .collect()
}

/// Unit-normalized mean of unit-normalized rows.
pub fn normalized_mean(features: &Tensor) -> Vec<f64> {
    let rows = normalized_rows(features);
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for r in &rows {
        linalg::add_assign(&mut mean, r);
    }
    mean.iter_mut().for_each(|v| *v /= rows.len() as f64);
    linalg::normalized(&mean, NORM_EPS)
}

/// Greedy herding on L2-normalized features.
///
/// With `mu` the normalized mean, pick k chooses the unpicked row `x`
/// minimizing `|mu - (phi(x) + sum of earlier picks) / k|`. Ties go to the
/// lowest index. Returns the first `m` picks in selection order.
pub fn herding_select(features: &Tensor, m: usize) -> Result<Vec<usize>> {
    let n = features.rows();
    if m == 0 || m > n {
        return Err(CilError::invalid(format!(
            "herding_select: need 1 <= m <= n, got m={m}, n={n}"
        )));
    }
    let phi = normalized_rows(features);
    let mu = normalized_mean(features);
    let d = mu.len();
    let mut running = vec![0.0; d];
    let mut taken = vec![false; n];
    let mut picks = Vec::with_capacity(m);
    let mut candidate = vec![0.0; d];
    for k in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in phi.iter().enumerate() {
            if taken[i] {
                continue;
            }
            for j in 0..d {
                candidate[j] = (running[j] + p[j]) / k as f64;
            }
            let dist = linalg::sq_dist(&mu, &candidate);
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("m <= n leaves a candidate");
        taken[i] = true;
        linalg::add_assign(&mut running, &phi[i]);
        picks.push(i);
    }
    Ok(picks)
}

/// Exemplars of one class, stored in herding order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMemory {
    instances: Vec<Vec<f64>>,
    source_indices: Vec<usize>,
    mean: Vec<f64>,
}

impl ClassMemory {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Vec<f64>] {
        &self.instances
    }

    /// Row index of each exemplar in the training set it was selected from.
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    fn as_tensor(&self) -> Tensor {
        let d = self.instances[0].len();
        Tensor::from_parts(vec![self.instances.len(), d], self.instances.concat())
    }
}

/// Training instances of one newly learned class.
#[derive(Debug, Clone)]
pub struct NewClassData {
    pub class: usize,
    pub instances: Tensor,
    pub source_indices: Vec<usize>,
}

impl NewClassData {
    /// Every instance of `class` in `data`.
    pub fn from_dataset(data: &Dataset, class: usize) -> Result<Self> {
        let idx = data.indices_of_class(class);
        let (instances, _) = data.gather(&idx)?;
        Ok(NewClassData {
            class,
            instances,
            source_indices: idx,
        })
    }
}

/// Rehearsal memory of raw instances with a fixed total budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    budget: usize,
    classes: BTreeMap<usize, ClassMemory>,
}

impl ExemplarSet {
    pub fn new(budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(CilError::invalid("memory budget must be positive"));
        }
        Ok(ExemplarSet {
            budget,
            classes: BTreeMap::new(),
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(ClassMemory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    pub fn class(&self, class: usize) -> Option<&ClassMemory> {
        self.classes.get(&class)
    }

    pub fn per_class_counts(&self) -> BTreeMap<usize, usize> {
        self.classes.iter().map(|(&c, m)| (c, m.len())).collect()
    }

    /// Exemplars of the given classes (all classes if `None`) as a dataset.
    pub fn to_dataset(&self, num_classes: usize, only: Option<&[usize]>) -> Result<Option<Dataset>> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut dim = 0;
        for (&c, mem) in &self.classes {
            if only.is_some_and(|o| !o.contains(&c)) {
                continue;
            }
            for x in &mem.instances {
                dim = x.len();
                data.extend_from_slice(x);
                labels.push(c);
            }
        }
        if labels.is_empty() {
            return Ok(None);
        }
        Dataset::from_rows(dim, data, labels, num_classes).map(Some)
    }

    /// Re-budgets for `num_seen_classes`, truncates existing classes to the
    /// prefix of their herding order, inserts the new classes with herding
    /// picks, and recomputes every class mean with `feature_fn`.
    pub fn update<F>(&mut self, new_classes: &[NewClassData], num_seen_classes: usize, feature_fn: F) -> Result<()>
    where
        F: Fn(&Tensor) -> Result<Tensor>,
    {
        let q = per_class_quota(self.budget, num_seen_classes);
        if q * num_seen_classes > self.budget {
            return Err(CilError::invalid(format!(
                "memory budget {} cannot hold one exemplar for each of {num_seen_classes} classes",
                self.budget
            )));
        }
        for mem in self.classes.values_mut() {
            mem.instances.truncate(q);
            mem.source_indices.truncate(q);
        }
        for new in new_classes {
            if self.classes.contains_key(&new.class) {
                return Err(CilError::invalid(format!(
                    "class {} is already in memory",
                    new.class
                )));
            }
            let features = feature_fn(&new.instances)?;
            let m = q.min(new.instances.rows());
            let picks = herding_select(&features, m)?;
            self.classes.insert(
                new.class,
                ClassMemory {
                    instances: picks.iter().map(|&i| new.instances.row(i).to_vec()).collect(),
                    source_indices: picks.iter().map(|&i| new.source_indices[i]).collect(),
                    mean: Vec::new(),
                },
            );
        }
        self.recompute_means(feature_fn)
    }

    /// Class means from the surviving exemplars in the current feature space.
    pub fn recompute_means<F>(&mut self, feature_fn: F) -> Result<()>
    where
        F: Fn(&Tensor) -> Result<Tensor>,
    {
        for mem in self.classes.values_mut() {
            let features = feature_fn(&mem.as_tensor())?;
            mem.mean = normalized_mean(&features);
        }
        Ok(())
    }

    /// Nearest-mean prediction for precomputed features (one row per instance).
    pub fn nme_from_features(&self, features: &Tensor) -> Result<Vec<usize>> {
        if self.classes.is_empty() {
            return Err(CilError::invalid("nme_classify: memory is empty"));
        }
        Ok((0..features.rows())
            .map(|r| {
                let f = linalg::normalized(features.row(r), NORM_EPS);
                let mut best = (usize::MAX, f64::INFINITY);
                for (&c, mem) in &self.classes {
                    let d = linalg::sq_dist(&f, &mem.mean);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect())
    }

    pub fn nme_classify<F>(&self, feature_fn: F, batch: &Tensor) -> Result<Vec<usize>>
    where
        F: Fn(&Tensor) -> Result<Tensor>,
    {
        if self.classes.is_empty() {
            return Err(CilError::invalid("nme_classify: memory is empty"));
        }
        self.nme_from_features(&feature_fn(batch)?)
    }

    /// Diagnostic dump: `class,rank,instance_index`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "class,rank,instance_index")?;
        for (&c, mem) in &self.classes {
            for (rank, idx) in mem.source_indices.iter().enumerate() {
                writeln!(out, "{c},{rank},{idx}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(t: &Tensor) -> Result<Tensor> {
        Ok(t.clone())
    }

    fn cloud(class: usize, n: usize, offset: f64) -> NewClassData {
        let data: Vec<f64> = (0..n)
            .flat_map(|i| {
                let a = i as f64 * 0.37 + class as f64;
                vec![offset + a.sin(), offset * 0.5 + a.cos(), 1.0 + class as f64]
            })
            .collect();
        NewClassData {
            class,
            instances: Tensor::matrix(n, 3, data).unwrap(),
            source_indices: (0..n).map(|i| 1000 * class + i).collect(),
        }
    }

    #[test]
    fn quota_arithmetic() {
        assert_eq!(per_class_quota(2000, 10), 200);
        assert_eq!(per_class_quota(10, 3), 3);
        assert_eq!(per_class_quota(2, 5), 1);
    }

    #[test]
    fn herding_trivial_cases() {
        let one = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(herding_select(&one, 1).unwrap(), vec![0]);
        assert!(herding_select(&one, 2).is_err());

        // the mean direction of these three is exactly (1, 1)/sqrt(2)
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let f = Tensor::matrix(3, 2, vec![1.0, 0.0, s, s, 0.0, 1.0]).unwrap();
        assert_eq!(herding_select(&f, 1).unwrap(), vec![1]);
        assert_eq!(herding_select(&f, 3).unwrap()[0], 1);
    }

    #[test]
    fn update_rebalances_and_keeps_prefix() {
        let mut mem = ExemplarSet::new(12).unwrap();
        let first: Vec<NewClassData> = (0..2).map(|c| cloud(c, 10, c as f64)).collect();
        mem.update(&first, 2, identity).unwrap();
        assert_eq!(mem.per_class_counts().values().copied().collect::<Vec<_>>(), vec![6, 6]);
        let before = mem.class(0).unwrap().source_indices().to_vec();

        let second: Vec<NewClassData> = (2..4).map(|c| cloud(c, 10, -(c as f64))).collect();
        mem.update(&second, 4, identity).unwrap();
        assert_eq!(mem.len(), 12);
        assert!(mem.per_class_counts().values().all(|&n| n == 3));
        assert_eq!(mem.class(0).unwrap().source_indices(), &before[..3]);
        assert!(mem.len() <= mem.budget());
    }

    #[test]
    fn budget_pressure_is_refused() {
        let mut mem = ExemplarSet::new(2).unwrap();
        let data: Vec<NewClassData> = (0..3).map(|c| cloud(c, 4, 0.0)).collect();
        assert!(mem.update(&data, 3, identity).is_err());
    }

    #[test]
    fn nme_picks_nearest_mean() {
        let mut mem = ExemplarSet::new(10).unwrap();
        let e1 = NewClassData {
            class: 0,
            instances: Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
            source_indices: vec![0],
        };
        let e2 = NewClassData {
            class: 1,
            instances: Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap(),
            source_indices: vec![0],
        };
        mem.update(&[e1, e2], 2, identity).unwrap();
        let probes = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.2, 0.9, 50.0, 3.0]).unwrap();
        assert_eq!(mem.nme_classify(identity, &probes).unwrap(), vec![0, 1, 0]);
        // exact tie goes to the lower class id
        let tie = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(mem.nme_classify(identity, &tie).unwrap(), vec![0]);
        assert!(ExemplarSet::new(3)
            .unwrap()
            .nme_classify(identity, &tie)
            .is_err());
    }

    #[test]
    fn csv_dump_lists_ranks() {
        let mut mem = ExemplarSet::new(4).unwrap();
        mem.update(&[cloud(5, 6, 1.0)], 1, identity).unwrap();
        let mut buf = Vec::new();
        mem.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "class,rank,instance_index");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("5,0,500"));
    }
}
