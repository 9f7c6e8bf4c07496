//! Synthetic minority oversampling.

use rand::Rng;

use super::preprocess::Dataset;
use crate::error::{Error, Result};

pub const SMOTE_NEIGHBORS: usize = 5;

/// `n_new` synthetic points, each `x + u·(neighbor − x)` with `u ~ U[0, 1]`
/// and the neighbour drawn among the `k` nearest other minority points.
/// Base points cycle through `minority` in order.
pub fn smote_samples(minority: &[Vec<f64>], k: usize, n_new: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if minority.len() < 2 {
        return Err(Error::Invalid(format!(
            "oversampling needs at least 2 minority samples, found {}",
            minority.len()
        )));
    }
    let k = k.clamp(1, minority.len() - 1);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let neighbors: Vec<Vec<usize>> = (0..minority.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..minority.len())
                .filter(|&j| j != i)
                .map(|j| (sq(&minority[i], &minority[j]), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();
    let mut rng = crate::seed::rng(seed);
    Ok((0..n_new)
        .map(|s| {
            let slot = s % minority.len();
            let base = &minority[slot];
            let nb = &minority[neighbors[slot][rng.random_range(0..neighbors[slot].len())]];
            let gap: f64 = rng.random();
            base.iter().zip(nb).map(|(a, b)| a + gap * (b - a)).collect()
        })
        .collect())
}

/// Oversamples the minority class up to the majority count. Balanced input
/// is returned unchanged.
pub fn smote(data: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let (neg, pos) = data.class_counts();
    if neg == pos {
        return Ok(data.clone());
    }
    let minority_label = if pos < neg { 1.0 } else { 0.0 };
    let minority: Vec<Vec<f64>> = (0..data.len())
        .filter(|&i| data.y[i] == minority_label)
        .map(|i| data.x[i].clone())
        .collect();
    let needed = neg.max(pos) - neg.min(pos);
    let mut out = data.clone();
    for row in smote_samples(&minority, k, needed, seed)? {
        out.x.push(row);
        out.y.push(minority_label);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balances_and_interpolates() {
        let data = Dataset::new(
            vec![vec![0.0, 0.0], vec![0.1, 0.1], vec![0.2, 0.0], vec![1.0, 1.0], vec![0.8, 1.0]],
            vec![0.0, 0.0, 0.0, 1.0, 1.0],
        )
        .unwrap();
        let out = smote(&data, SMOTE_NEIGHBORS, 7).unwrap();
        assert_eq!(out.class_counts(), (3, 3));
        let synth = &out.x[5];
        assert_eq!(synth[1], 1.0);
        assert!((0.8..=1.0).contains(&synth[0]));
        assert_eq!(&out.x[..5], &data.x[..]);
    }

    #[test]
    fn balanced_input_unchanged() {
        let data = Dataset::new(vec![vec![0.0], vec![1.0]], vec![0.0, 1.0]).unwrap();
        assert_eq!(smote(&data, 5, 1).unwrap(), data);
    }

    #[test]
    fn single_minority_rejected() {
        let data = Dataset::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![0.0, 0.0, 1.0]).unwrap();
        assert!(smote(&data, 5, 1).is_err());
    }

    proptest! {
        #[test]
        fn synthetic_points_stay_in_minority_hull_box(
            pts in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 6..20),
            minority in 2usize..5,
            seed in any::<u64>(),
        ) {
            let n = pts.len();
            let y: Vec<f64> = (0..n).map(|i| if i < minority { 1.0 } else { 0.0 }).collect();
            let data = Dataset::new(pts.clone(), y).unwrap();
            let out = smote(&data, 5, seed).unwrap();
            let (neg, pos) = out.class_counts();
            prop_assert_eq!(neg, pos);
            if out.len() == n {
                return Ok(());
            }
            let label = out.y[n];
            let members: Vec<&Vec<f64>> = pts.iter().zip(&data.y).filter(|(_, y)| **y == label).map(|(p, _)| p).collect();
            for row in &out.x[n..] {
                for j in 0..3 {
                    let lo = members.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min);
                    let hi = members.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(row[j] >= lo - 1e-12 && row[j] <= hi + 1e-12);
                }
            }
        }
    }
}
