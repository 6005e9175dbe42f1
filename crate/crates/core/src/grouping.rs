//! Variate grouping: absolute Pearson correlation and complete-linkage
//! agglomeration under an angle threshold.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{SeriesFrame, Split};
use crate::{Error, Result};

/// The grouping thresholds searched by default, largest angle first.
pub const DEFAULT_ALPHA_GRID: [f64; 4] = [PI / 2.0, PI / 3.0, PI / 4.0, PI / 6.0];

/// `|PCC|` between every pair of variates.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub r_abs: Array2<f64>,
    /// Variates with zero variance on the rows used; they correlate with nothing.
    pub degenerate: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(r_abs: Array2<f64>) -> Result<Self> {
        let (n, m) = r_abs.dim();
        if n != m {
            return Err(Error::shape(format!("similarity matrix is {n}x{m}")));
        }
        Ok(SimilarityMatrix {
            r_abs,
            degenerate: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.r_abs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.r_abs.is_empty()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        1.0 - self.r_abs[[a, b]]
    }
}

/// Absolute correlation of the train rows of `frame`.
pub fn correlation_matrix(frame: &SeriesFrame) -> SimilarityMatrix {
    let sim = abs_correlation(frame.rows(Split::Train));
    for &v in &sim.degenerate {
        log::warn!(
            "{}: variate '{}' is constant on the train split; it will form its own group",
            frame.name,
            frame.variate_names[v]
        );
    }
    sim
}

/// Absolute correlation between the columns of `x` (rows are observations).
pub fn abs_correlation(x: ArrayView2<'_, f64>) -> SimilarityMatrix {
    let k = x.ncols();
    let n = x.nrows().max(1) as f64;
    let mut centered = x.to_owned();
    for mut col in centered.axis_iter_mut(Axis(1)) {
        let m = col.sum() / n;
        col.mapv_inplace(|v| v - m);
    }
    let norms: Vec<f64> = centered
        .axis_iter(Axis(1))
        .map(|c| c.dot(&c).sqrt())
        .collect();
    let degenerate: Vec<usize> = (0..k).filter(|&v| norms[v] == 0.0).collect();
    let gram = centered.t().dot(&centered);
    let mut r_abs = Array2::zeros((k, k));
    for a in 0..k {
        r_abs[[a, a]] = 1.0;
        for b in (a + 1)..k {
            let denom = norms[a] * norms[b];
            let r = if denom > 0.0 {
                (gram[[a, b]] / denom).abs().min(1.0)
            } else {
                0.0
            };
            r_abs[[a, b]] = r;
            r_abs[[b, a]] = r;
        }
    }
    SimilarityMatrix { r_abs, degenerate }
}

/// Cut height for an angle threshold: `1 - cos(alpha_bar)`.
pub fn cut_distance(alpha_bar: f64) -> f64 {
    1.0 - alpha_bar.cos()
}

/// One agglomeration step. `a` and `b` use the dendrogram labelling: leaves
/// are `0..k`, the cluster created by merge `i` is `k + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// A partition of the variates into clusters, sorted by smallest member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariateGrouping {
    pub clusters: Vec<Vec<usize>>,
    pub alpha_bar: f64,
    pub d_alpha: f64,
    #[serde(default)]
    pub merges: Vec<Merge>,
}

impl VariateGrouping {
    /// Every variate in one cluster.
    pub fn single(k: usize) -> Self {
        VariateGrouping {
            clusters: vec![(0..k).collect()],
            alpha_bar: PI / 2.0,
            d_alpha: 1.0,
            merges: Vec::new(),
        }
    }

    /// One cluster per variate.
    pub fn singletons(k: usize) -> Self {
        VariateGrouping {
            clusters: (0..k).map(|v| vec![v]).collect(),
            alpha_bar: 0.0,
            d_alpha: 0.0,
            merges: Vec::new(),
        }
    }

    pub fn from_clusters(clusters: Vec<Vec<usize>>, alpha_bar: f64) -> Result<Self> {
        let g = VariateGrouping {
            clusters,
            alpha_bar,
            d_alpha: cut_distance(alpha_bar),
            merges: Vec::new(),
        };
        g.validate(g.num_variates())?;
        Ok(g)
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn num_variates(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// Checks that the clusters partition `0..k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        let mut seen = vec![false; k];
        for c in &self.clusters {
            if c.is_empty() {
                return Err(Error::shape("empty cluster in grouping"));
            }
            for &v in c {
                if v >= k || seen[v] {
                    return Err(Error::shape(format!(
                        "variate {v} is out of range or assigned twice (k = {k})"
                    )));
                }
                seen[v] = true;
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(Error::shape(format!("variate {v} is not assigned to any cluster")));
        }
        Ok(())
    }

    /// Cluster index owning each variate.
    pub fn owners(&self) -> Vec<usize> {
        let mut owner = vec![0; self.num_variates()];
        for (c, members) in self.clusters.iter().enumerate() {
            for &v in members {
                owner[v] = c;
            }
        }
        owner
    }
}

/// Complete-linkage agglomeration on `1 - |r|`. The closest pair is merged
/// while its linkage distance is strictly below `1 - cos(alpha_bar)`; ties go
/// to the pair with the smallest member indices.
pub fn cluster(sim: &SimilarityMatrix, alpha_bar: f64) -> Result<VariateGrouping> {
    if !(0.0..=PI / 2.0 + 1e-12).contains(&alpha_bar) {
        return Err(Error::Config(format!(
            "alpha_bar must lie in [0, pi/2], got {alpha_bar}"
        )));
    }
    let k = sim.len();
    let d_alpha = cut_distance(alpha_bar);

    // Clusters are keyed by their smallest member, which never changes when
    // the larger-keyed one is folded into the smaller-keyed one.
    let mut dist = Array2::from_shape_fn((k, k), |(a, b)| sim.distance(a, b));
    let mut members: Vec<Vec<usize>> = (0..k).map(|v| vec![v]).collect();
    let mut label: Vec<usize> = (0..k).collect();
    let mut active = vec![true; k];
    let mut merges = Vec::new();

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for p in 0..k {
            if !active[p] {
                continue;
            }
            for q in (p + 1)..k {
                if !active[q] {
                    continue;
                }
                let d = dist[[p, q]];
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, p, q));
                }
            }
        }
        let Some((height, p, q)) = best else { break };
        if !(height < d_alpha) {
            break;
        }
        for o in 0..k {
            if active[o] && o != p && o != q {
                let d = dist[[p, o]].max(dist[[q, o]]);
                dist[[p, o]] = d;
                dist[[o, p]] = d;
            }
        }
        active[q] = false;
        let moved = std::mem::take(&mut members[q]);
        members[p].extend(moved);
        members[p].sort_unstable();
        merges.push(Merge {
            a: label[p],
            b: label[q],
            height,
        });
        label[p] = k + merges.len() - 1;
    }

    let clusters = (0..k)
        .filter(|&p| active[p])
        .map(|p| std::mem::take(&mut members[p]))
        .collect();
    Ok(VariateGrouping {
        clusters,
        alpha_bar,
        d_alpha,
        merges,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingReport {
    pub alpha_bar: f64,
    pub d_alpha: f64,
    pub clusters: Vec<Vec<String>>,
    /// Largest within-cluster distance, per cluster (0 for singletons).
    pub max_internal_distance: Vec<f64>,
    pub merges: Vec<Merge>,
}

pub fn grouping_report(
    grouping: &VariateGrouping,
    names: &[String],
    sim: &SimilarityMatrix,
) -> GroupingReport {
    let clusters = grouping
        .clusters
        .iter()
        .map(|c| c.iter().map(|&v| names[v].clone()).collect())
        .collect();
    let max_internal_distance = grouping
        .clusters
        .iter()
        .map(|c| {
            let mut worst = 0.0f64;
            for (i, &a) in c.iter().enumerate() {
                for &b in &c[i + 1..] {
                    worst = worst.max(sim.distance(a, b));
                }
            }
            worst
        })
        .collect();
    GroupingReport {
        alpha_bar: grouping.alpha_bar,
        d_alpha: grouping.d_alpha,
        clusters,
        max_internal_distance,
        merges: grouping.merges.clone(),
    }
}

/// Parses an angle such as `pi/6`, `π/4`, `2pi/3`, `pi`, `0` or `0.5236`.
pub fn parse_angle(text: &str) -> Result<f64> {
    let t = text.trim().to_ascii_lowercase().replace('π', "pi");
    let bad = || Error::Config(format!("cannot parse angle '{text}'"));
    if let Some(idx) = t.find("pi") {
        let coef = t[..idx].trim().trim_end_matches('*').trim();
        let coef: f64 = if coef.is_empty() { 1.0 } else { coef.parse().map_err(|_| bad())? };
        let rest = t[idx + 2..].trim();
        let div: f64 = if rest.is_empty() {
            1.0
        } else {
            rest.strip_prefix('/').ok_or_else(bad)?.trim().parse().map_err(|_| bad())?
        };
        if div == 0.0 {
            return Err(bad());
        }
        Ok(coef * PI / div)
    } else {
        t.parse().map_err(|_| bad())
    }
}

/// Renders an angle as `pi/N` when it is one, else as a decimal.
pub fn format_angle(alpha: f64) -> String {
    if alpha == 0.0 {
        return "0".into();
    }
    let n = PI / alpha;
    if (n - n.round()).abs() < 1e-9 && n.round() >= 1.0 {
        if n.round() == 1.0 {
            "pi".into()
        } else {
            format!("pi/{}", n.round() as i64)
        }
    } else {
        format!("{alpha}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn pcc_reference(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    fn block_sim() -> SimilarityMatrix {
        SimilarityMatrix::new(array![
            [1.0, 0.9, 0.1, 0.1],
            [0.9, 1.0, 0.1, 0.1],
            [0.1, 0.1, 1.0, 0.9],
            [0.1, 0.1, 0.9, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn pcc_small_example() {
        let x = array![[1.0, 1.0], [2.0, 2.0], [3.0, 4.0]];
        let sim = abs_correlation(x.view());
        // 3 / sqrt(2 * 14/3) = 0.98198...
        assert!((sim.r_abs[[0, 1]] - 0.9820).abs() < 1e-4);
        assert!((sim.r_abs[[0, 1]] - pcc_reference(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0])).abs() < 1e-12);
    }

    #[test]
    fn duplicate_and_negated_variates() {
        let x = array![[1.0, 1.0, -1.0], [3.0, 3.0, -3.0], [2.0, 2.0, -2.0], [7.0, 7.0, -7.0]];
        let sim = abs_correlation(x.view());
        assert!((sim.r_abs[[0, 1]] - 1.0).abs() < 1e-12);
        assert!((sim.r_abs[[0, 2]] - 1.0).abs() < 1e-12);
        assert!(sim.r_abs.iter().all(|&r| (0.0..=1.0).contains(&r)));
    }

    #[test]
    fn constant_variate_is_uncorrelated() {
        let x = array![[1.0, 5.0], [2.0, 5.0], [4.0, 5.0]];
        let sim = abs_correlation(x.view());
        assert_eq!(sim.degenerate, vec![1]);
        assert_eq!(sim.r_abs[[0, 1]], 0.0);
        assert_eq!(sim.r_abs[[1, 1]], 1.0);
        let g = cluster(&sim, PI / 2.0).unwrap();
        assert_eq!(g.clusters, vec![vec![0], vec![1]]);
    }

    #[test]
    fn zero_threshold_gives_singletons() {
        let sim = SimilarityMatrix::new(Array2::ones((5, 5))).unwrap();
        let g = cluster(&sim, 0.0).unwrap();
        assert_eq!(g.num_clusters(), 5);
        assert!(g.merges.is_empty());
    }

    #[test]
    fn block_structure() {
        let g = cluster(&block_sim(), PI / 3.0).unwrap();
        assert!((g.d_alpha - 0.5).abs() < 1e-12);
        assert_eq!(g.clusters, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(g.merges.len(), 2);
        assert_eq!((g.merges[0].a, g.merges[0].b), (0, 1));
        assert_eq!((g.merges[1].a, g.merges[1].b), (2, 3));
        // Cross-block distance 0.9 is below the pi/2 cut of 1.0.
        let all = cluster(&block_sim(), PI / 2.0).unwrap();
        assert_eq!(all.clusters, vec![vec![0, 1, 2, 3]]);
        assert_eq!((all.merges[2].a, all.merges[2].b), (4, 5));
        assert!((all.merges[2].height - 0.9).abs() < 1e-12);
    }

    #[test]
    fn complete_not_single_linkage() {
        // 0-1 close, 1-2 close, 0-2 far: single linkage would chain all three.
        let sim = SimilarityMatrix::new(array![
            [1.0, 0.95, 0.2],
            [0.95, 1.0, 0.9],
            [0.2, 0.9, 1.0],
        ])
        .unwrap();
        let g = cluster(&sim, PI / 4.0).unwrap();
        assert_eq!(g.clusters, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn ties_prefer_smallest_indices() {
        let sim = SimilarityMatrix::new(array![
            [1.0, 0.1, 0.8, 0.1],
            [0.1, 1.0, 0.1, 0.8],
            [0.8, 0.1, 1.0, 0.1],
            [0.1, 0.8, 0.1, 1.0],
        ])
        .unwrap();
        let g = cluster(&sim, PI / 3.0).unwrap();
        assert_eq!(g.clusters, vec![vec![0, 2], vec![1, 3]]);
        assert_eq!((g.merges[0].a, g.merges[0].b), (0, 2));
    }

    #[test]
    fn out_of_range_threshold() {
        assert!(cluster(&block_sim(), -0.1).is_err());
        assert!(cluster(&block_sim(), 2.0).is_err());
    }

    #[test]
    fn report_lists_names_and_heights() {
        let sim = block_sim();
        let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let g = cluster(&sim, PI / 2.0).unwrap();
        let r = grouping_report(&g, &names, &sim);
        assert_eq!(r.clusters, vec![names.clone()]);
        assert!((r.max_internal_distance[0] - 0.9).abs() < 1e-12);
        let s = cluster(&sim, 0.0).unwrap();
        let r = grouping_report(&s, &names, &sim);
        assert_eq!(r.clusters.len(), 4);
        assert!(r.clusters.iter().all(|c| c.len() == 1));
        let json = serde_json::to_value(&r).unwrap();
        for key in ["alpha_bar", "d_alpha", "clusters", "merges"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn angles() {
        assert!((parse_angle("pi/6").unwrap() - PI / 6.0).abs() < 1e-15);
        assert!((parse_angle("π/4").unwrap() - PI / 4.0).abs() < 1e-15);
        assert!((parse_angle("2pi/3").unwrap() - 2.0 * PI / 3.0).abs() < 1e-15);
        assert_eq!(parse_angle("0").unwrap(), 0.0);
        assert_eq!(parse_angle("0.25").unwrap(), 0.25);
        assert!(parse_angle("pi/").is_err());
        assert!(parse_angle("tau").is_err());
        assert_eq!(format_angle(PI / 6.0), "pi/6");
        assert_eq!(format_angle(PI / 2.0), "pi/2");
        assert_eq!(format_angle(0.0), "0");
    }

    #[test]
    fn grouping_validation() {
        assert!(VariateGrouping::from_clusters(vec![vec![0, 2], vec![1]], 0.3).is_ok());
        let dup = VariateGrouping {
            clusters: vec![vec![0, 1], vec![1]],
            ..VariateGrouping::single(2)
        };
        assert!(dup.validate(2).is_err());
        assert!(VariateGrouping::single(3).validate(4).is_err());
    }
}
