//! Per-class coverage statistics of the labeled source domain.
//!
//! For every class, coverages are gathered only from images that contain
//! the class; the lower decile, mean and upper decile of those coverages
//! become the size expectations used to constrain target predictions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabelMap;
use crate::IGNORE;

pub const STATS_SCHEMA: &str = "segadapt.class-stats.v1";

/// Fraction of non-ignore pixels assigned to each class.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageVector(pub Vec<f64>);

impl CoverageVector {
    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn coverage(labels: &LabelMap, num_classes: usize) -> Result<CoverageVector> {
    labels.validate(num_classes)?;
    let mut counts = vec![0usize; num_classes];
    let mut valid = 0usize;
    for &l in &labels.labels {
        if l != IGNORE {
            counts[l as usize] += 1;
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::EmptyCoverage);
    }
    Ok(CoverageVector(
        counts.into_iter().map(|c| c as f64 / valid as f64).collect(),
    ))
}

/// Size statistics for one class. `n` counts the source images containing
/// the class; `n == 0` marks the class unusable.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassStat {
    pub alpha: f64,
    pub delta: f64,
    pub gamma: f64,
    pub n: u64,
}

impl ClassStat {
    pub fn usable(&self) -> bool {
        self.n > 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class_names: Vec<String>,
    pub classes: Vec<ClassStat>,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn get(&self, class: usize) -> &ClassStat {
        &self.classes[class]
    }
}

/// Percentile of ascending-sorted values with linear interpolation between
/// closest ranks (inclusive endpoints): position `q·(n−1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Computes α (10th percentile), δ (mean) and γ (90th percentile) of each
/// class's coverage over the source images in which it appears. Maps with no
/// valid pixel carry no coverage and are skipped.
pub fn compute_stats(
    source_labels: &[LabelMap],
    num_classes: usize,
    class_names: &[String],
) -> Result<ClassStats> {
    if source_labels.is_empty() {
        return Err(Error::Argument("no source label maps".into()));
    }
    if class_names.len() != num_classes {
        return Err(Error::Argument(format!(
            "{} class names for {num_classes} classes",
            class_names.len()
        )));
    }
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); num_classes];
    for labels in source_labels {
        let cov = match coverage(labels, num_classes) {
            Ok(c) => c,
            Err(Error::EmptyCoverage) => continue,
            Err(e) => return Err(e),
        };
        for (c, &d) in cov.0.iter().enumerate() {
            if d > 0.0 {
                per_class[c].push(d);
            }
        }
    }
    let classes = per_class
        .into_iter()
        .map(|mut v| {
            if v.is_empty() {
                return ClassStat::default();
            }
            v.sort_by(f64::total_cmp);
            // summing the sorted values keeps the mean independent of input order
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            ClassStat {
                alpha: percentile(&v, 0.1),
                delta: mean,
                gamma: percentile(&v, 0.9),
                n: v.len() as u64,
            }
        })
        .collect();
    Ok(ClassStats {
        class_names: class_names.to_vec(),
        classes,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsFile {
    schema: String,
    num_classes: usize,
    class_names: Vec<String>,
    classes: BTreeMap<String, ClassStat>,
}

pub fn stats_to_json(stats: &ClassStats) -> String {
    let file = StatsFile {
        schema: STATS_SCHEMA.to_string(),
        num_classes: stats.num_classes(),
        class_names: stats.class_names.clone(),
        classes: stats
            .classes
            .iter()
            .enumerate()
            .map(|(c, s)| (c.to_string(), *s))
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("stats serialise")
}

pub fn stats_from_json(text: &str) -> Result<ClassStats> {
    let file: StatsFile = serde_json::from_str(text).map_err(|e| Error::parse("stats file", e))?;
    if file.schema != STATS_SCHEMA {
        return Err(Error::parse(
            "stats file",
            format!("unsupported schema {:?}", file.schema),
        ));
    }
    if file.class_names.len() != file.num_classes {
        return Err(Error::parse(
            "stats file",
            format!(
                "{} class names for {} classes",
                file.class_names.len(),
                file.num_classes
            ),
        ));
    }
    let mut classes = Vec::with_capacity(file.num_classes);
    for c in 0..file.num_classes {
        let ctx = format!("stats file, class {c}");
        let s = *file
            .classes
            .get(&c.to_string())
            .ok_or_else(|| Error::parse(&ctx, "missing entry"))?;
        let in_unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !(in_unit(s.alpha) && in_unit(s.delta) && in_unit(s.gamma)) {
            return Err(Error::parse(&ctx, "alpha, delta and gamma must lie in [0,1]"));
        }
        if s.alpha > s.gamma {
            return Err(Error::parse(
                &ctx,
                format!("alpha {} exceeds gamma {}", s.alpha, s.gamma),
            ));
        }
        classes.push(s);
    }
    if file.classes.len() != file.num_classes {
        return Err(Error::parse(
            "stats file",
            format!("{} class entries for {} classes", file.classes.len(), file.num_classes),
        ));
    }
    Ok(ClassStats {
        class_names: file.class_names,
        classes,
    })
}

pub fn save_stats(stats: &ClassStats, path: &Path) -> Result<()> {
    std::fs::write(path, stats_to_json(stats)).map_err(|e| Error::io(path, e))
}

pub fn load_stats(path: &Path) -> Result<ClassStats> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    stats_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn coverage_all_one_class() {
        let m = LabelMap::filled(2, 2, 0);
        assert_eq!(coverage(&m, 3).unwrap().0, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn coverage_excludes_ignore() {
        let m = LabelMap::new(2, 2, vec![0, 0, 1, IGNORE]).unwrap();
        let d = coverage(&m, 2).unwrap();
        assert_eq!(d.0, vec![2.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn coverage_all_ignored_is_error() {
        let m = LabelMap::filled(3, 3, IGNORE);
        assert!(matches!(coverage(&m, 2), Err(Error::EmptyCoverage)));
    }

    #[test]
    fn one_point_distribution() {
        let s = compute_stats(&[LabelMap::filled(4, 4, 1)], 2, &names(2)).unwrap();
        let c = s.get(1);
        assert_eq!((c.alpha, c.delta, c.gamma, c.n), (1.0, 1.0, 1.0, 1));
        assert!(!s.get(0).usable());
    }

    #[test]
    fn three_point_distribution() {
        // class 1 coverages 0.2, 0.4, 0.6 over 5-pixel maps
        let mk = |k: usize| {
            let mut v = vec![0u8; 5];
            v[..k].fill(1);
            LabelMap::new(1, 5, v).unwrap()
        };
        let s = compute_stats(&[mk(2), mk(1), mk(3)], 2, &names(2)).unwrap();
        let c = s.get(1);
        assert!((c.delta - 0.4).abs() < 1e-15);
        // positions 0.2 and 1.8 on the sorted list [0.2, 0.4, 0.6]
        assert!((c.alpha - 0.24).abs() < 1e-15);
        assert!((c.gamma - 0.56).abs() < 1e-15);
        assert_eq!(c.n, 3);
    }

    #[test]
    fn empty_input_is_error() {
        assert!(compute_stats(&[], 2, &names(2)).is_err());
    }

    #[test]
    fn load_rejects_alpha_above_gamma() {
        let text = r#"{"schema":"segadapt.class-stats.v1","num_classes":2,"class_names":["a","b"],
            "classes":{"0":{"alpha":0.1,"delta":0.2,"gamma":0.3,"n":4},
                       "1":{"alpha":0.5,"delta":0.4,"gamma":0.3,"n":2}}}"#;
        let err = stats_from_json(text).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }

    #[test]
    fn load_hand_authored_fixture() {
        let text = r#"{"schema":"segadapt.class-stats.v1","num_classes":2,"class_names":["road","car"],
            "classes":{"0":{"alpha":0.25,"delta":0.375,"gamma":0.5,"n":10},
                       "1":{"alpha":0.0,"delta":0.0,"gamma":0.0,"n":0}}}"#;
        let s = stats_from_json(text).unwrap();
        assert_eq!(s.class_names, vec!["road", "car"]);
        assert_eq!(
            *s.get(0),
            ClassStat {
                alpha: 0.25,
                delta: 0.375,
                gamma: 0.5,
                n: 10
            }
        );
        assert!(!s.get(1).usable());
    }

    #[test]
    fn load_rejects_missing_class() {
        let text = r#"{"schema":"segadapt.class-stats.v1","num_classes":2,"class_names":["a","b"],
            "classes":{"0":{"alpha":0.1,"delta":0.2,"gamma":0.3,"n":4}}}"#;
        let err = stats_from_json(text).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }

    proptest! {
        #[test]
        fn stats_ignore_input_order_and_stay_ordered(
            maps in prop::collection::vec(prop::collection::vec(0u8..3, 6), 1..12),
            rot in 0usize..12,
        ) {
            let labels: Vec<_> = maps.iter().map(|v| LabelMap::new(2, 3, v.clone()).unwrap()).collect();
            let mut rotated = labels.clone();
            rotated.rotate_left(rot % labels.len());
            let a = compute_stats(&labels, 3, &names(3)).unwrap();
            let b = compute_stats(&rotated, 3, &names(3)).unwrap();
            prop_assert_eq!(&a, &b);
            for c in &a.classes {
                if c.usable() {
                    prop_assert!(0.0 < c.alpha && c.alpha <= c.gamma && c.gamma <= 1.0);
                    prop_assert!(0.0 < c.delta && c.delta <= 1.0);
                }
            }
        }
    }
}
