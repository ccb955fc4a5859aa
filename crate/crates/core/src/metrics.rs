//! ROC-based evaluation: AUC, McClish-standardised partial AUC, and the
//! per-ID / per-type / overall averaging used for reporting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::MachineType;
use crate::{Error, Result};

/// Default upper false-positive rate for pAUC.
pub const DEFAULT_FPR_MAX: f64 = 0.1;

fn check_labels(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("anomaly scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 {
        return Err(Error::invalid("no anomalous (positive) samples"));
    }
    if negatives == 0 {
        return Err(Error::invalid("no normal (negative) samples"));
    }
    Ok((positives, negatives))
}

/// Area under the ROC curve, computed as the Mann-Whitney statistic: the
/// fraction of (normal, anomaly) pairs in which the anomaly scores higher,
/// ties counting one half. `labels[i]` is `true` for anomalies.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of the positives, counted in half-units to stay
    // integral.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1, mid-rank (i + j + 2) / 2.
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum_x2 += tied_pos * (i + j + 2) as u128;
        i = j + 1;
    }
    let pos = pos as u128;
    let u_x2 = rank_sum_x2 - pos * (pos + 1);
    Ok(u_x2 as f64 / (2 * pos * neg as u128) as f64)
}

/// ROC curve vertices `(fpr, tpr)` from the highest threshold down; tied
/// scores produce a single diagonal step.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j + 1;
    }
    Ok(points)
}

/// Trapezoidal area under a ROC polyline restricted to `fpr <= fpr_max`.
pub fn partial_area(points: &[(f64, f64)], fpr_max: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= fpr_max {
            break;
        }
        if x1 <= fpr_max {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_cut = y0 + (y1 - y0) * (fpr_max - x0) / (x1 - x0);
            area += (fpr_max - x0) * (y0 + y_cut) / 2.0;
        }
    }
    area
}

/// Unstandardised area under the ROC curve on `[0, fpr_max]`.
pub fn pauc_raw(scores: &[f64], labels: &[bool], fpr_max: f64) -> Result<f64> {
    check_fpr_max(fpr_max)?;
    Ok(partial_area(&roc_curve(scores, labels)?, fpr_max))
}

fn check_fpr_max(fpr_max: f64) -> Result<()> {
    if !(fpr_max > 0.0 && fpr_max <= 1.0) {
        return Err(Error::invalid(format!("fpr_max {fpr_max} outside (0, 1]")));
    }
    Ok(())
}

/// Partial AUC on `[0, fpr_max]`, McClish-standardised so that chance is 0.5
/// and a perfect ranking is 1. `fpr_max = 1` returns [`auc`] exactly.
pub fn pauc(scores: &[f64], labels: &[bool], fpr_max: f64) -> Result<f64> {
    check_fpr_max(fpr_max)?;
    if fpr_max == 1.0 {
        return auc(scores, labels);
    }
    let area = pauc_raw(scores, labels, fpr_max)?;
    let min_area = fpr_max * fpr_max / 2.0;
    let max_area = fpr_max;
    Ok(0.5 * (1.0 + (area - min_area) / (max_area - min_area)))
}

/// One scored test clip, reduced to what evaluation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScore {
    pub machine_type: MachineType,
    pub machine_id: u32,
    pub score: f64,
    pub is_anomaly: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdMetrics {
    pub machine_type: MachineType,
    pub machine_id: u32,
    pub auc: f64,
    pub pauc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub machine_type: MachineType,
    pub auc: f64,
    pub pauc: f64,
}

/// Per-ID metrics, per-type means over IDs, and the overall mean of type
/// means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub fpr_max: f64,
    pub per_id: Vec<IdMetrics>,
    pub per_type: Vec<TypeMetrics>,
    pub overall_auc: f64,
    pub overall_pauc: f64,
    /// Groups that lacked either class and were left out of the means.
    pub undefined: Vec<(MachineType, u32)>,
}

pub fn evaluate(scores: &[LabeledScore], fpr_max: f64) -> Result<EvalResult> {
    check_fpr_max(fpr_max)?;
    let mut groups: BTreeMap<(MachineType, u32), (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for s in scores {
        let entry = groups.entry((s.machine_type.clone(), s.machine_id)).or_default();
        entry.0.push(s.score);
        entry.1.push(s.is_anomaly);
    }
    let mut per_id = Vec::new();
    let mut undefined = Vec::new();
    for ((machine_type, machine_id), (s, l)) in groups {
        let has_both = l.iter().any(|&x| x) && l.iter().any(|&x| !x);
        if !has_both {
            log::warn!("{machine_type} id {machine_id}: single-class test set, metrics undefined");
            undefined.push((machine_type, machine_id));
            continue;
        }
        per_id.push(IdMetrics {
            machine_type,
            machine_id,
            auc: auc(&s, &l)?,
            pauc: pauc(&s, &l, fpr_max)?,
        });
    }
    if per_id.is_empty() {
        return Err(Error::invalid("no machine ID has both normal and anomalous test clips"));
    }
    let mut by_type: BTreeMap<MachineType, Vec<&IdMetrics>> = BTreeMap::new();
    for m in &per_id {
        by_type.entry(m.machine_type.clone()).or_default().push(m);
    }
    let per_type: Vec<TypeMetrics> = by_type
        .into_iter()
        .map(|(machine_type, ids)| TypeMetrics {
            machine_type,
            auc: ids.iter().map(|m| m.auc).sum::<f64>() / ids.len() as f64,
            pauc: ids.iter().map(|m| m.pauc).sum::<f64>() / ids.len() as f64,
        })
        .collect();
    let overall_auc = per_type.iter().map(|t| t.auc).sum::<f64>() / per_type.len() as f64;
    let overall_pauc = per_type.iter().map(|t| t.pauc).sum::<f64>() / per_type.len() as f64;
    Ok(EvalResult {
        fpr_max,
        per_id,
        per_type,
        overall_auc,
        overall_pauc,
        undefined,
    })
}

/// Writes the result as a table: one row per machine type plus an
/// `Average` row, percentages with two decimals.
pub fn write_metrics_csv(path: &std::path::Path, result: &EvalResult, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["machine_type", "machine_id", "auc", "pauc", "config_hash"])?;
    for m in &result.per_id {
        w.write_record([
            m.machine_type.as_str(),
            &format!("{:02}", m.machine_id),
            &format!("{:.2}", 100.0 * m.auc),
            &format!("{:.2}", 100.0 * m.pauc),
            config_hash,
        ])?;
    }
    for t in &result.per_type {
        w.write_record([
            t.machine_type.as_str(),
            "mean",
            &format!("{:.2}", 100.0 * t.auc),
            &format!("{:.2}", 100.0 * t.pauc),
            config_hash,
        ])?;
    }
    w.write_record([
        "Average",
        "mean",
        &format!("{:.2}", 100.0 * result.overall_auc),
        &format!("{:.2}", 100.0 * result.overall_pauc),
        config_hash,
    ])?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert_eq!(
            auc(&[0.2, 0.8, 0.4, 0.6], &[false, true, true, false]).unwrap(),
            0.75
        );
        assert_eq!(auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        let err = auc(&[0.1, 0.2], &[false, false]).unwrap_err().to_string();
        assert!(err.contains("anomalous"), "{err}");
        let err = auc(&[0.1, 0.2], &[true, true]).unwrap_err().to_string();
        assert!(err.contains("normal"), "{err}");
    }

    #[test]
    fn pauc_examples() {
        let s = [0.1, 0.2, 0.3, 0.8, 0.9];
        let l = [false, false, false, true, true];
        assert_eq!(pauc(&s, &l, 0.1).unwrap(), 1.0);
        let s = [0.2, 0.8, 0.4, 0.6];
        let l = [false, true, true, false];
        assert_eq!(pauc(&s, &l, 1.0).unwrap(), auc(&s, &l).unwrap());
        assert!(pauc(&s, &l, 0.0).is_err());
        assert!(pauc(&s, &l, 1.5).is_err());
    }

    #[test]
    fn inverted_ranking_pauc_is_zero_point_five_floor_or_below() {
        let s = [0.9, 0.8, 0.1, 0.2];
        let l = [false, false, true, true];
        // Raw area is 0 on [0, 0.1]; McClish maps the minimum-chance area
        // to 0.5, so a zero area is below chance.
        let p = pauc(&s, &l, 0.1).unwrap();
        assert!(p < 0.5);
    }

    fn lab(t: &str, id: u32, score: f64, a: bool) -> LabeledScore {
        LabeledScore {
            machine_type: MachineType::new(t),
            machine_id: id,
            score,
            is_anomaly: a,
        }
    }

    #[test]
    fn evaluate_means_of_means() {
        let scores = vec![
            // Fan id 0: AUC 1.0
            lab("fan", 0, 0.1, false),
            lab("fan", 0, 0.9, true),
            // Pump id 0: AUC 0.75 ; id 2: AUC 0.25 -> type mean 0.5
            lab("pump", 0, 0.2, false),
            lab("pump", 0, 0.8, true),
            lab("pump", 0, 0.4, true),
            lab("pump", 0, 0.6, false),
            lab("pump", 2, 0.8, false),
            lab("pump", 2, 0.2, true),
            lab("pump", 2, 0.6, true),
            lab("pump", 2, 0.4, false),
            // Valve id 0: normal only -> undefined
            lab("valve", 0, 0.3, false),
        ];
        let r = evaluate(&scores, 0.1).unwrap();
        assert_eq!(r.per_id.len(), 3);
        assert_eq!(r.per_type[0].auc, 1.0);
        assert_eq!(r.per_type[1].auc, 0.5);
        assert_eq!(r.overall_auc, 0.75);
        assert_eq!(r.undefined, vec![(MachineType::new("Valve"), 0)]);
    }

    #[test]
    fn one_type_one_id_mean_equals_id_metric() {
        let scores = vec![
            lab("fan", 0, 0.2, false),
            lab("fan", 0, 0.8, true),
            lab("fan", 0, 0.4, true),
            lab("fan", 0, 0.6, false),
        ];
        let r = evaluate(&scores, 0.1).unwrap();
        assert_eq!(r.per_type[0].auc, r.per_id[0].auc);
        assert_eq!(r.overall_pauc, r.per_id[0].pauc);
    }

    #[test]
    fn two_types_average() {
        let scores = vec![
            lab("fan", 0, 0.1, false),
            lab("fan", 0, 0.9, true),
            lab("fan", 0, 0.5, false),
            lab("fan", 0, 0.6, false),
            lab("fan", 0, 0.7, true),
            lab("fan", 0, 0.8, false),
            lab("pump", 0, 0.1, false),
            lab("pump", 0, 0.9, true),
        ];
        let r = evaluate(&scores, 0.1).unwrap();
        // 7 of 8 (normal, anomaly) pairs ordered correctly.
        let fan = r.per_type[0].auc;
        assert_eq!(fan, 0.875);
        assert!((r.overall_auc - (fan + 1.0) / 2.0).abs() < 1e-15);
    }
}
