//! AUROC and cost reporting.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(pos > neg) + P(pos = neg) / 2`, with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![scores.len()],
            got: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Maximum of an anomaly map.
pub fn image_score(map: &Tensor) -> Result<f64> {
    if map.is_empty() {
        return Err(Error::UndefinedMetric("image score of an empty map"));
    }
    Ok(map.max())
}

/// AUROC of per-image maxima against image labels.
pub fn image_auroc(maps: &[Tensor], labels: &[u8]) -> Result<f64> {
    let scores = maps.iter().map(image_score).collect::<Result<Vec<_>>>()?;
    auroc(&scores, labels)
}

/// AUROC over all pixels of all images pooled together.
pub fn pixel_auroc(maps: &[Tensor], masks: &[Tensor]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![maps.len()],
            got: vec![masks.len()],
        });
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, k) in maps.iter().zip(masks) {
        if m.len() != k.len() {
            return Err(Error::ShapeMismatch {
                expected: k.shape().to_vec(),
                got: m.shape().to_vec(),
            });
        }
        scores.extend_from_slice(m.data());
        labels.extend(k.data().iter().map(|&v| u8::from(v > 0.5)));
    }
    auroc(&scores, &labels)
}

/// One detector invocation for cost accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct NfeRun {
    pub config_id: String,
    pub nfe: u64,
    pub wall_ms: f64,
}

/// Totals per configuration, in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct NfeRow {
    pub config_id: String,
    pub runs: usize,
    pub total_nfe: u64,
    pub wall_ms: f64,
}

pub fn nfe_report(runs: &[NfeRun]) -> Vec<NfeRow> {
    let mut rows: Vec<NfeRow> = Vec::new();
    for run in runs {
        match rows.iter_mut().find(|r| r.config_id == run.config_id) {
            Some(row) => {
                row.runs += 1;
                row.total_nfe += run.nfe;
                row.wall_ms += run.wall_ms;
            }
            None => rows.push(NfeRow {
                config_id: run.config_id.clone(),
                runs: 1,
                total_nfe: run.nfe,
                wall_ms: run.wall_ms,
            }),
        }
    }
    rows
}

/// A line of the results table. Missing metrics are written as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub config_id: String,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub total_nfe: u64,
    pub wall_ms: f64,
}

pub fn format_results_csv(rows: &[ResultRow]) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut out = String::from("dataset,config_id,image_auroc,pixel_auroc,total_nfe,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.0}\n",
            r.dataset,
            r.config_id,
            opt(r.image_auroc),
            opt(r.pixel_auroc),
            r.total_nfe,
            r.wall_ms
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &a) in scores.iter().enumerate() {
            for (j, &b) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if a > b {
                        num += 1.0;
                    } else if a == b {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(auroc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn pixel_examples() {
        let mask = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            pixel_auroc(std::slice::from_ref(&mask), std::slice::from_ref(&mask)).unwrap(),
            1.0
        );
        let zeros = Tensor::zeros(&[2, 2]);
        assert!(matches!(
            pixel_auroc(std::slice::from_ref(&mask), std::slice::from_ref(&zeros)),
            Err(Error::UndefinedMetric(_))
        ));

        let m1 = Tensor::new(vec![2, 2], vec![0.2, 0.9, 0.4, 0.1]).unwrap();
        let m2 = Tensor::new(vec![2, 2], vec![0.5, 0.3, 0.3, 0.7]).unwrap();
        let k2 = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let scores: Vec<f64> = m1.data().iter().chain(m2.data()).copied().collect();
        let labels: Vec<u8> = [0, 1, 0, 0, 0, 0, 1, 1].to_vec();
        let expected = brute(&scores, &labels);
        assert_eq!(pixel_auroc(&[m1, m2], &[mask, k2]).unwrap(), expected);
    }

    #[test]
    fn image_examples() {
        let lo = Tensor::full(&[2, 2], 0.1);
        let hi = Tensor::full(&[2, 2], 0.9);
        assert_eq!(image_auroc(&[lo.clone(), hi.clone()], &[0, 1]).unwrap(), 1.0);
        assert_eq!(
            image_auroc(&[lo.clone(), lo.clone(), lo.clone()], &[0, 1, 0]).unwrap(),
            0.5
        );

        let maps: Vec<Tensor> = [[0.1, 0.7], [0.3, 0.2], [0.6, 0.1], [0.0, 0.2]]
            .iter()
            .map(|v| Tensor::new(vec![1, 2], v.to_vec()).unwrap())
            .collect();
        let labels = [1, 0, 1, 0];
        // Maxima 0.7, 0.3, 0.6, 0.2: both positives beat both negatives.
        assert_eq!(
            image_auroc(&maps, &labels).unwrap(),
            brute(&[0.7, 0.3, 0.6, 0.2], &labels)
        );
        assert_eq!(
            image_score(&Tensor::new(vec![3], vec![0.0, 7.5, 1.0]).unwrap()).unwrap(),
            7.5
        );
        assert_eq!(image_score(&Tensor::zeros(&[2, 2])).unwrap(), 0.0);
    }

    #[test]
    fn nfe_table() {
        assert!(nfe_report(&[]).is_empty());
        let runs: Vec<NfeRun> = (0..10)
            .map(|_| NfeRun {
                config_id: "T5r1".into(),
                nfe: 15,
                wall_ms: 1.0,
            })
            .collect();
        let rows = nfe_report(&runs);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].total_nfe, 150);
        assert_eq!(rows[0].runs, 10);
    }

    #[test]
    fn results_csv() {
        let csv = format_results_csv(&[ResultRow {
            dataset: "toy".into(),
            config_id: "a".into(),
            image_auroc: Some(0.5),
            pixel_auroc: None,
            total_nfe: 3,
            wall_ms: 12.4,
        }]);
        assert_eq!(
            csv,
            "dataset,config_id,image_auroc,pixel_auroc,total_nfe,wall_ms\ntoy,a,0.500000,,3,12\n"
        );
    }

    proptest! {
        #[test]
        fn matches_pair_counting(data in proptest::collection::vec((0u8..6, 0u8..2), 2..60)) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 * 0.5).collect();
            let labels: Vec<u8> = data.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - brute(&scores, &labels)).abs() < 1e-12);
            let squashed: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp()).collect();
            prop_assert!((auroc(&squashed, &labels).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn negation_complements(scores in proptest::collection::vec(-1e3f64..1e3, 4..40)) {
            let labels: Vec<u8> = (0..scores.len()).map(|i| (i % 2) as u8).collect();
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
