use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embeddings::EmbeddingSet;
use super::pairs::{make_pairs, score_pairs};
use super::roc::roc_auc;
use crate::error::{Error, Result};
use crate::patch::parse_label;

/// AUC over repeated impostor resamplings.
#[derive(Clone, Debug, PartialEq)]
pub struct RepeatSummary {
    pub aucs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single repeat.
    pub std: f64,
}

impl RepeatSummary {
    pub fn from_aucs(aucs: Vec<f64>) -> Result<Self> {
        if aucs.is_empty() {
            return Err(Error::Config("eval.repeats must be at least 1".into()));
        }
        let n = aucs.len() as f64;
        let mean = aucs.iter().sum::<f64>() / n;
        let std = if aucs.len() < 2 {
            0.0
        } else {
            (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(RepeatSummary { aucs, mean, std })
    }
}

impl fmt::Display for RepeatSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Pairs and scores `set` once per seed `base_seed + r`. Genuine pairs are
/// the same every time; only the impostor sample changes.
pub fn repeat_eval(
    set: &EmbeddingSet,
    repeats: usize,
    base_seed: u64,
    impostor_ratio: f64,
) -> Result<RepeatSummary> {
    if repeats == 0 {
        return Err(Error::Config("eval.repeats must be at least 1".into()));
    }
    let aucs = (0..repeats as u64)
        .into_par_iter()
        .map(|r| {
            let pairs = make_pairs(set, impostor_ratio, base_seed.wrapping_add(r))?;
            let scored = score_pairs(set, &pairs);
            Ok(roc_auc(&scored.genuine, &scored.impostor)?.auc)
        })
        .collect::<Result<Vec<f64>>>()?;
    RepeatSummary::from_aucs(aucs)
}

/// Relative AUC change of setting A over setting B, in percent.
pub fn percentage_variation(auc_a: f64, auc_b: f64) -> Result<f64> {
    if auc_b == 0.0 || !auc_b.is_finite() || !auc_a.is_finite() {
        return Err(Error::Division(
            "percentage variation needs a finite, nonzero AUC(B)",
        ));
    }
    Ok((auc_a - auc_b) / auc_b * 100.0)
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model_label: String,
    pub dataset: String,
    pub patch: usize,
    pub stride: usize,
    pub mean_auc: f64,
    pub std_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PvReport {
    pub setting_a: String,
    pub setting_b: String,
    pub auc_a: f64,
    pub auc_b: f64,
    pub pv_percent: f64,
}

impl PvReport {
    pub fn new(a: &EvalRow, b: &EvalRow) -> Result<Self> {
        Ok(PvReport {
            setting_a: setting_label(a),
            setting_b: setting_label(b),
            auc_a: a.mean_auc,
            auc_b: b.mean_auc,
            pv_percent: percentage_variation(a.mean_auc, b.mean_auc)?,
        })
    }
}

/// `model_label@dataset`.
pub fn setting_label(row: &EvalRow) -> String {
    format!("{}@{}", row.model_label, row.dataset)
}

/// The model label without its `_p{P}_s{S}` suffix.
pub fn model_family(label: &str) -> &str {
    split_label(label).map_or(label, |(family, _)| family)
}

fn split_label(label: &str) -> Option<(&str, (usize, usize))> {
    let (head, _) = label.rsplit_once('_')?;
    let (family, _) = head.rsplit_once('_')?;
    let grid = parse_label(&label[family.len() + 1..]).ok()?;
    (!family.is_empty()).then_some((family, grid))
}

/// PV of every `S = P/2` row against the `S = P` row of the same model
/// family, dataset and patch size, in input order of the overlapping rows.
pub fn overlap_comparisons(rows: &[EvalRow]) -> Result<Vec<PvReport>> {
    let mut baseline: BTreeMap<(&str, &str, usize), &EvalRow> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.stride == r.patch) {
        baseline.insert((model_family(&r.model_label), &r.dataset, r.patch), r);
    }
    rows.iter()
        .filter(|r| r.patch % 2 == 0 && r.stride == r.patch / 2)
        .filter_map(|a| {
            baseline
                .get(&(model_family(&a.model_label), a.dataset.as_str(), a.patch))
                .map(|b| PvReport::new(a, b))
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(Path::new("<csv>"), e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Malformed {
        kind: "csv",
        reason: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn from_csv<T: for<'de> Deserialize<'de>>(text: &str, origin: &Path) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(origin, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_csv(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::embeddings::Embedding;

    fn row(label: &str, dataset: &str, auc: f64) -> EvalRow {
        let (_, (patch, stride)) = split_label(label).unwrap();
        EvalRow {
            model_label: label.into(),
            dataset: dataset.into(),
            patch,
            stride,
            mean_auc: auc,
            std_auc: 0.0,
        }
    }

    #[test]
    fn pv_values() {
        let pv = percentage_variation(0.6966, 0.6330).unwrap();
        assert!((pv - 10.047393364928916).abs() < 1e-9);
        let pv = percentage_variation(0.9834, 0.9732).unwrap();
        assert!((pv - 1.0480887792848).abs() < 1e-9);
        assert_eq!(percentage_variation(0.8, 0.8).unwrap(), 0.0);
        assert!(matches!(
            percentage_variation(0.5, 0.0),
            Err(Error::Division(_))
        ));
    }

    #[test]
    fn pv_sign_follows_auc_order() {
        for (a, b) in [(0.9, 0.8), (0.8, 0.9), (0.51, 0.5), (0.5, 0.5)] {
            let pv = percentage_variation(a, b).unwrap();
            assert_eq!(pv > 0.0, a > b);
        }
    }

    #[test]
    fn summary_statistics() {
        let one = RepeatSummary::from_aucs(vec![0.9]).unwrap();
        assert_eq!(one.std, 0.0);
        assert_eq!(one.to_string(), "0.9000 ± 0.0000");
        let s = RepeatSummary::from_aucs(vec![0.9, 0.92, 0.94]).unwrap();
        assert!((s.mean - 0.92).abs() < 1e-15);
        assert!((s.std - 0.02).abs() < 1e-15);
        assert_eq!(s.to_string(), "0.9200 ± 0.0200");
        assert!(RepeatSummary::from_aucs(vec![]).is_err());
    }

    fn small_set() -> EmbeddingSet {
        let entries = (0..12)
            .map(|i| {
                let a = (i / 3) as f64 + 0.05 * (i % 3) as f64;
                Embedding {
                    identity_key: format!("k{}", i / 3),
                    image_id: i.to_string(),
                    vector: vec![a.cos(), a.sin()],
                }
            })
            .collect();
        EmbeddingSet::new(entries).unwrap()
    }

    #[test]
    fn exhaustive_pairing_has_no_spread() {
        let s = repeat_eval(&small_set(), 4, 0, 1e9).unwrap();
        assert_eq!(s.aucs.len(), 4);
        assert!(s.aucs.iter().all(|&a| a == s.aucs[0]));
        assert_eq!(s.std, 0.0);
        let sampled = repeat_eval(&small_set(), 5, 0, 1.0).unwrap();
        assert_eq!(sampled, repeat_eval(&small_set(), 5, 0, 1.0).unwrap());
        assert!(repeat_eval(&small_set(), 0, 0, 1.0).is_err());
    }

    #[test]
    fn family_strips_grid_suffix() {
        assert_eq!(model_family("ViT_T_p16_s8"), "ViT_T");
        assert_eq!(model_family("ViT_C_p8_s4"), "ViT_C");
        assert_eq!(model_family("plain"), "plain");
        assert_eq!(model_family("a_b"), "a_b");
    }

    #[test]
    fn comparisons_pair_matching_rows() {
        let rows = vec![
            row("ViT_T_p16_s8", "X", 0.9),
            row("ViT_T_p16_s16", "X", 0.8),
            row("ViT_T_p16_s8", "Y", 0.7),
            row("ViT_S_p16_s16", "Y", 0.7),
        ];
        let pv = overlap_comparisons(&rows).unwrap();
        assert_eq!(pv.len(), 1);
        assert_eq!(pv[0].setting_a, "ViT_T_p16_s8@X");
        assert_eq!(pv[0].setting_b, "ViT_T_p16_s16@X");
        assert!((pv[0].pv_percent - 12.5).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("ViT_T_p28_s14", "AWE", 0.9834)];
        let text = to_csv(&rows).unwrap();
        assert!(text.starts_with("model_label,dataset,patch,stride,mean_auc,std_auc\n"));
        let back: Vec<EvalRow> = from_csv(&text, Path::new("mem")).unwrap();
        assert_eq!(back, rows);
        assert!(from_csv::<EvalRow>("model_label\nx\n", Path::new("bad.csv")).is_err());
    }
}
