//! RMSE / LCC / SRCC, per-track reports, the concat ablation and the
//! attention statistics dump.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConcatMode, TrainConfig};
use crate::error::{Error, Result};
use crate::model::FidoModel;
use crate::numerics::Graph;
use crate::scalar::Scalar;
use crate::training::{train, Example};

pub fn rmse(pred: &[f64], label: &[f64]) -> Result<f64> {
    if pred.len() != label.len() || pred.is_empty() {
        return Err(Error::Shape(format!("rmse over {} predictions and {} labels", pred.len(), label.len())));
    }
    let s: f64 = pred.iter().zip(label).map(|(p, l)| (p - l) * (p - l)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

/// Pearson correlation; `None` for fewer than two points, mismatched
/// lengths or a constant input.
pub fn lcc(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their rank span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn srcc(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    lcc(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub n: usize,
    pub rmse: f64,
    pub lcc: Option<f64>,
    pub srcc: Option<f64>,
}

impl MetricRow {
    pub fn compute(pred: &[f64], label: &[f64]) -> Result<Self> {
        Ok(Self {
            n: pred.len(),
            rmse: rmse(pred, label)?,
            lcc: lcc(pred, label),
            srcc: srcc(pred, label),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtterancePrediction {
    pub id: String,
    pub track: u8,
    pub pred_int: f64,
    pub label_int: f64,
    pub pred_haspi: f64,
    pub label_haspi: f64,
    pub pred_class: usize,
    pub label_class: usize,
}

pub const PREDICTIONS_CSV_HEADER: &str = "id,track,pred_int,label_int,pred_haspi,label_haspi,pred_class,label_class";

pub fn predictions_csv(rows: &[UtterancePrediction]) -> String {
    let mut s = format!("{PREDICTIONS_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.id, r.track, r.pred_int, r.label_int, r.pred_haspi, r.label_haspi, r.pred_class, r.label_class
        ));
    }
    s
}

/// Intelligibility metrics keyed by `"1"`, `"2"`, `"3"` and the pooled
/// `"all"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub manifest: String,
    pub timestamp: u64,
    pub tracks: BTreeMap<String, MetricRow>,
}

impl EvalReport {
    pub fn from_predictions(rows: &[UtterancePrediction], model: &str, manifest: &str) -> Result<Self> {
        let mut by_track: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in rows {
            for key in [r.track.to_string(), "all".to_string()] {
                let e = by_track.entry(key).or_default();
                e.0.push(r.pred_int);
                e.1.push(r.label_int);
            }
        }
        let tracks = by_track
            .into_iter()
            .map(|(k, (p, l))| Ok((k, MetricRow::compute(&p, &l)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            model: model.into(),
            manifest: manifest.into(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            tracks,
        })
    }

    pub fn pooled(&self) -> Option<&MetricRow> {
        self.tracks.get("all")
    }
}

/// Scores every example with `assess`, which returns
/// `(intelligibility, haspi, class)`.
pub fn evaluate_with<S, F>(examples: &[Example<S>], assess: F) -> Result<Vec<UtterancePrediction>>
where
    S: Scalar,
    F: Fn(&Example<S>) -> Result<(f64, f64, usize)> + Sync,
{
    examples
        .par_iter()
        .map(|e| {
            let (pi, ph, pc) = assess(e)?;
            Ok(UtterancePrediction {
                id: e.id.clone(),
                track: e.track,
                pred_int: pi,
                label_int: e.labels.intelligibility,
                pred_haspi: ph,
                label_haspi: e.labels.haspi,
                pred_class: pc,
                label_class: e.labels.class,
            })
        })
        .collect()
}

pub fn evaluate<S: Scalar>(model: &FidoModel<S>, examples: &[Example<S>]) -> Result<Vec<UtterancePrediction>> {
    evaluate_with(examples, |e| {
        let p = model.predict(&e.inputs)?;
        Ok((p.intelligibility.as_f64(), p.haspi.as_f64(), p.class()))
    })
}

/// Writes `report.json` and `predictions.csv` under `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, rows: &[UtterancePrediction]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("report.json");
    std::fs::write(&p, serde_json::to_string_pretty(report).expect("report serialises")).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("predictions.csv");
    std::fs::write(&p, predictions_csv(rows)).map_err(|e| Error::io(&p, e))
}

/// Track 3 RMSE targets for the concat comparison; desk-scale rows are a
/// format check only.
pub const ABLATION_REFERENCE: &str =
    "reference track3 rmse: temporal/medium 23.74, temporal/large 21.85, feature/large < 21.85";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub reference: String,
    pub rows: Vec<(ConcatMode, EvalReport)>,
    /// `temporal − feature` per track and metric.
    pub deltas: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    pub configs: Vec<TrainConfig>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        let keys: Vec<&String> = self.rows[0].1.tracks.keys().collect();
        let mut s = format!("# {}\nmode", self.reference);
        for k in &keys {
            s.push_str(&format!(",{k}_rmse,{k}_lcc,{k}_srcc"));
        }
        s.push('\n');
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
        for (mode, rep) in &self.rows {
            s.push_str(&mode.to_string());
            for k in &keys {
                let m = &rep.tracks[*k];
                s.push_str(&format!(",{},{},{}", fmt(Some(m.rmse)), fmt(m.lcc), fmt(m.srcc)));
            }
            s.push('\n');
        }
        s
    }
}

/// Trains the feature- and temporal-concat variants with everything else
/// shared and evaluates both on `dev` (or on `train` when `dev` is empty).
pub fn ablate_concat<S: Scalar>(cfg: &TrainConfig, train_set: &[Example<S>], dev_set: &[Example<S>]) -> Result<AblationReport> {
    let eval_on = if dev_set.is_empty() { train_set } else { dev_set };
    let mut rows = Vec::new();
    let mut configs = Vec::new();
    for mode in [ConcatMode::Feature, ConcatMode::Temporal] {
        let mut c = cfg.clone();
        c.model.concat = mode;
        if let Some(d) = &cfg.checkpoint_dir {
            c.checkpoint_dir = Some(d.join(mode.to_string()));
        }
        let out = train(&c, train_set, dev_set)?;
        let preds = evaluate(&out.best, eval_on)?;
        rows.push((mode, EvalReport::from_predictions(&preds, &format!("{mode}-concat"), "")?));
        configs.push(c);
    }
    let mut deltas = BTreeMap::new();
    for (k, f) in &rows[0].1.tracks {
        let t = &rows[1].1.tracks[k];
        let d = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| b - a);
        deltas.insert(
            k.clone(),
            BTreeMap::from([
                ("rmse".to_string(), Some(t.rmse - f.rmse)),
                ("lcc".to_string(), d(f.lcc, t.lcc)),
                ("srcc".to_string(), d(f.srcc, t.srcc)),
            ]),
        );
    }
    Ok(AblationReport {
        reference: ABLATION_REFERENCE.into(),
        rows,
        deltas,
        configs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStat {
    pub id: String,
    pub frame: usize,
    pub stage: &'static str,
    pub mean: f64,
    pub std: f64,
}

pub const ATTN_CSV_HEADER: &str = "id,frame,stage,mean,std";

/// Mean and population std across the feature axis, per row.
pub fn row_stats(rows: usize, cols: usize, data: &[f64]) -> Vec<(f64, f64)> {
    (0..rows)
        .map(|r| {
            let row = &data[r * cols..(r + 1) * cols];
            let m = row.iter().sum::<f64>() / cols as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / cols as f64;
            (m, v.sqrt())
        })
        .collect()
}

/// Per-frame statistics of the left-channel PS features before and after
/// their self-attention block.
pub fn attention_stats<S: Scalar>(model: &FidoModel<S>, examples: &[Example<S>]) -> Result<Vec<AttentionStat>> {
    let per: Vec<Vec<AttentionStat>> = examples
        .par_iter()
        .map(|e| {
            let g = Graph::new();
            let tr = model.forward(&g, &e.inputs)?;
            let mut out = Vec::new();
            for (stage, v) in [("before", tr.left.ps_in), ("after", tr.left.ps_attended)] {
                let t = g.value(v);
                let data: Vec<f64> = t.data().iter().map(|x| x.as_f64()).collect();
                for (frame, (mean, std)) in row_stats(t.rows(), t.cols(), &data).into_iter().enumerate() {
                    out.push(AttentionStat {
                        id: e.id.clone(),
                        frame,
                        stage,
                        mean,
                        std,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per.concat())
}

pub fn attention_csv(rows: &[AttentionStat]) -> String {
    let mut s = format!("{ATTN_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.id, r.frame, r.stage, r.mean, r.std));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[1.0, 5.0], &[2.0, 3.0]).unwrap(), rmse(&[5.0, 1.0], &[3.0, 2.0]).unwrap());
        assert_eq!(rmse(&[1.0, 5.0], &[2.0, 3.0]).unwrap(), rmse(&[2.0, 3.0], &[1.0, 5.0]).unwrap());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn lcc_cases() {
        let x = [1.0, 4.0, 2.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((lcc(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((lcc(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(lcc(&x, &[1.0; 4]), None);
        assert_eq!(lcc(&[1.0], &[2.0]), None);
    }

    #[test]
    fn srcc_ties_and_rank_invariance() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(srcc(&[1.0, 2.0, 2.0, 3.0], &[10.0, 20.0, 20.0, 30.0]), Some(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let fx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let gy: Vec<f64> = y.iter().map(|v| v * v * v + 1.0).collect();
        assert_eq!(srcc(&x, &y), srcc(&fx, &gy));
        assert_eq!(srcc(&[2.0; 3], &[1.0, 2.0, 3.0]), None);
    }

    #[test]
    fn report_partitions_tracks() {
        let rows: Vec<UtterancePrediction> = (0..9)
            .map(|i| UtterancePrediction {
                id: format!("u{i}"),
                track: (i % 3 + 1) as u8,
                pred_int: i as f64,
                label_int: i as f64,
                pred_haspi: 0.0,
                label_haspi: 0.0,
                pred_class: 0,
                label_class: 0,
            })
            .collect();
        let r = EvalReport::from_predictions(&rows, "oracle", "m").unwrap();
        let n: usize = ["1", "2", "3"].iter().map(|k| r.tracks[*k].n).sum();
        assert_eq!(n, r.pooled().unwrap().n);
        assert_eq!(r.pooled().unwrap().rmse, 0.0);
        assert!((r.pooled().unwrap().lcc.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.pooled().unwrap().srcc.unwrap() - 1.0).abs() < 1e-12);
        assert!(predictions_csv(&rows).starts_with(PREDICTIONS_CSV_HEADER));
    }

    #[test]
    fn row_stats_oracle() {
        let d = [0.0, 0.0, 0.0, 1.0, 2.0, 3.0];
        let s = row_stats(2, 3, &d);
        assert_eq!(s[0], (0.0, 0.0));
        assert!((s[1].0 - 2.0).abs() < 1e-12);
        assert!((s[1].1 - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
