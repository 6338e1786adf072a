//! Structured run reports: JSON for everything, flat CSV for the
//! per-seed result rows. The CSV is byte-reproducible for a fixed
//! resolved config and seed list; wall-clock lives only in the JSON.

use serde::Serialize;

use crate::loss::LossReport;

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub protocol: String,
    pub seed: u64,
    pub dataset: String,
    pub k_shot: usize,
    pub lambda: f64,
    pub depth: usize,
    pub switches: String,
    /// Percent. For single-accuracy rows (transfer targets, few-shot)
    /// this column carries the accuracy and novel/hm stay empty.
    pub base_acc: Option<f64>,
    pub novel_acc: Option<f64>,
    pub hm: Option<f64>,
    pub ce: f64,
    pub sr: f64,
    pub cir: f64,
    pub dir: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub k_shot: usize,
    pub lambda: f64,
    pub depth: usize,
    pub switches: String,
    pub seeds: usize,
    pub base_acc_mean: Option<f64>,
    pub base_acc_std: Option<f64>,
    pub novel_acc_mean: Option<f64>,
    pub novel_acc_std: Option<f64>,
    pub hm_mean: Option<f64>,
    pub hm_std: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossTrace {
    pub seed: u64,
    pub condition: String,
    pub epochs: Vec<LossReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub protocol: String,
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<AggregateRow>,
    pub loss_traces: Vec<LossTrace>,
    /// Held-out pretraining accuracy per seed.
    pub pretrain_accuracy: Vec<(u64, f64)>,
    pub wall_clock_secs: f64,
}

pub const CSV_HEADER: &str =
    "protocol,seed,dataset,k_shot,lambda,depth,switches,base_acc,novel_acc,hm,ce,sr,cir,dir";

fn fmt_acc(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_default()
}

impl ReportRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.protocol,
            self.seed,
            self.dataset,
            self.k_shot,
            self.lambda,
            self.depth,
            self.switches,
            fmt_acc(self.base_acc),
            fmt_acc(self.novel_acc),
            fmt_acc(self.hm),
            self.ce,
            self.sr,
            self.cir,
            self.dir,
        )
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-condition mean/std across seeds, in first-appearance order.
    pub fn compute_aggregates(rows: &[ReportRow]) -> Vec<AggregateRow> {
        let mut order: Vec<(String, usize, String, f64, usize)> = Vec::new();
        for r in rows {
            let key = (r.dataset.clone(), r.k_shot, r.switches.clone(), r.lambda, r.depth);
            if !order.contains(&key) {
                order.push(key);
            }
        }
        order
            .into_iter()
            .map(|(dataset, k_shot, switches, lambda, depth)| {
                let group: Vec<&ReportRow> = rows
                    .iter()
                    .filter(|r| {
                        r.dataset == dataset
                            && r.k_shot == k_shot
                            && r.switches == switches
                            && r.lambda == lambda
                            && r.depth == depth
                    })
                    .collect();
                let stat = |get: fn(&ReportRow) -> Option<f64>| -> (Option<f64>, Option<f64>) {
                    let vals: Vec<f64> = group.iter().filter_map(|r| get(r)).collect();
                    if vals.is_empty() {
                        (None, None)
                    } else {
                        let (m, s) = mean_std(&vals);
                        (Some(m), Some(s))
                    }
                };
                let (base_acc_mean, base_acc_std) = stat(|r| r.base_acc);
                let (novel_acc_mean, novel_acc_std) = stat(|r| r.novel_acc);
                let (hm_mean, hm_std) = stat(|r| r.hm);
                AggregateRow {
                    dataset,
                    k_shot,
                    lambda,
                    depth,
                    switches,
                    seeds: group.len(),
                    base_acc_mean,
                    base_acc_std,
                    novel_acc_mean,
                    novel_acc_std,
                    hm_mean,
                    hm_std,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, base: f64) -> ReportRow {
        ReportRow {
            protocol: "base-to-novel".into(),
            seed,
            dataset: "toy-a".into(),
            k_shot: 16,
            lambda: 12.0,
            depth: 4,
            switches: "ce".into(),
            base_acc: Some(base),
            novel_acc: Some(base - 10.0),
            hm: Some(crate::harness::harmonic_mean(base, base - 10.0).unwrap()),
            ce: 0.5,
            sr: 0.0,
            cir: 0.0,
            dir: 0.0,
        }
    }

    #[test]
    fn csv_layout() {
        let report = EvalReport {
            protocol: "base-to-novel".into(),
            config_digest: "d".into(),
            seeds: vec![1],
            rows: vec![row(1, 80.0)],
            aggregates: vec![],
            loss_traces: vec![],
            pretrain_accuracy: vec![],
            wall_clock_secs: 0.0,
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let line = lines.next().unwrap();
        assert!(line.starts_with("base-to-novel,1,toy-a,16,12,4,ce,80.0000,70.0000,"));
    }

    #[test]
    fn aggregates_mean_over_seeds() {
        let rows = vec![row(1, 80.0), row(2, 90.0)];
        let agg = EvalReport::compute_aggregates(&rows);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].seeds, 2);
        let expected = (80.0 + 90.0) / 2.0;
        assert!((agg[0].base_acc_mean.unwrap() - expected).abs() < 1e-9);
        assert!(agg[0].base_acc_std.unwrap() > 0.0);
    }
}
