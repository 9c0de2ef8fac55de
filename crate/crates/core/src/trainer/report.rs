use std::fmt::Write;

use super::eval::{EvalReport, Metrics};
use super::train::EpochRecord;

/// Columns: stage, epoch, the five unweighted loss terms, weighted total,
/// training-set segmentation accuracy (%), validation V2V (cm), MPJPE (cm)
/// and accuracy (%) (empty without a validation set), wall time (s).
pub const EPOCH_CSV_HEADER: &str =
    "stage,epoch,loss_pose,loss_shape,loss_verts,loss_joints,loss_part,loss_total,train_seg_acc,val_v2v_cm,val_mpjpe_cm,val_seg_acc,wall_s";

/// Columns: dataset label, sample index (`mean` for the aggregate row),
/// V2V (cm), MPJPE (cm), segmentation accuracy (%).
pub const METRICS_CSV_HEADER: &str = "dataset,sample,v2v_cm,mpjpe_cm,seg_acc";

pub fn epoch_csv(log: &[EpochRecord]) -> String {
    let mut s = format!("{EPOCH_CSV_HEADER}\n");
    for r in log {
        let t = &r.terms;
        let val = r.val.map_or(",,".to_string(), |m| {
            format!("{:.6},{:.6},{:.4}", m.v2v_cm, m.mpjpe_cm, m.seg_accuracy_percent)
        });
        writeln!(
            s,
            "{},{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8},{:.4},{},{:.3}",
            r.stage, r.epoch, t.pose, t.shape, t.verts, t.joints, t.part, t.total, r.train_seg_accuracy, val, r.wall_seconds
        )
        .expect("writing to a string");
    }
    s
}

fn metrics_row(s: &mut String, label: &str, sample: &str, m: &Metrics) {
    writeln!(s, "{label},{sample},{:.6},{:.6},{:.4}", m.v2v_cm, m.mpjpe_cm, m.seg_accuracy_percent).expect("writing to a string");
}

/// Per-sample rows followed by one `mean` row per report.
pub fn metrics_csv(reports: &[(String, EvalReport)]) -> String {
    let mut s = format!("{METRICS_CSV_HEADER}\n");
    for (label, rep) in reports {
        for (i, m) in rep.samples.iter().enumerate() {
            metrics_row(&mut s, label, &i.to_string(), m);
        }
        metrics_row(&mut s, label, "mean", &rep.mean);
    }
    s
}

/// Convergence curve: `epoch,v2v_cm,mpjpe_cm,seg_acc` over both stages,
/// with epochs numbered consecutively.
pub fn plot_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,v2v_cm,mpjpe_cm,seg_acc\n");
    for (i, r) in log.iter().filter(|r| r.val.is_some()).enumerate() {
        let m = r.val.expect("filtered");
        writeln!(s, "{},{:.6},{:.6},{:.4}", i + 1, m.v2v_cm, m.mpjpe_cm, m.seg_accuracy_percent).expect("writing to a string");
    }
    s
}

/// Fixed-width table with one row per `(run, dataset)` aggregate.
pub fn summary_table(rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(3);
    let mut s = format!("{:<width$}  {:>9}  {:>10}  {:>8}\n", "run", "V2V [cm]", "MPJPE [cm]", "Acc [%]");
    for (name, m) in rows {
        writeln!(s, "{:<width$}  {:>9.3}  {:>10.3}  {:>8.2}", name, m.v2v_cm, m.mpjpe_cm, m.seg_accuracy_percent)
            .expect("writing to a string");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::LossTerms;

    #[test]
    fn csv_layouts() {
        let m = Metrics { v2v_cm: 1.5, mpjpe_cm: 2.25, seg_accuracy_percent: 90.0 };
        let rep = EvalReport { samples: vec![m, m], mean: m };
        let csv = metrics_csv(&[("test-id".into(), rep)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "test-id,mean,1.500000,2.250000,90.0000");
        let rec = EpochRecord { stage: 1, epoch: 1, terms: LossTerms::default(), train_seg_accuracy: 50.0, val: None, wall_seconds: 0.5 };
        let e = epoch_csv(&[rec.clone()]);
        assert_eq!(e.lines().nth(1).unwrap().split(',').count(), EPOCH_CSV_HEADER.split(',').count());
        assert_eq!(plot_csv(&[rec]).lines().count(), 1);
    }
}
