//! AUC, McClish-standardised pAUC and the per-ID / per-type / overall
//! evaluation table, plus an ROC plot.

use geco_asd::data::MachineType;
use geco_asd::metrics::{auc, evaluate, pauc, pauc_raw, roc_curve, write_metrics_csv, LabeledScore};
use geco_asd::plot::{plot_roc, Series};

fn main() -> geco_asd::Result<()> {
    let scores = [0.2, 0.8, 0.4, 0.6];
    let labels = [false, true, true, false];
    println!("AUC {}", auc(&scores, &labels)?);
    println!("pAUC(0.1) {:.4}, raw area {:.4}", pauc(&scores, &labels, 0.1)?, pauc_raw(&scores, &labels, 0.1)?);

    let mut rows = Vec::new();
    for (t, ids) in [("Fan", 2u32), ("Slider", 1)] {
        for id in 0..ids {
            for i in 0..20 {
                let is_anomaly = i >= 10;
                // Overlapping score distributions, a different overlap per ID.
                let score = i as f64 % 10.0 + if is_anomaly { 4.0 + id as f64 } else { 0.0 };
                rows.push(LabeledScore {
                    machine_type: MachineType::new(t),
                    machine_id: id,
                    score,
                    is_anomaly,
                });
            }
        }
    }
    let result = evaluate(&rows, 0.1)?;
    for m in &result.per_id {
        println!("{} id {:02}: AUC {:.3} pAUC {:.3}", m.machine_type, m.machine_id, m.auc, m.pauc);
    }
    for m in &result.per_type {
        println!("{} mean: AUC {:.3} pAUC {:.3}", m.machine_type, m.auc, m.pauc);
    }
    println!("overall: AUC {:.3} pAUC {:.3}", result.overall_auc, result.overall_pauc);

    write_metrics_csv("metrics_example.csv".as_ref(), &result, "example")?;
    let fan: Vec<&LabeledScore> = rows.iter().filter(|r| r.machine_type.as_str() == "Fan" && r.machine_id == 0).collect();
    let s: Vec<f64> = fan.iter().map(|r| r.score).collect();
    let l: Vec<bool> = fan.iter().map(|r| r.is_anomaly).collect();
    let curve = Series {
        name: "Fan id 00".into(),
        points: roc_curve(&s, &l)?,
    };
    plot_roc("roc_example.svg".as_ref(), "ROC", &[curve])?;
    println!("wrote metrics_example.csv and roc_example.svg");
    Ok(())
}
