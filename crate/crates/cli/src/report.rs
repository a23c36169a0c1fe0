//! Plain-text tables and plot-ready CSV.

use std::fmt::Write as _;

use fineprune::eval::EvalReport;
use fineprune::pruning::HeadMap;

use crate::run::{DebiasOnlyReport, FinepruneReport, SweepReport};

pub fn loss_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, loss) in curve.iter().enumerate() {
        writeln!(out, "{},{loss:.8}", i + 1).unwrap();
    }
    out
}

pub fn densities_csv(densities: &[f64]) -> String {
    let mut out = String::from("layer,density\n");
    for (layer, d) in densities.iter().enumerate() {
        writeln!(out, "{layer},{d:.6}").unwrap();
    }
    out
}

/// `1` marks a pruned head.
pub fn heatmap_csv(heads: &HeadMap) -> String {
    let mut out = String::from("layer,head,pruned\n");
    for (layer, row) in heads.pruned.iter().enumerate() {
        for (head, &p) in row.iter().enumerate() {
            writeln!(out, "{layer},{head},{}", u8::from(p)).unwrap();
        }
    }
    out
}

pub fn eval_table(report: &EvalReport) -> String {
    let mut out = String::new();
    for (name, d) in &report.seat {
        writeln!(out, "  seat {name:<12} {d:>8.4}").unwrap();
    }
    writeln!(out, "  seat mean |d|     {:>8.4}", report.seat_mean_abs).unwrap();
    writeln!(out, "  stereotype score  {:>8.2}", report.stereotype_score).unwrap();
    writeln!(out, "  probe accuracy    {:>8.4}", report.probe_accuracy).unwrap();
    if let Some(d) = &report.layer_densities {
        let cells: Vec<String> = d.iter().map(|v| format!("{v:.3}")).collect();
        writeln!(out, "  layer densities   {}", cells.join(" ")).unwrap();
    }
    if let Some(h) = &report.pruned_heads {
        out.push_str(&heatmap_text(h));
    }
    out
}

/// One line per layer, `#` for a surviving head and `.` for a pruned one.
pub fn heatmap_text(heads: &HeadMap) -> String {
    let mut out = format!("  pruned heads      {}\n", heads.count);
    for (layer, row) in heads.pruned.iter().enumerate() {
        let cells: String = row.iter().map(|&p| if p { '.' } else { '#' }).collect();
        writeln!(out, "    layer {layer}  {cells}").unwrap();
    }
    out
}

fn comparison(out: &mut String, before_label: &str, before: &EvalReport, after_label: &str, after: &EvalReport) {
    writeln!(out, "  {:<18} {:>10} {:>10}", "", before_label, after_label).unwrap();
    for ((name, a), (_, b)) in before.seat.iter().zip(&after.seat) {
        writeln!(out, "  {:<18} {a:>10.4} {b:>10.4}", format!("seat {name}")).unwrap();
    }
    let rows = [
        ("seat mean |d|", before.seat_mean_abs, after.seat_mean_abs),
        ("stereotype score", before.stereotype_score, after.stereotype_score),
        ("probe accuracy", before.probe_accuracy, after.probe_accuracy),
    ];
    for (name, a, b) in rows {
        writeln!(out, "  {name:<18} {a:>10.4} {b:>10.4}").unwrap();
    }
}

pub fn fineprune_table(report: &FinepruneReport) -> String {
    let mut out = format!(
        "{} / {}  ({} steps, tau {}, frozen weights: {})\n",
        report.geometry, report.mode, report.steps, report.tau_final, report.frozen_weights
    );
    comparison(&mut out, "original", &report.original, "pruned", &report.pruned);
    let cells: Vec<String> = report.layer_densities.iter().map(|v| format!("{v:.3}")).collect();
    writeln!(out, "  layer densities    {}", cells.join(" ")).unwrap();
    writeln!(out, "  mean density       {:.4}", report.mean_density).unwrap();
    out.push_str(&heatmap_text(&report.pruned_heads));
    out
}

pub fn debias_table(report: &DebiasOnlyReport) -> String {
    let mut out = format!("debias-only / {}  ({} steps)\n", report.mode, report.steps);
    comparison(&mut out, "original", &report.original, "debiased", &report.debiased);
    out
}

pub fn sweep_table(report: &SweepReport) -> String {
    let mut out = format!(
        "{:<28} {:>6} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7}\n",
        "run", "#P", "seat1", "seat2", "seat3", "SS", "probe", "density"
    );
    let b = &report.baseline;
    writeln!(
        out,
        "{:<28} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.2} {:>7.3} {:>7.3}",
        b.run_id, "-", b.seat_effects[0], b.seat_effects[1], b.seat_effects[2], b.stereotype_score, b.probe_accuracy, b.mean_density
    )
    .unwrap();
    for r in &report.rows {
        let p = &r.point;
        writeln!(
            out,
            "{:<28} {:>6} {:>8.3} {:>8.3} {:>8.3} {:>8.2} {:>7.3} {:>7.3}",
            r.run_id,
            r.pruned_heads,
            p.seat_effects[0],
            p.seat_effects[1],
            p.seat_effects[2],
            p.stereotype_score,
            p.probe_accuracy,
            p.mean_density
        )
        .unwrap();
    }
    match report.spearman {
        Some(rho) => writeln!(out, "spearman(probe accuracy, |SS - 50|) = {rho:.4}").unwrap(),
        None => writeln!(out, "spearman(probe accuracy, |SS - 50|) undefined").unwrap(),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shapes() {
        assert_eq!(densities_csv(&[1.0, 0.5]), "layer,density\n0,1.000000\n1,0.500000\n");
        let heads = HeadMap {
            count: 1,
            pruned: vec![vec![false, true]],
        };
        assert_eq!(heatmap_csv(&heads), "layer,head,pruned\n0,0,0\n0,1,1\n");
        assert_eq!(loss_csv(&[2.0]), "epoch,loss\n1,2.00000000\n");
        assert!(heatmap_text(&heads).contains("layer 0  #."));
    }
}
