//! The five-row component ablation grid (baseline, +DA, +ADAM, +GCN, full),
//! each row trained from scratch over several seeds and evaluated on a
//! held-out set.

use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::train::{train, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum AblateError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Toggle combination of one grid row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RowSpec {
    pub name: &'static str,
    pub use_augment: bool,
    pub use_adam: bool,
    pub use_gcn: bool,
}

/// Grid rows in presentation order: baseline, each single component, full.
pub const ROWS: [RowSpec; 5] = [
    RowSpec { name: "baseline", use_augment: false, use_adam: false, use_gcn: false },
    RowSpec { name: "+da", use_augment: true, use_adam: false, use_gcn: false },
    RowSpec { name: "+adam", use_augment: false, use_adam: true, use_gcn: false },
    RowSpec { name: "+gcn", use_augment: false, use_adam: false, use_gcn: true },
    RowSpec { name: "full", use_augment: true, use_adam: true, use_gcn: true },
];

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub spec: RowSpec,
    pub per_seed: Vec<SeedResult>,
    /// Seed means.
    pub pck_mean: f64,
    pub pck_visible: f64,
    pub pck_occluded: f64,
    pub mean_px_error: f64,
}

/// Train and evaluate every row over every seed. Progress lines go through
/// `progress` so callers can surface them.
pub fn run_ablation(
    train_ds: &Dataset,
    val_ds: &Dataset,
    base: &RunConfig,
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationRow>, AblateError> {
    let mut run = base.clone();
    if let Some(epochs) = base.ablate.epochs {
        run.train.epochs = epochs;
    }
    let seeds = base.ablate.seeds.clone();

    let mut rows = Vec::with_capacity(ROWS.len());
    for spec in ROWS {
        run.train.use_augment = spec.use_augment;
        run.train.use_adam = spec.use_adam;
        run.train.use_gcn = spec.use_gcn;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in &seeds {
            progress(&format!(
                "[ablate] row {:<9} seed {seed}: training {} epochs on {} samples",
                spec.name,
                run.train.epochs,
                train_ds.len()
            ));
            let outcome = train(train_ds, &run, seed)?;
            let report = evaluate(val_ds, &outcome.params, &run)?;
            progress(&format!(
                "[ablate] row {:<9} seed {seed}: PCK {:.4} (vis {:.4}, occ {:.4})",
                spec.name, report.pck_mean, report.pck_visible, report.pck_occluded
            ));
            per_seed.push(SeedResult { seed, report });
        }
        let n = per_seed.len() as f64;
        let mean = |f: &dyn Fn(&EvalReport) -> f64| {
            per_seed.iter().map(|s| f(&s.report)).sum::<f64>() / n
        };
        rows.push(AblationRow {
            spec,
            pck_mean: mean(&|r| r.pck_mean),
            pck_visible: mean(&|r| r.pck_visible),
            pck_occluded: mean(&|r| r.pck_occluded),
            mean_px_error: mean(&|r| r.mean_px_error),
            per_seed,
        });
    }
    Ok(rows)
}

/// Markdown table over the grid, rows in [`ROWS`] order.
pub fn format_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str("| configuration | DA | ADAM | GCN | PCK@0.2 | visible | occluded | px err |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let mark = |b: bool| if b { "x" } else { " " };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:.4} | {:.2} |\n",
            r.spec.name,
            mark(r.spec.use_augment),
            mark(r.spec.use_adam),
            mark(r.spec.use_gcn),
            r.pck_mean,
            r.pck_visible,
            r.pck_occluded,
            r.mean_px_error
        ));
    }
    out
}

pub fn format_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("configuration,da,adam,gcn,seed,pck_mean,pck_visible,pck_occluded,mean_px_error\n");
    for r in rows {
        for s in &r.per_seed {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.4}\n",
                r.spec.name,
                r.spec.use_augment,
                r.spec.use_adam,
                r.spec.use_gcn,
                s.seed,
                s.report.pck_mean,
                s.report.pck_visible,
                s.report.pck_occluded,
                s.report.mean_px_error
            ));
        }
        out.push_str(&format!(
            "{},{},{},{},mean,{:.6},{:.6},{:.6},{:.4}\n",
            r.spec.name,
            r.spec.use_augment,
            r.spec.use_adam,
            r.spec.use_gcn,
            r.pck_mean,
            r.pck_visible,
            r.pck_occluded,
            r.mean_px_error
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_ordered_baseline_to_full() {
        assert_eq!(ROWS.len(), 5);
        assert_eq!(ROWS[0].name, "baseline");
        assert!(!ROWS[0].use_augment && !ROWS[0].use_adam && !ROWS[0].use_gcn);
        assert_eq!(ROWS[4].name, "full");
        assert!(ROWS[4].use_augment && ROWS[4].use_adam && ROWS[4].use_gcn);
        // the three middle rows enable exactly one component each
        for r in &ROWS[1..4] {
            let on = [r.use_augment, r.use_adam, r.use_gcn]
                .iter()
                .filter(|b| **b)
                .count();
            assert_eq!(on, 1, "{}", r.name);
        }
    }

    #[test]
    fn markdown_has_five_rows() {
        let rows: Vec<AblationRow> = ROWS
            .iter()
            .map(|spec| AblationRow {
                spec: *spec,
                per_seed: Vec::new(),
                pck_mean: 0.5,
                pck_visible: 0.5,
                pck_occluded: 0.5,
                mean_px_error: 1.0,
            })
            .collect();
        let md = format_markdown(&rows);
        assert_eq!(md.lines().count(), 7); // header + divider + 5 rows
    }
}
