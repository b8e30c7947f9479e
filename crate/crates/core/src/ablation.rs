//! The resolution × weight × loss grid over distillation settings.

use std::fmt::Write as _;

use crate::config::{Phase, Resolution, TrainConfig};
use crate::dataset::Sample;
use crate::distill::FaLossKind;
use crate::error::Result;
use crate::teacher::TeacherNet;
use crate::trainer::{evaluate_student, train_student};

pub const RESOLUTIONS: [Resolution; 2] = [Resolution::Hr, Resolution::Lr];
pub const WEIGHTS: [f64; 3] = [0.25, 0.5, 0.75];
pub const KINDS: [FaLossKind; 3] = [FaLossKind::L2, FaLossKind::L1, FaLossKind::Kl];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub resolution: Resolution,
    pub w_fa: f64,
    pub kind: FaLossKind,
}

impl Cell {
    /// The setting used when nothing else is asked for.
    pub const DEFAULT: Cell = Cell {
        resolution: Resolution::Hr,
        w_fa: 0.25,
        kind: FaLossKind::L2,
    };

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.phase = Phase::Distill;
        cfg.resolution = self.resolution;
        cfg.fa.w_fa = self.w_fa;
        cfg.fa.kind = self.kind;
        cfg
    }

    pub fn label(&self) -> String {
        format!("{}/{:.2}/{}", self.resolution, self.w_fa, self.kind)
    }
}

/// All 18 cells, resolution-major.
pub fn grid() -> Vec<Cell> {
    let mut cells = Vec::with_capacity(18);
    for resolution in RESOLUTIONS {
        for w_fa in WEIGHTS {
            for kind in KINDS {
                cells.push(Cell { resolution, w_fa, kind });
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub cell: Cell,
    pub config_hash: String,
    /// Held-out `(psnr, ssim)`, or the error that stopped the cell.
    pub outcome: std::result::Result<(f64, f64), String>,
}

/// Trains and evaluates one student per cell. A failing cell is recorded
/// and the grid carries on.
pub fn run(
    base: &TrainConfig,
    cells: &[Cell],
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    teacher: &TeacherNet,
    mut on_row: impl FnMut(&Row),
) -> Vec<Row> {
    cells
        .iter()
        .map(|cell| {
            let cfg = cell.apply(base);
            let outcome = run_cell(&cfg, train, val, test, teacher).map_err(|e| e.to_string());
            let row = Row {
                cell: *cell,
                config_hash: cfg.hash(),
                outcome,
            };
            on_row(&row);
            row
        })
        .collect()
}

fn run_cell(cfg: &TrainConfig, train: &[Sample], val: &[Sample], test: &[Sample], teacher: &TeacherNet) -> Result<(f64, f64)> {
    let trained = train_student(cfg, train, val, Some(teacher))?;
    let (_, q) = evaluate_student(&trained.net, test)?;
    Ok((q.psnr_db, q.ssim))
}

pub fn csv(rows: &[Row]) -> String {
    let mut out = String::from("resolution,w_fa,loss,config_hash,psnr,ssim,error\n");
    for r in rows {
        let (p, s, e) = match &r.outcome {
            Ok((p, s)) => (format!("{p:.6}"), format!("{s:.6}"), String::new()),
            Err(e) => (String::new(), String::new(), e.replace([',', '\n'], ";")),
        };
        let _ = writeln!(out, "{},{:.2},{},{},{p},{s},{e}", r.cell.resolution, r.cell.w_fa, r.cell.kind, r.config_hash);
    }
    out
}

pub fn markdown(rows: &[Row]) -> String {
    let mut out = String::from("| Resolution | w_FA | Loss | PSNR | SSIM | Config |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let (p, s) = match &r.outcome {
            Ok((p, s)) => (format!("{p:.4}"), format!("{s:.4}")),
            Err(e) => (format!("failed: {e}"), String::new()),
        };
        let _ = writeln!(
            out,
            "| {} | {:.2} | {} | {p} | {s} | `{}` |",
            r.cell.resolution.to_string().to_uppercase(),
            r.cell.w_fa,
            r.cell.kind.to_string().to_uppercase(),
            r.config_hash
        );
    }
    out
}
