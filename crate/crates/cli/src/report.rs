//! CSV artifacts. Column orders are fixed; see docs/csv_schema.md.

use std::fmt::Write as _;
use std::path::Path;

use dynexec::trainer::{EpochRow, SelectionRow, StepRow};

pub const STEP_HEADER: &str = "stage,epoch,t,loss,lr,active,repairs";
pub const EPOCH_HEADER: &str = "stage,epoch,train_loss,train_acc,test_acc";
pub const SELECTION_HEADER: &str = "l,k,T,mu_hat,mu_bar_at_final_t,selected_final";

pub fn step_csv(rows: &[StepRow]) -> String {
    let mut s = format!("{STEP_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.stage, r.epoch, r.t, r.loss, r.lr, r.active, r.repairs
        )
        .unwrap();
    }
    s
}

pub fn epoch_csv(rows: &[EpochRow]) -> String {
    let mut s = format!("{EPOCH_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.stage, r.epoch, r.train_loss, r.train_acc, r.test_acc
        )
        .unwrap();
    }
    s
}

pub fn selection_csv(rows: &[SelectionRow]) -> String {
    let mut s = format!("{SELECTION_HEADER}\n");
    for r in rows {
        let bar = r.mu_bar.map_or_else(String::new, |v| v.to_string());
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.layer, r.index, r.pulls, r.mu_hat, bar, r.selected as u8
        )
        .unwrap();
    }
    s
}

pub fn write(path: &Path, contents: &str) -> std::io::Result<()> {
    std::fs::write(path, contents)
}
