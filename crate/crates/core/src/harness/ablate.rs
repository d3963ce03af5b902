use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::eval::{evaluate, EvalMode};
use super::train::train;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::Protocol;

/// One row of the toggle matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub multilevel: bool,
    pub self_mask: bool,
    pub masked_attention: bool,
    pub ignore_unknown: bool,
}

impl AblationRow {
    const fn new(multilevel: bool, self_mask: bool, masked_attention: bool, ignore_unknown: bool) -> Self {
        AblationRow {
            multilevel,
            self_mask,
            masked_attention,
            ignore_unknown,
        }
    }

    /// `base` with this row's switches applied.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model = cfg.model.with_switches(self.multilevel, self.self_mask, self.masked_attention);
        cfg.loss.ignore_unknown = self.ignore_unknown;
        cfg
    }
}

/// Baseline, each block alone, all three, all three plus ignoring unknowns.
pub const ABLATION_ROWS: [AblationRow; 6] = [
    AblationRow::new(false, false, false, false),
    AblationRow::new(true, false, false, false),
    AblationRow::new(false, true, false, false),
    AblationRow::new(false, false, true, false),
    AblationRow::new(true, true, true, false),
    AblationRow::new(true, true, true, true),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub row: usize,
    pub seed: u64,
    pub mode: EvalMode,
    pub map: f64,
    /// SHA-256 of the trained checkpoint bytes.
    pub checkpoint_sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<usize>,
    pub cells: Vec<AblationCell>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn maps(&self, row: usize, mode: EvalMode) -> Vec<f64> {
        self.seeds
            .iter()
            .filter_map(|&s| self.cells.iter().find(|c| c.row == row && c.mode == mode && c.seed == s))
            .map(|c| c.map)
            .collect()
    }

    /// Mean mAP and sample standard deviation across seeds.
    pub fn summary(&self, row: usize, mode: EvalMode) -> (f64, f64) {
        mean_std(&self.maps(row, mode))
    }

    /// One line per (row, mode): switches, per-seed mAP, mean and std.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,multilevel,self_mask,masked_attention,ignore_unknown,mode");
        for seed in &self.seeds {
            let _ = write!(s, ",seed_{seed}");
        }
        s.push_str(",mean,std\n");
        for &r in &self.rows {
            let row = ABLATION_ROWS[r];
            for mode in EvalMode::BOTH {
                let b = |v: bool| v as u8;
                let _ = write!(
                    s,
                    "{},{},{},{},{},{mode}",
                    r + 1,
                    b(row.multilevel),
                    b(row.self_mask),
                    b(row.masked_attention),
                    b(row.ignore_unknown)
                );
                for m in self.maps(r, mode) {
                    let _ = write!(s, ",{m:.6}");
                }
                let (mean, std) = self.summary(r, mode);
                let _ = writeln!(s, ",{mean:.6},{std:.6}");
            }
        }
        s
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains and evaluates the selected rows (indices into [`ABLATION_ROWS`])
/// for every seed, in both evaluation modes. With an output directory each
/// run's checkpoint and log land in `row{r}_seed{s}/`.
pub fn ablate_rows(
    base: &TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    rows: &[usize],
    seeds: &[u64],
    out_dir: Option<&Path>,
    on_run: &mut dyn FnMut(usize, u64, &[AblationCell]),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= ABLATION_ROWS.len()) {
        return Err(Error::Config(format!("ablation row {} does not exist", r + 1)));
    }
    let mut table = AblationTable {
        seeds: seeds.to_vec(),
        rows: rows.to_vec(),
        cells: Vec::new(),
    };
    for &r in rows {
        for &seed in seeds {
            let mut cfg = ABLATION_ROWS[r].apply(base);
            cfg.seed = seed;
            let dir = out_dir.map(|d| d.join(format!("row{}_seed{seed}", r + 1)));
            let outcome = train(&cfg, train_data, dir.as_deref())?;
            let hash = sha256_hex(&outcome.model.to_checkpoint_bytes());
            let mut new = Vec::new();
            for mode in EvalMode::BOTH {
                let report = evaluate(&outcome.model, test_data, mode, Protocol::Wider)?;
                if let Some(d) = &dir {
                    fs::write(d.join(format!("report_{mode}.txt")), super::eval::report_text(&report, mode))?;
                }
                new.push(AblationCell {
                    row: r,
                    seed,
                    mode,
                    map: report.map,
                    checkpoint_sha256: hash.clone(),
                });
            }
            on_run(r, seed, &new);
            table.cells.extend(new);
        }
    }
    Ok(table)
}

/// The full six-row matrix.
pub fn ablate(
    base: &TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let rows: Vec<usize> = (0..ABLATION_ROWS.len()).collect();
    ablate_rows(base, train_data, test_data, &rows, seeds, out_dir, &mut |_, _, _| {})
}
