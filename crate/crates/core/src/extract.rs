//! Pro/con rationale extraction from a converged transport plan.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::write_atomic;
use crate::types::RationaleKind;

/// An aligned rationale pair and the plan mass between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProPair {
    pub m: usize,
    pub n: usize,
    pub mass: f64,
    pub kind_x: RationaleKind,
    pub kind_y: RationaleKind,
}

/// A rationale sentence with no aligned counterpart.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConRationale {
    pub index: usize,
    pub kind: RationaleKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub pro_pairs: Vec<ProPair>,
    pub con_x: Vec<ConRationale>,
    pub con_y: Vec<ConRationale>,
}

impl ExtractionResult {
    /// Distinct X sentences that take part in at least one pro pair.
    pub fn pro_x(&self) -> BTreeSet<usize> {
        self.pro_pairs.iter().map(|p| p.m).collect()
    }

    pub fn pro_y(&self) -> BTreeSet<usize> {
        self.pro_pairs.iter().map(|p| p.n).collect()
    }

    /// Every rationale index on the X side, pro or con.
    pub fn rationales_x(&self) -> BTreeSet<usize> {
        let mut s = self.pro_x();
        s.extend(self.con_x.iter().map(|c| c.index));
        s
    }

    pub fn rationales_y(&self) -> BTreeSet<usize> {
        let mut s = self.pro_y();
        s.extend(self.con_y.iter().map(|c| c.index));
        s
    }

    pub fn con_count(&self) -> usize {
        self.con_x.len() + self.con_y.len()
    }
}

/// Selects `(m, n)` as a pro pair when both sentences are predicted rationales and
/// `a_mn >= tau`. Predicted rationales in no pro pair become con rationales; non-rationales
/// are dropped.
pub fn extract_rationale_pairs(plan: &Array2<f64>, kinds_x: &[RationaleKind], kinds_y: &[RationaleKind], tau: f64) -> ExtractionResult {
    assert!(tau > 0.0, "tau must be positive");
    assert_eq!(plan.dim(), (kinds_x.len(), kinds_y.len()), "plan shape does not match labels");
    let mut pro_pairs = Vec::new();
    for ((m, n), &mass) in plan.indexed_iter() {
        let (kx, ky) = (kinds_x[m], kinds_y[n]);
        if kx.is_rationale() && ky.is_rationale() && mass >= tau {
            pro_pairs.push(ProPair {
                m,
                n,
                mass,
                kind_x: kx,
                kind_y: ky,
            });
        }
    }
    let mut result = ExtractionResult {
        pro_pairs,
        ..Default::default()
    };
    let (px, py) = (result.pro_x(), result.pro_y());
    result.con_x = cons(kinds_x, &px);
    result.con_y = cons(kinds_y, &py);
    result
}

fn cons(kinds: &[RationaleKind], pro: &BTreeSet<usize>) -> Vec<ConRationale> {
    kinds
        .iter()
        .enumerate()
        .filter(|(i, k)| k.is_rationale() && !pro.contains(i))
        .map(|(index, &kind)| ConRationale { index, kind })
        .collect()
}

fn matrix_csv(header: &str, values: impl Fn(usize, usize) -> String, rows: usize, cols: usize) -> String {
    let mut out = String::new();
    out.push_str(header);
    for n in 0..cols {
        write!(out, ",y{n}").expect("write to string");
    }
    out.push('\n');
    for m in 0..rows {
        write!(out, "x{m}").expect("write to string");
        for n in 0..cols {
            write!(out, ",{}", values(m, n)).expect("write to string");
        }
        out.push('\n');
    }
    out
}

/// Plan entries with six decimals, headed by sentence indices.
pub fn plan_csv(plan: &Array2<f64>) -> String {
    let (m, n) = plan.dim();
    matrix_csv("", |i, j| format!("{:.6}", plan[[i, j]]), m, n)
}

/// Binary matrix of the extracted pro pairs.
pub fn alignment_csv(result: &ExtractionResult, rows: usize, cols: usize) -> String {
    let mut mask = Array2::from_elem((rows, cols), 0u8);
    for p in &result.pro_pairs {
        mask[[p.m, p.n]] = 1;
    }
    matrix_csv("", |i, j| mask[[i, j]].to_string(), rows, cols)
}

/// Paths of the two heatmap files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub plan: PathBuf,
    pub aligned: PathBuf,
}

/// Companion path `<stem>.aligned.csv` for the thresholded matrix.
pub fn aligned_companion(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
    path.with_file_name(format!("{stem}.aligned.csv"))
}

/// Writes the plan CSV to `path` and the thresholded companion next to it.
/// `preamble` lines (already `#`-prefixed) are written first in both files.
pub fn export_alignment_heatmap(
    plan: &Array2<f64>,
    kinds_x: &[RationaleKind],
    kinds_y: &[RationaleKind],
    tau: f64,
    path: &Path,
    preamble: &str,
) -> Result<HeatmapFiles> {
    let result = extract_rationale_pairs(plan, kinds_x, kinds_y, tau);
    let (m, n) = plan.dim();
    let aligned = aligned_companion(path);
    write_atomic(path, format!("{preamble}{}", plan_csv(plan)).as_bytes())?;
    write_atomic(&aligned, format!("{preamble}{}", alignment_csv(&result, m, n)).as_bytes())?;
    Ok(HeatmapFiles {
        plan: path.to_path_buf(),
        aligned,
    })
}
