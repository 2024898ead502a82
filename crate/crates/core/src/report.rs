//! CSV, text and PGM output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cost::CostLedger;
use crate::data::scale_bin_label;
use crate::error::Result;
use crate::grid::{GridConfig, RoutingTrace};
use crate::train::{MetricsRow, NodeStats};

pub const METRICS_HEADER: &str = "step,acc,ratio,loss_task,loss_budget";
pub const STATS_HEADER: &str = "scale_bin,level,column,skip_ratio,col_open_freq,n_samples,n_active";
pub const FLOPS_HEADER: &str = "level,column,g_row_mean,g_col,cost_flops";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_line(r: &MetricsRow) -> String {
    format!("{},{},{},{},{}", r.step, r.acc, r.ratio, r.loss_task, r.loss_budget)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&metrics_line(r));
        out.push('\n');
    }
    out
}

/// Parses a metrics CSV back; values are written in shortest round-trip form.
pub fn parse_metrics_csv(text: &str) -> Option<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next()? != METRICS_HEADER {
        return None;
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 5 {
                return None;
            }
            Some(MetricsRow {
                step: f[0].parse().ok()?,
                acc: f[1].parse().ok()?,
                ratio: f[2].parse().ok()?,
                loss_task: f[3].parse().ok()?,
                loss_budget: f[4].parse().ok()?,
            })
        })
        .collect()
}

/// One row per node and stratum; `all` aggregates every sample. Empty cells
/// mark nodes without a stage or a downsample, or never active in the stratum.
pub fn stats_csv(stats: &[NodeStats]) -> String {
    let mut out = format!("{STATS_HEADER}\n");
    for s in stats {
        let bin = s.scale_bin.map(scale_bin_label).unwrap_or_else(|| "all".into());
        let _ = writeln!(
            out,
            "\"{bin}\",{},{},{},{},{},{}",
            s.level,
            s.column,
            opt(s.skip_ratio()),
            opt(s.col_open_freq()),
            s.n_samples,
            s.n_active
        );
    }
    out
}

pub fn flops_csv(ledger: &CostLedger) -> String {
    let mut out = format!("{FLOPS_HEADER}\n");
    for n in &ledger.nodes {
        let _ = writeln!(out, "{},{},{},{},{}", n.level, n.column, n.g_row_mean, n.g_col, n.cost);
    }
    out
}

/// Human-readable cost summary.
pub fn flops_table(cfg: &GridConfig, ledger: &CostLedger, fully: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "grid {} levels x {} columns, dims {:?}", cfg.levels, cfg.columns, cfg.dims);
    let _ = writeln!(out, "stem {} FLOPs, head {} FLOPs", ledger.stem, ledger.head);
    let _ = writeln!(out, "{:>5} {:>6} {:>10} {:>6} {:>12} {:>12} {:>8} {:>12}", "level", "column", "g_row", "g_col", "C_row", "C_col", "C_gates", "cost");
    for n in &ledger.nodes {
        let _ = writeln!(
            out,
            "{:>5} {:>6} {:>10.4} {:>6} {:>12} {:>12} {:>8} {:>12}",
            n.level, n.column, n.g_row_mean, n.g_col, n.c_row, n.c_col, n.c_gates, n.cost
        );
    }
    let _ = writeln!(out, "C_base  = {}", ledger.c_base);
    let _ = writeln!(out, "C_space = {} (ratio {:.4})", ledger.c_space, ledger.realized_ratio);
    let _ = writeln!(out, "fully-open C_space = {} (ratio {:.4})", fully, fully / ledger.c_base);
    out
}

/// Binary P5 image with maxval 255.
pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count must match extent");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a P5 image produced by [`pgm`].
pub fn parse_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let w: usize = fields[1].parse().ok()?;
    let h: usize = fields[2].parse().ok()?;
    let data = bytes.get(pos + 1..)?.to_vec();
    (data.len() == w * h).then_some((w, h, data))
}

/// Writes one mask per active node with a stage: 255 where the token took
/// the identity path, 0 where it was transformed. Returns the manifest text.
pub fn write_masks(dir: &Path, sample: usize, cfg: &GridConfig, trace: &RoutingTrace) -> Result<(Vec<PathBuf>, String)> {
    let mut files = Vec::new();
    let mut manifest = String::new();
    for nt in &trace.nodes {
        let name = format!("sample{sample}_L{}_C{}.pgm", nt.level, nt.column);
        match (&nt.row, nt.active) {
            (Some(rt), true) => {
                let (h, w) = cfg.level_extent(nt.level);
                let px: Vec<u8> = rt.mask.iter().map(|&kept| if kept { 0 } else { 255 }).collect();
                let path = dir.join(&name);
                std::fs::write(&path, pgm(w, h, &px))?;
                let _ = writeln!(manifest, "{name} written {w}x{h}");
                files.push(path);
            }
            (_, false) => {
                let _ = writeln!(manifest, "{name} omitted inactive");
            }
            (None, true) => {
                let _ = writeln!(manifest, "{name} omitted no-stage");
            }
        }
    }
    Ok((files, manifest))
}
