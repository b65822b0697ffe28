//! Line-track quality filtering: grid-density culling and bidirectional-flow
//! consistency, over abstract endpoint/anchor data.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CullError {
    #[error("flow csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("flow csv row {row}: {message}")]
    BadRow { row: usize, message: String },
}

/// Grid partition of the image for density-based line culling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub image_width: f64,
    pub image_height: f64,
    pub cells_x: usize,
    pub cells_y: usize,
    pub max_lines_per_cell: usize,
    /// Segments shorter than this are dropped outright, pixels.
    pub min_length_px: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            image_width: 640.0,
            image_height: 480.0,
            cells_x: 8,
            cells_y: 8,
            max_lines_per_cell: 4,
            min_length_px: 20.0,
        }
    }
}

/// Per-cell density culling: cells are assigned by segment midpoint, and when
/// a cell holds more than the cap, only the longest segments are retained.
pub fn grid_cull(lines: &[(u64, [Vector2<f64>; 2])], cfg: &GridConfig) -> Vec<u64> {
    let cell_w = cfg.image_width / cfg.cells_x as f64;
    let cell_h = cfg.image_height / cfg.cells_y as f64;
    let mut cells: BTreeMap<(usize, usize), Vec<(u64, f64)>> = BTreeMap::new();
    for (id, [a, b]) in lines {
        let length = (b - a).norm();
        if length < cfg.min_length_px {
            continue;
        }
        let mid = (a + b) * 0.5;
        let cx = ((mid.x / cell_w) as usize).min(cfg.cells_x - 1);
        let cy = ((mid.y / cell_h) as usize).min(cfg.cells_y - 1);
        cells.entry((cx, cy)).or_default().push((*id, length));
    }
    let mut retained = Vec::new();
    for bucket in cells.values_mut() {
        // Longest first; ties break on the smaller id for determinism.
        bucket.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        retained.extend(bucket.iter().take(cfg.max_lines_per_cell).map(|(id, _)| *id));
    }
    retained.sort_unstable();
    retained
}

/// Bidirectional-flow record for one anchor point of a line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorFlow {
    /// Anchor position in the previous frame.
    pub position: Vector2<f64>,
    /// Forward-tracked position in the current frame.
    pub forward: Vector2<f64>,
    /// Position tracked back into the previous frame.
    pub backward: Vector2<f64>,
}

/// Bidirectional-flow report for one line (at least two anchors).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFlowReport {
    pub line_id: u64,
    pub anchors: Vec<AnchorFlow>,
}

/// Retain lines whose anchors mostly return to their origin under
/// bidirectional tracking.
pub fn flow_consistency_cull(
    reports: &[AnchorFlowReport],
    pixel_tol: f64,
    majority_fraction: f64,
) -> Vec<u64> {
    let mut retained = Vec::new();
    for report in reports {
        if report.anchors.len() < 2 {
            continue;
        }
        let consistent = report
            .anchors
            .iter()
            .filter(|a| (a.backward - a.position).norm() <= pixel_tol)
            .count();
        if consistent as f64 / report.anchors.len() as f64 >= majority_fraction {
            retained.push(report.line_id);
        }
    }
    retained
}

/// Parse anchor-flow reports from a CSV replay stream with columns
/// `line_id, anchor_idx, px, py, fx, fy, bx, by`.
pub fn parse_flow_csv<R: Read>(reader: R) -> Result<Vec<AnchorFlowReport>, CullError> {
    #[derive(Debug, Deserialize)]
    struct Row {
        line_id: u64,
        anchor_idx: usize,
        px: f64,
        py: f64,
        fx: f64,
        fy: f64,
        bx: f64,
        by: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut grouped: BTreeMap<u64, Vec<(usize, AnchorFlow)>> = BTreeMap::new();
    for (idx, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row?;
        for v in [row.px, row.py, row.fx, row.fy, row.bx, row.by] {
            if !v.is_finite() {
                return Err(CullError::BadRow { row: idx, message: "non-finite value".into() });
            }
        }
        grouped.entry(row.line_id).or_default().push((
            row.anchor_idx,
            AnchorFlow {
                position: Vector2::new(row.px, row.py),
                forward: Vector2::new(row.fx, row.fy),
                backward: Vector2::new(row.bx, row.by),
            },
        ));
    }
    Ok(grouped
        .into_iter()
        .map(|(line_id, mut anchors)| {
            anchors.sort_by_key(|(idx, _)| *idx);
            AnchorFlowReport { line_id, anchors: anchors.into_iter().map(|(_, a)| a).collect() }
        })
        .collect())
}

/// Serialize reports to the CSV replay schema (inverse of [`parse_flow_csv`]).
pub fn write_flow_csv<W: std::io::Write>(
    reports: &[AnchorFlowReport],
    writer: W,
) -> Result<(), CullError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["line_id", "anchor_idx", "px", "py", "fx", "fy", "bx", "by"])?;
    for report in reports {
        for (idx, a) in report.anchors.iter().enumerate() {
            wtr.write_record(&[
                report.line_id.to_string(),
                idx.to_string(),
                a.position.x.to_string(),
                a.position.y.to_string(),
                a.forward.x.to_string(),
                a.forward.y.to_string(),
                a.backward.x.to_string(),
                a.backward.y.to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}
