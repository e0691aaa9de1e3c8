//! Regular height fields.

use std::path::Path;

use thiserror::Error;

use crate::geometry::Vec2;

#[derive(Debug, Error)]
pub enum TerrainError {
    #[error("elevation grid: {0}")]
    Invalid(String),
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Heights sampled on a regular grid. Row `r`, column `c` sits at
/// `origin + (c, r) * resolution`; the first text row is the lowest y.
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationGrid {
    pub origin: Vec2,
    pub resolution: f64,
    rows: usize,
    cols: usize,
    heights: Vec<f64>,
}

impl ElevationGrid {
    pub fn new(origin: Vec2, resolution: f64, heights: Vec<Vec<f64>>) -> Result<Self, TerrainError> {
        if !(resolution > 0.0) {
            return Err(TerrainError::Invalid(format!("resolution must be > 0, got {resolution}")));
        }
        let rows = heights.len();
        let cols = heights.first().map_or(0, Vec::len);
        if rows < 2 || cols < 2 {
            return Err(TerrainError::Invalid(format!("need at least 2x2 cells, got {rows}x{cols}")));
        }
        if let Some(r) = heights.iter().position(|r| r.len() != cols) {
            return Err(TerrainError::Invalid(format!("row {r} has {} values, expected {cols}", heights[r].len())));
        }
        Ok(Self { origin, resolution, rows, cols, heights: heights.into_iter().flatten().collect() })
    }

    /// Parses rows of whitespace-separated numbers. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>, TerrainError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(i, l)| {
                l.split_whitespace()
                    .map(|tok| {
                        tok.parse::<f64>().map_err(|_| {
                            TerrainError::Invalid(format!("line {}: bad number {tok:?}", i + 1))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn load(path: &Path, origin: Vec2, resolution: f64) -> Result<Self, TerrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TerrainError::Io { path: path.display().to_string(), source })?;
        Self::new(origin, resolution, Self::parse_matrix(&text)?)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn height(&self, row: usize, col: usize) -> f64 {
        self.heights[row * self.cols + col]
    }

    /// Bilinear interpolation; queries off the grid clamp to its border.
    pub fn elevation_at(&self, x: f64, y: f64) -> f64 {
        let fx = ((x - self.origin.x) / self.resolution).clamp(0.0, (self.cols - 1) as f64);
        let fy = ((y - self.origin.y) / self.resolution).clamp(0.0, (self.rows - 1) as f64);
        let c0 = (fx.floor() as usize).min(self.cols - 2);
        let r0 = (fy.floor() as usize).min(self.rows - 2);
        let (tx, ty) = (fx - c0 as f64, fy - r0 as f64);
        let h00 = self.height(r0, c0);
        let h01 = self.height(r0, c0 + 1);
        let h10 = self.height(r0 + 1, c0);
        let h11 = self.height(r0 + 1, c0 + 1);
        let lo = h00 * (1.0 - tx) + h01 * tx;
        let hi = h10 * (1.0 - tx) + h11 * tx;
        lo * (1.0 - ty) + hi * ty
    }
}
