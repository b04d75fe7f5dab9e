//! Metric BEV grid and the crop/pool operators that turn grid regions into
//! per-agent feature rows (ego, foreground agents, lane elements).

use serde::{Deserialize, Serialize};

use crate::geometry::OrientedBox;
use crate::linalg::Matrix;
use crate::scene::{rasterize_lane_mask, Scene};
use crate::{Error, Result};

/// Square metric grid over the ego frame. Rows index y, columns index x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// (x_min, x_max, y_min, y_max) in meters.
    pub extent: (f64, f64, f64, f64),
    /// Cell edge length in meters.
    pub resolution: f64,
}

impl Default for GridSpec {
    /// +-25.6 m at 0.8 m/cell: a 64x64 grid.
    fn default() -> Self {
        GridSpec { extent: (-25.6, 25.6, -25.6, 25.6), resolution: 0.8 }
    }
}

impl GridSpec {
    pub fn h(&self) -> usize {
        ((self.extent.3 - self.extent.2) / self.resolution).round() as usize
    }

    pub fn w(&self) -> usize {
        ((self.extent.1 - self.extent.0) / self.resolution).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (xmin, xmax, ymin, ymax) = self.extent;
        if !(xmax > xmin && ymax > ymin) || self.resolution <= 0.0 {
            return Err(Error::Config(format!("degenerate grid spec {self:?}")));
        }
        for (span, cells) in [(xmax - xmin, self.w()), (ymax - ymin, self.h())] {
            if cells == 0 || (cells as f64 * self.resolution - span).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "extent span {span} is not an integer number of {} m cells",
                    self.resolution
                )));
            }
        }
        Ok(())
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.extent.0 + (col as f64 + 0.5) * self.resolution,
            self.extent.2 + (row as f64 + 0.5) * self.resolution,
        )
    }

    /// Half-open column range whose cell centers may fall in `[x_lo, x_hi]`.
    pub fn col_range(&self, x_lo: f64, x_hi: f64) -> (usize, usize) {
        let lo = ((x_lo - self.extent.0) / self.resolution - 0.5).ceil().max(0.0) as usize;
        let hi = (((x_hi - self.extent.0) / self.resolution - 0.5).floor() + 1.0).max(0.0) as usize;
        (lo.min(self.w()), hi.min(self.w()))
    }

    /// Half-open row range whose cell centers may fall in `[y_lo, y_hi]`.
    pub fn row_range(&self, y_lo: f64, y_hi: f64) -> (usize, usize) {
        let lo = ((y_lo - self.extent.2) / self.resolution - 0.5).ceil().max(0.0) as usize;
        let hi = (((y_hi - self.extent.2) / self.resolution - 0.5).floor() + 1.0).max(0.0) as usize;
        (lo.min(self.h()), hi.min(self.h()))
    }

    /// Cell whose center is nearest to `(x, y)`, clamped into the grid.
    pub fn nearest_cell(&self, x: f64, y: f64) -> (usize, usize) {
        let col = ((x - self.extent.0) / self.resolution - 0.5).round();
        let row = ((y - self.extent.2) / self.resolution - 0.5).round();
        (
            (row.max(0.0) as usize).min(self.h() - 1),
            (col.max(0.0) as usize).min(self.w() - 1),
        )
    }
}

/// Dense feature grid, stored channel-major: `data[c][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub spec: GridSpec,
    chans: usize,
    data: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(spec: GridSpec, chans: usize) -> Self {
        BevGrid { spec, chans, data: vec![0.0; chans * spec.h() * spec.w()] }
    }

    pub fn from_data(spec: GridSpec, chans: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != chans * spec.h() * spec.w() {
            return Err(Error::Argument(format!(
                "grid data length {} does not match {} channels of {}x{}",
                data.len(),
                chans,
                spec.h(),
                spec.w()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("grid features must be finite".into()));
        }
        Ok(BevGrid { spec, chans, data })
    }

    pub fn chans(&self) -> usize {
        self.chans
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, ch: usize, row: usize, col: usize) -> f64 {
        self.data[(ch * self.spec.h() + row) * self.spec.w() + col]
    }

    pub fn set(&mut self, ch: usize, row: usize, col: usize, v: f64) {
        let w = self.spec.w();
        self.data[(ch * self.spec.h() + row) * w + col] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowKind {
    Ego,
    Fg,
    Lane,
}

/// Which entity a feature row belongs to; used to pair rows with prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub scene_index: usize,
    pub kind: RowKind,
    pub id: u64,
}

/// Pooled per-entity features: one row each for ego, FG agents, lane elements.
#[derive(Debug, Clone)]
pub struct AgentFeatureBatch {
    pub features: Matrix,
    pub meta: Vec<RowMeta>,
}

/// Cells (row, col) whose centers lie inside the rotated box, in row-major
/// order. May be empty for boxes that slip between cell centers.
pub fn cells_in_box(spec: &GridSpec, bev_box: &OrientedBox) -> Result<Vec<(usize, usize)>> {
    bev_box.validate()?;
    let corners = bev_box.corners();
    let x_lo = corners.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
    let x_hi = corners.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max);
    let y_lo = corners.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
    let y_hi = corners.iter().map(|c| c[1]).fold(f64::NEG_INFINITY, f64::max);
    let (c_lo, c_hi) = spec.col_range(x_lo, x_hi);
    let (r_lo, r_hi) = spec.row_range(y_lo, y_hi);
    let mut cells = Vec::new();
    for r in r_lo..r_hi {
        for c in c_lo..c_hi {
            let (cx, cy) = spec.cell_center(r, c);
            if bev_box.contains_point(cx, cy) {
                cells.push((r, c));
            }
        }
    }
    Ok(cells)
}

/// Arithmetic mean over the given cells, per channel.
pub fn pool_region(grid: &BevGrid, cells: &[(usize, usize)]) -> Result<Vec<f64>> {
    if cells.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let (h, w) = (grid.spec.h(), grid.spec.w());
    if let Some(&(r, c)) = cells.iter().find(|&&(r, c)| r >= h || c >= w) {
        return Err(Error::Argument(format!("cell ({r}, {c}) outside {h}x{w} grid")));
    }
    let inv = 1.0 / cells.len() as f64;
    let mut out = vec![0.0; grid.chans()];
    for (ch, o) in out.iter_mut().enumerate() {
        let plane = &grid.data()[ch * h * w..(ch + 1) * h * w];
        let mut s = 0.0;
        for &(r, c) in cells {
            s += plane[r * w + c];
        }
        *o = s * inv;
    }
    Ok(out)
}

/// Cells for one entity with the single-nearest-cell fallback applied, so every
/// entity always contributes a feature row.
pub fn region_cells_for_box(spec: &GridSpec, bev_box: &OrientedBox) -> Result<Vec<(usize, usize)>> {
    let cells = cells_in_box(spec, bev_box)?;
    if cells.is_empty() {
        Ok(vec![spec.nearest_cell(bev_box.cx, bev_box.cy)])
    } else {
        Ok(cells)
    }
}

fn lane_region_cells(scene: &Scene, lane: &crate::scene::LaneElement) -> Vec<(usize, usize)> {
    let spec = &scene.grid_spec;
    let w = spec.w();
    let cells: Vec<(usize, usize)> = match rasterize_lane_mask(scene, lane) {
        Ok(mask) => mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i / w, i % w))
            .collect(),
        Err(_) => Vec::new(),
    };
    if cells.is_empty() {
        // Fall back to the cell nearest the middle polyline vertex.
        let mid = lane.polyline[lane.polyline.len() / 2];
        vec![spec.nearest_cell(mid[0], mid[1])]
    } else {
        cells
    }
}

/// One entity's pooling region: the cells its feature row is averaged over.
#[derive(Debug, Clone)]
pub struct EntityRegion {
    pub kind: RowKind,
    pub id: u64,
    /// (row, col) cells, row-major; never empty thanks to the fallbacks.
    pub cells: Vec<(usize, usize)>,
}

/// Pooling regions for every entity of a scene in canonical row order: ego
/// first, then agents by id, then lanes in list order. This is the single
/// source of truth for which cells feed which feature row.
pub fn entity_regions(scene: &Scene) -> Result<Vec<EntityRegion>> {
    let spec = &scene.grid_spec;
    let mut regions = Vec::with_capacity(1 + scene.agents.len() + scene.lanes.len());
    regions.push(EntityRegion {
        kind: RowKind::Ego,
        id: 0,
        cells: region_cells_for_box(spec, &scene.ego.footprint)?,
    });
    let mut order: Vec<usize> = (0..scene.agents.len()).collect();
    order.sort_by_key(|&i| scene.agents[i].id);
    for i in order {
        let agent = &scene.agents[i];
        regions.push(EntityRegion {
            kind: RowKind::Fg,
            id: agent.id,
            cells: region_cells_for_box(spec, &agent.bev_box)?,
        });
    }
    for (li, lane) in scene.lanes.iter().enumerate() {
        regions.push(EntityRegion {
            kind: RowKind::Lane,
            id: li as u64,
            cells: lane_region_cells(scene, lane),
        });
    }
    Ok(regions)
}

/// One feature row per entity: ego first, then agents by id, then lanes in
/// list order. The returned meta records the pairing for contrastive losses.
pub fn agent_bev_features(grid: &BevGrid, scene: &Scene) -> Result<AgentFeatureBatch> {
    agent_bev_features_batch(&[(grid, scene)])
}

/// Multi-scene variant; rows are concatenated in scene order with
/// `meta.scene_index` recording the source scene.
pub fn agent_bev_features_batch(items: &[(&BevGrid, &Scene)]) -> Result<AgentFeatureBatch> {
    if items.is_empty() {
        return Err(Error::Argument("agent_bev_features_batch: empty batch".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut meta = Vec::new();
    for (scene_index, (grid, scene)) in items.iter().enumerate() {
        if grid.spec != scene.grid_spec {
            return Err(Error::Argument(format!(
                "scene {scene_index}: grid spec does not match scene spec"
            )));
        }
        for region in entity_regions(scene)? {
            rows.push(pool_region(grid, &region.cells)?);
            meta.push(RowMeta { scene_index, kind: region.kind, id: region.id });
        }
    }
    Ok(AgentFeatureBatch { features: Matrix::from_rows(&rows)?, meta })
}
