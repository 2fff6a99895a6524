//! Pipeline geometry shared by the world renderer, encoders, token-grid
//! builders and the language model: one struct pins every spatial size so
//! the token budgets of the BEV and per-view pathways stay matched.

use crate::world::{BevRange, CameraRig};

/// Spatial configuration of the desk-scale pipeline.
///
/// Defaults give a 48x48 occupancy raster over +/-19.2 m (0.8 m cells),
/// pooled 2x into a 24x24 token grid (576 BEV tokens, 1.6 m regions), and
/// six 32x48 camera views encoded at stride 4 into 8x12 feature maps
/// (6 x 96 = 576 per-view tokens — the same budget).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    /// Half extent of the BEV grid (m).
    pub half_extent_m: f64,
    /// BEV raster resolution (cells per side).
    pub raster_hw: usize,
    /// Downsampling factor from raster to token grid.
    pub bev_pool: usize,
    /// Rendered view height and width (px).
    pub view_h: usize,
    pub view_w: usize,
    /// Encoder output channels (both pathways).
    pub enc_channels: usize,
    /// Width of one distance bucket in per-view token words (m).
    pub dist_bucket_m: f64,
    /// Number of distance buckets (last one clamps).
    pub dist_buckets: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            half_extent_m: 19.2,
            raster_hw: 48,
            bev_pool: 2,
            view_h: 32,
            view_w: 48,
            enc_channels: 16,
            dist_bucket_m: 2.0,
            dist_buckets: 12,
        }
    }
}

pub const NUM_VIEWS: usize = 6;

impl ModelSpec {
    pub fn bev_range(&self) -> BevRange {
        BevRange::square(self.half_extent_m)
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig::standard(self.view_h, self.view_w)
    }

    /// Raster cell size (m).
    pub fn cell_m(&self) -> f64 {
        2.0 * self.half_extent_m / self.raster_hw as f64
    }

    /// Token-grid side length.
    pub fn bev_grid(&self) -> usize {
        self.raster_hw / self.bev_pool
    }

    /// Token-grid region size (m).
    pub fn region_m(&self) -> f64 {
        self.cell_m() * self.bev_pool as f64
    }

    pub fn bev_tokens(&self) -> usize {
        self.bev_grid() * self.bev_grid()
    }

    /// Per-view encoder feature map height/width (two stride-2 stages).
    pub fn feat_h(&self) -> usize {
        self.view_h / 4
    }

    pub fn feat_w(&self) -> usize {
        self.view_w / 4
    }

    pub fn pv_tokens_per_view(&self) -> usize {
        self.feat_h() * self.feat_w()
    }

    pub fn pv_tokens(&self) -> usize {
        NUM_VIEWS * self.pv_tokens_per_view()
    }

    /// Render pixels per feature cell side.
    pub fn patch_px(&self) -> usize {
        self.view_w / self.feat_w()
    }

    /// Center of token-grid region (i, j) in ego coordinates.
    pub fn region_center(&self, i: usize, j: usize) -> (f64, f64) {
        let g = self.bev_grid() as f64;
        let size = 2.0 * self.half_extent_m / g;
        (
            -self.half_extent_m + (i as f64 + 0.5) * size,
            -self.half_extent_m + (j as f64 + 0.5) * size,
        )
    }

    /// Token-grid region containing a point, if inside the grid.
    pub fn region_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let g = self.bev_grid() as f64;
        let size = 2.0 * self.half_extent_m / g;
        let fi = (x + self.half_extent_m) / size;
        let fj = (y + self.half_extent_m) / size;
        if fi < 0.0 || fj < 0.0 || fi >= g || fj >= g {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    /// Distance bucket of a range (m); the last bucket clamps.
    pub fn dist_bucket(&self, d: f64) -> usize {
        ((d / self.dist_bucket_m) as usize).min(self.dist_buckets - 1)
    }

    /// Bucket-center distance (m); inverse of [`ModelSpec::dist_bucket`]
    /// up to quantization.
    pub fn bucket_center_m(&self, bucket: usize) -> f64 {
        (bucket as f64 + 0.5) * self.dist_bucket_m
    }
}

/// BEV token count for a grid downsampled by `pool`.
pub fn bev_token_count(grid_h: usize, grid_w: usize, pool: usize) -> usize {
    (grid_h / pool) * (grid_w / pool)
}

/// Per-view token count across `views` cameras with `fh x fw` feature maps.
pub fn pv_token_count(views: usize, fh: usize, fw: usize) -> usize {
    views * fh * fw
}
