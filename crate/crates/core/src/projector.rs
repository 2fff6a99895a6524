//! Projector from encoder feature maps to language-model token embeddings.
//!
//! The BEV pathway downsamples the feature map to the token grid with one
//! of five interchangeable reductions (strided conv, depthwise conv,
//! space-to-depth concat, average pool, max pool — the pooling and concat
//! variants add zero reduction parameters), then maps every token through
//! a shared LayerNorm -> Linear -> GELU -> Linear head into the teacher's
//! embedding space. The per-view pathway skips the reduction (its feature
//! grid already matches the token budget) and applies the same head.

use alloc::vec::Vec;

use crate::model::ModelSpec;
use crate::optim::{init_normal, param_rng};
use crate::tensor::{BoundParams, ParamSet, PoolMode, Tape, Tensor};

/// How the BEV feature map is reduced to the token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Reduce {
    /// Strided k=f convolution, `c -> c` channels.
    Conv,
    /// Depthwise strided k=f convolution.
    DwConv,
    /// Space-to-depth: stack each f x f block into channels (`c -> c*f*f`).
    Concat,
    AvgPool,
    MaxPool,
}

impl Reduce {
    pub const ALL: [Reduce; 5] = [
        Reduce::Conv,
        Reduce::DwConv,
        Reduce::Concat,
        Reduce::AvgPool,
        Reduce::MaxPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Reduce::Conv => "conv",
            Reduce::DwConv => "dwconv",
            Reduce::Concat => "concat",
            Reduce::AvgPool => "avgpool",
            Reduce::MaxPool => "maxpool",
        }
    }

    pub fn parse(s: &str) -> Option<Reduce> {
        Reduce::ALL.into_iter().find(|r| r.name() == s)
    }

    /// Channels entering the head for `c` input channels and factor `f`.
    pub fn out_channels(self, c: usize, f: usize) -> usize {
        match self {
            Reduce::Concat => c * f * f,
            _ => c,
        }
    }

    /// Learned parameters used by the reduction itself.
    pub fn reduction_params(self, c: usize, f: usize) -> usize {
        match self {
            Reduce::Conv => c * c * f * f + c,
            Reduce::DwConv => c * f * f + c,
            Reduce::Concat | Reduce::AvgPool | Reduce::MaxPool => 0,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ProjectorConfig {
    pub reduce: Reduce,
    /// Encoder feature channels.
    pub in_channels: usize,
    /// Downsampling factor from feature map to token grid.
    pub pool: usize,
    /// Hidden width of the per-token head.
    pub hidden: usize,
    /// Output dimension (the teacher's embedding width).
    pub out_dim: usize,
}

impl ProjectorConfig {
    pub fn for_spec(spec: &ModelSpec, reduce: Reduce, out_dim: usize) -> ProjectorConfig {
        ProjectorConfig {
            reduce,
            in_channels: spec.enc_channels,
            pool: spec.bev_pool,
            hidden: 96,
            out_dim,
        }
    }

    /// Channels entering the per-token head.
    pub fn head_in(&self) -> usize {
        self.reduce.out_channels(self.in_channels, self.pool)
    }
}

/// Exact parameter count: reduction + LayerNorm + two linear layers.
pub fn projector_param_count(cfg: &ProjectorConfig) -> usize {
    let c = cfg.head_in();
    cfg.reduce.reduction_params(cfg.in_channels, cfg.pool)
        + 2 * c
        + c * cfg.hidden
        + cfg.hidden
        + cfg.hidden * cfg.out_dim
        + cfg.out_dim
}

pub fn init_projector(cfg: &ProjectorConfig, seed: u64) -> ParamSet {
    let mut p = ParamSet::new();
    let (c, f) = (cfg.in_channels, cfg.pool);
    match cfg.reduce {
        Reduce::Conv => {
            let name = "proj.red.w";
            p.insert(name, init_normal(&mut param_rng(seed, name), &[c, c, f, f], c * f * f, c));
            p.insert("proj.red.b", Tensor::zeros(&[1, c]));
        }
        Reduce::DwConv => {
            let name = "proj.red.w";
            p.insert(name, init_normal(&mut param_rng(seed, name), &[c, 1, f, f], f * f, 1));
            p.insert("proj.red.b", Tensor::zeros(&[1, c]));
        }
        Reduce::Concat | Reduce::AvgPool | Reduce::MaxPool => {}
    }
    let ci = cfg.head_in();
    p.insert("proj.ln.g", Tensor::new(&[1, ci], alloc::vec![1.0; ci]));
    p.insert("proj.ln.b", Tensor::zeros(&[1, ci]));
    let w1 = "proj.w1";
    p.insert(w1, init_normal(&mut param_rng(seed, w1), &[ci, cfg.hidden], ci, cfg.hidden));
    p.insert("proj.b1", Tensor::zeros(&[1, cfg.hidden]));
    let w2 = "proj.w2";
    p.insert(
        w2,
        init_normal(&mut param_rng(seed, w2), &[cfg.hidden, cfg.out_dim], cfg.hidden, cfg.out_dim),
    );
    p.insert("proj.b2", Tensor::zeros(&[1, cfg.out_dim]));
    p
}

/// Shared per-token head: LayerNorm -> Linear -> GELU -> Linear over a
/// `[tokens, channels]` matrix.
fn head(tape: &mut Tape, bp: &BoundParams, tokens: &Tensor) -> Tensor {
    let ln = tape.layer_norm(tokens, bp.get("proj.ln.g"), bp.get("proj.ln.b"));
    let h1m = tape.matmul(&ln, bp.get("proj.w1"));
    let h1b = tape.add_row_vector(&h1m, bp.get("proj.b1"));
    let h1 = tape.gelu(&h1b);
    let h2m = tape.matmul(&h1, bp.get("proj.w2"));
    tape.add_row_vector(&h2m, bp.get("proj.b2"))
}

/// Turn a `[c, h, w]` feature map into a `[h*w, c]` token matrix whose row
/// order matches the serialized scene grids (row-major over the map).
fn to_tokens(tape: &mut Tape, feats: &Tensor) -> Tensor {
    let (c, h, w) = feats.dim3();
    let flat = tape.reshape(feats, &[c, h * w]);
    tape.transpose2d(&flat)
}

/// BEV pathway: reduce the feature map to the token grid, then project
/// every token. Output is `[grid*grid, out_dim]` in scene-grid row order.
pub fn project_bev(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ProjectorConfig,
    feats: &Tensor,
) -> Tensor {
    let f = cfg.pool;
    let reduced = match cfg.reduce {
        Reduce::Conv => {
            let conv = tape.conv2d(feats, bp.get("proj.red.w"), f, 0, 1);
            tape.add_channel_bias(&conv, bp.get("proj.red.b"))
        }
        Reduce::DwConv => {
            let conv = tape.conv2d(feats, bp.get("proj.red.w"), f, 0, cfg.in_channels);
            tape.add_channel_bias(&conv, bp.get("proj.red.b"))
        }
        Reduce::Concat => tape.pixel_unshuffle(feats, f),
        Reduce::AvgPool => tape.pool2d(feats, f, PoolMode::Avg),
        Reduce::MaxPool => tape.pool2d(feats, f, PoolMode::Max),
    };
    let tokens = to_tokens(tape, &reduced);
    head(tape, bp, &tokens)
}

/// Per-view pathway: each view's feature map becomes tokens directly (the
/// grid already matches the budget); views concatenate in rig order.
pub fn project_pv(
    tape: &mut Tape,
    bp: &BoundParams,
    cfg: &ProjectorConfig,
    view_feats: &[Tensor],
) -> Tensor {
    assert_eq!(
        cfg.head_in(),
        cfg.in_channels,
        "the per-view pathway applies no reduction; use a non-concat reduce"
    );
    let per_view: Vec<Tensor> = view_feats.iter().map(|v| to_tokens(tape, v)).collect();
    let refs: Vec<&Tensor> = per_view.iter().collect();
    let tokens = tape.concat_rows(&refs);
    head(tape, bp, &tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::collect_grads;

    fn spec() -> ModelSpec {
        ModelSpec::default()
    }

    #[test]
    fn parameter_counts_are_exact_for_every_variant() {
        for reduce in Reduce::ALL {
            let cfg = ProjectorConfig::for_spec(&spec(), reduce, 64);
            let params = init_projector(&cfg, 1);
            assert_eq!(
                params.num_values(),
                projector_param_count(&cfg),
                "variant {}",
                reduce.name()
            );
        }
        // the pooling and concat reductions add zero reduction parameters
        for reduce in [Reduce::Concat, Reduce::AvgPool, Reduce::MaxPool] {
            assert_eq!(reduce.reduction_params(16, 2), 0);
        }
        // spelled-out counts for the default geometry (c=16, f=2)
        assert_eq!(Reduce::Conv.reduction_params(16, 2), 16 * 16 * 4 + 16);
        assert_eq!(Reduce::DwConv.reduction_params(16, 2), 16 * 4 + 16);
        // concat widens the head input instead
        let concat = ProjectorConfig::for_spec(&spec(), Reduce::Concat, 64);
        assert_eq!(concat.head_in(), 64);
    }

    #[test]
    fn zero_features_give_identical_finite_tokens() {
        let s = spec();
        for reduce in Reduce::ALL {
            let cfg = ProjectorConfig::for_spec(&s, reduce, 64);
            let params = init_projector(&cfg, 7);
            let mut tape = Tape::new();
            let bp = tape.bind(&params, false);
            let feats = tape.constant(&Tensor::zeros(&[s.enc_channels, s.raster_hw, s.raster_hw]));
            let out = project_bev(&mut tape, &bp, &cfg, &feats);
            assert_eq!(out.shape, alloc::vec![s.bev_tokens(), 64]);
            let first = &out.data[..64];
            for t in 0..s.bev_tokens() {
                let row = &out.data[t * 64..(t + 1) * 64];
                assert!(row.iter().all(|x| x.is_finite()));
                assert_eq!(row, first, "token {t} differs on zero input ({})", reduce.name());
            }
        }
    }

    #[test]
    fn token_order_matches_scene_grid_layout() {
        // activate one 2x2 raster block and check exactly that token moves
        let s = spec();
        let cfg = ProjectorConfig::for_spec(&s, Reduce::AvgPool, 64);
        let params = init_projector(&cfg, 3);
        let g = s.bev_grid();
        let (ti, tj) = (5, 17);
        let mut data = alloc::vec![0.0; s.enc_channels * s.raster_hw * s.raster_hw];
        for di in 0..s.bev_pool {
            for dj in 0..s.bev_pool {
                let (ri, rj) = (ti * s.bev_pool + di, tj * s.bev_pool + dj);
                data[0 * s.raster_hw * s.raster_hw + ri * s.raster_hw + rj] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let bp = tape.bind(&params, false);
        let feats = tape.constant(&Tensor::new(&[s.enc_channels, s.raster_hw, s.raster_hw], data));
        let out = project_bev(&mut tape, &bp, &cfg, &feats);

        let mut tape0 = Tape::new();
        let bp0 = tape0.bind(&params, false);
        let zeros = tape0.constant(&Tensor::zeros(&[s.enc_channels, s.raster_hw, s.raster_hw]));
        let base = project_bev(&mut tape0, &bp0, &cfg, &zeros);

        for t in 0..s.bev_tokens() {
            let differs = (0..64).any(|k| {
                (out.data[t * 64 + k] - base.data[t * 64 + k]).abs() > 1e-12
            });
            assert_eq!(differs, t == ti * g + tj, "token {t}");
        }
    }

    #[test]
    fn per_view_tokens_concatenate_in_view_order() {
        let s = spec();
        let cfg = ProjectorConfig::for_spec(&s, Reduce::AvgPool, 64);
        let params = init_projector(&cfg, 4);
        let mut rng = SplitMix64::new(11);
        let views: Vec<Tensor> = (0..6)
            .map(|_| {
                crate::tensor::test_support::rand_tensor(
                    &mut rng,
                    &[s.enc_channels, s.feat_h(), s.feat_w()],
                )
            })
            .collect();
        let mut tape = Tape::new();
        let bp = tape.bind(&params, false);
        let consts: Vec<Tensor> = views.iter().map(|v| tape.constant(v)).collect();
        let all = project_pv(&mut tape, &bp, &cfg, &consts);
        assert_eq!(all.shape, alloc::vec![s.pv_tokens(), 64]);
        // projecting view 2 alone must reproduce its block of rows
        let mut tape2 = Tape::new();
        let bp2 = tape2.bind(&params, false);
        let v2 = tape2.constant(&views[2]);
        let solo = project_pv(&mut tape2, &bp2, &cfg, core::slice::from_ref(&v2));
        let per = s.pv_tokens_per_view();
        for r in 0..per {
            for k in 0..64 {
                let a = all.data[(2 * per + r) * 64 + k];
                let b = solo.data[r * 64 + k];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_parameters_receive_gradient() {
        let s = spec();
        for reduce in Reduce::ALL {
            let cfg = ProjectorConfig::for_spec(&s, reduce, 64);
            let params = init_projector(&cfg, 9);
            let mut rng = SplitMix64::new(21);
            let feats = crate::tensor::test_support::rand_tensor(
                &mut rng,
                &[s.enc_channels, s.raster_hw, s.raster_hw],
            );
            let mut tape = Tape::new();
            let bp = tape.bind(&params, true);
            let fc = tape.constant(&feats);
            let out = project_bev(&mut tape, &bp, &cfg, &fc);
            let loss = tape.sum(&out);
            let grads = tape.backward(&loss);
            let named = collect_grads(&grads, &bp);
            for (name, g) in &named {
                let nonzero = g.iter().any(|&x| x != 0.0);
                // max-pool bias gradients can be zero only if a window ties
                // exactly, which random input rules out
                assert!(nonzero, "parameter {name} has all-zero gradient ({})", reduce.name());
            }
        }
    }
}
