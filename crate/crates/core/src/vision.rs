//! Frozen visual pathway and the trainable bridge into the language model.
//!
//! Images are procedural scenes (colored rectangles on an 8×8 grid). A frozen
//! encoder embeds non-overlapping patches and runs one self-attention layer
//! with a relative position bias. A resampler with a fixed number of learned
//! queries cross-attends over the patch tokens, and two affine maps project
//! the result into the language model's embedding width.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::blocks::input_layer_norm;
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::tensor::{SeededRng, Tensor};

pub const RESOLUTIONS: [usize; 2] = [224, 448];
pub const CHANNELS: usize = 3;
/// Scene layout grid side.
pub const SCENE_GRID: usize = 8;

pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("purple", [0.6, 0.1, 0.8]),
    ("orange", [1.0, 0.55, 0.0]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub color: usize,
    /// `[x0, y0, x1, y1)` in scene-grid cells.
    pub cells: [usize; 4],
}

impl SceneObject {
    pub fn color_name(&self) -> &'static str {
        COLORS[self.color].0
    }

    /// Pixel box `(x1, y1, x2, y2)` at the given resolution.
    pub fn pixel_box(&self, res: usize) -> [f64; 4] {
        let cell = res as f64 / SCENE_GRID as f64;
        let [x0, y0, x1, y1] = self.cells;
        [x0 as f64 * cell, y0 as f64 * cell, x1 as f64 * cell, y1 as f64 * cell]
    }

    /// Coarse location of the box center, e.g. "top left".
    pub fn location(&self) -> &'static str {
        let [x0, y0, x1, y1] = self.cells;
        let third = |a: usize, b: usize| ((a + b) * 3) / (2 * SCENE_GRID);
        const NAMES: [[&str; 3]; 3] = [
            ["top left", "top", "top right"],
            ["left", "center", "right"],
            ["bottom left", "bottom", "bottom right"],
        ];
        NAMES[third(y0, y1).min(2)][third(x0, x1).min(2)]
    }
}

/// A procedural scene keyed by seed; resolution-independent until rendered.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub background: [f64; 3],
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn generate(seed: u64) -> Self {
        let mut rng = SeededRng::derived(seed, "scene");
        let shade = 0.05 + 0.1 * rng.below(3) as f64;
        let background = [shade; 3];
        let n_obj = 1 + rng.below(2);
        let mut objects: Vec<SceneObject> = Vec::new();
        let mut attempts = 0;
        while objects.len() < n_obj && attempts < 64 {
            attempts += 1;
            let w = 2 + rng.below(3);
            let h = 2 + rng.below(3);
            let x0 = rng.below(SCENE_GRID - w + 1);
            let y0 = rng.below(SCENE_GRID - h + 1);
            let color = rng.below(COLORS.len());
            let cells = [x0, y0, x0 + w, y0 + h];
            let clash = objects.iter().any(|o| {
                o.color == color
                    || !(cells[2] <= o.cells[0]
                        || o.cells[2] <= cells[0]
                        || cells[3] <= o.cells[1]
                        || o.cells[3] <= cells[1])
            });
            if !clash {
                objects.push(SceneObject { color, cells });
            }
        }
        Scene {
            seed,
            background,
            objects,
        }
    }

    /// `[res, res, 3]` image with values in `[0, 1]`.
    pub fn render(&self, res: usize) -> Tensor {
        let mut data = Vec::with_capacity(res * res * CHANNELS);
        let cell = res as f64 / SCENE_GRID as f64;
        for y in 0..res {
            for x in 0..res {
                let (cx, cy) = ((x as f64 / cell) as usize, (y as f64 / cell) as usize);
                let color = self
                    .objects
                    .iter()
                    .rev()
                    .find(|o| cx >= o.cells[0] && cx < o.cells[2] && cy >= o.cells[1] && cy < o.cells[3])
                    .map_or(self.background, |o| COLORS[o.color].1);
                data.extend_from_slice(&color);
            }
        }
        Tensor::new(vec![res, res, CHANNELS], data).expect("valid image")
    }

    /// Short caption such as "red box top left, blue box bottom".
    pub fn caption(&self) -> String {
        self.objects
            .iter()
            .map(|o| format!("{} box {}", o.color_name(), o.location()))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Deterministic procedural image for `seed`, flattened row-major
/// `[res, res, 3]`.
pub fn synthetic_image(seed: u64, res: usize) -> Tensor {
    Scene::generate(seed).render(res)
}

/// Patch tokens of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub resolution: usize,
    pub patch_size: usize,
    /// `[(res/patch)², d_vis]`.
    pub tokens: Tensor,
}

impl PatchGrid {
    pub fn grid_side(&self) -> usize {
        self.resolution / self.patch_size
    }

    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }
}

/// Learned-position-free bias indexed by the 2-D offset between patches.
#[derive(Clone, Debug, PartialEq)]
pub struct RelPosBias {
    pub grid: usize,
    pub n_heads: usize,
    /// `[n_heads, (2g−1)²]`.
    pub table: Tensor,
    seed: u64,
    std: f64,
}

fn offset_entry(seed: u64, head: usize, dr: isize, dc: isize, std: f64) -> f64 {
    let key = seed
        ^ (head as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (dr as i64 as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
        ^ (dc as i64 as u64).wrapping_mul(0x1656_67b1_9e37_79f9);
    SeededRng::new(key).normal(std)
}

impl RelPosBias {
    /// Table for a `grid × grid` patch layout. Entries depend only on
    /// `(seed, head, Δrow, Δcol)`, so tables for different grid sizes agree on
    /// every offset they share.
    pub fn new(grid: usize, n_heads: usize, seed: u64, std: f64) -> Self {
        let side = 2 * grid - 1;
        let g = grid as isize;
        let mut data = Vec::with_capacity(n_heads * side * side);
        for h in 0..n_heads {
            for r in 0..side as isize {
                for c in 0..side as isize {
                    data.push(offset_entry(seed, h, r - (g - 1), c - (g - 1), std));
                }
            }
        }
        RelPosBias {
            grid,
            n_heads,
            table: Tensor::new(vec![n_heads, side * side], data).expect("valid table"),
            seed,
            std,
        }
    }

    /// Larger (or smaller) table for a new grid side; shared offsets keep
    /// their values.
    pub fn reindexed(&self, grid: usize) -> Self {
        RelPosBias::new(grid, self.n_heads, self.seed, self.std)
    }

    pub fn offset_classes(&self) -> usize {
        (2 * self.grid - 1).pow(2)
    }

    /// Table column for the ordered patch pair `(i, j)` (row-major indices).
    pub fn offset_index(&self, i: usize, j: usize) -> usize {
        let g = self.grid;
        let (ri, ci) = (i / g, i % g);
        let (rj, cj) = (j / g, j % g);
        let dr = ri + g - 1 - rj;
        let dc = ci + g - 1 - cj;
        dr * (2 * g - 1) + dc
    }

    /// `[g², g²]` bias matrix for one head.
    pub fn lookup(&self, head: usize) -> Tensor {
        let n = self.grid * self.grid;
        let row = &self.table.data()[head * self.offset_classes()..(head + 1) * self.offset_classes()];
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(row[self.offset_index(i, j)]);
            }
        }
        Tensor::new(vec![n, n], data).expect("valid bias")
    }

    /// `[n_heads, g², g²]` stacked over heads.
    pub fn lookup_all(&self) -> Tensor {
        let n = self.grid * self.grid;
        let data = (0..self.n_heads).flat_map(|h| self.lookup(h).data().to_vec()).collect();
        Tensor::new(vec![self.n_heads, n, n], data).expect("valid bias")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub d_vis: usize,
    pub d_q: usize,
    pub d_mid: usize,
    pub n_query: usize,
    pub patch_size: usize,
    pub encoder_heads: usize,
    /// Seed of the frozen encoder and of the "pre-trained" first projection.
    pub encoder_seed: u64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            d_vis: 64,
            d_q: 64,
            d_mid: 64,
            n_query: 32,
            patch_size: 16,
            encoder_heads: 4,
            encoder_seed: 0x5eed,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("bridge.d_vis", self.d_vis),
            ("bridge.d_q", self.d_q),
            ("bridge.d_mid", self.d_mid),
            ("bridge.n_query", self.n_query),
            ("bridge.patch_size", self.patch_size),
            ("bridge.encoder_heads", self.encoder_heads),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_vis % self.encoder_heads != 0 {
            return Err(Error::config(
                "bridge.encoder_heads",
                format!("d_vis {} not divisible by {}", self.d_vis, self.encoder_heads),
            ));
        }
        for res in RESOLUTIONS {
            if res % self.patch_size != 0 {
                return Err(Error::config(
                    "bridge.patch_size",
                    format!("resolution {res} is not divisible by patch size {}", self.patch_size),
                ));
            }
        }
        Ok(())
    }
}

/// Stand-in visual backbone. Never trained; its weights are plain tensors,
/// not store parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenEncoder {
    pub patch_size: usize,
    pub d_vis: usize,
    pub n_heads: usize,
    /// `[d_vis, patch²·3]`.
    pub patch_embed: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub bias_seed: u64,
}

impl FrozenEncoder {
    pub fn new(cfg: &BridgeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::derived(cfg.encoder_seed, "frozen-encoder");
        let patch_dim = cfg.patch_size * cfg.patch_size * CHANNELS;
        let d = cfg.d_vis;
        let std = 1.0 / (d as f64).sqrt();
        Ok(FrozenEncoder {
            patch_size: cfg.patch_size,
            d_vis: d,
            n_heads: cfg.encoder_heads,
            patch_embed: Tensor::randn(vec![d, patch_dim], 1.0 / (patch_dim as f64).sqrt(), &mut rng),
            w_q: Tensor::randn(vec![d, d], std, &mut rng),
            w_k: Tensor::randn(vec![d, d], std, &mut rng),
            w_v: Tensor::randn(vec![d, d], std, &mut rng),
            w_o: Tensor::randn(vec![d, d], std, &mut rng),
            ln_gamma: Tensor::ones(vec![d]),
            ln_beta: Tensor::zeros(vec![d]),
            bias_seed: rng.next_u64(),
        })
    }

    pub fn rel_pos_bias(&self, grid: usize) -> RelPosBias {
        RelPosBias::new(grid, self.n_heads, self.bias_seed, 0.5)
    }

    fn check_image(&self, image: &Tensor) -> Result<usize> {
        let s = image.shape();
        if s.len() != 3 || s[0] != s[1] || s[2] != CHANNELS {
            return Err(Error::invalid(format!("image must be [res, res, 3], got {s:?}")));
        }
        let res = s[0];
        if !RESOLUTIONS.contains(&res) {
            return Err(Error::invalid(format!("resolution {res} must be one of {RESOLUTIONS:?}")));
        }
        if res % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "resolution {res} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok(res)
    }

    /// Non-overlapping patches, flattened row-major and linearly embedded.
    pub fn patchify(&self, image: &Tensor) -> Result<PatchGrid> {
        let res = self.check_image(image)?;
        let p = self.patch_size;
        let g = res / p;
        let patch_dim = p * p * CHANNELS;
        let px = image.data();
        let mut flat = Vec::with_capacity(g * g * patch_dim);
        for gr in 0..g {
            for gc in 0..g {
                for y in 0..p {
                    let start = ((gr * p + y) * res + gc * p) * CHANNELS;
                    flat.extend_from_slice(&px[start..start + p * CHANNELS]);
                }
            }
        }
        let mut tape = Tape::new();
        let patches = tape.constant(&Tensor::new(vec![g * g, patch_dim], flat)?);
        let w = tape.constant(&self.patch_embed);
        let tokens = tape.matmul_nt(patches, w)?;
        Ok(PatchGrid {
            resolution: res,
            patch_size: p,
            tokens: tape.to_tensor(tokens),
        })
    }

    /// Patch embedding followed by one pre-norm self-attention layer whose
    /// logits carry the relative position bias for this resolution's grid.
    pub fn encode(&self, image: &Tensor) -> Result<PatchGrid> {
        let grid = self.patchify(image)?;
        let g = grid.grid_side();
        let n = g * g;
        let (h, dk) = (self.n_heads, self.d_vis / self.n_heads);
        let mut tape = Tape::new();
        let x = tape.constant(&grid.tokens);
        let gamma = tape.constant(&self.ln_gamma);
        let beta = tape.constant(&self.ln_beta);
        let normed = input_layer_norm(&mut tape, x, gamma, beta, 1e-6)?;
        let heads = |tape: &mut Tape, w: &Tensor| -> Result<Var> {
            let wv = tape.constant(w);
            let y = tape.matmul_nt(normed, wv)?;
            let y = tape.reshape(y, &[n, h, dk])?;
            tape.swap_axes01(y)
        };
        let q = heads(&mut tape, &self.w_q)?;
        let k = heads(&mut tape, &self.w_k)?;
        let v = heads(&mut tape, &self.w_v)?;
        let logits = tape.matmul_nt(q, k)?;
        let logits = tape.scale(logits, 1.0 / (dk as f64).sqrt());
        let bias = tape.constant(&self.rel_pos_bias(g).lookup_all());
        let logits = tape.add(logits, bias)?;
        let probs = tape.softmax(logits);
        let out = tape.matmul(probs, v)?;
        let out = tape.swap_axes01(out)?;
        let out = tape.reshape(out, &[n, self.d_vis])?;
        let wo = tape.constant(&self.w_o);
        let out = tape.matmul_nt(out, wo)?;
        let out = tape.add(x, out)?;
        Ok(PatchGrid {
            tokens: tape.to_tensor(out),
            ..grid
        })
    }
}

/// Resampler and the two linear projections. Every parameter is in the
/// `projection_stack` group.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionStack {
    pub queries: ParamId,
    pub rs_wq: ParamId,
    pub rs_wk: ParamId,
    pub rs_wv: ParamId,
    pub l1_w: ParamId,
    pub l1_b: ParamId,
    pub l2_w: ParamId,
    pub l2_b: ParamId,
    pub n_query: usize,
    pub d_vis: usize,
    pub d_q: usize,
    pub d_mid: usize,
    pub d_lm: usize,
}

impl ProjectionStack {
    /// Resampler weights and the second projection are Gaussian with
    /// `init_std` from `rng`. The first projection stands in for a loaded
    /// layer: it is drawn from a fixed stream keyed by the encoder seed.
    pub fn init(
        store: &mut ParamStore,
        cfg: &BridgeConfig,
        d_lm: usize,
        init_std: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::ProjectionStack;
        let (nq, dv, dq, dm) = (cfg.n_query, cfg.d_vis, cfg.d_q, cfg.d_mid);
        let queries = store.add("bridge.queries", g, Tensor::randn(vec![nq, dq], 1.0, rng));
        let rs_wq = store.add("bridge.resampler.wq", g, Tensor::randn(vec![dq, dq], init_std, rng));
        let rs_wk = store.add("bridge.resampler.wk", g, Tensor::randn(vec![dq, dv], init_std, rng));
        let rs_wv = store.add(
            "bridge.resampler.wv",
            g,
            Tensor::randn(vec![dq, dv], 1.0 / (dv as f64).sqrt(), rng),
        );
        let mut pre = SeededRng::derived(cfg.encoder_seed, "pretrained-linear1");
        let l1_w = store.add(
            "bridge.linear1.weight",
            g,
            Tensor::randn(vec![dm, dq], 1.0 / (dq as f64).sqrt(), &mut pre),
        );
        let l1_b = store.add("bridge.linear1.bias", g, Tensor::zeros(vec![dm]));
        let l2_w = store.add("bridge.linear2.weight", g, Tensor::randn(vec![d_lm, dm], init_std, rng));
        let l2_b = store.add("bridge.linear2.bias", g, Tensor::zeros(vec![d_lm]));
        Ok(ProjectionStack {
            queries,
            rs_wq,
            rs_wk,
            rs_wv,
            l1_w,
            l1_b,
            l2_w,
            l2_b,
            n_query: nq,
            d_vis: dv,
            d_q: dq,
            d_mid: dm,
            d_lm,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 8] {
        [
            self.queries,
            self.rs_wq,
            self.rs_wk,
            self.rs_wv,
            self.l1_w,
            self.l1_b,
            self.l2_w,
            self.l2_b,
        ]
    }
}

/// Learned queries cross-attend over `[n_tokens, d_vis]` patch tokens,
/// giving `[n_query, d_q]` regardless of how many tokens there are.
pub fn resample(tape: &mut Tape, bind: &Bindings, tokens: Var, stack: &ProjectionStack) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    if shape.len() != 2 || shape[1] != stack.d_vis {
        return Err(Error::ShapeMismatch {
            op: "resample",
            lhs: shape,
            rhs: vec![0, stack.d_vis],
        });
    }
    let q = tape.matmul_nt(bind[stack.queries], bind[stack.rs_wq])?;
    let k = tape.matmul_nt(tokens, bind[stack.rs_wk])?;
    let v = tape.matmul_nt(tokens, bind[stack.rs_wv])?;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (stack.d_q as f64).sqrt());
    let probs = tape.softmax(logits);
    tape.matmul(probs, v)
}

/// `linear2(linear1(q_out))`, two affine maps with nothing in between.
pub fn project_to_lm(tape: &mut Tape, bind: &Bindings, q_out: Var, stack: &ProjectionStack) -> Result<Var> {
    let shape = tape.shape(q_out).to_vec();
    if shape.len() != 2 || shape[1] != stack.d_q {
        return Err(Error::ShapeMismatch {
            op: "project_to_lm",
            lhs: shape,
            rhs: vec![stack.n_query, stack.d_q],
        });
    }
    let mid = tape.matmul_nt(q_out, bind[stack.l1_w])?;
    let mid = tape.add(mid, bind[stack.l1_b])?;
    let out = tape.matmul_nt(mid, bind[stack.l2_w])?;
    tape.add(out, bind[stack.l2_b])
}

/// Replaces rows `span` of `text: [T, d]` with `image: [n, d]`.
pub fn splice(tape: &mut Tape, text: Var, image: Var, span: Range<usize>) -> Result<Var> {
    let ts = tape.shape(text).to_vec();
    let is = tape.shape(image).to_vec();
    if ts.len() != 2 || is.len() != 2 || ts[1] != is[1] {
        return Err(Error::ShapeMismatch {
            op: "splice",
            lhs: ts,
            rhs: is,
        });
    }
    let t = ts[0];
    if span.start > span.end || span.end > t || span.start >= t {
        return Err(Error::invalid(format!(
            "placeholder span {}..{} out of bounds for {t} text rows",
            span.start, span.end
        )));
    }
    let mut parts = Vec::with_capacity(3);
    if span.start > 0 {
        parts.push(tape.slice_rows(text, 0, span.start)?);
    }
    parts.push(image);
    if span.end < t {
        parts.push(tape.slice_rows(text, span.end, t - span.end)?);
    }
    tape.concat_rows(&parts)
}
