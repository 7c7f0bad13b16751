//! Differentiable building blocks. Every function here records onto the
//! tape owned by a [`Graph`]; the value-level API in the parent module wraps
//! these for inference.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ops::Range;

use super::config::{ModelConfig, PoolingMode};
use super::params::ParamStore;
use crate::autograd::{Gradients, Matrix, Tape, Var};

/// A tape plus lazily bound parameter leaves.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Leaf for a named parameter, created on first use.
    pub fn param(&self, name: &str) -> Var {
        if let Some(&v) = self.bound.borrow().get(name) {
            return v;
        }
        let value = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not in the store"))
            .clone();
        let v = self.tape.leaf(value);
        self.bound.borrow_mut().insert(name.to_owned(), v);
        v
    }

    pub fn constant(&self, value: Matrix) -> Var {
        self.tape.leaf(value)
    }

    pub fn value(&self, v: Var) -> Matrix {
        self.tape.value(v).clone()
    }

    /// Gradients of every parameter touched by the forward pass. Parameters
    /// the output does not depend on get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(self.tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn linear(&self, x: Var, prefix: &str) -> Var {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        let xw = self.tape.matmul(x, w);
        self.tape.add_row(xw, b)
    }

    pub fn norm(&self, x: Var, prefix: &str) -> Var {
        let g = self.param(&format!("{prefix}.g"));
        let b = self.param(&format!("{prefix}.b"));
        let n = self.tape.layer_norm(x);
        let scaled = self.tape.mul_row(n, g);
        self.tape.add_row(scaled, b)
    }
}

/// Multi-head attention `MHA(x, ctx, ctx)` with pre-normalized inputs. Returns
/// the attention output only; callers add the residual. `ctx = None` is
/// self-attention.
pub fn attention(g: &Graph, prefix: &str, x: Var, ctx: Option<Var>, heads: usize) -> Var {
    let t = &g.tape;
    let xq = g.norm(x, &format!("{prefix}.norm_q"));
    let kv = match ctx {
        Some(c) => g.norm(c, &format!("{prefix}.norm_kv")),
        None => xq,
    };
    let q = g.linear(xq, &format!("{prefix}.q"));
    let k = g.linear(kv, &format!("{prefix}.k"));
    let v = g.linear(kv, &format!("{prefix}.v"));

    let d = t.shape(q).1;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let cols = h * dh..(h + 1) * dh;
            let qh = t.slice_cols(q, cols.start, cols.end);
            let kh = t.slice_cols(k, cols.start, cols.end);
            let vh = t.slice_cols(v, cols.start, cols.end);
            let kt = t.transpose(kh);
            let scores = t.matmul(qh, kt);
            let scores = t.scale(scores, scale);
            let weights = t.softmax_rows(scores);
            t.matmul(weights, vh)
        })
        .collect();
    let merged = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
    g.linear(merged, &format!("{prefix}.o"))
}

/// Feed-forward block with its residual: `x + W2 gelu(W1 norm(x))`.
pub fn feed_forward(g: &Graph, prefix: &str, x: Var) -> Var {
    let n = g.norm(x, &format!("{prefix}.norm"));
    let h = g.linear(n, &format!("{prefix}.fc1"));
    let h = g.tape.gelu(h);
    let out = g.linear(h, &format!("{prefix}.fc2"));
    g.tape.add(x, out)
}

/// Self-attention followed by a feed-forward block, both residual.
pub fn encoder_block(g: &Graph, prefix: &str, x: Var, heads: usize) -> Var {
    let a = attention(g, &format!("{prefix}.attn"), x, None, heads);
    let x = g.tape.add(x, a);
    feed_forward(g, &format!("{prefix}.ffn"), x)
}

/// Per-frame projection plus optional neighbour mixing.
pub fn encode_video(g: &Graph, cfg: &ModelConfig, features: Var) -> Var {
    let t = &g.tape;
    let h = g.linear(features, "video_in");
    if !cfg.video_temporal_mixing {
        return h;
    }
    let prev = t.shift_rows(h, 1);
    let next = t.shift_rows(h, -1);
    let wp = g.param("video_mix.prev");
    let wn = g.param("video_mix.next");
    let mp = t.matmul(prev, wp);
    let mn = t.matmul(next, wn);
    let mixed = t.add(mp, mn);
    t.add(h, mixed)
}

/// Token plus position embeddings.
pub fn encode_text(g: &Graph, token_ids: &[usize], positions: &[usize]) -> Var {
    let t = &g.tape;
    let tok = t.gather_rows(g.param("text.token_emb"), token_ids);
    let pos = t.gather_rows(g.param("text.pos_emb"), positions);
    t.add(tok, pos)
}

/// One cross-modality fusion layer per configured depth:
///
/// ```text
/// v' = MHA(v, v, v) + v               p' = MHA(p, p, p) + p
/// v'' = FFN(MHA(v', p', p') + v')     p'' = FFN(MHA(p', v', v') + p')
/// ```
pub fn cmfe(g: &Graph, cfg: &ModelConfig, video: Var, text: Var) -> (Var, Var) {
    if !cfg.cmfe_enabled {
        return (video, text);
    }
    let t = &g.tape;
    let heads = cfg.num_heads;
    let (mut v, mut p) = (video, text);
    for l in 0..cfg.cmfe_layers {
        let sv = attention(g, &format!("cmfe.{l}.video_self"), v, None, heads);
        let v_self = t.add(v, sv);
        let sp = attention(g, &format!("cmfe.{l}.text_self"), p, None, heads);
        let p_self = t.add(p, sp);

        let cv = attention(g, &format!("cmfe.{l}.t2v"), v_self, Some(p_self), heads);
        let cp = attention(g, &format!("cmfe.{l}.v2t"), p_self, Some(v_self), heads);
        let v_cross = t.add(v_self, cv);
        let p_cross = t.add(p_self, cp);
        v = feed_forward(g, &format!("cmfe.{l}.video_ffn"), v_cross);
        p = feed_forward(g, &format!("cmfe.{l}.text_ffn"), p_cross);
    }
    (v, p)
}

/// Pyramid levels stacked in order `0..fpn_levels`; level `l` has
/// `ceil(T / 2^l)` rows.
pub fn fpn(g: &Graph, cfg: &ModelConfig, video: Var) -> Var {
    let mut levels = Vec::with_capacity(cfg.fpn_levels);
    let mut x = video;
    for l in 0..cfg.fpn_levels {
        if l > 0 {
            x = g.tape.pair_mean_rows(x);
        }
        x = encoder_block(g, &format!("fpn.{l}"), x, cfg.num_heads);
        levels.push(x);
    }
    if levels.len() == 1 {
        levels[0]
    } else {
        g.tape.concat_rows(&levels)
    }
}

/// Query-wise split followed by pooling of each span to one row.
///
/// Weighted pools are computed as `r0 + sum_i w_i (r_i - r0)` around the
/// span's first row, so a span of identical rows pools to that row exactly
/// whatever its length.
pub fn qwp(g: &Graph, cfg: &ModelConfig, text: Var, spans: &[Range<usize>]) -> Var {
    let t = &g.tape;
    let pooled: Vec<Var> = spans
        .iter()
        .map(|span| {
            let rows = t.slice_rows(text, span.start, span.end);
            let anchor = t.slice_rows(rows, 0, 1);
            let centered = t.add_row(rows, t.scale(anchor, -1.0));
            match cfg.pooling {
                PoolingMode::Average => t.add(anchor, t.mean_rows(centered)),
                PoolingMode::Max => t.max_rows(rows),
                PoolingMode::Attentive => {
                    let a = g.param("qwp.attn_query");
                    let rt = t.transpose(rows);
                    let scores = t.matmul(a, rt);
                    let scores = t.scale(scores, 1.0 / (cfg.d_model as f64).sqrt());
                    let w = t.softmax_rows(scores);
                    t.add(anchor, t.matmul(w, centered))
                }
            }
        })
        .collect();
    if pooled.len() == 1 {
        pooled[0]
    } else {
        t.concat_rows(&pooled)
    }
}

/// Text-guided fusion decoder:
///
/// ```text
/// v' = MHA(v, q, q) + v
/// v'' = FFN(MHA(v', v', v') + v')
/// ```
pub fn tgfd(g: &Graph, cfg: &ModelConfig, video: Var, queries: Var) -> Var {
    if !cfg.tgfd_enabled {
        return video;
    }
    let t = &g.tape;
    let mut v = video;
    for l in 0..cfg.tgfd_layers {
        let c = attention(g, &format!("tgfd.{l}.cross"), v, Some(queries), cfg.num_heads);
        let v_tga = t.add(v, c);
        let s = attention(g, &format!("tgfd.{l}.self"), v_tga, None, cfg.num_heads);
        let v_self = t.add(v_tga, s);
        v = feed_forward(g, &format!("tgfd.{l}.ffn"), v_self);
    }
    v
}

/// Contrastive classification logits (`rows x queries`) and nonnegative
/// stride-normalized regression distances (`rows x 2`).
pub fn heads(g: &Graph, cfg: &ModelConfig, video: Var, queries: Var) -> (Var, Var) {
    let t = &g.tape;
    let v = g.norm(video, "head.video_norm");
    let q = g.norm(queries, "head.query_norm");

    let proj = g.linear(v, "head.cls_proj");
    let qt = t.transpose(q);
    let dots = t.matmul(proj, qt);
    let dots = t.scale(dots, 1.0 / (cfg.d_model as f64).sqrt());
    let (rows, cols) = t.shape(dots);
    let ones_col = g.constant(Matrix::ones((rows, 1)));
    let ones_row = g.constant(Matrix::ones((1, cols)));
    let bias_col = t.matmul(ones_col, g.param("head.cls_bias"));
    let bias = t.matmul(bias_col, ones_row);
    let logits = t.add(dots, bias);

    let h = g.linear(v, "head.reg_fc1");
    let h = t.gelu(h);
    let r = g.linear(h, "head.reg_fc2");
    let regressions = t.softplus(r);
    (logits, regressions)
}
